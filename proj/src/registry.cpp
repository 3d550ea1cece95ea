#include "loraserve/registry.hpp"

#include <cstdio>

#include "binary_io.hpp"
#include "json.hpp"
#include "loraserve/errors.hpp"

namespace loraserve {

using ordered_json = nlohmann::ordered_json;

void validate_adapter(const LoraAdapter& adapter, const PoolDims& dims) {
    const std::string who = "adapter '" + adapter.id + "': ";
    if (adapter.id.empty()) throw ValidationError("adapter id must be non-empty");
    if (adapter.rank == 0) throw ValidationError(who + "rank must be >= 1");
    if (!(adapter.alpha > 0.0)) throw ValidationError(who + "alpha must be > 0");
    if (adapter.samples.empty()) throw ValidationError(who + "needs at least one representative sample");
    if (adapter.layers.size() != dims.num_layers) {
        throw ValidationError(who + "has " + std::to_string(adapter.layers.size()) + " layers, pool expects " +
                              std::to_string(dims.num_layers));
    }
    const Shape a_shape{adapter.rank, dims.width};
    const Shape b_shape{dims.width, adapter.rank};
    for (std::size_t i = 0; i < adapter.layers.size(); ++i) {
        const auto& layer = adapter.layers[i];
        if (layer.a.shape() != a_shape || layer.b.shape() != b_shape) {
            throw ValidationError(who + "layer " + std::to_string(i) + " has A " + shape_string(layer.a.shape()) +
                                  " and B " + shape_string(layer.b.shape()) + ", expected " +
                                  shape_string(a_shape) + " and " + shape_string(b_shape));
        }
    }
}

RegistrySnapshot::RegistrySnapshot(std::uint64_t version, PoolDims dims,
                                   std::vector<std::shared_ptr<const LoraAdapter>> adapters)
    : version_(version), dims_(dims), adapters_(std::move(adapters)) {
    index_.reserve(adapters_.size());
    for (std::size_t i = 0; i < adapters_.size(); ++i) index_.emplace(adapters_[i]->id, i);
}

const LoraAdapter* RegistrySnapshot::find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : adapters_[it->second].get();
}

const LoraAdapter& RegistrySnapshot::get(const std::string& id) const {
    if (const auto* a = find(id)) return *a;
    throw NotFoundError("no adapter with id '" + id + "'");
}

std::vector<std::string> RegistrySnapshot::ids() const {
    std::vector<std::string> out;
    out.reserve(adapters_.size());
    for (const auto& a : adapters_) out.push_back(a->id);
    return out;
}

std::uint64_t RegistrySnapshot::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
        h ^= v;
        h *= 1099511628211ULL;
    };
    auto mix_str = [&](const std::string& s) {
        mix(s.size());
        for (char c : s) mix(static_cast<unsigned char>(c));
    };
    for (const auto& a : adapters_) {
        mix_str(a->id);
        mix_str(a->task_tag);
        mix(a->rank);
        mix(std::bit_cast<std::uint64_t>(a->alpha));
        for (const auto& s : a->samples) mix_str(s);
        for (const auto& layer : a->layers) {
            mix(loraserve::checksum(layer.a));
            mix(loraserve::checksum(layer.b));
        }
    }
    return h;
}

Registry::Registry(PoolDims dims)
    : dims_(dims), current_(std::make_shared<RegistrySnapshot>(0, dims, std::vector<std::shared_ptr<const LoraAdapter>>{})) {
    if (dims.width == 0 || dims.num_layers == 0) throw ValidationError("pool dims must be positive");
}

Registry::Registry(const RegistrySnapshot& snapshot)
    : dims_(snapshot.dims()), current_(std::make_shared<RegistrySnapshot>(snapshot)) {}

std::uint64_t Registry::register_adapter(LoraAdapter adapter) {
    validate_adapter(adapter, dims_);
    auto shared = std::make_shared<const LoraAdapter>(std::move(adapter));
    std::unique_lock lock(mutex_);
    if (current_->contains(shared->id)) throw ConflictError("adapter id '" + shared->id + "' already registered");
    auto adapters = current_->adapters();
    adapters.push_back(std::move(shared));
    const auto next = current_->version() + 1;
    current_ = std::make_shared<RegistrySnapshot>(next, dims_, std::move(adapters));
    return next;
}

std::uint64_t Registry::remove(const std::string& id) {
    std::unique_lock lock(mutex_);
    if (!current_->contains(id)) throw NotFoundError("no adapter with id '" + id + "'");
    std::vector<std::shared_ptr<const LoraAdapter>> adapters;
    adapters.reserve(current_->size() - 1);
    for (const auto& a : current_->adapters())
        if (a->id != id) adapters.push_back(a);
    const auto next = current_->version() + 1;
    current_ = std::make_shared<RegistrySnapshot>(next, dims_, std::move(adapters));
    return next;
}

SnapshotPtr Registry::snapshot() const {
    std::shared_lock lock(mutex_);
    return current_;
}

LoraAdapter Registry::get(const std::string& id) const { return snapshot()->get(id); }
std::vector<std::string> Registry::list() const { return snapshot()->ids(); }
std::size_t Registry::size() const { return snapshot()->size(); }
std::uint64_t Registry::version() const { return snapshot()->version(); }

// ---------------------------------------------------------------------------
// On-disk format

namespace {

constexpr const char* kFormatName = "loraserve-registry";
constexpr int kFormatVersion = 1;

std::string tensor_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "adapter_%05zu.bin", index);
    return buf;
}

}  // namespace

void save_registry(const RegistrySnapshot& snapshot, const std::filesystem::path& dir,
                   const RegistryMetadata& metadata) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    ordered_json manifest;
    manifest["format"] = kFormatName;
    manifest["format_version"] = kFormatVersion;
    manifest["version"] = snapshot.version();
    manifest["width"] = snapshot.dims().width;
    manifest["num_layers"] = snapshot.dims().num_layers;
    if (metadata.backbone_seed) manifest["backbone_seed"] = *metadata.backbone_seed;
    manifest["adapters"] = ordered_json::array();

    for (std::size_t i = 0; i < snapshot.size(); ++i) {
        const auto& a = *snapshot.adapters()[i];
        ordered_json entry;
        entry["id"] = a.id;
        entry["task_tag"] = a.task_tag;
        entry["rank"] = a.rank;
        entry["alpha"] = a.alpha;
        entry["tensor_file"] = tensor_file_name(i);
        ordered_json shapes = ordered_json::array();
        std::vector<double> payload;
        for (const auto& layer : a.layers) {
            shapes.push_back({{"a", layer.a.shape()}, {"b", layer.b.shape()}});
            payload.insert(payload.end(), layer.a.data().begin(), layer.a.data().end());
            payload.insert(payload.end(), layer.b.data().begin(), layer.b.data().end());
        }
        entry["layer_shapes"] = std::move(shapes);
        entry["samples"] = a.samples;
        manifest["adapters"].push_back(std::move(entry));
        detail::write_f64_le(dir / tensor_file_name(i), payload);
    }
    detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedRegistry load_registry(const std::filesystem::path& dir) {
    const std::string text = detail::read_text(dir / "manifest.json");
    ordered_json manifest;
    try {
        manifest = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("manifest.json: " + std::string(e.what()), e.byte);
    }

    auto schema_error = [](const std::string& what) { return ParseError("manifest.json: " + what, 0); };
    try {
        if (manifest.value("format", std::string{}) != kFormatName) throw schema_error("not a registry manifest");
        if (manifest.at("format_version").get<int>() != kFormatVersion) throw schema_error("unsupported format_version");

        PoolDims dims{manifest.at("width").get<std::size_t>(), manifest.at("num_layers").get<std::size_t>()};
        const auto version = manifest.at("version").get<std::uint64_t>();
        RegistryMetadata metadata;
        if (manifest.contains("backbone_seed")) metadata.backbone_seed = manifest["backbone_seed"].get<std::uint64_t>();

        std::vector<std::shared_ptr<const LoraAdapter>> adapters;
        std::unordered_map<std::string, bool> seen;
        for (const auto& entry : manifest.at("adapters")) {
            LoraAdapter a;
            a.id = entry.at("id").get<std::string>();
            a.task_tag = entry.at("task_tag").get<std::string>();
            a.rank = entry.at("rank").get<std::size_t>();
            a.alpha = entry.at("alpha").get<double>();
            a.samples = entry.at("samples").get<std::vector<std::string>>();
            if (seen.count(a.id)) throw schema_error("duplicate adapter id '" + a.id + "'");
            seen[a.id] = true;

            std::vector<std::pair<Shape, Shape>> shapes;
            std::size_t total = 0;
            for (const auto& s : entry.at("layer_shapes")) {
                Shape as = s.at("a").get<Shape>();
                Shape bs = s.at("b").get<Shape>();
                total += shape_product(as) + shape_product(bs);
                shapes.emplace_back(std::move(as), std::move(bs));
            }
            const auto payload = detail::read_f64_le(dir / entry.at("tensor_file").get<std::string>(), total);
            std::size_t offset = 0;
            for (auto& [as, bs] : shapes) {
                const auto na = shape_product(as), nb = shape_product(bs);
                LoraLayer layer{
                    DenseTensor(as, std::vector<double>(payload.begin() + offset, payload.begin() + offset + na)),
                    DenseTensor(bs, std::vector<double>(payload.begin() + offset + na,
                                                        payload.begin() + offset + na + nb))};
                offset += na + nb;
                a.layers.push_back(std::move(layer));
            }
            try {
                validate_adapter(a, dims);
            } catch (const ValidationError& e) {
                throw schema_error(e.what());
            }
            adapters.push_back(std::make_shared<const LoraAdapter>(std::move(a)));
        }
        return {std::make_shared<const RegistrySnapshot>(version, dims, std::move(adapters)), metadata};
    } catch (const nlohmann::json::exception& e) {
        throw schema_error(e.what());
    } catch (const DimensionError& e) {
        throw schema_error(e.what());
    }
}

}  // namespace loraserve
