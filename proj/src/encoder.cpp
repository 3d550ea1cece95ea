#include "loraserve/encoder.hpp"

#include <cctype>
#include <cmath>
#include <random>

#include "binary_io.hpp"
#include "json.hpp"
#include "loraserve/errors.hpp"

namespace loraserve {

double EmbeddingVector::norm() const noexcept {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

namespace {

// Gaussian matrix with Gram-Schmidt applied along the shorter side, so the
// projection neither squashes nor stretches any direction it keeps.
DenseTensor semi_orthogonal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    const bool tall = rows >= cols;
    const std::size_t n = tall ? cols : rows;  // vectors to orthonormalise
    const std::size_t len = tall ? rows : cols;
    auto g = DenseTensor::random_normal({n, len}, rng, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto v = g.row(i);
        for (std::size_t j = 0; j < i; ++j) {
            auto u = g.row(j);
            double d = 0.0;
            for (std::size_t t = 0; t < len; ++t) d += u[t] * v[t];
            for (std::size_t t = 0; t < len; ++t) v[t] -= d * u[t];
        }
        double nrm = 0.0;
        for (double x : v) nrm += x * x;
        nrm = std::sqrt(nrm);
        for (auto& x : v) x /= nrm;
    }
    return tall ? transpose(g) : g;
}

}  // namespace

Encoder Encoder::from_parameters(std::vector<std::string> vocabulary, DenseTensor token_table, DenseTensor projection,
                                 std::uint64_t seed) {
    if (vocabulary.empty() || vocabulary.front() != kUnknownToken) {
        throw ValidationError("encoder vocabulary must start with the unknown token");
    }
    if (token_table.rank() != 2 || token_table.extent(0) != vocabulary.size()) {
        throw DimensionError("token table must be [V, h] with V = vocabulary size");
    }
    if (projection.rank() != 2 || projection.extent(0) != token_table.extent(1)) {
        throw DimensionError("projection must be [h, e]");
    }
    Encoder enc;
    enc.vocab_ = std::move(vocabulary);
    for (std::size_t i = 0; i < enc.vocab_.size(); ++i) {
        if (!enc.lookup_.emplace(enc.vocab_[i], i).second) {
            throw ValidationError("duplicate vocabulary entry '" + enc.vocab_[i] + "'");
        }
    }
    enc.token_table_ = std::move(token_table);
    enc.projection_ = std::move(projection);
    enc.seed_ = seed;
    return enc;
}

Encoder Encoder::create(std::vector<std::string> vocabulary, std::size_t hidden, std::size_t embed,
                        std::uint64_t seed) {
    std::vector<std::string> vocab{std::string(kUnknownToken)};
    std::unordered_map<std::string, bool> seen{{vocab.front(), true}};
    for (auto& w : vocabulary) {
        if (seen.emplace(w, true).second) vocab.push_back(std::move(w));
    }
    std::mt19937_64 rng(seed);
    auto table = DenseTensor::random_normal({vocab.size(), hidden}, rng, 1.0);
    auto proj = semi_orthogonal(hidden, embed, rng);
    return from_parameters(std::move(vocab), std::move(table), std::move(proj), seed);
}

std::size_t Encoder::token_id(std::string_view word) const {
    auto it = lookup_.find(std::string(word));
    return it == lookup_.end() ? 0 : it->second;
}

std::vector<std::size_t> Encoder::encode(std::string_view instruction, std::string_view text) const {
    const auto text_tokens = tokenize(text);
    if (text_tokens.empty()) throw EmptyInputError("text has no tokens after tokenization");
    std::vector<std::size_t> ids;
    for (const auto& t : tokenize(instruction)) ids.push_back(token_id(t));
    for (const auto& t : text_tokens) ids.push_back(token_id(t));
    return ids;
}

std::vector<double> Encoder::pooled(std::span<const std::size_t> ids) const {
    const std::size_t h = hidden();
    std::vector<double> pool(h, 0.0);
    for (auto id : ids) {
        auto row = token_table_.row(id);
        for (std::size_t j = 0; j < h; ++j) pool[j] += row[j];
    }
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (auto& v : pool) v *= inv;
    return pool;
}

EmbeddingVector Encoder::embed_ids(std::span<const std::size_t> ids) const {
    if (ids.empty()) throw EmptyInputError("cannot embed an empty token stream");
    const auto pool = pooled(ids);
    const std::size_t h = hidden(), e = embed_dim();
    EmbeddingVector out{std::vector<double>(e, 0.0)};
    for (std::size_t i = 0; i < h; ++i) {
        const double pv = pool[i];
        const double* prow = &projection_.at(i, 0);
        for (std::size_t j = 0; j < e; ++j) out.values[j] += pv * prow[j];
    }
    const double n = out.norm();
    if (n == 0.0) throw RuntimeFailure("embedding has zero norm before normalisation");
    for (auto& v : out.values) v /= n;
    return out;
}

EmbeddingVector Encoder::embed_text(std::string_view instruction, std::string_view text) const {
    return embed_ids(encode(instruction, text));
}

EncoderGradient Encoder::zero_gradient() const {
    return {DenseTensor(token_table_.shape()), DenseTensor(projection_.shape())};
}

void Encoder::backward(std::span<const std::size_t> ids, const EmbeddingVector& output,
                       std::span<const double> grad_output, EncoderGradient& grad) const {
    const std::size_t h = hidden(), e = embed_dim();
    const auto pool = pooled(ids);

    // Recover the pre-normalisation norm.
    std::vector<double> z(e, 0.0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < e; ++j) z[j] += pool[i] * projection_.at(i, j);
    double n = 0.0;
    for (double v : z) n += v * v;
    n = std::sqrt(n);

    // d/dz of z/|z|: (g - v (v.g)) / |z|
    double vg = 0.0;
    for (std::size_t j = 0; j < e; ++j) vg += output.values[j] * grad_output[j];
    std::vector<double> dz(e);
    for (std::size_t j = 0; j < e; ++j) dz[j] = (grad_output[j] - output.values[j] * vg) / n;

    std::vector<double> dpool(h, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < e; ++j) {
            grad.projection.at(i, j) += pool[i] * dz[j];
            acc += projection_.at(i, j) * dz[j];
        }
        dpool[i] = acc;
    }
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (auto id : ids) {
        auto row = grad.token_table.row(id);
        for (std::size_t i = 0; i < h; ++i) row[i] += dpool[i] * inv;
    }
}

void save_encoder(const Encoder& encoder, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::ordered_json manifest;
    manifest["format"] = "loraserve-encoder";
    manifest["format_version"] = 1;
    manifest["hidden"] = encoder.hidden();
    manifest["embed"] = encoder.embed_dim();
    manifest["seed"] = encoder.seed();
    manifest["payload"] = "encoder.bin";
    manifest["vocab"] = encoder.vocabulary();
    std::vector<double> payload(encoder.token_table().data().begin(), encoder.token_table().data().end());
    payload.insert(payload.end(), encoder.projection().data().begin(), encoder.projection().data().end());
    detail::write_f64_le(dir / "encoder.bin", payload);
    detail::write_text(dir / "encoder.json", manifest.dump(2) + "\n");
}

Encoder load_encoder(const std::filesystem::path& dir) {
    const std::string text = detail::read_text(dir / "encoder.json");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("encoder.json: " + std::string(e.what()), e.byte);
    }
    try {
        if (manifest.value("format", std::string{}) != "loraserve-encoder") {
            throw ParseError("encoder.json: not an encoder manifest", 0);
        }
        auto vocab = manifest.at("vocab").get<std::vector<std::string>>();
        const auto h = manifest.at("hidden").get<std::size_t>();
        const auto e = manifest.at("embed").get<std::size_t>();
        const auto seed = manifest.at("seed").get<std::uint64_t>();
        const auto payload = detail::read_f64_le(dir / manifest.at("payload").get<std::string>(),
                                                 vocab.size() * h + h * e);
        const auto split = payload.begin() + static_cast<std::ptrdiff_t>(vocab.size() * h);
        DenseTensor table({vocab.size(), h}, std::vector<double>(payload.begin(), split));
        DenseTensor proj({h, e}, std::vector<double>(split, payload.end()));
        return Encoder::from_parameters(std::move(vocab), std::move(table), std::move(proj), seed);
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError("encoder.json: " + std::string(ex.what()), 0);
    }
}

}  // namespace loraserve
