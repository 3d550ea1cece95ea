#include "loraserve/engine.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "loraserve/errors.hpp"

namespace loraserve {

BackboneModel::BackboneModel(std::vector<AffineLayer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ValidationError("backbone needs at least one layer");
    width_ = layers_.front().weight.extent(0);
    for (const auto& l : layers_) {
        if (l.weight.shape() != Shape{width_, width_} || l.bias.size() != width_) {
            throw DimensionError("backbone layers must be square with matching bias");
        }
    }
}

BackboneModel BackboneModel::random(const BackboneConfig& config) {
    if (config.width == 0 || config.depth == 0) throw ValidationError("backbone width and depth must be >= 1");
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> bias_dist(0.0, config.bias_std);
    std::vector<AffineLayer> layers;
    for (std::size_t i = 0; i < config.depth; ++i) {
        AffineLayer layer{DenseTensor::random_normal({config.width, config.width}, rng,
                                                     config.weight_gain / std::sqrt(double(config.width))),
                          std::vector<double>(config.width)};
        for (auto& b : layer.bias) b = config.bias_std > 0.0 ? bias_dist(rng) : 0.0;
        layers.push_back(std::move(layer));
    }
    return BackboneModel(std::move(layers));
}

DenseTensor apply_affine(const AffineLayer& layer, const DenseTensor& x) {
    const std::size_t d = layer.weight.extent(0);
    if (x.shape().back() != d) {
        throw DimensionError("input width " + std::to_string(x.shape().back()) + " differs from model width " +
                             std::to_string(d));
    }
    DenseTensor out(x.shape());
    const std::size_t rows = x.size() / d;
    const double* W = layer.weight.data().data();
    const double* X = x.data().data();
    double* O = out.data().data();
    // Rows are processed kRowBlock at a time so each weight row is read once
    // per block; every output still accumulates over j in ascending order.
    constexpr std::size_t kRowBlock = 8;
    std::size_t n0 = 0;
    for (; n0 + kRowBlock <= rows; n0 += kRowBlock) {
        for (std::size_t i = 0; i < d; ++i) {
            const double* wr = W + i * d;
            double acc[kRowBlock];
            for (auto& a : acc) a = layer.bias[i];
            for (std::size_t j = 0; j < d; ++j) {
                const double w = wr[j];
                for (std::size_t r = 0; r < kRowBlock; ++r) acc[r] += w * X[(n0 + r) * d + j];
            }
            for (std::size_t r = 0; r < kRowBlock; ++r) O[(n0 + r) * d + i] = acc[r];
        }
    }
    for (std::size_t n = n0; n < rows; ++n) {
        const double* xr = X + n * d;
        double* o = O + n * d;
        for (std::size_t i = 0; i < d; ++i) {
            const double* wr = W + i * d;
            double acc = layer.bias[i];
            for (std::size_t j = 0; j < d; ++j) acc += wr[j] * xr[j];
            o[i] = acc;
        }
    }
    return out;
}

DenseTensor forward_base(const BackboneModel& model, const DenseTensor& x) {
    DenseTensor h = x;
    for (std::size_t li = 0; li < model.depth(); ++li) {
        h = apply_affine(model.layers()[li], h);
        if (li + 1 < model.depth())
            for (auto& v : h.data()) v = std::tanh(v);
    }
    return h;
}

DenseTensor forward_with_tensors(const BackboneModel& model, const DenseTensor& x, const PlanTensors& tensors,
                                 const MappingMatrix& mapping, ReduceMode mode) {
    if (tensors.a_stacks.size() != model.depth()) throw DimensionError("plan tensors do not match model depth");
    DenseTensor h = x;
    for (std::size_t li = 0; li < model.depth(); ++li) {
        DenseTensor z = apply_affine(model.layers()[li], h);
        const DenseTensor delta =
            batched_lora(mode, h, tensors.a_stacks[li], tensors.b_stacks[li], mapping, tensors.scales);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += delta[i];
        if (li + 1 < model.depth())
            for (auto& v : z.data()) v = std::tanh(v);
        h = std::move(z);
    }
    return h;
}

DenseTensor forward_with_plan(const BackboneModel& model, const DenseTensor& x, const BatchPlan& plan,
                              const RegistrySnapshot& snapshot) {
    if (plan.snapshot_version != snapshot.version()) {
        throw StalenessError("plan built against snapshot v" + std::to_string(plan.snapshot_version) +
                             ", given v" + std::to_string(snapshot.version()));
    }
    if (snapshot.dims() != model.pool_dims()) throw DimensionError("snapshot dims differ from backbone");
    if (x.rank() != 3 || x.extent(0) != plan.batch_size()) throw DimensionError("x must be [b, l, d] matching plan");
    const auto tensors = materialize_plan(plan, snapshot);
    return forward_with_tensors(model, x, tensors, plan.mapping, plan.strategy.reduce_mode());
}

DenseTensor forward_single(const BackboneModel& model, const DenseTensor& x,
                           std::span<const LoraAdapter* const> adapters, ReduceMode mode) {
    if (x.rank() != 2 || x.extent(1) != model.width()) throw DimensionError("x must be [l, d]");
    const std::size_t l = x.extent(0), d = x.extent(1);

    std::vector<LoraAdapter> working;
    if (mode == ReduceMode::Fusion && !adapters.empty()) {
        std::size_t max_rank = 0;
        for (const auto* a : adapters) max_rank = std::max(max_rank, a->rank);
        std::vector<LoraAdapter> padded;
        for (const auto* a : adapters) padded.push_back(pad_rank(*a, max_rank));
        working.push_back(fuse_adapters(padded));
    } else {
        for (const auto* a : adapters) working.push_back(*a);
    }

    std::vector<std::vector<std::size_t>> per_sample(1);
    for (std::size_t j = 0; j < working.size(); ++j) per_sample[0].push_back(j);

    DenseTensor h = x.reshaped({1, l, d});
    for (std::size_t li = 0; li < model.depth(); ++li) {
        DenseTensor z = apply_affine(model.layers()[li], h);
        std::vector<AdapterFactors> factors;
        for (const auto& a : working) factors.push_back({a.layers[li].a, a.layers[li].b, a.scale()});
        const DenseTensor delta = sequential_oracle(h, factors, per_sample, ReduceMode::Mixture);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += delta[i];
        if (li + 1 < model.depth())
            for (auto& v : z.data()) v = std::tanh(v);
        h = std::move(z);
    }
    return h.reshaped({l, d});
}

// ---------------------------------------------------------------------------

DenseTensor stack_features(std::span<const InferenceRequest> requests, std::size_t width) {
    if (requests.empty()) throw ValidationError("empty request batch");
    std::size_t lmax = 0;
    for (const auto& r : requests) {
        if (r.features.rank() != 2 || r.features.extent(1) != width) {
            throw DimensionError("request '" + r.id + "' features must be [l, " + std::to_string(width) + "]");
        }
        lmax = std::max(lmax, r.features.extent(0));
    }
    DenseTensor x({requests.size(), lmax, width});
    for (std::size_t i = 0; i < requests.size(); ++i) {
        const auto& f = requests[i].features;
        std::copy(f.data().begin(), f.data().end(), &x.at(i, 0, 0));
    }
    return x;
}

ServeResult execute_batch(const BackboneModel& model, std::span<const InferenceRequest> requests,
                          std::vector<std::vector<ScoredAdapter>> routing, const CompositionStrategy& strategy,
                          const RegistrySnapshot& snapshot) {
    if (routing.size() != requests.size()) throw ValidationError("one routing list per request required");
    std::vector<std::vector<std::string>> ids(routing.size());
    for (std::size_t i = 0; i < routing.size(); ++i) {
        if (routing[i].size() > strategy.k()) routing[i].resize(strategy.k());
        for (const auto& s : routing[i]) ids[i].push_back(s.id);
    }
    const DenseTensor x = stack_features(requests, model.width());
    ServeResult result{{}, build_batch_plan(ids, strategy, snapshot)};
    const DenseTensor y = forward_with_plan(model, x, result.plan, snapshot);

    const std::size_t d = model.width();
    result.responses.reserve(requests.size());
    for (std::size_t i = 0; i < requests.size(); ++i) {
        const std::size_t l = requests[i].features.extent(0);
        DenseTensor out({l, d});
        std::copy_n(&y.at(i, 0, 0), l * d, out.data().begin());
        result.responses.push_back({requests[i].id, std::move(out), std::move(routing[i])});
    }
    return result;
}

ServeResult serve_batch(const BackboneModel& model, std::span<const InferenceRequest> requests,
                        const CompositionStrategy& strategy, const RegistrySnapshot& snapshot,
                        const Encoder& encoder, const AdapterIndex& index, std::string_view instruction) {
    if (snapshot.empty()) throw EmptyPoolError("adapter pool is empty");
    if (index.snapshot_version() != snapshot.version()) throw StalenessError("adapter index is stale");
    std::vector<std::vector<ScoredAdapter>> routing;
    routing.reserve(requests.size());
    for (const auto& r : requests) {
        const auto query = encoder.embed_text(instruction, r.text);
        routing.push_back(index.retrieve(query, strategy.k(), r.mask ? &*r.mask : nullptr));
    }
    return execute_batch(model, requests, std::move(routing), strategy, snapshot);
}

ServingEngine::ServingEngine(std::shared_ptr<const BackboneModel> model, std::shared_ptr<Registry> registry,
                             std::shared_ptr<const Encoder> encoder, std::string instruction)
    : model_(std::move(model)), registry_(std::move(registry)), encoder_(std::move(encoder)),
      instruction_(std::move(instruction)) {
    if (registry_->dims() != model_->pool_dims()) throw DimensionError("registry dims differ from backbone");
}

std::shared_ptr<const AdapterIndex> ServingEngine::index_for(const RegistrySnapshot& snapshot) const {
    std::lock_guard lock(index_mutex_);
    if (!index_ || index_->snapshot_version() != snapshot.version()) {
        index_ = std::make_shared<const AdapterIndex>(*encoder_, snapshot, instruction_);
    }
    return index_;
}

ServeResult ServingEngine::serve_batch(std::span<const InferenceRequest> requests,
                                       const CompositionStrategy& strategy) const {
    const SnapshotPtr snap = registry_->snapshot();
    if (snap->empty()) throw EmptyPoolError("adapter pool is empty");
    const auto index = index_for(*snap);
    return loraserve::serve_batch(*model_, requests, strategy, *snap, *encoder_, *index, instruction_);
}

InferenceResponse ServingEngine::serve_single(const InferenceRequest& request,
                                              const CompositionStrategy& strategy) const {
    const SnapshotPtr snap = registry_->snapshot();
    if (snap->empty()) throw EmptyPoolError("adapter pool is empty");
    const auto index = index_for(*snap);
    auto retrieved = index->retrieve(encoder_->embed_text(instruction_, request.text), strategy.k(),
                                     request.mask ? &*request.mask : nullptr);
    std::vector<const LoraAdapter*> adapters;
    for (const auto& s : retrieved) adapters.push_back(&snap->get(s.id));
    return {request.id, forward_single(*model_, request.features, adapters, strategy.reduce_mode()),
            std::move(retrieved)};
}

}  // namespace loraserve
