#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loraserve/composer.hpp"
#include "loraserve/kernels.hpp"
#include "loraserve/registry.hpp"
#include "loraserve/retriever.hpp"

namespace loraserve {

/// y = W x + bias, with W stored [out = d, in = d].
struct AffineLayer {
    DenseTensor weight;
    std::vector<double> bias;
};

struct BackboneConfig {
    std::size_t width = 16;
    std::size_t depth = 2;
    std::uint64_t seed = 1;
    double weight_gain = 1.0;  // W ~ N(0, gain^2 / d)
    double bias_std = 0.1;
};

/// Frozen stack of affine layers with tanh between them and none after the
/// last. Every layer is a LoRA attach point.
class BackboneModel {
public:
    explicit BackboneModel(std::vector<AffineLayer> layers);
    static BackboneModel random(const BackboneConfig& config);

    std::size_t width() const noexcept { return width_; }
    std::size_t depth() const noexcept { return layers_.size(); }
    const std::vector<AffineLayer>& layers() const noexcept { return layers_; }
    PoolDims pool_dims() const noexcept { return {width_, layers_.size()}; }

private:
    std::vector<AffineLayer> layers_;
    std::size_t width_;
};

/// W0 x + bias for every position of x [b, l, d] (or [n, d]).
DenseTensor apply_affine(const AffineLayer& layer, const DenseTensor& x);

/// Frozen path only.
DenseTensor forward_base(const BackboneModel& model, const DenseTensor& x);

/// Frozen path plus the plan's low-rank delta at every layer. Throws
/// StalenessError if the plan was built against another snapshot version.
DenseTensor forward_with_plan(const BackboneModel& model, const DenseTensor& x, const BatchPlan& plan,
                              const RegistrySnapshot& snapshot);

/// Same as forward_with_plan with the adapter stacks already gathered.
DenseTensor forward_with_tensors(const BackboneModel& model, const DenseTensor& x, const PlanTensors& tensors,
                                 const MappingMatrix& mapping, ReduceMode mode);

/// Unbatched reference for one sample x [l, d]: Mixture sums per-adapter
/// deltas, Fusion materialises fuse_adapters() over rank-padded adapters.
DenseTensor forward_single(const BackboneModel& model, const DenseTensor& x,
                           std::span<const LoraAdapter* const> adapters, ReduceMode mode);

// ---------------------------------------------------------------------------
// Serving

struct InferenceRequest {
    std::string id;
    std::string text;      // retrieval key
    DenseTensor features;  // [l, d] forward input
    std::optional<AdapterMask> mask;
};

struct InferenceResponse {
    std::string id;
    DenseTensor output;  // [l, d]
    std::vector<ScoredAdapter> retrieved;
};

struct ServeResult {
    std::vector<InferenceResponse> responses;
    BatchPlan plan;
};

/// Stacks requests into [b, lmax, d]; shorter sequences are zero padded.
DenseTensor stack_features(std::span<const InferenceRequest> requests, std::size_t width);

/// Runs one batch with caller-supplied routing (one ranked list per request).
ServeResult execute_batch(const BackboneModel& model, std::span<const InferenceRequest> requests,
                          std::vector<std::vector<ScoredAdapter>> routing, const CompositionStrategy& strategy,
                          const RegistrySnapshot& snapshot);

/// Retrieval g followed by composition F over one snapshot.
ServeResult serve_batch(const BackboneModel& model, std::span<const InferenceRequest> requests,
                        const CompositionStrategy& strategy, const RegistrySnapshot& snapshot,
                        const Encoder& encoder, const AdapterIndex& index,
                        std::string_view instruction = kRetrievalInstruction);

/// Long-lived serving front end. Pins each batch to the registry snapshot
/// current at entry and caches centroid indexes per snapshot version.
class ServingEngine {
public:
    ServingEngine(std::shared_ptr<const BackboneModel> model, std::shared_ptr<Registry> registry,
                  std::shared_ptr<const Encoder> encoder, std::string instruction = std::string(kRetrievalInstruction));

    ServeResult serve_batch(std::span<const InferenceRequest> requests, const CompositionStrategy& strategy) const;
    /// Non-batched path for one request: same retrieval, unbatched forward.
    InferenceResponse serve_single(const InferenceRequest& request, const CompositionStrategy& strategy) const;

    std::shared_ptr<const AdapterIndex> index_for(const RegistrySnapshot& snapshot) const;

    const BackboneModel& model() const noexcept { return *model_; }
    Registry& registry() const noexcept { return *registry_; }
    const Encoder& encoder() const noexcept { return *encoder_; }

private:
    std::shared_ptr<const BackboneModel> model_;
    std::shared_ptr<Registry> registry_;
    std::shared_ptr<const Encoder> encoder_;
    std::string instruction_;
    mutable std::mutex index_mutex_;
    mutable std::shared_ptr<const AdapterIndex> index_;
};

// ---------------------------------------------------------------------------
// Per-task LoRA training

struct TaskExample {
    DenseTensor features;  // [l, d]
    DenseTensor targets;   // [l, d]
};

struct LoraTrainConfig {
    std::size_t rank = 6;
    double alpha = 12.0;
    std::size_t steps = 300;
    double learning_rate = 0.05;
    std::uint64_t seed = 1;
    double init_std = 0.1;  // A ~ N(0, init_std^2); B starts at zero
};

struct AdapterIdentity {
    std::string id;
    std::string task_tag;
    std::vector<std::string> samples;
};

/// Mean squared error of the adapted model over every position and channel.
double lora_loss(const BackboneModel& model, const LoraAdapter& adapter, std::span<const TaskExample> data);

struct LoraGradient {
    double loss = 0.0;
    std::vector<LoraLayer> layers;  // dLoss/dA, dLoss/dB per layer
};

LoraGradient lora_loss_and_gradient(const BackboneModel& model, const LoraAdapter& adapter,
                                    std::span<const TaskExample> data);

/// Adapter with zero B and seeded random A; leaves the model unchanged.
LoraAdapter init_lora(const BackboneModel& model, const LoraTrainConfig& config, AdapterIdentity identity);

/// Full-batch gradient descent on the MSE with the backbone frozen.
LoraAdapter train_lora(const BackboneModel& model, std::span<const TaskExample> data, const LoraTrainConfig& config,
                       AdapterIdentity identity);

// ---------------------------------------------------------------------------
// Throughput

struct ThroughputRow {
    std::size_t batch_size = 0;
    double tokens_per_second = 0.0;
    double median_seconds = 0.0;
    std::size_t tokens = 0;
};

struct BenchmarkConfig {
    std::size_t trials = 5;
    std::size_t warmup = 1;
    /// Route every request through serve_single instead of serve_batch.
    bool unbatched = false;
};

/// Processes `requests` in consecutive batches of each size and reports
/// positions processed per wall-clock second (median over trials).
std::vector<ThroughputRow> benchmark_throughput(const ServingEngine& engine, std::span<const InferenceRequest> requests,
                                                std::span<const std::size_t> batch_sizes,
                                                const CompositionStrategy& strategy,
                                                const BenchmarkConfig& config = {});

}  // namespace loraserve
