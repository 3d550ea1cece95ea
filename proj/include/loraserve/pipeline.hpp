#pragma once

#include <memory>
#include <string>
#include <vector>

#include "loraserve/composer.hpp"
#include "loraserve/engine.hpp"
#include "loraserve/retriever.hpp"
#include "loraserve/synthetic.hpp"

namespace loraserve {

enum class EvalMode { IID, OOD };
/// Where the per-sample adapter lists come from.
enum class Routing { Retriever, Untrained, Perfect };

std::string_view to_string(EvalMode mode);
std::string_view to_string(Routing routing);
EvalMode parse_eval_mode(std::string_view name);
Routing parse_routing(std::string_view name);

/// Everything needed to go from a suite to a serving stack.
struct PrepareConfig {
    std::size_t backbone_depth = 2;
    std::uint64_t backbone_seed = 11;
    LoraTrainConfig lora;
    TrainingConfig retriever;
    double retriever_fraction = 0.4;
    std::size_t encoder_hidden = 32;
    std::size_t encoder_embed = 32;
    std::uint64_t encoder_seed = 5;
};

struct EvalConfig {
    StrategyKind strategy = StrategyKind::Mixture;
    std::size_t k = kDefaultTopK;
    EvalMode mode = EvalMode::IID;
    Routing routing = Routing::Retriever;
    std::size_t batch_size = 32;
    std::size_t retrieval_k = 3;  // k of the top-k retrieval accuracy column
    std::uint64_t shuffle_seed = 3;
};

struct PreparedPipeline {
    std::shared_ptr<const BackboneModel> model;
    std::shared_ptr<Registry> registry;
    std::shared_ptr<const Encoder> trained_encoder;
    std::shared_ptr<const Encoder> untrained_encoder;
    std::vector<std::string> retriever_tasks;  // tasks the retriever saw
    std::vector<double> retriever_losses;
};

BackboneModel make_backbone(std::size_t width, std::size_t depth, std::uint64_t seed);

/// Trains one adapter per task on its training split and registers it.
void train_task_adapters(const SyntheticTaskSuite& suite, const BackboneModel& model, Registry& registry,
                         const LoraTrainConfig& config);

/// Tasks whose samples are used to train the retriever: a seeded shuffle of
/// the task list truncated to ceil(fraction * n), at least two.
std::vector<std::string> select_retriever_tasks(const SyntheticTaskSuite& suite, double fraction,
                                                std::uint64_t seed);

/// Vocabulary for the encoder: instruction words plus every representative
/// sample word in the pool.
Encoder make_untrained_encoder(const RegistrySnapshot& snapshot, std::size_t hidden, std::size_t embed,
                               std::uint64_t seed);

RetrieverTrainResult train_suite_retriever(const SyntheticTaskSuite& suite, const Encoder& initial,
                                           const std::vector<std::string>& task_ids, const TrainingConfig& config);

PreparedPipeline prepare_pipeline(const SyntheticTaskSuite& suite, const PrepareConfig& config);

struct TaskMetrics {
    std::string task_id;
    std::size_t samples = 0;
    double mse = 0.0;
    double retrieval_top1 = 0.0;
    double retrieval_topk = 0.0;
};

/// Batch-plan statistics gathered across an evaluation run.
struct PlanAudit {
    std::size_t batches = 0;
    std::size_t dedup_violations = 0;   // p > min(b*k, |pool|)
    double max_row_sum_error = 0.0;     // over nonempty mapping rows
    std::size_t own_adapter_routed = 0; // OOD samples whose own adapter was used
    std::size_t max_p = 0;
};

struct EvalReport {
    EvalMode mode = EvalMode::IID;
    StrategyKind strategy = StrategyKind::Mixture;
    Routing routing = Routing::Retriever;
    std::size_t k = 0;
    std::size_t retrieval_k = 0;
    std::size_t batch_size = 0;
    std::vector<TaskMetrics> tasks;
    double mean_mse = 0.0;
    double mean_top1 = 0.0;
    double mean_topk = 0.0;
    PlanAudit audit;
};

EvalReport evaluate(const PreparedPipeline& prepared, const SyntheticTaskSuite& suite, const EvalConfig& config);

EvalReport run_pipeline(const SyntheticTaskSuite& suite, const PrepareConfig& prepare, const EvalConfig& eval);

/// key=value lines followed by a JSON block; byte-identical across runs
/// with equal inputs.
std::string format_report(const EvalReport& report);

}  // namespace loraserve
