#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loraserve/kernels.hpp"
#include "loraserve/registry.hpp"

namespace loraserve {

enum class StrategyKind { Selection, Mixture, Fusion };

std::string_view to_string(StrategyKind kind);
/// Accepts "selection", "mixture", "fusion" (case-insensitive).
StrategyKind parse_strategy(std::string_view name);

/// Composition policy applied to the retrieved adapters. Selection always
/// uses k = 1.
class CompositionStrategy {
public:
    CompositionStrategy(StrategyKind kind, std::size_t k);

    static CompositionStrategy selection() { return {StrategyKind::Selection, 1}; }
    static CompositionStrategy mixture(std::size_t k) { return {StrategyKind::Mixture, k}; }
    static CompositionStrategy fusion(std::size_t k) { return {StrategyKind::Fusion, k}; }

    StrategyKind kind() const noexcept { return kind_; }
    std::size_t k() const noexcept { return k_; }
    /// Kernel used to apply the plan; Selection runs through the mixture path.
    ReduceMode reduce_mode() const noexcept {
        return kind_ == StrategyKind::Fusion ? ReduceMode::Fusion : ReduceMode::Mixture;
    }

    bool operator==(const CompositionStrategy&) const = default;

private:
    StrategyKind kind_;
    std::size_t k_;
};

/// Deduplicated adapter set of a batch plus the per-sample mapping matrix.
struct BatchPlan {
    std::vector<std::string> adapter_ids;  // sorted, unique; column order of `mapping`
    MappingMatrix mapping;                 // [b, p]
    CompositionStrategy strategy = CompositionStrategy::selection();
    std::uint64_t snapshot_version = 0;

    std::size_t batch_size() const noexcept { return mapping.rows(); }
    std::size_t num_adapters() const noexcept { return adapter_ids.size(); }

    bool operator==(const BatchPlan&) const = default;
};

/// Unions the per-sample retrievals, drops duplicates, sorts the ids and
/// places weight 1/|list| at each of a sample's columns. Selection keeps only
/// the head of each list. A sample with an empty list gets an all-zero row;
/// if every list is empty an EmptyPlanError is thrown.
BatchPlan build_batch_plan(const std::vector<std::vector<std::string>>& retrievals,
                           const CompositionStrategy& strategy, const RegistrySnapshot& snapshot);

/// Zero-extends A with rows and B with columns up to target_rank. Alpha is
/// scaled with the rank so alpha/rank, and hence the delta, is unchanged.
LoraAdapter pad_rank(const LoraAdapter& adapter, std::size_t target_rank);

/// Parameter average of the adapters (after padding to a common rank by the
/// caller). The result's alpha is the mean alpha; when scales differ, B is
/// rescaled so the fused delta equals mean(A) * mean(scale_j B_j).
LoraAdapter fuse_adapters(std::span<const LoraAdapter> adapters);

/// Contiguous per-layer stacks for the kernels, padded to the plan's max rank.
struct PlanTensors {
    std::vector<DenseTensor> a_stacks;  // per layer [p, r, d]
    std::vector<DenseTensor> b_stacks;  // per layer [p, d, r]
    std::vector<double> scales;         // [p]
    std::size_t rank = 0;
};

/// Gathers the plan's adapters from the snapshot. With pad_ranks=false a
/// plan mixing ranks raises RankMismatchError.
PlanTensors materialize_plan(const BatchPlan& plan, const RegistrySnapshot& snapshot, bool pad_ranks = true);

}  // namespace loraserve
