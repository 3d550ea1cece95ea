#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "loraserve/tensor.hpp"

namespace loraserve {

/// Per-sample averaging weights over the p adapters of one batch.
///
/// Row i holds 1/n at the columns of the n adapters retrieved for sample i
/// and zero elsewhere; a sample with no adapters has an all-zero row.
class MappingMatrix {
public:
    MappingMatrix() = default;
    MappingMatrix(std::size_t rows, std::size_t cols);

    /// Builds the uniform matrix from per-row column lists. Column indices
    /// within a row must be distinct and < cols.
    static MappingMatrix uniform(std::size_t cols, const std::vector<std::vector<std::size_t>>& columns);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return weights_[i * cols_ + j]; }
    double& operator()(std::size_t i, std::size_t j) noexcept { return weights_[i * cols_ + j]; }
    std::span<const double> row(std::size_t i) const noexcept {
        return std::span<const double>(weights_).subspan(i * cols_, cols_);
    }
    std::size_t nonzeros_in_row(std::size_t i) const noexcept;
    const std::vector<double>& weights() const noexcept { return weights_; }

    /// Permutes columns so that new column j is old column perm[j].
    MappingMatrix permuted_columns(std::span<const std::size_t> perm) const;

    bool operator==(const MappingMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> weights_;
};

/// How the retrieved adapters of a sample are combined.
enum class ReduceMode { Mixture, Fusion };

/// Output-averaging contraction over a batch of heterogeneous adapters.
///
///   x       [b, l, d]   layer input
///   a_stack [p, r, d]   down projections
///   b_stack [p, d, r]   up projections
///   m       [b, p]      mapping matrix
///   scale   [p]         alpha / rank per adapter, folded into B
///
/// Returns only the low-rank delta; the caller adds the frozen W0 x term.
/// Contraction order is X*A over d, then *B over r, then *M over p.
/// Adapter slots with zero weight for a sample are skipped, which leaves the
/// sum unchanged.
DenseTensor batched_lora_mixture(const DenseTensor& x, const DenseTensor& a_stack, const DenseTensor& b_stack,
                                 const MappingMatrix& m, std::span<const double> scale);

/// Parameter-averaging contraction: builds per-sample fused factors
/// FA[b,r,d] = sum_p M*A and FB[b,d,r] = sum_p M*scale*B, then applies
/// FB * FA * x. Same shapes and return convention as the mixture kernel.
DenseTensor batched_lora_fusion(const DenseTensor& x, const DenseTensor& a_stack, const DenseTensor& b_stack,
                                const MappingMatrix& m, std::span<const double> scale);

DenseTensor batched_lora(ReduceMode mode, const DenseTensor& x, const DenseTensor& a_stack,
                         const DenseTensor& b_stack, const MappingMatrix& m, std::span<const double> scale);

/// A single adapter layer in unstacked form, used by the reference path.
struct AdapterFactors {
    DenseTensor a;  // [r, d]
    DenseTensor b;  // [d, r]
    double scale = 1.0;
};

/// Reference implementation: loops over samples and applies each sample's
/// adapter list directly. Mixture averages scale_j*B_j*A_j*x over the list;
/// Fusion averages A_j and scale_j*B_j first and applies the fused pair.
/// An empty list yields a zero delta for that sample.
DenseTensor sequential_oracle(const DenseTensor& x, std::span<const AdapterFactors> adapters,
                              const std::vector<std::vector<std::size_t>>& per_sample, ReduceMode mode);

}  // namespace loraserve
