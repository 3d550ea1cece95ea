#include "loraserve/kernels.hpp"

#include <algorithm>

#include "loraserve/errors.hpp"

namespace loraserve {

MappingMatrix::MappingMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), weights_(rows * cols, 0.0) {}

MappingMatrix MappingMatrix::uniform(std::size_t cols, const std::vector<std::vector<std::size_t>>& columns) {
    MappingMatrix m(columns.size(), cols);
    for (std::size_t i = 0; i < columns.size(); ++i) {
        const auto& row = columns[i];
        if (row.empty()) continue;
        const double w = 1.0 / static_cast<double>(row.size());
        for (auto j : row) {
            if (j >= cols) throw DimensionError("mapping column " + std::to_string(j) + " >= p=" + std::to_string(cols));
            if (m(i, j) != 0.0) throw ValidationError("duplicate adapter column in mapping row " + std::to_string(i));
            m(i, j) = w;
        }
    }
    return m;
}

std::size_t MappingMatrix::nonzeros_in_row(std::size_t i) const noexcept {
    auto r = row(i);
    return static_cast<std::size_t>(std::count_if(r.begin(), r.end(), [](double w) { return w != 0.0; }));
}

MappingMatrix MappingMatrix::permuted_columns(std::span<const std::size_t> perm) const {
    if (perm.size() != cols_) throw DimensionError("permutation length differs from column count");
    MappingMatrix out(rows_, cols_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) out(i, j) = (*this)(i, perm[j]);
    return out;
}

namespace {

struct Dims {
    std::size_t b, l, d, p, r;
};

Dims check_shapes(const DenseTensor& x, const DenseTensor& a_stack, const DenseTensor& b_stack,
                  const MappingMatrix& m, std::span<const double> scale) {
    if (x.rank() != 3) throw DimensionError("x must be [b,l,d], got " + shape_string(x.shape()));
    if (a_stack.rank() != 3) throw DimensionError("A stack must be [p,r,d], got " + shape_string(a_stack.shape()));
    if (b_stack.rank() != 3) throw DimensionError("B stack must be [p,d,r], got " + shape_string(b_stack.shape()));
    Dims dims{x.extent(0), x.extent(1), x.extent(2), a_stack.extent(0), a_stack.extent(1)};
    if (a_stack.extent(2) != dims.d) throw DimensionError("A stack width differs from x width");
    if (b_stack.extent(0) != dims.p || b_stack.extent(1) != dims.d || b_stack.extent(2) != dims.r) {
        throw DimensionError("B stack " + shape_string(b_stack.shape()) + " inconsistent with A stack " +
                             shape_string(a_stack.shape()));
    }
    if (m.rows() != dims.b || m.cols() != dims.p) {
        throw DimensionError("mapping matrix must be " + std::to_string(dims.b) + "x" + std::to_string(dims.p));
    }
    if (scale.size() != dims.p) throw DimensionError("scale list length differs from adapter count");
    return dims;
}

// B' = scale_p * B_p
std::vector<double> scaled_b(const DenseTensor& b_stack, std::span<const double> scale, const Dims& dims) {
    std::vector<double> out(b_stack.size());
    const std::size_t block = dims.d * dims.r;
    for (std::size_t p = 0; p < dims.p; ++p)
        for (std::size_t i = 0; i < block; ++i) out[p * block + i] = scale[p] * b_stack[p * block + i];
    return out;
}

}  // namespace

DenseTensor batched_lora_mixture(const DenseTensor& x, const DenseTensor& a_stack, const DenseTensor& b_stack,
                                 const MappingMatrix& m, std::span<const double> scale) {
    const Dims dims = check_shapes(x, a_stack, b_stack, m, scale);
    const auto bs = scaled_b(b_stack, scale, dims);
    DenseTensor out({dims.b, dims.l, dims.d});

    std::vector<double> mid(dims.r);
    std::vector<double> mid2(dims.d);
    const double* A = a_stack.data().data();
    const std::size_t a_block = dims.r * dims.d;
    const std::size_t b_block = dims.d * dims.r;

    for (std::size_t bi = 0; bi < dims.b; ++bi) {
        for (std::size_t p = 0; p < dims.p; ++p) {
            const double w = m(bi, p);
            if (w == 0.0) continue;
            const double* Ap = A + p * a_block;
            const double* Bp = bs.data() + p * b_block;
            for (std::size_t li = 0; li < dims.l; ++li) {
                const double* xr = &x.at(bi, li, 0);
                // mid[b,l,p,r] = sum_d X[b,l,d] A[p,r,d]
                for (std::size_t ri = 0; ri < dims.r; ++ri) {
                    const double* arow = Ap + ri * dims.d;
                    double acc = 0.0;
                    for (std::size_t di = 0; di < dims.d; ++di) acc += xr[di] * arow[di];
                    mid[ri] = acc;
                }
                // mid2[b,l,p,d] = sum_r mid[b,l,p,r] B'[p,d,r]
                for (std::size_t di = 0; di < dims.d; ++di) {
                    const double* brow = Bp + di * dims.r;
                    double acc = 0.0;
                    for (std::size_t ri = 0; ri < dims.r; ++ri) acc += mid[ri] * brow[ri];
                    mid2[di] = acc;
                }
                // out[b,l,d] += M[b,p] mid2[b,l,p,d]
                double* o = &out.at(bi, li, 0);
                for (std::size_t di = 0; di < dims.d; ++di) o[di] += w * mid2[di];
            }
        }
    }
    return out;
}

DenseTensor batched_lora_fusion(const DenseTensor& x, const DenseTensor& a_stack, const DenseTensor& b_stack,
                                const MappingMatrix& m, std::span<const double> scale) {
    const Dims dims = check_shapes(x, a_stack, b_stack, m, scale);
    const auto bs = scaled_b(b_stack, scale, dims);
    DenseTensor out({dims.b, dims.l, dims.d});

    const std::size_t block = dims.r * dims.d;
    std::vector<double> fa(block), fb(block), mid(dims.r);
    const double* A = a_stack.data().data();

    for (std::size_t bi = 0; bi < dims.b; ++bi) {
        // FA[b,r,d] = sum_p M[b,p] A[p,r,d];  FB[b,d,r] = sum_p M[b,p] B'[p,d,r]
        std::fill(fa.begin(), fa.end(), 0.0);
        std::fill(fb.begin(), fb.end(), 0.0);
        bool any = false;
        for (std::size_t p = 0; p < dims.p; ++p) {
            const double w = m(bi, p);
            if (w == 0.0) continue;
            any = true;
            const double* Ap = A + p * block;
            const double* Bp = bs.data() + p * block;
            for (std::size_t i = 0; i < block; ++i) fa[i] += w * Ap[i];
            for (std::size_t i = 0; i < block; ++i) fb[i] += w * Bp[i];
        }
        if (!any) continue;
        for (std::size_t li = 0; li < dims.l; ++li) {
            const double* xr = &x.at(bi, li, 0);
            // mid[b,l,r] = sum_d X[b,l,d] FA[b,r,d]
            for (std::size_t ri = 0; ri < dims.r; ++ri) {
                const double* arow = fa.data() + ri * dims.d;
                double acc = 0.0;
                for (std::size_t di = 0; di < dims.d; ++di) acc += xr[di] * arow[di];
                mid[ri] = acc;
            }
            // out[b,l,d] = sum_r mid[b,l,r] FB[b,d,r]
            double* o = &out.at(bi, li, 0);
            for (std::size_t di = 0; di < dims.d; ++di) {
                const double* brow = fb.data() + di * dims.r;
                double acc = 0.0;
                for (std::size_t ri = 0; ri < dims.r; ++ri) acc += mid[ri] * brow[ri];
                o[di] = acc;
            }
        }
    }
    return out;
}

DenseTensor batched_lora(ReduceMode mode, const DenseTensor& x, const DenseTensor& a_stack,
                         const DenseTensor& b_stack, const MappingMatrix& m, std::span<const double> scale) {
    return mode == ReduceMode::Fusion ? batched_lora_fusion(x, a_stack, b_stack, m, scale)
                                      : batched_lora_mixture(x, a_stack, b_stack, m, scale);
}

DenseTensor sequential_oracle(const DenseTensor& x, std::span<const AdapterFactors> adapters,
                              const std::vector<std::vector<std::size_t>>& per_sample, ReduceMode mode) {
    if (x.rank() != 3) throw DimensionError("x must be [b,l,d]");
    const std::size_t b = x.extent(0), l = x.extent(1), d = x.extent(2);
    if (per_sample.size() != b) throw DimensionError("one adapter list per sample required");
    DenseTensor out({b, l, d});

    for (std::size_t bi = 0; bi < b; ++bi) {
        const auto& list = per_sample[bi];
        if (list.empty()) continue;
        const double inv_n = 1.0 / static_cast<double>(list.size());

        // x_i as an [l, d] matrix; deltas are computed as x_i A^T B^T.
        DenseTensor xi({l, d});
        std::copy_n(&x.at(bi, 0, 0), l * d, xi.data().begin());

        if (mode == ReduceMode::Mixture) {
            DenseTensor acc({l, d});
            for (auto j : list) {
                const auto& f = adapters[j];
                DenseTensor bt = transpose(f.b);
                bt.scale(f.scale);
                DenseTensor delta = matmul(matmul(xi, transpose(f.a)), bt);
                for (std::size_t t = 0; t < acc.size(); ++t) acc[t] += delta[t];
            }
            acc.scale(inv_n);
            std::copy_n(acc.data().begin(), l * d, &out.at(bi, 0, 0));
        } else {
            const auto& first = adapters[list.front()];
            DenseTensor fa(first.a.shape());
            DenseTensor fb(first.b.shape());
            for (auto j : list) {
                const auto& f = adapters[j];
                if (f.a.shape() != fa.shape() || f.b.shape() != fb.shape()) {
                    throw RankMismatchError("fusion requires identical adapter shapes");
                }
                for (std::size_t t = 0; t < fa.size(); ++t) fa[t] += f.a[t];
                for (std::size_t t = 0; t < fb.size(); ++t) fb[t] += f.scale * f.b[t];
            }
            fa.scale(inv_n);
            fb.scale(inv_n);
            DenseTensor delta = matmul(matmul(xi, transpose(fa)), transpose(fb));
            std::copy_n(delta.data().begin(), l * d, &out.at(bi, 0, 0));
        }
    }
    return out;
}

}  // namespace loraserve
