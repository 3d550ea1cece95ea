#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <numeric>

#include "loraserve/errors.hpp"
#include "loraserve/kernels.hpp"
#include "test_support.hpp"

using namespace loraserve;
using testsupport::naive_matmul;

namespace {

struct Stacks {
    DenseTensor a, b;
    std::vector<double> scale;
    std::vector<AdapterFactors> factors;
};

Stacks random_stacks(std::size_t p, std::size_t r, std::size_t d, std::mt19937_64& rng) {
    Stacks s{DenseTensor({p, r, d}), DenseTensor({p, d, r}), {}, {}};
    std::uniform_real_distribution<double> sc(0.5, 2.5);
    for (std::size_t j = 0; j < p; ++j) {
        AdapterFactors f{DenseTensor::random_normal({r, d}, rng), DenseTensor::random_normal({d, r}, rng), sc(rng)};
        std::copy(f.a.data().begin(), f.a.data().end(), s.a.data().begin() + static_cast<std::ptrdiff_t>(j * r * d));
        std::copy(f.b.data().begin(), f.b.data().end(), s.b.data().begin() + static_cast<std::ptrdiff_t>(j * d * r));
        s.scale.push_back(f.scale);
        s.factors.push_back(std::move(f));
    }
    return s;
}

// Per-sample fused factors built by hand: mean(A_j), mean(scale_j B_j).
DenseTensor fused_factor_oracle(const DenseTensor& x, const Stacks& s,
                                const std::vector<std::vector<std::size_t>>& rows) {
    const auto b = x.extent(0), l = x.extent(1), d = x.extent(2);
    const auto r = s.a.extent(1);
    DenseTensor out({b, l, d});
    for (std::size_t i = 0; i < b; ++i) {
        if (rows[i].empty()) continue;
        DenseTensor fa({r, d}), fb({d, r});
        const double w = 1.0 / static_cast<double>(rows[i].size());
        for (auto j : rows[i]) {
            const auto& f = s.factors[j];
            for (std::size_t t = 0; t < r * d; ++t) fa[t] += w * f.a[t];
            for (std::size_t t = 0; t < d * r; ++t) fb[t] += w * f.scale * f.b[t];
        }
        for (std::size_t t = 0; t < l; ++t) {
            std::vector<double> xv(x.data().begin() + static_cast<std::ptrdiff_t>((i * l + t) * d),
                                   x.data().begin() + static_cast<std::ptrdiff_t>((i * l + t + 1) * d));
            const auto y = testsupport::low_rank_apply(fa, fb, xv, 1.0);
            for (std::size_t c = 0; c < d; ++c) out.at(i, t, c) = y[c];
        }
    }
    return out;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
    CHECK_THROWS_AS(DenseTensor(Shape{2, 0}), DimensionError);
    CHECK_THROWS_AS(DenseTensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
    DenseTensor t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(t.reshaped({6, 4}).shape() == Shape{6, 4});
    CHECK_THROWS_AS(t.reshaped({5, 5}), DimensionError);
}

TEST_CASE("matmul identity cases") {
    std::mt19937_64 rng(3);
    const auto v = DenseTensor::random_normal({3, 5}, rng);
    CHECK(matmul(DenseTensor::identity(3), v) == v);

    const auto m = DenseTensor::from_rows({{1, 2}, {3, 4}});
    CHECK(matmul(m, DenseTensor::from_rows({{1, 0}, {0, 1}})) == m);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = DenseTensor::random_normal({5, 7}, rng);
        const auto b = DenseTensor::random_normal({7, 3}, rng);
        CHECK(max_relative_error(matmul(a, b), naive_matmul(a, b)) <= 1e-12);
    }
}

TEST_CASE("matmul rejects mismatched inner extents") {
    CHECK_THROWS_AS(matmul(DenseTensor({2, 3}), DenseTensor({4, 2})), DimensionError);
    CHECK_THROWS_AS(matmul(DenseTensor({2, 3, 1}), DenseTensor({3, 2})), DimensionError);
}

TEST_CASE("max_relative_error is normwise") {
    const auto ref = DenseTensor::from_rows({{2.0, -4.0}});
    const auto got = DenseTensor::from_rows({{2.0, -3.0}});
    CHECK(max_relative_error(got, ref) == doctest::Approx(0.25));
    CHECK(max_abs_diff(got, ref) == 1.0);
}

TEST_CASE("mapping matrix uniform rows") {
    const auto m = MappingMatrix::uniform(4, {{0, 1, 2}, {1, 2, 3}, {}});
    CHECK(m(0, 0) == doctest::Approx(1.0 / 3));
    CHECK(m(0, 3) == 0.0);
    CHECK(m.nonzeros_in_row(1) == 3);
    CHECK(m.nonzeros_in_row(2) == 0);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto row = m.row(i);
        CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-12);
    }
    CHECK_THROWS_AS(MappingMatrix::uniform(2, {{0, 0}}), ValidationError);
    CHECK_THROWS_AS(MappingMatrix::uniform(2, {{2}}), DimensionError);
}

TEST_CASE("mixture kernel: zero B stack gives zero delta") {
    std::mt19937_64 rng(5);
    auto s = random_stacks(4, 3, 6, rng);
    std::fill(s.b.data().begin(), s.b.data().end(), 0.0);
    const auto x = DenseTensor::random_normal({3, 2, 6}, rng);
    const auto m = MappingMatrix::uniform(4, testsupport::random_rows(3, 4, 3, rng));
    CHECK(testsupport::all_zero(batched_lora_mixture(x, s.a, s.b, m, s.scale)));
    CHECK(testsupport::all_zero(batched_lora_fusion(x, s.a, s.b, m, s.scale)));
}

TEST_CASE("mixture kernel: single adapter reduces to scale*B*A*x per position") {
    std::mt19937_64 rng(6);
    const auto s = random_stacks(1, 2, 5, rng);
    const auto x = DenseTensor::random_normal({1, 3, 5}, rng);
    const auto out = batched_lora_mixture(x, s.a, s.b, MappingMatrix::uniform(1, {{0}}), s.scale);
    for (std::size_t t = 0; t < 3; ++t) {
        std::vector<double> xv(x.data().begin() + static_cast<std::ptrdiff_t>(t * 5),
                               x.data().begin() + static_cast<std::ptrdiff_t>(t * 5 + 5));
        const auto y = testsupport::low_rank_apply(s.factors[0].a, s.factors[0].b, xv, s.scale[0]);
        for (std::size_t c = 0; c < 5; ++c) CHECK(out.at(0, t, c) == doctest::Approx(y[c]).epsilon(1e-12));
    }
}

TEST_CASE("mixture kernel matches the sequential oracle (b=4,l=3,d=8,r=2,p=5,k=3)") {
    std::mt19937_64 rng(7);
    const auto s = random_stacks(5, 2, 8, rng);
    const auto x = DenseTensor::random_normal({4, 3, 8}, rng);
    std::vector<std::vector<std::size_t>> rows{{0, 1, 2}, {1, 3, 4}, {0, 2, 4}, {2, 3, 4}};
    const auto out = batched_lora_mixture(x, s.a, s.b, MappingMatrix::uniform(5, rows), s.scale);
    const auto ref = sequential_oracle(x, s.factors, rows, ReduceMode::Mixture);
    CHECK(max_relative_error(out, ref) <= 1e-10);
}

TEST_CASE("fusion kernel matches the per-sample fused-factor oracle (k=2)") {
    std::mt19937_64 rng(8);
    const auto s = random_stacks(5, 2, 8, rng);
    const auto x = DenseTensor::random_normal({4, 3, 8}, rng);
    std::vector<std::vector<std::size_t>> rows{{0, 1}, {3, 4}, {1, 4}, {2, 0}};
    const auto out = batched_lora_fusion(x, s.a, s.b, MappingMatrix::uniform(5, rows), s.scale);
    CHECK(max_relative_error(out, fused_factor_oracle(x, s, rows)) <= 1e-10);
    CHECK(max_relative_error(out, sequential_oracle(x, s.factors, rows, ReduceMode::Fusion)) <= 1e-10);
}

TEST_CASE("kernels reject inconsistent shapes") {
    std::mt19937_64 rng(9);
    const auto s = random_stacks(3, 2, 4, rng);
    const auto m = MappingMatrix::uniform(3, {{0}, {1}});
    CHECK_THROWS_AS(batched_lora_mixture(DenseTensor({2, 1, 5}), s.a, s.b, m, s.scale), DimensionError);
    CHECK_THROWS_AS(batched_lora_mixture(DenseTensor({3, 1, 4}), s.a, s.b, m, s.scale), DimensionError);
    CHECK_THROWS_AS(batched_lora_fusion(DenseTensor({2, 1, 4}), s.a, s.b, m, std::vector<double>{1.0}),
                    DimensionError);
}

TEST_CASE("sequential oracle examples") {
    std::mt19937_64 rng(10);
    auto s = random_stacks(2, 3, 6, rng);
    const auto x = DenseTensor::random_normal({2, 2, 6}, rng);

    SUBCASE("empty list gives a zero delta for that sample") {
        const auto out = sequential_oracle(x, s.factors, {{0}, {}}, ReduceMode::Mixture);
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t c = 0; c < 6; ++c) CHECK(out.at(1, t, c) == 0.0);
    }
    SUBCASE("one adapter: both strategies equal scale*B*A*x") {
        const auto mix = sequential_oracle(x, s.factors, {{1}, {1}}, ReduceMode::Mixture);
        const auto fus = sequential_oracle(x, s.factors, {{1}, {1}}, ReduceMode::Fusion);
        CHECK(max_abs_diff(mix, fus) <= 1e-12);
        std::vector<double> xv(x.data().begin(), x.data().begin() + 6);
        const auto y = testsupport::low_rank_apply(s.factors[1].a, s.factors[1].b, xv, s.scale[1]);
        for (std::size_t c = 0; c < 6; ++c) CHECK(mix.at(0, 0, c) == doctest::Approx(y[c]).epsilon(1e-12));
    }
    SUBCASE("duplicated adapter averages to itself") {
        s.factors[1] = s.factors[0];
        for (auto mode : {ReduceMode::Mixture, ReduceMode::Fusion}) {
            const auto dup = sequential_oracle(x, s.factors, {{0, 1}, {1, 0}}, mode);
            const auto one = sequential_oracle(x, s.factors, {{0}, {0}}, mode);
            CHECK(max_abs_diff(dup, one) <= 1e-12);
        }
    }
    SUBCASE("fusion over different shapes is a rank mismatch") {
        std::vector<AdapterFactors> mixed{s.factors[0],
                                          {DenseTensor::random_normal({2, 6}, rng),
                                           DenseTensor::random_normal({6, 2}, rng), 1.0}};
        CHECK_THROWS_AS(sequential_oracle(x, mixed, {{0, 1}, {0}}, ReduceMode::Fusion), RankMismatchError);
        CHECK_NOTHROW(sequential_oracle(x, mixed, {{0, 1}, {0}}, ReduceMode::Mixture));
    }
}

// ---------------------------------------------------------------------------
// Properties

TEST_CASE("property: batched kernels match the oracle on random configurations") {
    std::mt19937_64 rng(2024);
    auto U = [&rng](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    for (int trial = 0; trial < 60; ++trial) {
        const auto b = U(1, 8), l = U(1, 16), d = U(1, 64), r = U(1, 8), p = U(1, 16), k = U(1, 4);
        const auto s = random_stacks(p, r, d, rng);
        const auto x = DenseTensor::random_normal({b, l, d}, rng);
        const auto rows = testsupport::random_rows(b, p, k, rng, true);
        const auto m = MappingMatrix::uniform(p, rows);
        for (auto mode : {ReduceMode::Mixture, ReduceMode::Fusion}) {
            const auto got = batched_lora(mode, x, s.a, s.b, m, s.scale);
            const auto ref = sequential_oracle(x, s.factors, rows, mode);
            CHECK(max_relative_error(got, ref) <= 1e-10);
        }
    }
}

TEST_CASE("property: strategy collapse for one adapter per row") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const auto s = random_stacks(6, 3, 10, rng);
        const auto x = DenseTensor::random_normal({5, 4, 10}, rng);
        const auto m = MappingMatrix::uniform(6, testsupport::random_rows(5, 6, 1, rng));
        const auto mix = batched_lora_mixture(x, s.a, s.b, m, s.scale);
        const auto fus = batched_lora_fusion(x, s.a, s.b, m, s.scale);
        CHECK(max_abs_diff(mix, fus) <= 1e-12);
    }
}

TEST_CASE("property: linearity in x") {
    std::mt19937_64 rng(32);
    const auto s = random_stacks(5, 2, 9, rng);
    const auto x = DenseTensor::random_normal({3, 4, 9}, rng);
    const auto m = MappingMatrix::uniform(5, testsupport::random_rows(3, 5, 3, rng));
    for (double alpha : {-2.5, 0.0, 0.5, 3.0}) {
        DenseTensor xs = x;
        xs.scale(alpha);
        for (auto mode : {ReduceMode::Mixture, ReduceMode::Fusion}) {
            auto expected = batched_lora(mode, x, s.a, s.b, m, s.scale);
            expected.scale(alpha);
            const auto got = batched_lora(mode, xs, s.a, s.b, m, s.scale);
            CHECK(max_abs_diff(got, expected) <= 1e-12 * std::max(1.0, testsupport::max_abs(expected)));
        }
    }
}

TEST_CASE("property: permuting adapter slots with M's columns") {
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t p = 7, r = 3, d = 11;
        const auto s = random_stacks(p, r, d, rng);
        const auto x = DenseTensor::random_normal({4, 2, d}, rng);
        const auto m = MappingMatrix::uniform(p, testsupport::random_rows(4, p, 3, rng));
        std::vector<std::size_t> perm(p);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        DenseTensor pa({p, r, d}), pb({p, d, r});
        std::vector<double> ps(p);
        for (std::size_t j = 0; j < p; ++j) {
            std::copy_n(s.a.data().begin() + static_cast<std::ptrdiff_t>(perm[j] * r * d), r * d,
                        pa.data().begin() + static_cast<std::ptrdiff_t>(j * r * d));
            std::copy_n(s.b.data().begin() + static_cast<std::ptrdiff_t>(perm[j] * d * r), d * r,
                        pb.data().begin() + static_cast<std::ptrdiff_t>(j * d * r));
            ps[j] = s.scale[perm[j]];
        }
        const auto pm = m.permuted_columns(perm);
        for (auto mode : {ReduceMode::Mixture, ReduceMode::Fusion}) {
            const auto base = batched_lora(mode, x, s.a, s.b, m, s.scale);
            const auto perm_out = batched_lora(mode, x, pa, pb, pm, ps);
            CHECK(max_abs_diff(base, perm_out) <= 1e-12 * std::max(1.0, testsupport::max_abs(base)));
        }
    }
}

TEST_CASE("property: kernels are deterministic") {
    std::mt19937_64 rng(34);
    const auto s = random_stacks(4, 2, 7, rng);
    const auto x = DenseTensor::random_normal({3, 3, 7}, rng);
    const auto m = MappingMatrix::uniform(4, testsupport::random_rows(3, 4, 2, rng));
    CHECK(batched_lora_mixture(x, s.a, s.b, m, s.scale) == batched_lora_mixture(x, s.a, s.b, m, s.scale));
    CHECK(batched_lora_fusion(x, s.a, s.b, m, s.scale) == batched_lora_fusion(x, s.a, s.b, m, s.scale));
}
