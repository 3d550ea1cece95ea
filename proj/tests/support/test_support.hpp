#pragma once

// Independent reference computations and random fixtures for the tests.
// Nothing here calls the library's own kernels.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "loraserve/engine.hpp"
#include "loraserve/registry.hpp"
#include "loraserve/tensor.hpp"

namespace testsupport {

using loraserve::DenseTensor;

inline DenseTensor naive_matmul(const DenseTensor& a, const DenseTensor& b) {
    const auto m = a.extent(0), n = a.extent(1), q = b.extent(1);
    DenseTensor out({m, q});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < q; ++j) {
            long double acc = 0.0L;
            for (std::size_t t = 0; t < n; ++t) acc += static_cast<long double>(a.at(i, t)) * b.at(t, j);
            out.at(i, j) = static_cast<double>(acc);
        }
    return out;
}

// y[d] = B[d,r] * (A[r,d] * x[d]) for a single position.
inline std::vector<double> low_rank_apply(const DenseTensor& a, const DenseTensor& b, std::span<const double> x,
                                          double scale) {
    const auto r = a.extent(0), d = a.extent(1);
    std::vector<double> mid(r, 0.0), y(d, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) mid[i] += a.at(i, j) * x[j];
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < r; ++j) y[i] += scale * b.at(i, j) * mid[j];
    return y;
}

inline double max_abs(const DenseTensor& t) {
    double m = 0.0;
    for (double v : t.data()) m = std::max(m, std::abs(v));
    return m;
}

inline bool all_zero(const DenseTensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
}

inline loraserve::LoraAdapter random_adapter(const std::string& id, std::size_t width, std::size_t num_layers,
                                             std::size_t rank, std::mt19937_64& rng, double alpha = 12.0,
                                             std::vector<std::string> samples = {"sample text"}) {
    loraserve::LoraAdapter a;
    a.id = id;
    a.task_tag = "tag_" + id;
    a.rank = rank;
    a.alpha = alpha;
    a.samples = std::move(samples);
    for (std::size_t l = 0; l < num_layers; ++l) {
        a.layers.push_back({DenseTensor::random_normal({rank, width}, rng, 0.3),
                            DenseTensor::random_normal({width, rank}, rng, 0.3)});
    }
    return a;
}

inline std::vector<std::vector<std::size_t>> random_rows(std::size_t b, std::size_t p, std::size_t max_k,
                                                         std::mt19937_64& rng, bool allow_empty = false) {
    std::vector<std::vector<std::size_t>> rows(b);
    std::vector<std::size_t> cols(p);
    for (std::size_t j = 0; j < p; ++j) cols[j] = j;
    for (auto& row : rows) {
        const std::size_t lo = allow_empty ? 0 : 1;
        const std::size_t n = std::uniform_int_distribution<std::size_t>(lo, std::min(max_k, p))(rng);
        std::shuffle(cols.begin(), cols.end(), rng);
        row.assign(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(n));
    }
    return rows;
}

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("loraserve_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testsupport
