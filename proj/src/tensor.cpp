#include "loraserve/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "loraserve/errors.hpp"

namespace loraserve {

std::size_t shape_product(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

static void check_extents(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (auto e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_string(shape));
    }
}

DenseTensor::DenseTensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(shape_product(shape_), fill);
}

DenseTensor::DenseTensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (shape_product(shape_) != data_.size()) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }
}

DenseTensor DenseTensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    if (rows.size() == 0) throw DimensionError("from_rows needs at least one row");
    const std::size_t cols = rows.begin()->size();
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw DimensionError("ragged rows in from_rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return DenseTensor({rows.size(), cols}, std::move(data));
}

DenseTensor DenseTensor::identity(std::size_t n) {
    DenseTensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

DenseTensor DenseTensor::random_normal(Shape shape, std::mt19937_64& rng, double stddev) {
    DenseTensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data_) v = dist(rng);
    return t;
}

std::size_t DenseTensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
    }
    return shape_[axis];
}

std::span<double> DenseTensor::row(std::size_t i) noexcept {
    const std::size_t width = data_.size() / shape_[0];
    return std::span<double>(data_).subspan(i * width, width);
}

std::span<const double> DenseTensor::row(std::size_t i) const noexcept {
    const std::size_t width = data_.size() / shape_[0];
    return std::span<const double>(data_).subspan(i * width, width);
}

DenseTensor DenseTensor::reshaped(Shape shape) const {
    return DenseTensor(std::move(shape), data_);
}

void DenseTensor::scale(double factor) noexcept {
    for (auto& v : data_) v *= factor;
}

DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul expects 2-D operands, got " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()));
    }
    const std::size_t m = a.extent(0), n = a.extent(1), q = b.extent(1);
    if (b.extent(0) != n) {
        throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    DenseTensor out({m, q});
    for (std::size_t i = 0; i < m; ++i) {
        double* o = &out.at(i, 0);
        for (std::size_t t = 0; t < n; ++t) {
            const double av = a.at(i, t);
            const double* br = &b.at(t, 0);
            for (std::size_t j = 0; j < q; ++j) o[j] += av * br[j];
        }
    }
    return out;
}

DenseTensor transpose(const DenseTensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose expects a 2-D tensor");
    DenseTensor out({a.extent(1), a.extent(0)});
    for (std::size_t i = 0; i < a.extent(0); ++i)
        for (std::size_t j = 0; j < a.extent(1); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

double max_relative_error(const DenseTensor& a, const DenseTensor& b, double floor) {
    const double diff = max_abs_diff(a, b);
    double scale = 0.0;
    for (double v : b.data()) scale = std::max(scale, std::abs(v));
    if (diff == 0.0) return 0.0;
    return diff / std::max(scale, floor);
}

std::uint64_t checksum(const DenseTensor& t) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    for (auto e : t.shape()) mix(&e, sizeof e);
    mix(t.data().data(), t.size() * sizeof(double));
    return h;
}

}  // namespace loraserve
