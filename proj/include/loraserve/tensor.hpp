#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace loraserve {

using Shape = std::vector<std::size_t>;

/// Contiguous row-major array of doubles. Every extent is at least 1 and the
/// element count always equals the product of the extents.
class DenseTensor {
public:
    DenseTensor() = default;
    explicit DenseTensor(Shape shape, double fill = 0.0);
    DenseTensor(Shape shape, std::vector<double> data);

    /// Build a 2-D tensor from nested rows. All rows must have equal length.
    static DenseTensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static DenseTensor identity(std::size_t n);
    /// Entries drawn i.i.d. from N(0, stddev^2).
    static DenseTensor random_normal(Shape shape, std::mt19937_64& rng, double stddev = 1.0);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t flat) noexcept { return data_[flat]; }
    const double& operator[](std::size_t flat) const noexcept { return data_[flat]; }

    double& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
    const double& at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const double& at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    /// Row i of a tensor viewed as [extent(0), size/extent(0)].
    std::span<double> row(std::size_t i) noexcept;
    std::span<const double> row(std::size_t i) const noexcept;

    DenseTensor reshaped(Shape shape) const;
    void scale(double factor) noexcept;

    bool operator==(const DenseTensor& other) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Standard matrix product of [m x n] and [n x q]. Accumulates over n in
/// ascending order for every output element.
DenseTensor matmul(const DenseTensor& a, const DenseTensor& b);

DenseTensor transpose(const DenseTensor& a);

/// Largest |a - b| / max(|b|, floor) over all elements. Shapes must match.
double max_relative_error(const DenseTensor& a, const DenseTensor& b, double floor = 1e-300);
double max_abs_diff(const DenseTensor& a, const DenseTensor& b);

/// FNV-1a over the raw bytes of the shape and data, used for immutability checks.
std::uint64_t checksum(const DenseTensor& t);

}  // namespace loraserve
