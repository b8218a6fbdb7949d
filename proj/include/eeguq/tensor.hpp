#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace eeguq {

/// Dense n-dimensional array of doubles, row-major.
/// Shapes are explicit everywhere; the only implicit broadcast in the
/// library is scalar-times-tensor.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s);
    Tensor(std::vector<std::int64_t> s, double fill);
    Tensor(std::vector<std::int64_t> s, std::vector<double> d);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t extent(std::int64_t dim) const;

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    /// Reinterprets the data with a new shape of equal element count.
    Tensor reshaped(std::vector<std::int64_t> new_shape) const;

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }
    static Tensor full_like(const Tensor& t, double v) { return Tensor(t.shape, v); }
    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
};

std::int64_t shape_product(const std::vector<std::int64_t>& shape);
std::string shape_to_string(const std::vector<std::int64_t>& shape);

/// Throws std::invalid_argument naming `what` when the shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace eeguq
