#include "eeguq/tensor.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace eeguq {

std::int64_t shape_product(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_to_string(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

static void check_extents(const std::vector<std::int64_t>& shape) {
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] <= 0) {
            throw std::invalid_argument("tensor extent " + std::to_string(i) +
                                        " must be positive, got " + std::to_string(shape[i]));
        }
    }
}

Tensor::Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    check_extents(shape);
    data.assign(static_cast<std::size_t>(shape_product(shape)), 0.0);
}

Tensor::Tensor(std::vector<std::int64_t> s, double fill) : shape(std::move(s)) {
    check_extents(shape);
    data.assign(static_cast<std::size_t>(shape_product(shape)), fill);
}

Tensor::Tensor(std::vector<std::int64_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    check_extents(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_product(shape)) {
        throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_to_string(shape));
    }
}

std::int64_t Tensor::extent(std::int64_t dim) const {
    if (dim < 0 || dim >= rank()) {
        throw std::invalid_argument("dimension index " + std::to_string(dim) +
                                    " out of range for shape " + shape_to_string(shape));
    }
    return shape[static_cast<std::size_t>(dim)];
}

Tensor Tensor::reshaped(std::vector<std::int64_t> new_shape) const {
    if (shape_product(new_shape) != size()) {
        throw std::invalid_argument("cannot reshape " + shape_to_string(shape) + " to " +
                                    shape_to_string(new_shape));
    }
    return Tensor(std::move(new_shape), data);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    shape_to_string(a.shape) + " vs " + shape_to_string(b.shape));
    }
}

}  // namespace eeguq
