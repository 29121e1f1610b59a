#include "mutualctr/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mutualctr::ad {

namespace {

std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    if (shape.empty()) {
        throw std::invalid_argument("Tensor: shape must have at least one dimension");
    }
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) {
            throw std::invalid_argument("Tensor: zero-sized dimension in shape " + shape_str(shape));
        }
        n *= d;
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size()) {
        throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match data length " +
                                    std::to_string(data_.size()));
    }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    std::size_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) {
    return Tensor({1}, {value});
}

Tensor Tensor::row(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const {
    return shape_.empty() ? 0 : shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() < 2) {
        throw std::invalid_argument("Tensor::cols: tensor has rank " + std::to_string(shape_.size()));
    }
    return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) {
    return data_[r * cols() + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void check_finite(const Tensor& t, const std::string& context) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t[i])) {
            throw std::invalid_argument(context + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

} // namespace mutualctr::ad
