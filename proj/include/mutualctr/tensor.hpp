#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace mutualctr::ad {

/// Dense row-major array of doubles with an explicit shape.
///
/// Shapes are rank 1 or 2 throughout this codebase; a scalar is a
/// rank-1 tensor with a single element. Dimensions must be positive:
/// zero-sized tensors are rejected at construction.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor scalar(double value);
    static Tensor row(std::initializer_list<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const;
    std::size_t cols() const;

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// "[4x3]" style shape rendering for error messages.
std::string shape_str(const std::vector<std::size_t>& shape);

/// Throws std::invalid_argument naming `context` if any value is NaN or Inf.
/// Used at ingest boundaries (file loads, config); internal ops skip it.
void check_finite(const Tensor& t, const std::string& context);

} // namespace mutualctr::ad
