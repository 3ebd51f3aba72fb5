#ifndef NRSEG_TENSOR_HPP
#define NRSEG_TENSOR_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "nrseg/common.hpp"

namespace nrseg {

// Dense row-major double tensor. Deliberately minimal: storage, shape,
// and the handful of helpers the autodiff layer builds on.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
    }
    Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), fill);
    }
    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
            throw DimensionError("tensor data size does not match shape");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // (c, h, w) accessor for CHW tensors.
    double& at(int c, int h, int w) {
        return data_[static_cast<size_t>((static_cast<int64_t>(c) * shape_[1] + h) * shape_[2] + w)];
    }
    double at(int c, int h, int w) const {
        return data_[static_cast<size_t>((static_cast<int64_t>(c) * shape_[1] + h) * shape_[2] + w)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace nrseg

#endif  // NRSEG_TENSOR_HPP
