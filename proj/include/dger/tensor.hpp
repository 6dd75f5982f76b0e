#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>
#include <vector>

#include "dger/common.hpp"
#include "dger/rng.hpp"

namespace dger {

// Dense row-major tensor of doubles. Rank is 1..3 in practice: vectors,
// (rows x cols) matrices, and (out x in x k) convolution kernels.
// Everything in this codebase is double precision.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        v_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        if (static_cast<long long>(v_.size()) != count(shape_))
            fail(strfmt("Tensor: %zu values for shape %s", v_.size(), shape_str(shape_).c_str()));
    }

    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor filled(std::vector<int> shape, double x) {
        Tensor t(std::move(shape));
        std::fill(t.v_.begin(), t.v_.end(), x);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : t.v_) x = rng.normal(0.0, stddev);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    // Matrix accessors; rank-2 only.
    int rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.size() == 1 ? 1 : -1); }
    int cols() const { return shape_.size() == 2 ? shape_[1] : (shape_.size() == 1 ? shape_[0] : -1); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }

    double& at(int r, int c) { return v_[static_cast<std::size_t>(r) * shape_[1] + c]; }
    double at(int r, int c) const { return v_[static_cast<std::size_t>(r) * shape_[1] + c]; }

    double item() const {
        if (v_.size() != 1) fail(strfmt("Tensor::item on %s tensor", shape_str(shape_).c_str()));
        return v_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double x : v_) m = std::max(m, std::fabs(x));
        return m;
    }

    static long long count(const std::vector<int>& shape) {
        long long n = 1;
        for (int d : shape) {
            if (d < 0) fail("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

    std::string shape_str() const { return shape_str(shape_); }

private:
    std::vector<int> shape_;
    std::vector<double> v_;
};

inline bool approx_equal(const Tensor& a, const Tensor& b, double tol) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (std::fabs(a[i] - b[i]) > tol) return false;
    return true;
}

}  // namespace dger
