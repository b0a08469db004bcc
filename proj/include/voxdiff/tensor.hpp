#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "voxdiff/common.hpp"
#include "voxdiff/rng.hpp"

namespace voxdiff {

// Dense row-major tensor of small rank. Spatial data is laid out
// channel-major as (C, Z, Y, X); vectors and matrices use rank 1/2.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), T(0));
    }
    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
            throw std::invalid_argument("tensor data/shape size mismatch");
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int s : shape) n *= s;
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int size(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // rank-2 access (rows, cols)
    T& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    const T& at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }

    // rank-4 access (c, z, y, x)
    T& at(int c, int z, int y, int x) {
        return data_[((static_cast<size_t>(c) * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(int c, int z, int y, int x) const {
        return data_[((static_cast<size_t>(c) * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    void reshape(std::vector<int> shape) {
        if (numel_of(shape) != numel()) throw std::invalid_argument("reshape numel mismatch");
        shape_ = std::move(shape);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<T>(rng.normal());
        return t;
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

// y += a * x
template <typename T>
inline void axpy(T a, const Tensor<T>& x, Tensor<T>& y) {
    const T* xp = x.data();
    T* yp = y.data();
    for (int64_t i = 0, n = x.numel(); i < n; ++i) yp[i] += a * xp[i];
}

// Row-major C = alpha * op(A) * op(B) + beta * C.
// Dispatches to cblas sgemm/dgemm.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);

}  // namespace voxdiff
