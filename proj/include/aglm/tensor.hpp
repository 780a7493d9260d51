// Dense row-major tensor. Copies share the underlying buffer (cheap handle
// semantics); use clone() for an independent copy. Scalar type is a template
// parameter: float for training and inference, double for gradient
// verification.
#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aglm/errors.hpp"

namespace aglm {

inline std::string shape_str(std::span<const std::size_t> shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
class Tensor {
public:
    Tensor() : shape_{0}, data_(std::make_shared<std::vector<T>>()) {}

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(count(shape_), T{})) {}

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, T value) {
        Tensor t(std::move(shape));
        for (T& x : *t.data_) x = value;
        return t;
    }

    static Tensor from_values(std::vector<std::size_t> shape, std::vector<T> values) {
        if (count(shape) != values.size()) {
            fail(Error::Kind::contract, "tensor data length ", values.size(),
                 " does not match shape ", shape_str(shape));
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t numel() const { return data_->size(); }
    bool empty() const { return data_->empty(); }

    // Shallow const, as with shared_ptr: a const handle still exposes a
    // mutable buffer. Backward closures rely on this when they capture
    // gradient handles by value.
    std::span<T> data() const { return {data_->data(), data_->size()}; }
    T* ptr() const { return data_->data(); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool shares_data(const Tensor& other) const { return data_ == other.data_; }

    // New shape over the same buffer.
    Tensor reshaped(std::vector<std::size_t> shape) const {
        if (count(shape) != numel()) {
            fail(Error::Kind::contract, "cannot reshape ", shape_str(shape_), " (", numel(),
                 " elements) to ", shape_str(shape));
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    void fill(T value) {
        for (T& x : *data_) x = value;
    }

    T& at(std::size_t i) const { return (*data_)[i]; }
    T& at(std::size_t i, std::size_t j) const { return (*data_)[i * shape_[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return (*data_)[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool all_finite() const {
        for (T x : *data_) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::shared_ptr<std::vector<T>> data_;
};

// Raw matrix kernels. All accumulate into c, so callers zero c for a plain
// product and pass gradients directly for accumulation. Loop orders keep the
// innermost stride unit-length.
namespace kern {

// c[M,N] += a[M,K] * b[K,N]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            T av = arow[p];
            if (av == T{}) continue;
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c[M,N] += a[M,K] * b[N,K]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc{};
            for (std::size_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

// c[M,N] += a[K,M]^T * b[K,N]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            T av = arow[i];
            if (av == T{}) continue;
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace kern

}  // namespace aglm
