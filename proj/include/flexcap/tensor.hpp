#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

namespace flexcap {

// Dense row-major tensor. Rank is dynamic but in practice 1 or 2; the hot
// kernels in nn.hpp index raw data() directly, this type just owns storage
// and shape metadata (for checkpoints, grad flattening, shape checks).
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::initializer_list<int> dims) { resize(dims); }

    void resize(std::initializer_list<int> dims) {
        shape.assign(dims.begin(), dims.end());
        data.assign(numel_of(shape), T(0));
    }
    void resize(const std::vector<int>& dims) {
        shape = dims;
        data.assign(numel_of(shape), T(0));
    }

    static size_t numel_of(const std::vector<int>& dims) {
        size_t n = 1;
        for (int d : dims) n *= static_cast<size_t>(d);
        return n;
    }

    size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    // 1-D / 2-D accessors (debug-checked)
    T& operator()(int i) {
        assert(rank() == 1 && i >= 0 && i < shape[0]);
        return data[static_cast<size_t>(i)];
    }
    T operator()(int i) const {
        assert(rank() == 1 && i >= 0 && i < shape[0]);
        return data[static_cast<size_t>(i)];
    }
    T& operator()(int i, int j) {
        assert(rank() == 2 && i >= 0 && i < shape[0] && j >= 0 && j < shape[1]);
        return data[static_cast<size_t>(i) * shape[1] + j];
    }
    T operator()(int i, int j) const {
        assert(rank() == 2 && i >= 0 && i < shape[0] && j >= 0 && j < shape[1]);
        return data[static_cast<size_t>(i) * shape[1] + j];
    }

    // row pointer for 2-D tensors
    T* row(int i) { return data.data() + static_cast<size_t>(i) * shape[1]; }
    const T* row(int i) const {
        return data.data() + static_cast<size_t>(i) * shape[1];
    }

    void zero() { std::fill(data.begin(), data.end(), T(0)); }
};

using Tensor = TensorT<float>;

}  // namespace flexcap
