#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "anrot/errors.hpp"

namespace anrot {

/// Dense row-major array of rank 1..4. Rank-4 tensors are laid out as
/// (batch, channel, height, width).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims, T fill = T(0)) : dims_(std::move(dims)) {
    for (int d : dims_) require(d >= 1, "Tensor: every dimension must be >= 1");
    data_.assign(count(dims_), fill);
  }
  Tensor(std::vector<int> dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    for (int d : dims_) require(d >= 1, "Tensor: every dimension must be >= 1");
    require(data_.size() == count(dims_), "Tensor: data length does not match dims");
  }

  static std::size_t count(const std::vector<int>& dims) {
    if (dims.empty()) return 0;
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  const std::vector<int>& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // rank-4 helpers
  int batch() const { return dims_[0]; }
  int channels() const { return dims_[1]; }
  int height() const { return dims_[2]; }
  int width() const { return dims_[3]; }
  std::size_t offset(int b, int c, int h, int w) const {
    return ((static_cast<std::size_t>(b) * dims_[1] + c) * dims_[2] + h) * dims_[3] + w;
  }
  T& at(int b, int c, int h, int w) { return data_[offset(b, c, h, w)]; }
  const T& at(int b, int c, int h, int w) const { return data_[offset(b, c, h, w)]; }

  Tensor reshaped(std::vector<int> dims) const {
    require(count(dims) == data_.size(), "Tensor::reshaped: element count changes");
    return Tensor(std::move(dims), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<int> dims_;
  std::vector<T> data_;
};

/// Images and feature maps.
template <class T = double>
using Tensor4 = Tensor<T>;

inline std::string dims_string(const std::vector<int>& dims) {
  std::string s = "(";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s + ")";
}

/// Copy images [first, first + n) of a rank-4 batch.
template <class T>
Tensor<T> batch_slice(const Tensor<T>& x, int first, int n) {
  require(x.rank() == 4 && first >= 0 && n >= 1 && first + n <= x.batch(), "batch_slice: range");
  const std::size_t per = x.size() / static_cast<std::size_t>(x.batch());
  std::vector<int> dims = x.dims();
  dims[0] = n;
  std::vector<T> data(x.data().begin() + static_cast<std::ptrdiff_t>(per * first),
                      x.data().begin() + static_cast<std::ptrdiff_t>(per * (first + n)));
  return Tensor<T>(std::move(dims), std::move(data));
}

/// Stack single images (or batches) along the batch axis.
template <class T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  require(!parts.empty(), "concat_batch: nothing to concatenate");
  std::vector<int> dims = parts.front().dims();
  require(dims.size() == 4, "concat_batch: rank-4 tensors expected");
  int total = 0;
  std::vector<T> data;
  for (const auto& p : parts) {
    require(p.rank() == 4 && p.channels() == dims[1] && p.height() == dims[2] &&
                p.width() == dims[3],
            "concat_batch: image shapes differ");
    total += p.batch();
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  dims[0] = total;
  return Tensor<T>(std::move(dims), std::move(data));
}

template <class T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  return concat_batch(std::span<const Tensor<T>>(parts));
}

// Row-major C(MxN) (+)= A(MxK) * B(KxN). The inner loop is a contiguous axpy
// so it vectorizes without reassociating sums.
template <class T>
void gemm(int M, int N, int K, const T* __restrict A, const T* __restrict B, T* __restrict C,
          bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<std::size_t>(M) * N, T(0));
  for (int i = 0; i < M; ++i) {
    T* __restrict crow = C + static_cast<std::size_t>(i) * N;
    const T* arow = A + static_cast<std::size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const T a = arow[k];
      if (a == T(0)) continue;
      const T* __restrict brow = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

template <class T>
void transpose(int rows, int cols, const T* __restrict src, T* __restrict dst) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
}

}  // namespace anrot
