#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <utility>
#include <stdexcept>
#include <string>
#include <vector>

namespace usv::nn {

/// 64-byte aligned storage. Eigen's vectorized kernels pick their
/// peeling by pointer alignment, so unaligned buffers would make results
/// depend on where malloc happened to put them.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  // Default-initialize, so sized construction without a value skips the zero fill.
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles. Batched tensors carry the batch as
/// dimension 0: [N, features] or [N, C, H, W].
struct Tensor {
  std::vector<int> shape;
  Buffer data;

  struct Uninitialized {};

  Tensor() = default;
  /// Storage left unwritten; the caller must fill every element.
  Tensor(std::vector<int> s, Uninitialized) : shape(std::move(s)), data(count(shape)) {}
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<int> s, const std::vector<double>& d) : shape(std::move(s)), data(d.begin(), d.end()) {
    if (data.size() != count(shape)) throw std::invalid_argument("Tensor: data size does not match shape " + shape_str());
  }

  static std::size_t count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  /// Elements per batch entry.
  std::size_t sample_size() const { return shape.empty() ? 0 : numel() / static_cast<std::size_t>(shape[0]); }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
  }

  Tensor zeros_like() const { return Tensor(shape); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Stack equally shaped per-sample tensors along a new batch dimension.
inline Tensor stack(const std::vector<Tensor>& samples) {
  if (samples.empty()) throw std::invalid_argument("stack: no samples");
  std::vector<int> shape{static_cast<int>(samples.size())};
  shape.insert(shape.end(), samples[0].shape.begin(), samples[0].shape.end());
  Tensor out(shape);
  const std::size_t n = samples[0].numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].shape != samples[0].shape)
      throw std::invalid_argument("stack: shape mismatch " + samples[i].shape_str() + " vs " + samples[0].shape_str());
    std::copy(samples[i].data.begin(), samples[i].data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return out;
}

/// Batch entry i of a batched tensor, without the batch dimension.
inline Tensor unstack(const Tensor& batch, std::size_t i) {
  std::vector<int> shape(batch.shape.begin() + 1, batch.shape.end());
  const std::size_t n = batch.sample_size();
  Tensor out(shape);
  std::copy_n(batch.data.begin() + static_cast<std::ptrdiff_t>(i * n), n, out.data.begin());
  return out;
}

/// Prepend a batch dimension of one.
inline Tensor as_batch(Tensor t) {
  t.shape.insert(t.shape.begin(), 1);
  return t;
}

}  // namespace usv::nn
