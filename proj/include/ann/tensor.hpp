#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ann/alloc_tracker.hpp"
#include "ann/errors.hpp"

namespace ann {

using Dims = std::vector<std::size_t>;

// Channel/height/width of a single feature map; positions() is N = H*W.
struct Shape3 {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t positions() const { return height * width; }
  std::size_t elements() const { return channels * height * width; }
  Dims dims() const { return {channels, height, width}; }
  bool operator==(const Shape3&) const = default;
};

std::string to_string(const Dims& dims);

// Dense row-major tensor of rank 1..3 holding doubles. Storage is counted by
// AllocTracker.
class Tensor {
 public:
  using Storage = std::vector<double, TrackingAllocator<double>>;

  // Zero-filled.
  explicit Tensor(Dims dims);
  Tensor(Dims dims, Storage values);

  static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }
  static Tensor full(Dims dims, double value);
  // Contents unspecified; for outputs whose every element is written next.
  static Tensor uninitialized(Dims dims);

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }
  std::size_t bytes() const { return data_.size() * sizeof(double); }

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }

  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator[](std::size_t flat) { return data_[flat]; }
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t c, std::size_t h, std::size_t w) const;

  std::size_t rows() const;  // first dim of a rank-2 tensor
  std::size_t cols() const;  // second dim of a rank-2 tensor

  // Same data under a new shape with equal element count.
  Tensor reshaped(Dims dims) const&;
  Tensor reshaped(Dims dims) &&;

  Shape3 shape3() const;  // requires rank 3

  bool operator==(const Tensor& other) const = default;

 private:
  Dims dims_;
  Storage data_;
};

Tensor from_values(Dims dims, std::span<const double> values);
Tensor from_values(Dims dims, std::initializer_list<double> values);

// Flattens C x H x W to C x N, mapping (h, w) to h * W + w.
Tensor flatten_spatial(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
// Splits the rows of `a` across `threads` workers; threads <= 1 is matmul(a, b).
Tensor matmul(const Tensor& a, const Tensor& b, unsigned threads);
// Writes a x b into `out`, which must already be M x P.
void matmul_into(const Tensor& a, const Tensor& b, Tensor& out, unsigned threads = 1);
Tensor transpose2d(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor rescale_rows(const Tensor& a);
// In-place forms, bitwise equal to the functions above.
void softmax_rows_inplace(Tensor& a);
void rescale_rows_inplace(Tensor& a);
Tensor linear_project(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);
inline Tensor linear_project(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
  return linear_project(x, weight, bias ? &*bias : nullptr);
}
// Concatenates along dim 0; remaining dims must match.
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Concatenates rank-2 tensors along dim 1 (the anchor axis).
Tensor concat_columns(std::span<const Tensor> parts);
// Selects columns of a rank-2 tensor.
Tensor gather_columns(const Tensor& a, std::span<const std::size_t> columns);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

enum class Distribution { uniform_pm1, gaussian_002 };

// Deterministic fill: uniform(-1, 1) or gaussian(0, 0.02) drawn from
// Xoshiro256 seeded with `seed`.
Tensor seeded_fill(Dims dims, std::uint64_t seed, Distribution dist);

bool all_finite(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace ann
