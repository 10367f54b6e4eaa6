#include "ann/tensor.hpp"

#include <Eigen/Core>

#if defined(ANN_HAVE_LIBMVEC)
#include <immintrin.h>
#endif

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>

#include "ann/rng.hpp"

namespace ann {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>{});
}

void check_dims(const Dims& dims) {
  if (dims.empty() || dims.size() > 3) {
    throw ShapeError("tensor rank must be 1..3, got " + std::to_string(dims.size()));
  }
  for (auto d : dims) {
    if (d == 0) throw ShapeError("zero dimension in shape " + to_string(dims));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got shape " + to_string(a.dims()));
  }
}

ConstMap as_matrix(const Tensor& a) {
  return ConstMap(a.data().data(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
}

MutMap as_matrix(Tensor& a) {
  return MutMap(a.mutable_data().data(), static_cast<Eigen::Index>(a.dim(0)),
                static_cast<Eigen::Index>(a.dim(1)));
}

}  // namespace

std::string to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Dims dims) : dims_(std::move(dims)) {
  check_dims(dims_);
  data_.assign(product(dims_), 0.0);
}

Tensor::Tensor(Dims dims, Storage values) : dims_(std::move(dims)), data_(std::move(values)) {
  check_dims(dims_);
  if (data_.size() != product(dims_)) {
    throw ShapeError("shape " + to_string(dims_) + " expects " + std::to_string(product(dims_)) +
                     " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::uninitialized(Dims dims) {
  check_dims(dims);
  Storage values(product(dims));
  return Tensor(std::move(dims), std::move(values));
}

Tensor Tensor::full(Dims dims, double value) {
  Tensor t(std::move(dims));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2 || i >= dims_[0] || j >= dims_[1]) throw ShapeError("at(i, j) out of range");
  return data_[i * dims_[1] + j];
}

double Tensor::at(std::size_t c, std::size_t h, std::size_t w) const {
  if (rank() != 3 || c >= dims_[0] || h >= dims_[1] || w >= dims_[2]) {
    throw ShapeError("at(c, h, w) out of range");
  }
  return data_[(c * dims_[1] + h) * dims_[2] + w];
}

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return dims_[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return dims_[1];
}

Tensor Tensor::reshaped(Dims dims) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(dims));
}

Tensor Tensor::reshaped(Dims dims) && {
  check_dims(dims);
  if (product(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(dims_) + " to " + to_string(dims));
  }
  dims_ = std::move(dims);
  return std::move(*this);
}

Shape3 Tensor::shape3() const {
  if (rank() != 3) throw ShapeError("expected C x H x W tensor, got " + to_string(dims_));
  return {dims_[0], dims_[1], dims_[2]};
}

Tensor from_values(Dims dims, std::span<const double> values) {
  return Tensor(std::move(dims), Tensor::Storage(values.begin(), values.end()));
}

Tensor from_values(Dims dims, std::initializer_list<double> values) {
  return Tensor(std::move(dims), Tensor::Storage(values.begin(), values.end()));
}

Tensor flatten_spatial(const Tensor& x) {
  Shape3 s = x.shape3();
  return x.reshaped({s.channels, s.positions()});
}

void matmul_into(const Tensor& a, const Tensor& b, Tensor& out, unsigned threads) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.dims()) + " x " + to_string(b.dims()));
  }
  if (out.rank() != 2 || out.dim(0) != a.dim(0) || out.dim(1) != b.dim(1)) {
    throw ShapeError("matmul: output " + to_string(out.dims()) + " does not fit " + to_string(a.dims()) + " x " +
                     to_string(b.dims()));
  }
  const auto lhs = as_matrix(a);
  const auto rhs = as_matrix(b);
  auto res = as_matrix(out);
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  if (threads <= 1 || m < 2 * static_cast<Eigen::Index>(threads)) {
    res.noalias() = lhs * rhs;
    return;
  }
  const Eigen::Index step = (m + threads - 1) / threads;
  std::vector<std::jthread> workers;
  for (Eigen::Index r0 = 0; r0 < m; r0 += step) {
    const Eigen::Index len = std::min(step, m - r0);
    workers.emplace_back([&, r0, len] { res.middleRows(r0, len).noalias() = lhs.middleRows(r0, len) * rhs; });
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul(a, b, 1); }

Tensor matmul(const Tensor& a, const Tensor& b, unsigned threads) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  Tensor out = Tensor::uninitialized({a.dim(0), b.dim(1)});
  matmul_into(a, b, out, threads);
  return out;
}

Tensor transpose2d(const Tensor& a) {
  require_rank2(a, "transpose2d");
  const std::size_t m = a.dim(0), k = a.dim(1);
  Tensor out = Tensor::uninitialized({k, m});
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += tile) {
    for (std::size_t j0 = 0; j0 < k; j0 += tile) {
      const std::size_t i1 = std::min(m, i0 + tile), j1 = std::min(k, j0 + tile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * m + i] = src[i * k + j];
      }
    }
  }
  return out;
}

namespace {

#if defined(ANN_HAVE_LIBMVEC) && defined(__AVX512F__)
// glibc's vector exp (libmvec), about twice Eigen's throughput on doubles.
extern "C" __m512d _ZGVeN8v_exp(__m512d);

void exp_inplace(double* p, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm512_storeu_pd(p + i, _ZGVeN8v_exp(_mm512_loadu_pd(p + i)));
  if (i < n) {
    const __mmask8 mask = static_cast<__mmask8>((1u << (n - i)) - 1);
    _mm512_mask_storeu_pd(p + i, mask, _ZGVeN8v_exp(_mm512_maskz_loadu_pd(mask, p + i)));
  }
}
#elif defined(ANN_HAVE_LIBMVEC) && defined(__AVX2__)
extern "C" __m256d _ZGVdN4v_exp(__m256d);

void exp_inplace(double* p, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(p + i, _ZGVdN4v_exp(_mm256_loadu_pd(p + i)));
  for (; i < n; ++i) p[i] = std::exp(p[i]);
}
#else
void exp_inplace(double* p, std::size_t n) {
  Eigen::Map<Eigen::ArrayXd> a(p, static_cast<Eigen::Index>(n));
  a = a.exp();
}
#endif

// `src` and `dst` may be the same buffer.
void softmax_kernel(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  const auto m = static_cast<Eigen::Index>(rows), k = static_cast<Eigen::Index>(cols);
  const ConstMap in(src, m, k);
  MutMap res(dst, m, k);
  for (Eigen::Index r = 0; r < m; ++r) {
    // x * 0 is 0 for finite x and NaN for NaN or +-Inf; Eigen vectorizes
    // this sum, unlike allFinite().
    if (std::isnan((in.row(r).array() * 0.0).sum())) throw NumericError("softmax_rows: non-finite input");
    const double row_max = in.row(r).maxCoeff();
    auto row = res.row(r).array();
    row = in.row(r).array() - row_max;
    exp_inplace(dst + r * k, cols);
    row *= 1.0 / row.sum();
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  require_rank2(a, "softmax_rows");
  Tensor out = Tensor::uninitialized(a.dims());
  softmax_kernel(a.data().data(), out.mutable_data().data(), a.dim(0), a.dim(1));
  return out;
}

void softmax_rows_inplace(Tensor& a) {
  require_rank2(a, "softmax_rows");
  softmax_kernel(a.data().data(), a.mutable_data().data(), a.dim(0), a.dim(1));
}

Tensor rescale_rows(const Tensor& a) {
  require_rank2(a, "rescale_rows");
  return scale(a, 1.0 / static_cast<double>(a.dim(1)));
}

void rescale_rows_inplace(Tensor& a) {
  require_rank2(a, "rescale_rows");
  const double factor = 1.0 / static_cast<double>(a.dim(1));
  for (auto& v : a.mutable_data()) v *= factor;
}

Tensor linear_project(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  require_rank2(x, "linear_project");
  require_rank2(weight, "linear_project");
  if (weight.dim(1) != x.dim(0)) {
    throw ShapeError("linear_project: weight " + to_string(weight.dims()) + " does not match input " +
                     to_string(x.dims()));
  }
  Tensor out = matmul(weight, x);
  if (bias) {
    if (bias->rank() != 1 || bias->dim(0) != weight.dim(0)) {
      throw ShapeError("linear_project: bias " + to_string(bias->dims()) + " does not match " +
                       std::to_string(weight.dim(0)) + " output channels");
    }
    auto res = as_matrix(out);
    Eigen::Map<const Eigen::VectorXd> b(bias->data().data(), static_cast<Eigen::Index>(bias->size()));
    res.colwise() += b;
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || !std::equal(a.dims().begin() + 1, a.dims().end(), b.dims().begin() + 1)) {
    throw ShapeError("concat_channels: trailing dims differ, " + to_string(a.dims()) + " vs " +
                     to_string(b.dims()));
  }
  Dims dims = a.dims();
  dims[0] += b.dim(0);
  Tensor::Storage values;
  values.reserve(a.size() + b.size());
  values.insert(values.end(), a.data().begin(), a.data().end());
  values.insert(values.end(), b.data().begin(), b.data().end());
  return Tensor(std::move(dims), std::move(values));
}

Tensor concat_columns(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_columns: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_columns: row counts differ");
    total += p.cols();
  }
  Tensor out({rows, total});
  double* dst = out.mutable_data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (const auto& p : parts) {
      const double* src = p.data().data() + r * p.cols();
      dst = std::copy(src, src + p.cols(), dst);
    }
  }
  return out;
}

Tensor gather_columns(const Tensor& a, std::span<const std::size_t> columns) {
  require_rank2(a, "gather_columns");
  if (columns.empty()) throw ShapeError("gather_columns: empty column list");
  Tensor out({a.rows(), columns.size()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t k = 0; k < columns.size(); ++k) {
      if (columns[k] >= a.cols()) throw ShapeError("gather_columns: column index out of range");
      out[r * columns.size() + k] = a[r * a.cols() + columns[k]];
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("add: shapes differ, " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  }
  Tensor out = Tensor::uninitialized(a.dims());
  auto lhs = a.data(), rhs = b.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = lhs[i] + rhs[i];
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = Tensor::uninitialized(a.dims());
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i] * factor;
  return out;
}

Tensor seeded_fill(Dims dims, std::uint64_t seed, Distribution dist) {
  Tensor out(std::move(dims));
  Xoshiro256 rng(seed);
  auto dst = out.mutable_data();
  if (dist == Distribution::uniform_pm1) {
    for (auto& v : dst) v = 2.0 * rng.next_unit() - 1.0;
    return out;
  }
  // Marsaglia polar method; consumes pairs, the spare is used for the next element.
  constexpr double sigma = 0.02;
  std::size_t i = 0;
  while (i < dst.size()) {
    double u, v, s;
    do {
      u = 2.0 * rng.next_unit() - 1.0;
      v = 2.0 * rng.next_unit() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    dst[i++] = sigma * u * m;
    if (i < dst.size()) dst[i++] = sigma * v * m;
  }
  return out;
}

bool all_finite(const Tensor& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("max_abs_diff: shapes differ, " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::uint64_t Xoshiro256::next_below(std::uint64_t bound) {
  if (bound == 0) return 0;
  unsigned __int128 m = static_cast<unsigned __int128>(next()) * bound;
  auto low = static_cast<std::uint64_t>(m);
  if (low < bound) {
    const std::uint64_t threshold = -bound % bound;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(next()) * bound;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

}  // namespace ann
