#include "ann/sampling.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <utility>

#include "ann/rng.hpp"

namespace ann {

namespace {

constexpr std::array<std::pair<SampleMethod, std::string_view>, 7> kMethodNames{{
    {SampleMethod::average, "average"},
    {SampleMethod::max, "max"},
    {SampleMethod::random, "random"},
    {SampleMethod::pyramid_average, "pyramid_average"},
    {SampleMethod::pyramid_max, "pyramid_max"},
    {SampleMethod::pyramid_random, "pyramid_random"},
    {SampleMethod::identity, "identity"},
}};

PoolMode pool_mode(SampleMethod m) {
  switch (m) {
    case SampleMethod::average:
    case SampleMethod::pyramid_average:
      return PoolMode::average;
    case SampleMethod::max:
    case SampleMethod::pyramid_max:
      return PoolMode::max;
    default:
      return PoolMode::random;
  }
}

}  // namespace

std::string_view to_string(SampleMethod m) {
  for (auto [method, name] : kMethodNames) {
    if (method == m) return name;
  }
  return "unknown";
}

std::optional<SampleMethod> parse_sample_method(std::string_view name) {
  for (auto [method, n] : kMethodNames) {
    if (n == name) return method;
  }
  return std::nullopt;
}

bool SamplerSpec::is_pyramid() const {
  return method == SampleMethod::pyramid_average || method == SampleMethod::pyramid_max ||
         method == SampleMethod::pyramid_random;
}

void SamplerSpec::validate() const {
  if (is_identity()) return;
  if (levels.empty()) throw ParameterError("sampler levels must be nonempty for method " + std::string(to_string(method)));
  if (!is_pyramid() && levels.size() != 1) {
    throw ParameterError("sampler levels must hold exactly one size for flat method " +
                         std::string(to_string(method)));
  }
  for (auto n : levels) {
    if (n < 1) throw ParameterError("sampler levels entries must be >= 1");
  }
}

std::size_t anchor_count(const SamplerSpec& spec, std::size_t positions) {
  if (spec.is_identity()) return positions;
  std::size_t s = 0;
  for (auto n : spec.levels) s += n * n;
  return s;
}

BinRange adaptive_bin(std::size_t i, std::size_t n, std::size_t extent) {
  return {(i * extent) / n, ((i + 1) * extent + n - 1) / n};
}

std::size_t PoolRecord::outputs_per_channel() const {
  return mode == PoolMode::random ? sources.size() : n * n;
}

Pooled adaptive_pool_recorded(const Tensor& x, std::size_t n, PoolMode mode) {
  if (n < 1) throw ParameterError("adaptive_pool: output size n must be >= 1");
  if (mode == PoolMode::random) throw ParameterError("adaptive_pool: random mode is not a pooling mode");
  const Shape3 s = x.shape3();
  PoolRecord rec{mode, s, n, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    rec.row_bins.push_back(adaptive_bin(i, n, s.height));
    rec.col_bins.push_back(adaptive_bin(i, n, s.width));
  }
  if (mode == PoolMode::max) rec.sources.resize(s.channels * n * n);

  Tensor out({s.channels, n, n});
  const double* src = x.data().data();
  for (std::size_t c = 0; c < s.channels; ++c) {
    const double* plane = src + c * s.positions();
    for (std::size_t i = 0; i < n; ++i) {
      const auto rb = rec.row_bins[i];
      for (std::size_t j = 0; j < n; ++j) {
        const auto cb = rec.col_bins[j];
        const std::size_t o = (c * n + i) * n + j;
        if (mode == PoolMode::average) {
          double sum = 0.0;
          for (std::size_t h = rb.begin; h < rb.end; ++h) {
            for (std::size_t w = cb.begin; w < cb.end; ++w) sum += plane[h * s.width + w];
          }
          out[o] = sum / static_cast<double>((rb.end - rb.begin) * (cb.end - cb.begin));
        } else {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t arg = rb.begin * s.width + cb.begin;
          for (std::size_t h = rb.begin; h < rb.end; ++h) {
            for (std::size_t w = cb.begin; w < cb.end; ++w) {
              // strict > keeps the first row-major maximum on ties
              if (plane[h * s.width + w] > best) {
                best = plane[h * s.width + w];
                arg = h * s.width + w;
              }
            }
          }
          out[o] = best;
          rec.sources[o] = arg;
        }
      }
    }
  }
  return {std::move(out), std::move(rec)};
}

Tensor adaptive_pool(const Tensor& x, std::size_t n, PoolMode mode) {
  return adaptive_pool_recorded(x, n, mode).values;
}

std::vector<std::size_t> random_indices(std::size_t positions, std::size_t count, std::uint64_t seed) {
  if (count < 1) throw ParameterError("random_points: count must be >= 1");
  Xoshiro256 rng(seed);
  std::vector<std::size_t> idx(count);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.next_below(positions));
  return idx;
}

Pooled random_points_recorded(const Tensor& x, std::size_t count, std::uint64_t seed) {
  const Shape3 s = x.shape3();
  PoolRecord rec{PoolMode::random, s, 0, {}, {}, random_indices(s.positions(), count, seed)};
  Tensor values = gather_columns(flatten_spatial(x), rec.sources);
  return {std::move(values), std::move(rec)};
}

Tensor random_points(const Tensor& x, std::size_t count, std::uint64_t seed) {
  return random_points_recorded(x, count, seed).values;
}

std::uint64_t level_seed(const SamplerSpec& spec, std::size_t level_index) {
  return level_index == 0 ? spec.seed : derive_seed(spec.seed, level_index);
}

AnchorSet identity_sample(const Tensor& x) {
  const Shape3 s = x.shape3();
  return {flatten_spatial(x), SamplerSpec::identity(), s, {}};
}

AnchorSet pyramid_sample(const Tensor& x, const SamplerSpec& spec) {
  spec.validate();
  if (spec.is_identity()) return identity_sample(x);
  const Shape3 s = x.shape3();
  const PoolMode mode = pool_mode(spec.method);

  std::vector<Tensor> parts;
  std::vector<PoolRecord> records;
  for (std::size_t l = 0; l < spec.levels.size(); ++l) {
    const std::size_t n = spec.levels[l];
    Pooled p = mode == PoolMode::random ? random_points_recorded(x, n * n, level_seed(spec, l))
                                        : adaptive_pool_recorded(x, n, mode);
    parts.push_back(std::move(p.values).reshaped({s.channels, n * n}));
    records.push_back(std::move(p.record));
  }
  Tensor values = parts.size() == 1 ? std::move(parts.front()) : concat_columns(parts);
  return {std::move(values), spec, s, std::move(records)};
}

}  // namespace ann
