#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ann/tensor.hpp"

namespace ann {

enum class SampleMethod { average, max, random, pyramid_average, pyramid_max, pyramid_random, identity };

std::string_view to_string(SampleMethod m);
std::optional<SampleMethod> parse_sample_method(std::string_view name);

// How key/value anchors are drawn from an embedded C x H x W map. Flat
// methods use levels.front() as their single output size.
struct SamplerSpec {
  SampleMethod method = SampleMethod::pyramid_average;
  std::vector<std::size_t> levels{1, 3, 6, 8};
  std::uint64_t seed = 0;

  bool is_pyramid() const;
  bool is_identity() const { return method == SampleMethod::identity; }
  // Throws ParameterError naming the offending field.
  void validate() const;

  static SamplerSpec identity() { return {SampleMethod::identity, {}, 0}; }
  static SamplerSpec pyramid_average(std::vector<std::size_t> levels) {
    return {SampleMethod::pyramid_average, std::move(levels), 0};
  }
};

// S for a spec; `positions` is N, used only by the identity method.
std::size_t anchor_count(const SamplerSpec& spec, std::size_t positions);

enum class PoolMode { average, max, random };

// Half-open input range [begin, end) aggregated by one output bin.
struct BinRange {
  std::size_t begin;
  std::size_t end;
};

// Bin i of an n-bin split of `extent`: [floor(i*extent/n), ceil((i+1)*extent/n)).
BinRange adaptive_bin(std::size_t i, std::size_t n, std::size_t extent);

// What a sampling step needs to route gradients back: bin ranges (average),
// per-output argmax flat spatial index (max) or drawn source positions (random).
struct PoolRecord {
  PoolMode mode = PoolMode::average;
  Shape3 input;
  std::size_t n = 1;                // average/max: output side length
  std::vector<BinRange> row_bins;   // average/max
  std::vector<BinRange> col_bins;   // average/max
  std::vector<std::size_t> sources; // max: C*n*n argmax h*W+w; random: drawn positions

  // Number of output columns per channel (n*n, or sources.size() for random).
  std::size_t outputs_per_channel() const;
};

struct Pooled {
  Tensor values;  // C x n x n for average/max, C x S for random
  PoolRecord record;
};

Tensor adaptive_pool(const Tensor& x, std::size_t n, PoolMode mode);
Pooled adaptive_pool_recorded(const Tensor& x, std::size_t n, PoolMode mode);

// `count` positions drawn uniformly with replacement from {0..N-1}.
std::vector<std::size_t> random_indices(std::size_t positions, std::size_t count, std::uint64_t seed);
Tensor random_points(const Tensor& x, std::size_t count, std::uint64_t seed);
Pooled random_points_recorded(const Tensor& x, std::size_t count, std::uint64_t seed);

struct AnchorSet {
  Tensor values;  // C x S
  SamplerSpec source_spec;
  Shape3 source_shape;
  std::vector<PoolRecord> records;  // one per level; empty for identity

  std::size_t count() const { return values.cols(); }
};

// Pools x at every level of `spec`, flattens each result to C x n^2 and
// concatenates them in level order. Identity specs are forwarded to
// identity_sample.
AnchorSet pyramid_sample(const Tensor& x, const SamplerSpec& spec);
AnchorSet identity_sample(const Tensor& x);

// Per-level seed used by random methods; level 0 (and so every flat spec)
// uses `seed` itself.
std::uint64_t level_seed(const SamplerSpec& spec, std::size_t level_index);

}  // namespace ann
