#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ann/blocks.hpp"
#include "ann/tensor.hpp"

namespace ann {

// Forward-pass phases timed by the harness, in execution order.
enum class Phase { projection, sampling, similarity, normalization, aggregation, output_projection, combine };
inline constexpr std::size_t kPhaseCount = 7;
inline constexpr std::array<Phase, kPhaseCount> kPhases{Phase::projection,  Phase::sampling,
                                                        Phase::similarity,  Phase::normalization,
                                                        Phase::aggregation, Phase::output_projection,
                                                        Phase::combine};
std::string_view to_string(Phase p);

struct BenchSpec {
  BlockKind kind = BlockKind::nb;
  Shape3 shape;                    // query input (C x H x W)
  std::optional<Shape3> low_shape; // key/value input for fusion kinds
  BlockConfig cfg;
  unsigned warmup = 1;
  unsigned measured = 3;
  std::uint64_t seed = 0;
  // Query rows per similarity chunk; 0 picks the largest count whose chunk
  // buffer, sized for every key position, fits in half of memory_budget, so
  // NB and APNB at one shape chunk identically.
  std::size_t query_block = 0;
  std::uint64_t memory_budget = std::uint64_t{1} << 30;
  unsigned threads = 1;

  // Throws ParameterError.
  void validate() const;
  std::size_t resolved_query_block() const;
  std::size_t key_positions() const;
};

struct PhaseStats {
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;

  void add(double ms);
};

struct BenchReport {
  BlockKind kind = BlockKind::nb;
  Shape3 shape;
  std::optional<Shape3> low_shape;
  std::size_t embed_channels = 0;
  std::size_t anchors = 0;
  std::size_t query_block = 0;
  unsigned warmup = 0;
  unsigned measured = 0;
  std::array<PhaseStats, kPhaseCount> phases;
  PhaseStats total;
  std::uint64_t peak_bytes = 0;        // tracked high-water mark above the pre-run baseline
  std::uint64_t similarity_bytes = 0;  // tracked size of one similarity chunk
  std::uint64_t bound_bytes = 0;       // analytic upper bound on peak_bytes
  std::string cpu_model;
  unsigned threads = 1;

  const PhaseStats& phase(Phase p) const { return phases[static_cast<std::size_t>(p)]; }
  // False for unsampled blocks and identity samplers.
  bool samples() const;
};

// Per-phase milliseconds of one instrumented forward.
struct PhaseTimes {
  std::array<double, kPhaseCount> ms{};
  std::uint64_t similarity_bytes = 0;
};

// Same math as block_forward, split into timed phases and chunked over query
// rows. `low` is required for fusion kinds.
Tensor instrumented_forward(BlockKind kind, const Tensor& high, const Tensor* low, const BlockConfig& cfg,
                            const BlockWeights& w, std::size_t query_block, unsigned threads, PhaseTimes& times);

// Upper bound on tensor bytes allocated by one instrumented forward.
std::uint64_t instrumented_bound_bytes(const BenchSpec& spec);
// Inputs, weights and the forward bound; used by the memory preflight.
std::uint64_t required_bytes(const BenchSpec& spec);
std::optional<std::uint64_t> available_memory_bytes();
std::string cpu_model_name();

// Runs warmups then measured iterations. Only one benchmark may run per
// process at a time; a concurrent call throws ParameterError.
BenchReport run_bench(const BenchSpec& spec);

struct BenchComparison {
  std::string baseline;
  std::string candidate;
  double speedup = 1.0;                  // baseline mean total / candidate mean total
  double memory_ratio = 1.0;             // baseline peak / candidate peak
  double similarity_buffer_ratio = 1.0;  // baseline similarity chunk / candidate chunk
  // Empty for the sampling phase unless both blocks sample.
  std::array<std::optional<double>, kPhaseCount> phase_speedup{};
};

// Throws ParameterError unless both reports share shape and channel basis.
BenchComparison compare(const BenchReport& baseline, const BenchReport& candidate);

nlohmann::json to_json(const BenchReport& r);
nlohmann::json to_json(const BenchComparison& c);
std::string phase_csv(const std::vector<BenchReport>& reports);
std::string format_table(const BenchReport& r);
std::string format_table(const BenchComparison& c);

}  // namespace ann
