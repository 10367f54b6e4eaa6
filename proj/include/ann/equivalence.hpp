#pragma once

#include <cstdint>
#include <optional>

#include "ann/blocks.hpp"

namespace ann {

struct EquivalenceOptions {
  std::size_t cases = 50;
  std::uint64_t seed = 0;
  std::size_t max_side = 8;
  double tolerance = 1e-12;
  // Negative control: perturbs the sampled block's output projection so the
  // suite must fail.
  bool corrupt_weights = false;
};

struct EquivalenceResult {
  std::size_t cases = 0;
  double max_deviation = 0.0;
  std::optional<std::uint64_t> failing_seed;  // first case above tolerance
  bool passed() const { return !failing_seed; }
};

// Runs `kind` (apnb or afnb) with an identity sampler against its unsampled
// counterpart (nb or fnb) over random shapes, seeds and config regimes.
EquivalenceResult run_equivalence_suite(BlockKind kind, const EquivalenceOptions& opts = {});

}  // namespace ann
