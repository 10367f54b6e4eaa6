#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ann/blocks.hpp"
#include "ann/tensor.hpp"

namespace ann {

// Invalid experiment config; the message starts with the offending field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BenchOptions {
  unsigned warmup = 1;
  unsigned measured = 3;
  std::vector<BlockKind> blocks;  // unset: nb+apnb, or fnb+afnb for fusion configs
  unsigned threads = 1;
  std::size_t query_block = 0;
  std::uint64_t memory_budget_mb = 1024;
  std::optional<std::string> csv;
};

struct SweepOptions {
  std::vector<Shape3> shapes;     // channels ignored; H and W are swept
  std::vector<BlockKind> blocks;  // empty: the config's block
};

struct EquivalenceConfig {
  std::size_t cases = 50;
  bool corrupt = false;
};

struct ExperimentConfig {
  BlockKind block = BlockKind::nb;
  Shape3 shape{2, 4, 4};
  std::optional<Shape3> low_shape;
  BlockConfig block_config;  // channels filled from shape / low_shape
  std::uint64_t seed = 0;
  std::optional<std::string> output;
  std::size_t element_bytes = 4;
  BenchOptions bench;
  SweepOptions sweep;
  EquivalenceConfig equivalence;
  double gradcheck_eps = 1e-5;
};

// Strict parse: unknown keys and cross-field inconsistencies throw ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace ann
