#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ann/blocks.hpp"
#include "ann/tensor.hpp"

namespace ann {

// Exact fraction num/den with den > 0, kept in lowest terms.
struct Ratio {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Ratio of(std::uint64_t num, std::uint64_t den);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Ratio&) const = default;
};

// Multiply-accumulate counts (one MAC counted as one FLOP) and intermediate
// buffer sizes for one block evaluation. Softmax, bias adds and the combine
// step are not counted.
struct CostReport {
  BlockKind kind = BlockKind::nb;
  Shape3 query;      // X, or X_h for fusion blocks
  Shape3 keys;       // X, or X_l
  std::size_t embed_channels = 0;
  std::size_t out_channels = 0;

  std::uint64_t macs_phi = 0;
  std::uint64_t macs_key_value = 0;  // theta and gamma projections
  std::uint64_t macs_out = 0;        // W_o
  std::uint64_t macs_similarity = 0;
  std::uint64_t macs_aggregation = 0;
  std::uint64_t macs_pooling = 0;

  std::uint64_t anchors = 0;         // S (N_k for unsampled blocks)
  std::size_t element_bytes = 4;
  std::uint64_t similarity_bytes = 0;
  std::uint64_t peak_bytes = 0;

  std::uint64_t macs_matmul() const { return macs_similarity + macs_aggregation; }
  std::uint64_t macs_total() const {
    return macs_phi + macs_key_value + macs_out + macs_similarity + macs_aggregation + macs_pooling;
  }
  // T = S / N_k: the matmul cost relative to attending over every key position.
  Ratio complexity_ratio() const { return Ratio::of(anchors, keys.positions()); }
};

struct CostOptions {
  std::size_t element_bytes = 4;
};

CostReport estimate_nb(const Shape3& shape, const BlockConfig& cfg, const CostOptions& opts = {});
CostReport estimate_apnb(const Shape3& shape, const BlockConfig& cfg, const CostOptions& opts = {});
CostReport estimate_fusion(const Shape3& high, const Shape3& low, const BlockConfig& cfg, bool asymmetric,
                           const CostOptions& opts = {});
CostReport estimate(BlockKind kind, const Shape3& high, const std::optional<Shape3>& low, const BlockConfig& cfg,
                    const CostOptions& opts = {});

struct CostCase {
  BlockKind kind;
  BlockConfig cfg;
};

// Shape-major cross product; fusion kinds use each shape for both inputs
// with the configured low channel count.
std::vector<CostReport> sweep(const std::vector<Shape3>& shapes, const std::vector<CostCase>& cases,
                              const CostOptions& opts = {});

// block,H,W,C,Chat,S,macs_total,macs_matmul,peak_bytes,ratio where ratio is
// the saving factor N_k / S.
std::string cost_csv_header();
std::string cost_csv_row(const CostReport& r);

// One block/size entry of the reference NB-vs-APNB cost comparison
// (C = 2048, C-hat = 256, shared key/value projection, levels {1,3,6,8}).
struct ReferenceCost {
  BlockKind kind;
  std::size_t height;
  std::size_t width;
  double reported_gmacs;
  // Relative tolerance the estimate must meet; empty when the reference
  // figure is not reproducible under the MAC convention used here.
  std::optional<double> tolerance;
};

std::vector<ReferenceCost> reference_costs();
BlockConfig reference_config(BlockKind kind);

struct ReferenceComparison {
  ReferenceCost reference;
  CostReport estimate;
  double estimated_gmacs = 0.0;
  double relative_error = 0.0;
  bool asserted = false;
  bool within_tolerance = true;
};

std::vector<ReferenceComparison> compare_reference_costs(const CostOptions& opts = {});

}  // namespace ann
