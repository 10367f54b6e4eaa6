#include "ann/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace ann {

Ratio Ratio::of(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw ParameterError("ratio with zero denominator");
  const std::uint64_t g = std::gcd(num, den);
  return g == 0 ? Ratio{0, 1} : Ratio{num / g, den / g};
}

namespace {

std::uint64_t pooling_passes(const BlockConfig& cfg) {
  if (!cfg.sampler || cfg.sampler->is_identity()) return 0;
  switch (cfg.sampler->method) {
    case SampleMethod::random:
    case SampleMethod::pyramid_random:
      return 0;  // a gather, no arithmetic
    default:
      return cfg.sampler->levels.size();
  }
}

CostReport build(BlockKind kind, const Shape3& q, const Shape3& k, const BlockConfig& cfg, bool sampled,
                 const CostOptions& opts) {
  cfg.validate();
  if (sampled && !cfg.sampler) throw ParameterError(std::string(to_string(kind)) + " cost needs a sampler");
  const std::uint64_t nq = q.positions(), nk = k.positions();
  const std::uint64_t e = cfg.embed_channels;
  const std::uint64_t out = cfg.output_projection_channels();
  const std::uint64_t kv_projections = cfg.share_key_value ? 1 : 2;
  const std::uint64_t s = sampled ? anchor_count(*cfg.sampler, nk) : nk;

  CostReport r;
  r.kind = kind;
  r.query = q;
  r.keys = k;
  r.embed_channels = cfg.embed_channels;
  r.out_channels = cfg.output_projection_channels();
  r.macs_phi = nq * q.channels * e;
  r.macs_key_value = kv_projections * nk * k.channels * e;
  r.macs_out = out * e * nq;
  r.macs_similarity = nq * s * e;
  r.macs_aggregation = nq * s * e;
  r.macs_pooling = sampled ? pooling_passes(cfg) * kv_projections * e * nk : 0;
  r.anchors = s;
  r.element_bytes = opts.element_bytes;
  r.similarity_bytes = nq * s * opts.element_bytes;

  // Live element counts at the three widest points of the forward pass.
  const std::uint64_t embeddings = e * nq + kv_projections * e * nk;
  const std::uint64_t anchors = sampled ? kv_projections * e * s : 0;
  const std::uint64_t at_normalize = embeddings + anchors + 2 * nq * s;
  const std::uint64_t at_aggregate = embeddings + anchors + nq * s + nq * e;
  const std::uint64_t result = (cfg.combine == Combine::concat ? out + q.channels : q.channels) * nq;
  const std::uint64_t at_output = nq * e + out * nq + result;
  r.peak_bytes = std::max({at_normalize, at_aggregate, at_output}) * opts.element_bytes;
  return r;
}

}  // namespace

CostReport estimate_nb(const Shape3& shape, const BlockConfig& cfg, const CostOptions& opts) {
  return build(BlockKind::nb, shape, shape, cfg, false, opts);
}

CostReport estimate_apnb(const Shape3& shape, const BlockConfig& cfg, const CostOptions& opts) {
  return build(BlockKind::apnb, shape, shape, cfg, true, opts);
}

CostReport estimate_fusion(const Shape3& high, const Shape3& low, const BlockConfig& cfg, bool asymmetric,
                           const CostOptions& opts) {
  return build(asymmetric ? BlockKind::afnb : BlockKind::fnb, high, low, cfg, asymmetric, opts);
}

CostReport estimate(BlockKind kind, const Shape3& high, const std::optional<Shape3>& low, const BlockConfig& cfg,
                    const CostOptions& opts) {
  switch (kind) {
    case BlockKind::nb:
      return estimate_nb(high, cfg, opts);
    case BlockKind::apnb:
      return estimate_apnb(high, cfg, opts);
    case BlockKind::fnb:
    case BlockKind::afnb:
      break;
  }
  if (!low) throw ParameterError("fusion cost needs a low-level shape");
  return estimate_fusion(high, *low, cfg, kind == BlockKind::afnb, opts);
}

std::vector<CostReport> sweep(const std::vector<Shape3>& shapes, const std::vector<CostCase>& cases,
                              const CostOptions& opts) {
  if (shapes.empty() || cases.empty()) throw ParameterError("sweep needs at least one shape and one config");
  std::vector<CostReport> rows;
  rows.reserve(shapes.size() * cases.size());
  for (const auto& s : shapes) {
    for (const auto& c : cases) {
      Shape3 high = s;
      high.channels = c.cfg.in_channels;
      Shape3 low = s;
      low.channels = c.cfg.key_channels();
      rows.push_back(estimate(c.kind, high, low, c.cfg, opts));
    }
  }
  return rows;
}

std::string cost_csv_header() { return "block,H,W,C,Chat,S,macs_total,macs_matmul,peak_bytes,ratio"; }

std::string cost_csv_row(const CostReport& r) {
  const Ratio t = r.complexity_ratio();
  char saving[32];
  std::snprintf(saving, sizeof saving, "%.4f", static_cast<double>(t.den) / static_cast<double>(t.num));
  return std::string(to_string(r.kind)) + ',' + std::to_string(r.query.height) + ',' +
         std::to_string(r.query.width) + ',' + std::to_string(r.query.channels) + ',' +
         std::to_string(r.embed_channels) + ',' + std::to_string(r.anchors) + ',' + std::to_string(r.macs_total()) +
         ',' + std::to_string(r.macs_matmul()) + ',' + std::to_string(r.peak_bytes) + ',' + saving;
}

std::vector<ReferenceCost> reference_costs() {
  return {
      {BlockKind::nb, 96, 96, 58.0, 0.01},
      {BlockKind::apnb, 96, 96, 15.5, 0.05},
      {BlockKind::nb, 256, 128, 601.4, 0.01},
      // 43.5 implies a cheaper projection accounting than the NB rows allow.
      {BlockKind::apnb, 256, 128, 43.5, std::nullopt},
  };
}

BlockConfig reference_config(BlockKind kind) {
  BlockConfig cfg;
  cfg.in_channels = 2048;
  cfg.embed_channels = 256;
  cfg.share_key_value = true;
  if (is_sampled(kind)) cfg.sampler = SamplerSpec::pyramid_average({1, 3, 6, 8});
  return cfg;
}

std::vector<ReferenceComparison> compare_reference_costs(const CostOptions& opts) {
  std::vector<ReferenceComparison> rows;
  for (const auto& ref : reference_costs()) {
    const BlockConfig cfg = reference_config(ref.kind);
    const Shape3 shape{cfg.in_channels, ref.height, ref.width};
    ReferenceComparison row{ref, estimate(ref.kind, shape, std::nullopt, cfg, opts)};
    row.estimated_gmacs = static_cast<double>(row.estimate.macs_total()) / 1e9;
    row.relative_error = std::abs(row.estimated_gmacs - ref.reported_gmacs) / ref.reported_gmacs;
    row.asserted = ref.tolerance.has_value();
    row.within_tolerance = !row.asserted || row.relative_error <= *ref.tolerance;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ann
