#include "ann/blocks.hpp"

#include <array>
#include <utility>

#include "ann/rng.hpp"

namespace ann {

namespace {

template <typename E, std::size_t K>
using NameTable = std::array<std::pair<E, std::string_view>, K>;

constexpr NameTable<BlockKind, 4> kKinds{
    {{BlockKind::nb, "nb"}, {BlockKind::apnb, "apnb"}, {BlockKind::fnb, "fnb"}, {BlockKind::afnb, "afnb"}}};
constexpr NameTable<Normalization, 3> kNorms{
    {{Normalization::softmax, "softmax"}, {Normalization::rescale, "rescale"}, {Normalization::none, "none"}}};
constexpr NameTable<Combine, 2> kCombines{{{Combine::residual, "residual"}, {Combine::concat, "concat"}}};

template <typename E, std::size_t K>
std::string_view name_of(const NameTable<E, K>& table, E value) {
  for (auto [v, n] : table) {
    if (v == value) return n;
  }
  return "unknown";
}

template <typename E, std::size_t K>
std::optional<E> parse_name(const NameTable<E, K>& table, std::string_view name) {
  for (auto [v, n] : table) {
    if (n == name) return v;
  }
  return std::nullopt;
}

void check_projection(const Projection& p, std::size_t out, std::size_t in, bool bias, const char* name) {
  if (p.weight.dims() != Dims{out, in}) {
    throw ShapeError(std::string(name) + " weight must be " + to_string(Dims{out, in}) + ", got " +
                     to_string(p.weight.dims()));
  }
  if (bias != p.bias.has_value()) {
    throw ShapeError(std::string(name) + (bias ? " is missing its bias" : " has an unexpected bias"));
  }
  if (p.bias && p.bias->dims() != Dims{out}) throw ShapeError(std::string(name) + " bias has wrong length");
}

Projection init_projection(std::size_t out, std::size_t in, bool bias, std::uint64_t seed, std::uint64_t stream) {
  Projection p{seeded_fill({out, in}, derive_seed(seed, 2 * stream), Distribution::gaussian_002), std::nullopt};
  if (bias) p.bias = seeded_fill({out}, derive_seed(seed, 2 * stream + 1), Distribution::gaussian_002);
  return p;
}

const SamplerSpec& require_sampler(const BlockConfig& cfg, const char* block) {
  if (!cfg.sampler) throw ParameterError(std::string(block) + " requires a sampler");
  return *cfg.sampler;
}

}  // namespace

std::string_view to_string(BlockKind k) { return name_of(kKinds, k); }
std::string_view to_string(Normalization n) { return name_of(kNorms, n); }
std::string_view to_string(Combine c) { return name_of(kCombines, c); }
std::optional<BlockKind> parse_block_kind(std::string_view name) { return parse_name(kKinds, name); }
std::optional<Normalization> parse_normalization(std::string_view name) { return parse_name(kNorms, name); }
std::optional<Combine> parse_combine(std::string_view name) { return parse_name(kCombines, name); }

std::size_t BlockConfig::result_channels() const {
  return combine == Combine::concat ? output_projection_channels() + in_channels : in_channels;
}

void BlockConfig::validate() const {
  if (in_channels < 1) throw ParameterError("in_channels must be >= 1");
  if (key_channels() < 1) throw ParameterError("low_channels must be >= 1");
  if (embed_channels < 1) throw ParameterError("embed_channels must be >= 1");
  if (output_projection_channels() < 1) throw ParameterError("out_channels must be >= 1");
  if (combine == Combine::residual && output_projection_channels() != in_channels) {
    throw ParameterError("residual combine requires out_channels == in_channels");
  }
  if (sampler) sampler->validate();
}

BlockWeights init_weights(const BlockConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t e = cfg.embed_channels;
  BlockWeights w{init_projection(e, cfg.in_channels, cfg.bias, seed, 0),
                 init_projection(e, cfg.key_channels(), cfg.bias, seed, 1), std::nullopt,
                 init_projection(cfg.output_projection_channels(), e, cfg.bias, seed, 3)};
  if (!cfg.share_key_value) w.own_gamma = init_projection(e, cfg.key_channels(), cfg.bias, seed, 2);
  return w;
}

void check_weights(const BlockConfig& cfg, const BlockWeights& w) {
  const std::size_t e = cfg.embed_channels;
  check_projection(w.phi, e, cfg.in_channels, cfg.bias, "w_phi");
  check_projection(w.theta, e, cfg.key_channels(), cfg.bias, "w_theta");
  check_projection(w.gamma(), e, cfg.key_channels(), cfg.bias, "w_gamma");
  check_projection(w.out, cfg.output_projection_channels(), e, cfg.bias, "w_o");
  if (cfg.share_key_value != w.shares_key_value()) {
    throw ShapeError("share_key_value does not match the weight set");
  }
}

Tensor normalize_similarity(const Tensor& v, Normalization n) {
  switch (n) {
    case Normalization::softmax:
      return softmax_rows(v);
    case Normalization::rescale:
      return rescale_rows(v);
    case Normalization::none:
      break;
  }
  return v;
}

AttentionTrace attend_anchors(const Tensor& query, const Tensor& phi, const Tensor& theta_anchors,
                              const Tensor& gamma_anchors, const BlockConfig& cfg, const BlockWeights& w) {
  const Shape3 qs = query.shape3();
  AttentionTrace t{phi, theta_anchors, gamma_anchors, theta_anchors, gamma_anchors,
                   Tensor({1}), Tensor({1}), Tensor({1}), Tensor({1}), Tensor({1})};
  t.similarity = matmul(transpose2d(phi), theta_anchors);
  t.attention = normalize_similarity(t.similarity, cfg.normalization);
  t.aggregated = matmul(t.attention, transpose2d(gamma_anchors));
  t.projected = w.out.apply(transpose2d(t.aggregated));
  const Tensor projected3 = t.projected.reshaped({t.projected.rows(), qs.height, qs.width});
  t.output = cfg.combine == Combine::residual ? add(projected3, query) : concat_channels(projected3, query);
  return t;
}

AttentionTrace attention_forward(const Tensor& query, const Tensor& keys, const BlockConfig& cfg,
                                 const BlockWeights& w, const SamplerSpec* sampler) {
  cfg.validate();
  check_weights(cfg, w);
  const Shape3 qs = query.shape3();
  const Shape3 ks = keys.shape3();
  if (qs.channels != cfg.in_channels) {
    throw ShapeError("query input has " + std::to_string(qs.channels) + " channels, config expects " +
                     std::to_string(cfg.in_channels));
  }
  if (ks.channels != cfg.key_channels()) {
    throw ShapeError("key/value input has " + std::to_string(ks.channels) + " channels, config expects " +
                     std::to_string(cfg.key_channels()));
  }
  const Tensor phi = w.phi.apply(flatten_spatial(query));
  const Tensor theta = w.theta.apply(flatten_spatial(keys));
  const Tensor gamma = w.shares_key_value() ? theta : w.gamma().apply(flatten_spatial(keys));

  Tensor theta_anchors = theta;
  Tensor gamma_anchors = gamma;
  if (sampler && !sampler->is_identity()) {
    const Dims embedded{cfg.embed_channels, ks.height, ks.width};
    theta_anchors = pyramid_sample(theta.reshaped(embedded), *sampler).values;
    // Shared projections sample once; otherwise the same spec (and seed)
    // keeps anchor k of theta and gamma at the same location.
    gamma_anchors = w.shares_key_value() ? theta_anchors : pyramid_sample(gamma.reshaped(embedded), *sampler).values;
  }

  AttentionTrace t = attend_anchors(query, phi, theta_anchors, gamma_anchors, cfg, w);
  t.theta = theta;
  t.gamma = gamma;
  return t;
}

Tensor nb_forward(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w) {
  return attention_forward(x, x, cfg, w, nullptr).output;
}

Tensor apnb_forward(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w) {
  return attention_forward(x, x, cfg, w, &require_sampler(cfg, "apnb")).output;
}

Tensor fnb_forward(const FusionInputs& in, const BlockConfig& cfg, const BlockWeights& w) {
  return attention_forward(in.high, in.low, cfg, w, nullptr).output;
}

Tensor afnb_forward(const FusionInputs& in, const BlockConfig& cfg, const BlockWeights& w) {
  return attention_forward(in.high, in.low, cfg, w, &require_sampler(cfg, "afnb")).output;
}

Tensor block_forward(BlockKind kind, const Tensor& high, const Tensor* low, const BlockConfig& cfg,
                     const BlockWeights& w) {
  if (is_fusion(kind) && !low) throw ParameterError(std::string(to_string(kind)) + " needs a low-level input");
  const Tensor& keys = is_fusion(kind) ? *low : high;
  const SamplerSpec* sampler = is_sampled(kind) ? &require_sampler(cfg, to_string(kind).data()) : nullptr;
  return attention_forward(high, keys, cfg, w, sampler).output;
}

Tensor stage_fusion_pipeline(const Tensor& stage4, const Tensor& stage5, const BlockConfig& afnb_cfg,
                             const BlockConfig& apnb_cfg, const StageFusionWeights& w) {
  const Tensor fused = afnb_forward({stage5, stage4}, afnb_cfg, w.fusion);
  if (fused.dim(0) != apnb_cfg.in_channels) {
    throw ShapeError("apnb in_channels " + std::to_string(apnb_cfg.in_channels) + " does not match the " +
                     std::to_string(fused.dim(0)) + "-channel afnb output");
  }
  return apnb_forward(fused, apnb_cfg, w.attention);
}

}  // namespace ann
