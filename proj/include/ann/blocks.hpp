#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

#include "ann/sampling.hpp"
#include "ann/tensor.hpp"

namespace ann {

enum class BlockKind { nb, apnb, fnb, afnb };
enum class Normalization { softmax, rescale, none };
enum class Combine { residual, concat };

std::string_view to_string(BlockKind k);
std::string_view to_string(Normalization n);
std::string_view to_string(Combine c);
std::optional<BlockKind> parse_block_kind(std::string_view name);
std::optional<Normalization> parse_normalization(std::string_view name);
std::optional<Combine> parse_combine(std::string_view name);

inline bool is_fusion(BlockKind k) { return k == BlockKind::fnb || k == BlockKind::afnb; }
inline bool is_sampled(BlockKind k) { return k == BlockKind::apnb || k == BlockKind::afnb; }

struct BlockConfig {
  std::size_t in_channels = 1;                 // C, or C_h for fusion blocks
  std::optional<std::size_t> low_channels;     // C_l for fusion blocks; defaults to in_channels
  std::size_t embed_channels = 1;              // C-hat
  std::optional<std::size_t> out_channels;     // rows of W_o; defaults to in_channels
  Normalization normalization = Normalization::softmax;
  Combine combine = Combine::concat;
  bool share_key_value = false;
  bool bias = true;
  std::optional<SamplerSpec> sampler;          // APNB / AFNB only

  std::size_t key_channels() const { return low_channels.value_or(in_channels); }
  std::size_t output_projection_channels() const { return out_channels.value_or(in_channels); }
  // Channels of the block output: out (+ C for concat).
  std::size_t result_channels() const;
  // Throws ParameterError on inconsistent fields.
  void validate() const;
};

// A 1x1 convolution: weight is out x in, bias has length out.
struct Projection {
  Tensor weight;
  std::optional<Tensor> bias;

  Tensor apply(const Tensor& x2d) const { return linear_project(x2d, weight, bias); }
};

struct BlockWeights {
  Projection phi;
  Projection theta;
  std::optional<Projection> own_gamma;  // empty when key and value share theta
  Projection out;

  const Projection& gamma() const { return own_gamma ? *own_gamma : theta; }
  bool shares_key_value() const { return !own_gamma; }
};

struct FusionInputs {
  Tensor high;  // C_h x H_h x W_h, query source
  Tensor low;   // C_l x H_l x W_l, key/value source
};

inline constexpr double kInitStd = 0.02;

// Deterministic gaussian(0, kInitStd) initialization.
BlockWeights init_weights(const BlockConfig& cfg, std::uint64_t seed);
// Throws ShapeError if weight shapes disagree with cfg.
void check_weights(const BlockConfig& cfg, const BlockWeights& w);

// Every intermediate of one attention evaluation, 2-D ones flattened over
// positions. For unsampled blocks the anchors are the full embeddings.
struct AttentionTrace {
  Tensor phi;            // C-hat x N_q
  Tensor theta;          // C-hat x N_k
  Tensor gamma;          // C-hat x N_k
  Tensor theta_anchors;  // C-hat x S
  Tensor gamma_anchors;  // C-hat x S
  Tensor similarity;     // N_q x S
  Tensor attention;      // normalized similarity
  Tensor aggregated;     // N_q x C-hat
  Tensor projected;      // out x N_q
  Tensor output;         // combined, shaped like the query map
};

// Shared core of the four blocks. `query` supplies phi and the passthrough
// path; `keys` supplies theta/gamma; `sampler` (if any) draws anchors.
AttentionTrace attention_forward(const Tensor& query, const Tensor& keys, const BlockConfig& cfg,
                                 const BlockWeights& w, const SamplerSpec* sampler);

// Attention from precomputed anchors; lets callers permute or perturb them.
AttentionTrace attend_anchors(const Tensor& query, const Tensor& phi, const Tensor& theta_anchors,
                              const Tensor& gamma_anchors, const BlockConfig& cfg, const BlockWeights& w);

Tensor normalize_similarity(const Tensor& v, Normalization n);

Tensor nb_forward(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w);
Tensor apnb_forward(const Tensor& x, const BlockConfig& cfg, const BlockWeights& w);
Tensor fnb_forward(const FusionInputs& in, const BlockConfig& cfg, const BlockWeights& w);
Tensor afnb_forward(const FusionInputs& in, const BlockConfig& cfg, const BlockWeights& w);

// Dispatch by kind; for self-attention kinds `low` is ignored.
Tensor block_forward(BlockKind kind, const Tensor& high, const Tensor* low, const BlockConfig& cfg,
                     const BlockWeights& w);

struct StageFusionWeights {
  BlockWeights fusion;     // AFNB
  BlockWeights attention;  // APNB
};

// AFNB(high = stage5, low = stage4) followed by APNB on its output. The AFNB
// output already carries stage5 through its concat path, so no second concat
// is applied.
Tensor stage_fusion_pipeline(const Tensor& stage4, const Tensor& stage5, const BlockConfig& afnb_cfg,
                             const BlockConfig& apnb_cfg, const StageFusionWeights& w);

}  // namespace ann
