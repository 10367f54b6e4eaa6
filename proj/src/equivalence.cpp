#include "ann/equivalence.hpp"

#include <algorithm>

#include "ann/rng.hpp"

namespace ann {

EquivalenceResult run_equivalence_suite(BlockKind kind, const EquivalenceOptions& opts) {
  if (!is_sampled(kind)) throw ParameterError("equivalence suite runs apnb or afnb");
  const BlockKind reference = kind == BlockKind::apnb ? BlockKind::nb : BlockKind::fnb;
  constexpr Normalization norms[] = {Normalization::softmax, Normalization::rescale, Normalization::none};

  EquivalenceResult result;
  for (std::size_t i = 0; i < opts.cases; ++i) {
    const std::uint64_t case_seed = derive_seed(opts.seed, i);
    Xoshiro256 rng(case_seed);
    auto pick = [&rng](std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(rng.next_below(hi - lo + 1)); };

    BlockConfig cfg;
    cfg.in_channels = pick(1, 4);
    cfg.embed_channels = pick(1, 3);
    cfg.normalization = norms[i % 3];
    cfg.combine = (i / 3) % 2 == 0 ? Combine::concat : Combine::residual;
    cfg.share_key_value = (i / 6) % 2 == 0;
    cfg.bias = (i / 12) % 2 == 0;
    if (cfg.combine == Combine::concat) cfg.out_channels = pick(1, 4);
    if (is_fusion(kind)) cfg.low_channels = pick(1, 4);
    cfg.sampler = SamplerSpec::identity();

    const Shape3 high{cfg.in_channels, pick(1, opts.max_side), pick(1, opts.max_side)};
    const Shape3 low{cfg.key_channels(), pick(1, opts.max_side), pick(1, opts.max_side)};
    const Tensor xh = seeded_fill(high.dims(), derive_seed(case_seed, 1), Distribution::uniform_pm1);
    const Tensor xl = seeded_fill(low.dims(), derive_seed(case_seed, 2), Distribution::uniform_pm1);
    const BlockWeights w = init_weights(cfg, derive_seed(case_seed, 3));
    BlockWeights sampled_w = w;
    if (opts.corrupt_weights) sampled_w.out.weight[0] += 1e-3;

    const Tensor* low_ptr = is_fusion(kind) ? &xl : nullptr;
    const Tensor expected = block_forward(reference, xh, low_ptr, cfg, w);
    const Tensor actual = block_forward(kind, xh, low_ptr, cfg, sampled_w);
    const double dev = max_abs_diff(expected, actual);
    result.max_deviation = std::max(result.max_deviation, dev);
    if (!(dev < opts.tolerance) && !result.failing_seed) result.failing_seed = case_seed;
    ++result.cases;
  }
  return result;
}

}  // namespace ann
