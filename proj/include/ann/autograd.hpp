#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ann/blocks.hpp"
#include "ann/sampling.hpp"
#include "ann/tensor.hpp"

namespace ann {

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Reverse-mode tape. Values are appended in evaluation order, so reverse
// index order is a valid topological order for the backward sweep. A tape is
// owned by one thread at a time.
class Tape {
 public:
  Var leaf(Tensor value);
  // Replaces a leaf value; call replay() to refresh dependent nodes.
  void set_leaf(Var v, Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  // Zero tensor of the primal shape if no gradient reached v.
  Tensor grad(Var v) const;

  // Seeds `output` with grad_out and propagates to every node.
  void backward(Var output, const Tensor& grad_out);
  // Recomputes every non-leaf value from its inputs in recording order.
  void replay();
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var softmax_rows(Var a);
  Var rescale_rows(Var a);
  Var normalize(Var a, Normalization n);
  Var linear(Var x, Var weight, std::optional<Var> bias);
  Var concat_channels(Var a, Var b);
  Var concat_columns(std::span<const Var> parts);
  Var add(Var a, Var b);
  Var reshape(Var a, Dims dims);
  // Adaptive pooling of a C x H x W value; result C x n x n.
  Var pool(Var x, std::size_t n, PoolMode mode);
  // Random anchor draw from a C x H x W value; result C x count. The drawn
  // positions are constants for differentiation.
  Var random_points(Var x, std::size_t count, std::uint64_t seed);
  // Pyramid/flat/identity sampling of a C x H x W value; result C x S.
  Var sample(Var x, const SamplerSpec& spec);

 private:
  using Forward = std::function<Tensor(const Tape&)>;
  // Receives the tape, the node itself and its accumulated gradient.
  using Backward = std::function<void(Tape&, Var, const Tensor&)>;

  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    Forward forward;  // empty for leaves
    Backward backward;
  };

  Var record(Forward forward, Backward backward);
  void accumulate(Var v, const Tensor& g);

  std::vector<Node> nodes_;
};

std::pair<Tensor, Tensor> backward_matmul(const Tensor& grad_out, const Tensor& a, const Tensor& b);
Tensor backward_softmax_rows(const Tensor& grad_out, const Tensor& softmax_out);
// Routes a pooled/sampled gradient back to the input map. grad_out is
// C x n x n (average/max) or C x count (random); result is C x H x W.
Tensor backward_pool(const Tensor& grad_out, const PoolRecord& record);

struct ProjectionGrads {
  Tensor weight;
  std::optional<Tensor> bias;
};

struct BlockGradients {
  Tensor output;  // forward result, recorded on the tape
  Tensor input;   // x, or the high-level map for fusion blocks
  std::optional<Tensor> low;
  ProjectionGrads phi;
  ProjectionGrads theta;                  // includes the value path when shared
  std::optional<ProjectionGrads> gamma;   // empty when shared
  ProjectionGrads out;
};

// Handles of one block evaluation recorded on a tape.
struct TapedBlock {
  Var input;
  std::optional<Var> low;
  Var phi_w, theta_w, out_w;
  std::optional<Var> gamma_w;
  std::optional<Var> phi_b, theta_b, gamma_b, out_b;
  Var output;
};

TapedBlock record_block(Tape& tape, BlockKind kind, const Tensor& high, const Tensor* low,
                        const BlockConfig& cfg, const BlockWeights& w);

BlockGradients block_backward(BlockKind kind, const Tensor& x, const BlockConfig& cfg, const BlockWeights& w,
                              const Tensor& grad_out);
BlockGradients block_backward(BlockKind kind, const FusionInputs& in, const BlockConfig& cfg,
                              const BlockWeights& w, const Tensor& grad_out);

struct FdResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Tensor numeric;
};

// Central differences of f at x compared against `analytic`. Relative error
// per element is |a - n| / max(|a|, |n|, rel_floor).
FdResult finite_difference_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                 const Tensor& analytic, double eps, double rel_floor = 1e-12);

// Numeric gradient of <weights, f(x)> computed by differencing f elementwise
// before the reduction; avoids cancellation against large unperturbed terms.
Tensor projected_numeric_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  const Tensor& weights, double eps);

// One compared tensor of a block gradient check.
struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = false;
  unsigned attempts = 1;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Elements where both |analytic| and |numeric| fall below this are
  // structurally zero (for example a key bias under softmax); they pass when
  // their absolute difference is below it as well.
  double zero_threshold = 1e-8;
  // Standard deviation of the random weights under test. The training init
  // (0.02) leaves key/query gradients near 1e-7, where difference noise alone
  // is about 1e-4 relative; unit-order weights keep the check well conditioned
  // and the attention rows far from uniform.
  double weight_std = 0.5;
};

// Compares block_backward against central differences for every input and
// parameter element. A failing check is repeated once with fresh inputs.
GradCheckReport gradcheck_block(BlockKind kind, const BlockConfig& cfg, const Shape3& shape,
                                const std::optional<Shape3>& low_shape, std::uint64_t seed,
                                const GradCheckOptions& opts = {});

}  // namespace ann
