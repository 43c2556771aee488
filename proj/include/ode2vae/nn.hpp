#pragma once

#include <span>
#include <string>
#include <vector>

#include "ode2vae/ops.hpp"

namespace ode2vae {

enum class Act { tanh, softplus, relu };
enum class OutAct { none, sigmoid };

Act act_from_string(const std::string& s);

struct MLPSpec {
  std::vector<int> widths;  // [in, hidden..., out]
  Act act = Act::tanh;
  OutAct out_act = OutAct::none;

  int n_layers() const { return static_cast<int>(widths.size()) - 1; }
  int in_width() const { return widths.front(); }
  int out_width() const { return widths.back(); }
  int64_t param_count() const;
  void validate() const;
};

// Parameters are ordered W1,b1,...,WL,bL with Wl of shape (widths[l-1], widths[l])
// (inputs are row vectors, y = x*W + b) and bl of shape (1, widths[l]).
std::vector<Tensor> init_params(const MLPSpec& spec, uint64_t seed);

Tensor mlp_forward(const MLPSpec& spec, std::span<const Tensor> params, const Tensor& input);

// Forward pass that keeps per-layer values needed by on-tape VJPs:
// pre[l] (pre-activation) and act[l] (post-activation) for hidden layers.
struct MlpCache {
  Tensor out;
  std::vector<Tensor> pre;
  std::vector<Tensor> act;
};
MlpCache mlp_forward_cached(const MLPSpec& spec, std::span<const Tensor> params,
                            const Tensor& input);

// Propagates row-vector sensitivities `delta` (k, out_width) backwards through
// the network as recorded tape operations, returning d(delta . f)/d(input) of
// shape (k, in_width). First-order only: every step is ordinary primitives, so
// the result stays differentiable w.r.t. weights and inputs.
Tensor mlp_input_vjp(const MLPSpec& spec, std::span<const Tensor> params, const MlpCache& cache,
                     const Tensor& delta);

struct AdamState {
  int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m;  // first moments, allocated lazily
  std::vector<Tensor> v;  // second moments
};

// In-place Adam update with bias correction. `names` is used for error
// reporting and may be empty.
void adam_step(AdamState& state, std::span<Tensor> params, std::span<const Tensor> grads,
               std::span<const std::string> names = {});

}  // namespace ode2vae
