#include "ode2vae/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "ode2vae/rng.hpp"

namespace ode2vae {

Act act_from_string(const std::string& s) {
  if (s == "tanh") return Act::tanh;
  if (s == "softplus") return Act::softplus;
  if (s == "relu") return Act::relu;
  throw std::runtime_error("unknown activation '" + s + "'");
}

int64_t MLPSpec::param_count() const {
  int64_t n = 0;
  for (size_t l = 0; l + 1 < widths.size(); ++l)
    n += static_cast<int64_t>(widths[l]) * widths[l + 1] + widths[l + 1];
  return n;
}

void MLPSpec::validate() const {
  if (widths.size() < 2) throw std::runtime_error("MLPSpec: needs at least one layer");
  for (int w : widths)
    if (w <= 0) throw std::runtime_error("MLPSpec: nonpositive width");
}

std::vector<Tensor> init_params(const MLPSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::vector<Tensor> params;
  params.reserve(2 * static_cast<size_t>(spec.n_layers()));
  for (int l = 0; l < spec.n_layers(); ++l) {
    const int fan_in = spec.widths[static_cast<size_t>(l)];
    const int fan_out = spec.widths[static_cast<size_t>(l) + 1];
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor w(Shape::mat(fan_in, fan_out), precision());
    for (int64_t i = 0; i < w.size(); ++i) w.set(i, rng.next_uniform(-a, a));
    params.push_back(w);
    params.push_back(Tensor(Shape::mat(1, fan_out), precision()));
  }
  return params;
}

namespace {

Tensor apply_act(Act act, const Tensor& x) {
  switch (act) {
    case Act::tanh: return ops::tanh(x);
    case Act::softplus: return ops::softplus(x);
    case Act::relu: return ops::relu(x);
  }
  throw std::runtime_error("bad activation");
}

void check_input(const MLPSpec& spec, std::span<const Tensor> params, const Tensor& input) {
  if (static_cast<int>(params.size()) != 2 * spec.n_layers())
    throw std::runtime_error("mlp_forward: expected " + std::to_string(2 * spec.n_layers()) +
                             " parameter tensors, got " + std::to_string(params.size()));
  if (input.rank() != 2 || input.dim(1) != spec.in_width())
    throw std::runtime_error("mlp_forward: input " + input.shape().str() + " incompatible with width " +
                             std::to_string(spec.in_width()));
}

}  // namespace

Tensor mlp_forward(const MLPSpec& spec, std::span<const Tensor> params, const Tensor& input) {
  check_input(spec, params, input);
  Tensor h = input;
  const int L = spec.n_layers();
  for (int l = 0; l < L; ++l) {
    h = ops::affine(h, params[static_cast<size_t>(2 * l)], params[static_cast<size_t>(2 * l + 1)]);
    if (l + 1 < L)
      h = apply_act(spec.act, h);
    else if (spec.out_act == OutAct::sigmoid)
      h = ops::sigmoid(h);
  }
  return h;
}

MlpCache mlp_forward_cached(const MLPSpec& spec, std::span<const Tensor> params,
                            const Tensor& input) {
  check_input(spec, params, input);
  MlpCache c;
  Tensor h = input;
  const int L = spec.n_layers();
  for (int l = 0; l < L; ++l) {
    Tensor a = ops::affine(h, params[static_cast<size_t>(2 * l)], params[static_cast<size_t>(2 * l + 1)]);
    if (l + 1 < L) {
      h = apply_act(spec.act, a);
      c.pre.push_back(a);
      c.act.push_back(h);
    } else {
      h = (spec.out_act == OutAct::sigmoid) ? ops::sigmoid(a) : a;
    }
  }
  c.out = h;
  return c;
}

Tensor mlp_input_vjp(const MLPSpec& spec, std::span<const Tensor> params, const MlpCache& cache,
                     const Tensor& delta) {
  if (spec.out_act != OutAct::none)
    throw std::runtime_error("mlp_input_vjp: linear output head required");
  if (spec.act == Act::relu)
    throw std::runtime_error("mlp_input_vjp: relu not supported (non-smooth field)");
  const int L = spec.n_layers();
  Tensor d = delta;  // (k, widths[L])
  for (int l = L - 1; l >= 0; --l) {
    d = ops::matmul(d, params[static_cast<size_t>(2 * l)], false, true);  // (k, widths[l])
    if (l > 0) {
      // multiply by the activation derivative of hidden layer l-1
      Tensor dphi;
      if (spec.act == Act::tanh) {
        const Tensor& y = cache.act[static_cast<size_t>(l - 1)];
        dphi = ops::add_const(ops::neg(ops::square(y)), 1.0);
      } else {
        dphi = ops::sigmoid(cache.pre[static_cast<size_t>(l - 1)]);
      }
      if (dphi.shape() != d.shape()) dphi = ops::broadcast_to(dphi, d.shape());
      d = ops::mul(d, dphi);
    }
  }
  return d;
}

void adam_step(AdamState& st, std::span<Tensor> params, std::span<const Tensor> grads,
               std::span<const std::string> names) {
  if (params.size() != grads.size())
    throw std::runtime_error("adam_step: params/grads size mismatch");
  if (st.m.empty()) {
    for (const Tensor& p : params) {
      st.m.push_back(Tensor(p.shape(), p.prec()));
      st.v.push_back(Tensor(p.shape(), p.prec()));
    }
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const Tensor& g = grads[pi];
    if (g.shape() != p.shape())
      throw std::runtime_error("adam_step: grad shape mismatch for parameter " +
                               (pi < names.size() ? names[pi] : std::to_string(pi)));
    if (!g.all_finite())
      throw std::runtime_error("adam_step: non-finite gradient for parameter " +
                               (pi < names.size() ? names[pi] : std::to_string(pi)));
    Tensor& m = st.m[pi];
    Tensor& v = st.v[pi];
    const int64_t n = p.size();
    for (int64_t i = 0; i < n; ++i) {
      const double gi = g.at(i);
      const double mi = st.beta1 * m.at(i) + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * v.at(i) + (1.0 - st.beta2) * gi * gi;
      m.set(i, mi);
      v.set(i, vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p.set(i, p.at(i) - st.lr * mhat / (std::sqrt(vhat) + st.eps));
    }
  }
}

}  // namespace ode2vae
