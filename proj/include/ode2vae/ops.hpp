#pragma once

#include <span>

#include "ode2vae/tape.hpp"

namespace ode2vae {
namespace ops {

// Primitives. Each is recorded on a tape whenever any input lives on one.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false);
Tensor sum(const Tensor& x);            // all elements -> scalar
Tensor sum(const Tensor& x, int axis);  // drops the axis
Tensor mean(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& x, int axis, int start, int stop);
Tensor broadcast_to(const Tensor& x, const Shape& target);

// Composed helpers (no new primitives).
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);  // relu-composed hard clamp
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);  // x*w + b, b is (1,n)
Tensor rowsum(const Tensor& x);  // (B,n) -> (B)
Tensor dot(const Tensor& a, const Tensor& b);

}  // namespace ops

// Generic entry point keyed by primitive id; routes to the functions above.
Tensor record_primitive(Op op, std::span<const Tensor> inputs, int i0 = 0, int i1 = 0, int i2 = 0);

}  // namespace ode2vae
