#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "ode2vae/tensor.hpp"

namespace ode2vae {

enum class Op : uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  matmul,
  sum,
  mean,
  exp,
  log,
  tanh,
  softplus,
  sigmoid,
  relu,
  square,
  concat,
  slice,
  broadcast,
};

const char* op_name(Op op);

struct TapeNode {
  Op op;
  int a = -1;
  int b = -1;
  // op-specific aux: matmul {ta,tb}; sum {axis or -1}; concat {axis};
  // slice {axis,start,stop}; broadcast none (shapes live in the value tensors)
  int i0 = 0, i1 = 0, i2 = 0;
};

// Append-only record of primitive applications. Parent handles always refer to
// earlier nodes; backward visits nodes in strictly reverse insertion order.
class Tape {
 public:
  // Registers a leaf (differentiable input). Returns a tensor attached to it.
  Tensor var(const Tensor& value);

  int n_nodes() const { return static_cast<int>(nodes_.size()); }
  const Tensor& value(int node) const { return vals_[static_cast<size_t>(node)]; }
  const std::vector<int>& leaves() const { return leaves_; }

  // Reverse pass from a scalar loss; gradients retrievable afterwards.
  void backward(const Tensor& loss);
  Tensor grad(const Tensor& t) const;  // zeros if the node was untouched
  std::unordered_map<int, Tensor> leaf_grads() const;

  void reset();

  // Recording internals, used by the ops layer.
  int intern(const Tensor& t, Op as);
  Tensor attach(Op op, Tensor out, const Tensor* pa, const Tensor* pb, int i0 = 0, int i1 = 0,
                int i2 = 0);

 private:
  void accumulate(int node, const Tensor& g);
  void step_backward(int i);

  std::vector<TapeNode> nodes_;
  std::vector<Tensor> vals_;
  std::vector<Tensor> grads_;
  std::vector<int> leaves_;
};

// Deliberate backward-rule corruption hook for negative-control tests.
void set_backward_fault(Op op, double scale);
void clear_backward_fault();

// Max over coordinates of |central difference - backprop gradient| relative
// error, |fd_i - g_i| / (|g_i| + 1e-8). f must build a scalar from its input
// (on a tape when the input is a tape leaf, eagerly otherwise).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

}  // namespace ode2vae
