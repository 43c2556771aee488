#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "ode2vae/ops.hpp"
#include "ode2vae/tape.hpp"

namespace ode2vae {

namespace {

struct Fault {
  bool active = false;
  Op op = Op::add;
  double scale = 1.0;
};
Fault g_fault;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

void check_same_prec(const char* op, const Tensor& a, const Tensor& b) {
  if (a.prec() != b.prec()) fail(std::string(op) + ": mixed f32/f64 operands");
}

#define O2V_DISPATCH(PREC, ...)                \
  do {                                         \
    if ((PREC) == Prec::f64) {                 \
      using real_t = double;                   \
      __VA_ARGS__;                             \
    } else {                                   \
      using real_t = float;                    \
      __VA_ARGS__;                             \
    }                                          \
  } while (0)

// ---------------------------------------------------------------------------
// Eager kernels. These never record on a tape.
// ---------------------------------------------------------------------------
namespace kern {

template <typename F>
Tensor ew2(const char* name, const Tensor& a, const Tensor& b, F f) {
  check_same_shape(name, a, b);
  check_same_prec(name, a, b);
  Tensor out(a.shape(), a.prec());
  const int64_t n = a.size();
  O2V_DISPATCH(a.prec(), {
    const real_t* pa = data_of<real_t>(a.buf());
    const real_t* pb = data_of<real_t>(b.buf());
    real_t* po = data_of<real_t>(out.buf());
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  });
  return out;
}

template <typename F>
Tensor ew1(const Tensor& a, F f) {
  Tensor out(a.shape(), a.prec());
  const int64_t n = a.size();
  O2V_DISPATCH(a.prec(), {
    const real_t* pa = data_of<real_t>(a.buf());
    real_t* po = data_of<real_t>(out.buf());
    for (int64_t i = 0; i < n; ++i) po[i] = f(static_cast<double>(pa[i]));
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return ew2("add", a, b, [](auto x, auto y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return ew2("sub", a, b, [](auto x, auto y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return ew2("mul", a, b, [](auto x, auto y) { return x * y; });
}

void add_into_flat(Tensor& dst, const Tensor& src) {
  if (dst.size() != src.size()) fail("grad accumulate: element count mismatch");
  const int64_t n = dst.size();
  O2V_DISPATCH(dst.prec(), {
    real_t* pd = data_of<real_t>(dst.buf());
    const real_t* ps = data_of<real_t>(src.buf());
    for (int64_t i = 0; i < n; ++i) pd[i] += ps[i];
  });
}

Tensor scale(const Tensor& a, double c) {
  return ew1(a, [c](double x) { return c * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2)
    fail("matmul: rank-2 operands required, got " + a.shape().str() + " and " + b.shape().str());
  check_same_prec("matmul", a, b);
  const int n = ta ? a.dim(1) : a.dim(0);
  const int k = ta ? a.dim(0) : a.dim(1);
  const int kb = tb ? b.dim(1) : b.dim(0);
  const int m = tb ? b.dim(0) : b.dim(1);
  if (k != kb)
    fail("matmul: shape mismatch " + a.shape().str() + (ta ? "^T" : "") + " vs " +
         b.shape().str() + (tb ? "^T" : ""));
  Tensor out(Shape::mat(n, m), a.prec());
  O2V_DISPATCH(a.prec(), {
    const real_t* A = data_of<real_t>(a.buf());
    const real_t* B = data_of<real_t>(b.buf());
    real_t* C = data_of<real_t>(out.buf());
    if (!ta && !tb) {
      for (int i = 0; i < n; ++i) {
        real_t* ci = C + int64_t(i) * m;
        const real_t* ai = A + int64_t(i) * k;
        for (int kk = 0; kk < k; ++kk) {
          const real_t av = ai[kk];
          const real_t* bk = B + int64_t(kk) * m;
          for (int j = 0; j < m; ++j) ci[j] += av * bk[j];
        }
      }
    } else if (!ta && tb) {
      for (int i = 0; i < n; ++i) {
        const real_t* ai = A + int64_t(i) * k;
        real_t* ci = C + int64_t(i) * m;
        for (int j = 0; j < m; ++j) {
          const real_t* bj = B + int64_t(j) * k;
          real_t acc = 0;
          for (int kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
          ci[j] = acc;
        }
      }
    } else if (ta && !tb) {
      for (int kk = 0; kk < k; ++kk) {
        const real_t* ak = A + int64_t(kk) * n;
        const real_t* bk = B + int64_t(kk) * m;
        for (int i = 0; i < n; ++i) {
          const real_t av = ak[i];
          real_t* ci = C + int64_t(i) * m;
          for (int j = 0; j < m; ++j) ci[j] += av * bk[j];
        }
      }
    } else {
      for (int i = 0; i < n; ++i) {
        real_t* ci = C + int64_t(i) * m;
        for (int j = 0; j < m; ++j) {
          const real_t* bj = B + int64_t(j) * k;
          real_t acc = 0;
          for (int kk = 0; kk < k; ++kk) acc += A[int64_t(kk) * n + i] * bj[kk];
          ci[j] = acc;
        }
      }
    }
  });
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out(Shape::scalar(), x.prec());
  const int64_t n = x.size();
  O2V_DISPATCH(x.prec(), {
    const real_t* p = data_of<real_t>(x.buf());
    real_t acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += p[i];
    data_of<real_t>(out.buf())[0] = acc;
  });
  return out;
}

// extents split around an axis: outer * axis_ext * inner
void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& ext, int64_t& inner) {
  outer = 1;
  inner = 1;
  ext = s[axis];
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < s.rank; ++i) inner *= s[i];
}

Shape drop_axis(const Shape& s, int axis) {
  Shape r;
  r.rank = s.rank - 1;
  int j = 0;
  for (int i = 0; i < s.rank; ++i)
    if (i != axis) r.ext[static_cast<size_t>(j++)] = s[i];
  return r;
}

Tensor sum_axis(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) fail("sum: axis out of range for " + x.shape().str());
  int64_t outer, ext, inner;
  axis_split(x.shape(), axis, outer, ext, inner);
  Tensor out(drop_axis(x.shape(), axis), x.prec());
  O2V_DISPATCH(x.prec(), {
    const real_t* p = data_of<real_t>(x.buf());
    real_t* po = data_of<real_t>(out.buf());
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t e = 0; e < ext; ++e) {
        const real_t* src = p + (o * ext + e) * inner;
        real_t* dst = po + o * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
  return out;
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

Tensor broadcast(const Tensor& x, const Shape& target) {
  const Shape& s = x.shape();
  if (s.rank > target.rank)
    fail("broadcast: cannot reduce rank " + s.str() + " -> " + target.str());
  // right-align extents; source extent must equal target or 1
  int64_t sext[3] = {1, 1, 1};
  const int off = target.rank - s.rank;
  for (int i = 0; i < s.rank; ++i) sext[off + i] = s[i];
  int64_t sstr[3] = {0, 0, 0};
  int64_t acc = 1;
  for (int i = target.rank - 1; i >= 0; --i) {
    if (sext[i] != 1 && sext[i] != target[i])
      fail("broadcast: shape mismatch " + s.str() + " -> " + target.str());
    sstr[i] = (sext[i] == 1) ? 0 : acc;
    acc *= sext[i];
  }
  Tensor out(target, x.prec());
  const int64_t n = target.numel();
  int64_t t1 = 1, t2 = 1;
  if (target.rank >= 2) t2 = target[target.rank - 1];
  if (target.rank >= 3) t1 = target[1] * target[2];
  O2V_DISPATCH(x.prec(), {
    const real_t* p = data_of<real_t>(x.buf());
    real_t* po = data_of<real_t>(out.buf());
    if (x.size() == 1) {
      const real_t v = p[0];
      for (int64_t i = 0; i < n; ++i) po[i] = v;
    } else {
      for (int64_t i = 0; i < n; ++i) {
        int64_t rem = i, idx = 0;
        if (target.rank == 1) {
          idx = sstr[0] * rem;
        } else if (target.rank == 2) {
          idx = sstr[0] * (rem / t2) + sstr[1] * (rem % t2);
        } else {
          const int64_t i0 = rem / t1;
          rem -= i0 * t1;
          idx = sstr[0] * i0 + sstr[1] * (rem / t2) + sstr[2] * (rem % t2);
        }
        po[i] = p[idx];
      }
    }
  });
  return out;
}

// Sum g down to the source shape of a broadcast (adjoint of broadcast).
Tensor reduce_to(const Tensor& g, const Shape& src) {
  const Shape& gs = g.shape();
  int64_t sext[3] = {1, 1, 1};
  const int off = gs.rank - src.rank;
  for (int i = 0; i < src.rank; ++i) sext[off + i] = src[i];
  int64_t sstr[3] = {0, 0, 0};
  int64_t acc = 1;
  for (int i = gs.rank - 1; i >= 0; --i) {
    sstr[i] = (sext[i] == 1) ? 0 : acc;
    acc *= sext[i];
  }
  Tensor out(src, g.prec());
  const int64_t n = gs.numel();
  int64_t t1 = 1, t2 = 1;
  if (gs.rank >= 2) t2 = gs[gs.rank - 1];
  if (gs.rank >= 3) t1 = gs[1] * gs[2];
  O2V_DISPATCH(g.prec(), {
    const real_t* p = data_of<real_t>(g.buf());
    real_t* po = data_of<real_t>(out.buf());
    for (int64_t i = 0; i < n; ++i) {
      int64_t rem = i, idx = 0;
      if (gs.rank == 1) {
        idx = sstr[0] * rem;
      } else if (gs.rank == 2) {
        idx = sstr[0] * (rem / t2) + sstr[1] * (rem % t2);
      } else {
        const int64_t i0 = rem / t1;
        rem -= i0 * t1;
        idx = sstr[0] * i0 + sstr[1] * (rem / t2) + sstr[2] * (rem % t2);
      }
      po[idx] += p[i];
    }
  });
  return out;
}

Tensor concat2(const Tensor& a, const Tensor& b, int axis) {
  if (a.rank() != b.rank()) fail("concat: rank mismatch " + a.shape().str() + " vs " + b.shape().str());
  if (axis < 0 || axis >= a.rank()) fail("concat: axis out of range");
  check_same_prec("concat", a, b);
  Shape os = a.shape();
  for (int i = 0; i < a.rank(); ++i) {
    if (i == axis) continue;
    if (a.dim(i) != b.dim(i))
      fail("concat: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  os.ext[static_cast<size_t>(axis)] = a.dim(axis) + b.dim(axis);
  int64_t outer, ea, inner;
  axis_split(a.shape(), axis, outer, ea, inner);
  const int64_t eb = b.dim(axis);
  Tensor out(os, a.prec());
  O2V_DISPATCH(a.prec(), {
    const real_t* pa = data_of<real_t>(a.buf());
    const real_t* pb = data_of<real_t>(b.buf());
    real_t* po = data_of<real_t>(out.buf());
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(po + o * (ea + eb) * inner, pa + o * ea * inner,
                  static_cast<size_t>(ea * inner) * sizeof(real_t));
      std::memcpy(po + (o * (ea + eb) + ea) * inner, pb + o * eb * inner,
                  static_cast<size_t>(eb * inner) * sizeof(real_t));
    }
  });
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int stop) {
  if (axis < 0 || axis >= x.rank()) fail("slice: axis out of range for " + x.shape().str());
  if (start < 0 || stop > x.dim(axis) || start >= stop)
    fail("slice: bad range [" + std::to_string(start) + "," + std::to_string(stop) + ") on " +
         x.shape().str());
  int64_t outer, ext, inner;
  axis_split(x.shape(), axis, outer, ext, inner);
  Shape os = x.shape();
  os.ext[static_cast<size_t>(axis)] = stop - start;
  const int64_t w = stop - start;
  Tensor out(os, x.prec());
  O2V_DISPATCH(x.prec(), {
    const real_t* p = data_of<real_t>(x.buf());
    real_t* po = data_of<real_t>(out.buf());
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(po + o * w * inner, p + (o * ext + start) * inner,
                  static_cast<size_t>(w * inner) * sizeof(real_t));
  });
  return out;
}

// dst[axis range starting at `start`] += g  (adjoint of slice)
void add_into_slice(Tensor& dst, const Tensor& g, int axis, int start) {
  int64_t outer, ext, inner;
  axis_split(dst.shape(), axis, outer, ext, inner);
  const int64_t w = g.dim(axis);
  O2V_DISPATCH(dst.prec(), {
    real_t* pd = data_of<real_t>(dst.buf());
    const real_t* pg = data_of<real_t>(g.buf());
    for (int64_t o = 0; o < outer; ++o) {
      real_t* d = pd + (o * ext + start) * inner;
      const real_t* s = pg + o * w * inner;
      for (int64_t i = 0; i < w * inner; ++i) d[i] += s[i];
    }
  });
}

}  // namespace kern

Tape* find_tape(const Tensor* a, const Tensor* b) {
  Tape* t = nullptr;
  for (const Tensor* p : {a, b}) {
    if (p && p->defined() && p->on_tape()) {
      if (t && t != p->tape()) fail("op: operands recorded on two different tapes");
      t = p->tape();
    }
  }
  return t;
}

Tensor finalize(Op op, Tensor out, const Tensor* a, const Tensor* b, int i0 = 0, int i1 = 0,
                int i2 = 0) {
  Tape* t = find_tape(a, b);
  if (!t) return out;
  return t->attach(op, std::move(out), a, b, i0, i1, i2);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::tanh: return "tanh";
    case Op::softplus: return "softplus";
    case Op::sigmoid: return "sigmoid";
    case Op::relu: return "relu";
    case Op::square: return "square";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::broadcast: return "broadcast";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Recorded ops
// ---------------------------------------------------------------------------
namespace ops {

Tensor add(const Tensor& a, const Tensor& b) { return finalize(Op::add, kern::add(a, b), &a, &b); }
Tensor sub(const Tensor& a, const Tensor& b) { return finalize(Op::sub, kern::sub(a, b), &a, &b); }
Tensor mul(const Tensor& a, const Tensor& b) { return finalize(Op::mul, kern::mul(a, b), &a, &b); }

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  return finalize(Op::matmul, kern::matmul(a, b, ta, tb), &a, &b, ta ? 1 : 0, tb ? 1 : 0);
}

Tensor sum(const Tensor& x) { return finalize(Op::sum, kern::sum_all(x), &x, nullptr, -1); }
Tensor sum(const Tensor& x, int axis) {
  return finalize(Op::sum, kern::sum_axis(x, axis), &x, nullptr, axis);
}
Tensor mean(const Tensor& x) { return finalize(Op::mean, kern::mean_all(x), &x, nullptr); }

Tensor exp(const Tensor& x) {
  return finalize(Op::exp, kern::ew1(x, [](double v) { return std::exp(v); }), &x, nullptr);
}
Tensor log(const Tensor& x) {
  return finalize(Op::log, kern::ew1(x, [](double v) { return std::log(v); }), &x, nullptr);
}
Tensor tanh(const Tensor& x) {
  return finalize(Op::tanh, kern::ew1(x, [](double v) { return std::tanh(v); }), &x, nullptr);
}
Tensor softplus(const Tensor& x) {
  return finalize(Op::softplus, kern::ew1(x, [](double v) {
    return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }), &x, nullptr);
}
Tensor sigmoid(const Tensor& x) {
  return finalize(Op::sigmoid, kern::ew1(x, [](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  }), &x, nullptr);
}
Tensor relu(const Tensor& x) {
  return finalize(Op::relu, kern::ew1(x, [](double v) { return v > 0 ? v : 0.0; }), &x, nullptr);
}
Tensor square(const Tensor& x) {
  return finalize(Op::square, kern::ew1(x, [](double v) { return v * v; }), &x, nullptr);
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  return finalize(Op::concat, kern::concat2(a, b, axis), &a, &b, axis);
}

Tensor slice(const Tensor& x, int axis, int start, int stop) {
  return finalize(Op::slice, kern::slice(x, axis, start, stop), &x, nullptr, axis, start, stop);
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
  return finalize(Op::broadcast, kern::broadcast(x, target), &x, nullptr);
}

Tensor scale(const Tensor& x, double c) {
  Tensor cs(Shape::scalar(), x.prec());
  cs.set(0, c);
  return mul(x, broadcast_to(cs, x.shape()));
}

Tensor add_const(const Tensor& x, double c) {
  Tensor cs(Shape::scalar(), x.prec());
  cs.set(0, c);
  return add(x, broadcast_to(cs, x.shape()));
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor clamp(const Tensor& x, double lo, double hi) {
  // min(x,hi) = x - relu(x-hi); max(y,lo) = y + relu(lo-y)
  Tensor y = sub(x, relu(add_const(x, -hi)));
  return add(y, relu(neg(add_const(y, -lo))));
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (y.shape() == b.shape()) return add(y, b);
  return add(y, broadcast_to(b, y.shape()));
}

Tensor rowsum(const Tensor& x) {
  if (x.rank() != 2) fail("rowsum: rank-2 input required, got " + x.shape().str());
  return sum(x, 1);
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

}  // namespace ops

Tensor record_primitive(Op op, std::span<const Tensor> in, int i0, int i1, int i2) {
  auto need = [&](size_t n) {
    if (in.size() != n)
      fail(std::string(op_name(op)) + ": expected " + std::to_string(n) + " inputs");
  };
  switch (op) {
    case Op::add: need(2); return ops::add(in[0], in[1]);
    case Op::sub: need(2); return ops::sub(in[0], in[1]);
    case Op::mul: need(2); return ops::mul(in[0], in[1]);
    case Op::matmul: need(2); return ops::matmul(in[0], in[1], i0 != 0, i1 != 0);
    case Op::sum: need(1); return i0 < 0 ? ops::sum(in[0]) : ops::sum(in[0], i0);
    case Op::mean: need(1); return ops::mean(in[0]);
    case Op::exp: need(1); return ops::exp(in[0]);
    case Op::log: need(1); return ops::log(in[0]);
    case Op::tanh: need(1); return ops::tanh(in[0]);
    case Op::softplus: need(1); return ops::softplus(in[0]);
    case Op::sigmoid: need(1); return ops::sigmoid(in[0]);
    case Op::relu: need(1); return ops::relu(in[0]);
    case Op::square: need(1); return ops::square(in[0]);
    case Op::concat: need(2); return ops::concat(in[0], in[1], i0);
    case Op::slice: need(1); return ops::slice(in[0], i0, i1, i2);
    case Op::broadcast: need(2); return ops::broadcast_to(in[0], in[1].shape());
    default: fail("record_primitive: not a primitive");
  }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::var(const Tensor& value) {
  if (value.on_tape()) fail("Tape::var: tensor already lives on a tape");
  const int id = intern(value, Op::leaf);
  return vals_[static_cast<size_t>(id)];
}

int Tape::intern(const Tensor& t, Op as) {
  if (t.on_tape()) {
    if (t.tape() != this) fail("intern: tensor belongs to a different tape");
    return t.node();
  }
  TapeNode n;
  n.op = as;
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(n);
  Tensor v = t;
  v.tape_ = this;
  v.node_ = id;
  vals_.push_back(v);
  if (as == Op::leaf) leaves_.push_back(id);
  return id;
}

Tensor Tape::attach(Op op, Tensor out, const Tensor* pa, const Tensor* pb, int i0, int i1,
                    int i2) {
  TapeNode n;
  n.op = op;
  n.i0 = i0;
  n.i1 = i1;
  n.i2 = i2;
  if (pa && pa->defined()) n.a = intern(*pa, Op::constant);
  if (pb && pb->defined()) n.b = intern(*pb, Op::constant);
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(n);
  vals_.push_back(out);
  return out;
}

void Tape::reset() {
  nodes_.clear();
  vals_.clear();
  grads_.clear();
  leaves_.clear();
}

void Tape::accumulate(int node, const Tensor& g) {
  if (node < 0) return;
  const Op op = nodes_[static_cast<size_t>(node)].op;
  if (op == Op::constant) return;  // constants take no gradient
  Tensor& slot = grads_[static_cast<size_t>(node)];
  if (!slot.defined()) slot = Tensor(vals_[static_cast<size_t>(node)].shape(), g.prec());
  kern::add_into_flat(slot, g);
}

void Tape::step_backward(int i) {
  const TapeNode& n = nodes_[static_cast<size_t>(i)];
  Tensor g = grads_[static_cast<size_t>(i)];
  if (g_fault.active && g_fault.op == n.op) g = kern::scale(g, g_fault.scale);
  const Tensor& out = vals_[static_cast<size_t>(i)];
  auto val = [&](int id) -> const Tensor& { return vals_[static_cast<size_t>(id)]; };

  switch (n.op) {
    case Op::leaf:
    case Op::constant:
      return;
    case Op::add:
      accumulate(n.a, g);
      accumulate(n.b, g);
      return;
    case Op::sub:
      accumulate(n.a, g);
      accumulate(n.b, kern::scale(g, -1.0));
      return;
    case Op::mul:
      accumulate(n.a, kern::mul(g, val(n.b)));
      accumulate(n.b, kern::mul(g, val(n.a)));
      return;
    case Op::matmul: {
      const bool ta = n.i0 != 0, tb = n.i1 != 0;
      const Tensor& A = val(n.a);
      const Tensor& B = val(n.b);
      if (!ta && !tb) {
        accumulate(n.a, kern::matmul(g, B, false, true));
        accumulate(n.b, kern::matmul(A, g, true, false));
      } else if (!ta && tb) {
        accumulate(n.a, kern::matmul(g, B, false, false));
        accumulate(n.b, kern::matmul(g, A, true, false));
      } else if (ta && !tb) {
        accumulate(n.a, kern::matmul(B, g, false, true));
        accumulate(n.b, kern::matmul(A, g, false, false));
      } else {
        accumulate(n.a, kern::matmul(B, g, true, true));
        accumulate(n.b, kern::matmul(g, A, true, true));
      }
      return;
    }
    case Op::sum: {
      const Tensor& src = val(n.a);
      if (n.i0 < 0) {
        accumulate(n.a, kern::broadcast(g, src.shape()));
      } else {
        // re-insert the dropped axis as extent 1, then broadcast back
        Shape gs = src.shape();
        gs.ext[static_cast<size_t>(n.i0)] = 1;
        accumulate(n.a, kern::broadcast(g.reshaped(gs), src.shape()));
      }
      return;
    }
    case Op::mean:
      accumulate(n.a, kern::broadcast(kern::scale(g, 1.0 / double(val(n.a).size())),
                                      val(n.a).shape()));
      return;
    case Op::exp:
      accumulate(n.a, kern::mul(g, out));
      return;
    case Op::log: {
      const Tensor& x = val(n.a);
      accumulate(n.a, kern::ew2("log'", g, x, [](auto gv, auto xv) { return gv / xv; }));
      return;
    }
    case Op::tanh:
      accumulate(n.a, kern::ew2("tanh'", g, out, [](auto gv, auto yv) { return gv * (1 - yv * yv); }));
      return;
    case Op::softplus: {
      const Tensor& x = val(n.a);
      accumulate(n.a, kern::ew2("softplus'", g, x, [](auto gv, auto xv) {
        if (xv >= 0) return gv / (1 + std::exp(-static_cast<double>(xv)));
        const double e = std::exp(static_cast<double>(xv));
        return static_cast<double>(gv) * e / (1.0 + e);
      }));
      return;
    }
    case Op::sigmoid:
      accumulate(n.a, kern::ew2("sigmoid'", g, out, [](auto gv, auto yv) { return gv * yv * (1 - yv); }));
      return;
    case Op::relu: {
      const Tensor& x = val(n.a);
      accumulate(n.a, kern::ew2("relu'", g, x, [](auto gv, auto xv) { return xv > 0 ? gv : decltype(gv)(0); }));
      return;
    }
    case Op::square: {
      const Tensor& x = val(n.a);
      accumulate(n.a, kern::ew2("square'", g, x, [](auto gv, auto xv) { return 2 * gv * xv; }));
      return;
    }
    case Op::concat: {
      const int axis = n.i0;
      const int ea = val(n.a).dim(axis);
      accumulate(n.a, kern::slice(g, axis, 0, ea));
      accumulate(n.b, kern::slice(g, axis, ea, g.dim(axis)));
      return;
    }
    case Op::slice: {
      if (n.a < 0) return;
      if (nodes_[static_cast<size_t>(n.a)].op == Op::constant) return;
      Tensor& slot = grads_[static_cast<size_t>(n.a)];
      if (!slot.defined()) slot = Tensor(val(n.a).shape(), g.prec());
      kern::add_into_slice(slot, g.reshaped(out.shape()), n.i0, n.i1);
      return;
    }
    case Op::broadcast:
      accumulate(n.a, kern::reduce_to(g, val(n.a).shape()));
      return;
  }
}

void Tape::backward(const Tensor& loss) {
  if (!loss.on_tape() || loss.tape() != this) fail("backward: loss is not on this tape");
  if (loss.size() != 1) fail("backward: loss must be scalar, got " + loss.shape().str());
  grads_.assign(nodes_.size(), Tensor{});
  Tensor seed(vals_[static_cast<size_t>(loss.node())].shape(), loss.prec());
  seed.set(0, 1.0);
  grads_[static_cast<size_t>(loss.node())] = seed;
  for (int i = loss.node(); i >= 0; --i) {
    if (!grads_[static_cast<size_t>(i)].defined()) continue;
    step_backward(i);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  if (!t.on_tape() || t.tape() != this) fail("grad: tensor is not on this tape");
  const Tensor& slot = grads_[static_cast<size_t>(t.node())];
  if (slot.defined()) return slot;
  return Tensor(vals_[static_cast<size_t>(t.node())].shape(), t.prec());
}

std::unordered_map<int, Tensor> Tape::leaf_grads() const {
  std::unordered_map<int, Tensor> out;
  for (int id : leaves_) {
    const Tensor& slot = grads_[static_cast<size_t>(id)];
    out[id] = slot.defined() ? slot : Tensor(vals_[static_cast<size_t>(id)].shape(),
                                             vals_[static_cast<size_t>(id)].prec());
  }
  return out;
}

void set_backward_fault(Op op, double s) {
  g_fault.active = true;
  g_fault.op = op;
  g_fault.scale = s;
}

void clear_backward_fault() { g_fault.active = false; }

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  if (precision() != Prec::f64) fail("grad_check: requires f64 mode");
  Tape tape;
  Tensor xv = tape.var(x.clone());
  Tensor loss = f(xv);
  if (loss.size() != 1) fail("grad_check: f must return a scalar");
  const double f0 = loss.at(0);
  if (!std::isfinite(f0)) fail("grad_check: f(x) is not finite");
  tape.backward(loss);
  Tensor g = tape.grad(xv);

  Tensor xp = x.clone();
  double max_rel = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    const double xi = xp.at(i);
    xp.set(i, xi + eps);
    const double fp = f(xp).at(0);
    xp.set(i, xi - eps);
    const double fm = f(xp).at(0);
    xp.set(i, xi);
    const double fd = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(fd - g.at(i)) / (std::abs(g.at(i)) + 1e-8);
    if (rel > max_rel) max_rel = rel;
  }
  return max_rel;
}

}  // namespace ode2vae
