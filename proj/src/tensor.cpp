#include "ode2vae/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace ode2vae {

namespace {
Prec g_precision = Prec::f32;
}

Prec precision() { return g_precision; }
void set_precision(Prec p) { g_precision = p; }

Shape::Shape(std::initializer_list<int> dims) {
  if (dims.size() > 3) throw std::runtime_error("Shape: rank > 3 unsupported");
  rank = static_cast<int>(dims.size());
  int i = 0;
  for (int d : dims) {
    if (d <= 0) throw std::runtime_error("Shape: nonpositive extent " + std::to_string(d));
    ext[static_cast<size_t>(i++)] = d;
  }
}

Shape Shape::vec(int n) { return Shape{n}; }
Shape Shape::mat(int r, int c) { return Shape{r, c}; }

int64_t Shape::numel() const {
  int64_t n = 1;
  for (int i = 0; i < rank; ++i) n *= ext[static_cast<size_t>(i)];
  return n;
}

bool Shape::operator==(const Shape& o) const {
  if (rank != o.rank) return false;
  for (int i = 0; i < rank; ++i)
    if (ext[static_cast<size_t>(i)] != o.ext[static_cast<size_t>(i)]) return false;
  return true;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << "(";
  for (int i = 0; i < rank; ++i) os << (i ? "," : "") << ext[static_cast<size_t>(i)];
  os << ")";
  return os.str();
}

Buffer::Buffer(Prec p, int64_t n) : prec(p) {
  if (p == Prec::f64)
    f64.assign(static_cast<size_t>(n), 0.0);
  else
    f32.assign(static_cast<size_t>(n), 0.0f);
}

int64_t Buffer::size() const {
  return prec == Prec::f64 ? static_cast<int64_t>(f64.size()) : static_cast<int64_t>(f32.size());
}

double Buffer::get(int64_t i) const {
  return prec == Prec::f64 ? f64[static_cast<size_t>(i)]
                           : static_cast<double>(f32[static_cast<size_t>(i)]);
}

void Buffer::set(int64_t i, double v) {
  if (prec == Prec::f64)
    f64[static_cast<size_t>(i)] = v;
  else
    f32[static_cast<size_t>(i)] = static_cast<float>(v);
}

Tensor::Tensor(const Shape& s, Prec p) : shape_(s), buf_(std::make_shared<Buffer>(p, s.numel())) {}

Tensor Tensor::zeros(const Shape& s) { return Tensor(s, g_precision); }

Tensor Tensor::full(const Shape& s, double v) {
  Tensor t(s, g_precision);
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) t.buf_->set(i, v);
  return t;
}

Tensor Tensor::scalar_of(double v) { return full(Shape::scalar(), v); }

Tensor Tensor::from(const Shape& s, const std::vector<double>& vals) {
  if (static_cast<int64_t>(vals.size()) != s.numel())
    throw std::runtime_error("Tensor::from: " + std::to_string(vals.size()) +
                             " values for shape " + s.str());
  Tensor t(s, g_precision);
  for (int64_t i = 0; i < t.size(); ++i) t.buf_->set(i, vals[static_cast<size_t>(i)]);
  return t;
}

Prec Tensor::prec() const { return buf_ ? buf_->prec : g_precision; }

double Tensor::at(int64_t i) const { return buf_->get(i); }
void Tensor::set(int64_t i, double v) { buf_->set(i, v); }

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<size_t>(size()));
  for (int64_t i = 0; i < size(); ++i) out[static_cast<size_t>(i)] = buf_->get(i);
  return out;
}

bool Tensor::all_finite() const {
  const int64_t n = size();
  if (buf_->prec == Prec::f64) {
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(buf_->f64[static_cast<size_t>(i)])) return false;
  } else {
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(buf_->f32[static_cast<size_t>(i)])) return false;
  }
  return true;
}

Tensor Tensor::reshaped(const Shape& s) const {
  if (s.numel() != size())
    throw std::runtime_error("reshape: element count mismatch " + shape_.str() + " -> " + s.str());
  Tensor t(*this);
  t.shape_ = s;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t(*this);
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t(shape_, buf_->prec);
  if (buf_->prec == Prec::f64)
    t.buf_->f64 = buf_->f64;
  else
    t.buf_->f32 = buf_->f32;
  return t;
}

}  // namespace ode2vae
