#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace ode2vae {

// Process-wide numeric mode: f64 for gradient/oracle checks, f32 for training.
// Never mixed within one tape.
enum class Prec { f32, f64 };

Prec precision();
void set_precision(Prec p);

// Dense row-major shapes up to rank 3. Rank 0 is a scalar.
struct Shape {
  std::array<int, 3> ext{1, 1, 1};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> dims);

  static Shape scalar() { return Shape{}; }
  static Shape vec(int n);
  static Shape mat(int r, int c);

  int64_t numel() const;
  int operator[](int i) const { return ext[static_cast<size_t>(i)]; }
  bool operator==(const Shape& o) const;
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const;
};

struct Buffer {
  Prec prec;
  std::vector<float> f32;
  std::vector<double> f64;

  Buffer(Prec p, int64_t n);
  int64_t size() const;
  double get(int64_t i) const;
  void set(int64_t i, double v);
};

class Tape;

// Value-semantic handle to a dense array; copies share the underlying buffer.
// A tensor is optionally attached to a tape node (node_ >= 0).
class Tensor {
 public:
  Tensor() = default;
  Tensor(const Shape& s, Prec p);

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double v);
  static Tensor scalar_of(double v);
  static Tensor from(const Shape& s, const std::vector<double>& vals);

  bool defined() const { return buf_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank; }
  int dim(int i) const { return shape_[i]; }
  int64_t size() const { return shape_.numel(); }
  Prec prec() const;

  double at(int64_t i) const;
  void set(int64_t i, double v);
  std::vector<double> to_vector() const;
  bool all_finite() const;

  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }

  Tensor reshaped(const Shape& s) const;  // metadata view: same buffer, same node
  Tensor detached() const;                // same buffer, off tape
  Tensor clone() const;                   // deep copy, off tape

  Buffer& buf() { return *buf_; }
  const Buffer& buf() const { return *buf_; }
  const std::shared_ptr<Buffer>& buf_ptr() const { return buf_; }

 private:
  friend class Tape;
  Shape shape_{};
  std::shared_ptr<Buffer> buf_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

template <typename T> T* data_of(Buffer& b);
template <typename T> const T* data_of(const Buffer& b);
template <> inline float* data_of<float>(Buffer& b) { return b.f32.data(); }
template <> inline double* data_of<double>(Buffer& b) { return b.f64.data(); }
template <> inline const float* data_of<float>(const Buffer& b) { return b.f32.data(); }
template <> inline const double* data_of<double>(const Buffer& b) { return b.f64.data(); }

}  // namespace ode2vae
