#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace catx {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Thrown on contract violations (shape mismatch, bad axis, ...).
struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

enum class Precision { f64, f32 };

class Tape;

// Dense row-major tensor of doubles. A tensor optionally carries a node id
// on a Tape; tensors without one are constants and never receive gradients.
// Storage is shared (cheap copies); ops never mutate their inputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor eye(int n);

  const Shape& shape() const { return shape_; }
  int ndim() const { return int(shape_.size()); }
  int dim(int i) const { return shape_[size_t(i)]; }
  int rows() const { return shape_[0]; }
  int cols() const { return shape_[1]; }
  int64_t size() const { return data_ ? int64_t(data_->size()) : 0; }
  bool defined() const { return bool(data_); }

  const std::vector<double>& values() const { return *data_; }
  std::vector<double>& values() { return *data_; }
  const double* data() const { return data_->data(); }
  double* data() { return data_->data(); }

  double item() const;                       // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  bool on_tape() const { return node_ >= 0; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Detached value copy (shares storage, drops tape membership).
  Tensor detached() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Nodes are recorded in execution order, which is a
// topological order by construction. One tape per training context; a tape
// must stay on a single thread during forward/backward.
class Tape {
 public:
  using Vjp = std::function<void(Tape&, const std::vector<double>&)>;

  explicit Tape(Precision precision = Precision::f64) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }

  // Register a value as a differentiable leaf (shares storage).
  Tensor watch(const Tensor& value);

  // Reverse accumulation from a scalar loss. May be called repeatedly;
  // gradients are reset at entry. Nodes off the path keep zero gradients.
  void backward(const Tensor& loss);

  // Gradient of the last backward() w.r.t. t; zeros if t was not reached.
  Tensor grad(const Tensor& t) const;

  size_t num_nodes() const { return nodes_.size(); }

  // --- op internals ---
  Tensor emit(Shape shape, std::vector<double> values, Vjp vjp);
  void add_grad(int node, const std::vector<double>& g);
  void add_grad_at(int node, int64_t index, double g);
  std::vector<double>& grad_buf(int node);

 private:
  struct Node {
    Shape shape;
    Vjp vjp;  // null for leaves
  };
  Precision precision_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// The tape shared by the given tensors, or nullptr if all are constants.
// Throws if two tensors live on different tapes.
Tape* common_tape(std::initializer_list<const Tensor*> xs);

// ---------------------------------------------------------------------------
// Operations. Each is differentiable w.r.t. every taped input.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double c);
Tensor smul(const Tensor& a, const Tensor& s);         // s: scalar tensor
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);       // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                     // 2-d
Tensor reshape(const Tensor& x, Shape s);

Tensor concat(const std::vector<Tensor>& xs, int axis);        // 2-d, axis 0/1
Tensor slice(const Tensor& x, int r0, int r1, int c0, int c1); // 2-d block
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor repeat_interleave_rows(const Tensor& x, int m);
// s: [K*P, D], w: [K, P] -> out[k] = sum_p w[k,p] * s[k*P+p].
Tensor row_group_weighted_sum(const Tensor& s, const Tensor& w);
Tensor flip_cols_chw(const Tensor& map);               // [C,H,W], reverse W

Tensor sum(const Tensor& x);                           // -> scalar
Tensor mean(const Tensor& x);                          // -> scalar
Tensor sum_axis(const Tensor& x, int axis);            // 2-d -> vector
Tensor mean_axis(const Tensor& x, int axis);

Tensor abs(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);                          // tanh approximation
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

// Rotation-coefficient helpers, analytic in x = theta^2 (series near 0):
//   rot_coeff_a(x) = sin(sqrt x)/sqrt x,  rot_coeff_b(x) = (1-cos(sqrt x))/x.
Tensor rot_coeff_a(const Tensor& x);
Tensor rot_coeff_b(const Tensor& x);

// x: [C,H,W], kernel: [C,Cout,k,k], k >= stride. Total padding k-stride
// (begin=(k-stride)/2), so output is exactly [Cout, stride*H, stride*W].
Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel, int stride);

// map: [C,H,W], points: [P,2] as (x,y) in continuous pixel coordinates where
// sample (row i, col j) sits at (x=j, y=i). Out-of-range points clamp to the
// boundary (their coordinate gradient is zero there). Returns [P,C].
Tensor bilinear_sample(const Tensor& map, const Tensor& points);

namespace debug {
// When set, every bilinear_sample appends its (x,y) pixel coordinates here.
// Used by gradient checks to keep finite-difference probes away from the
// interpolation kinks at integer coordinates.
extern thread_local std::vector<double>* bilinear_trace;
}  // namespace debug

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Broadcast helpers for affine layers.
Tensor add_rowvec(const Tensor& x, const Tensor& b);   // [R,C]+[C]
Tensor add_colvec(const Tensor& x, const Tensor& b);   // [R,C]+[R]

// y = x*W^T + b with x:[R,C], w:[N,C], b:[N] (empty b skips the bias).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace catx
