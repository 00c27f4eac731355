#include "catx/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace catx {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

}  // namespace

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(size_t(numel(shape_)), 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  require(int64_t(values.size()) == numel(shape_),
          "tensor: " + std::to_string(values.size()) + " values for shape " +
              shape_str(shape_));
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::full(Shape s, double v) {
  Tensor t(std::move(s));
  std::fill(t.data_->begin(), t.data_->end(), v);
  return t;
}

Tensor Tensor::eye(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) (*t.data_)[size_t(i) * n + i] = 1.0;
  return t;
}

double Tensor::item() const {
  require(size() == 1, "item: tensor has " + std::to_string(size()) + " elements");
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  require(int(idx.size()) == ndim(), "at: rank mismatch");
  int64_t flat = 0;
  int i = 0;
  for (int v : idx) {
    flat = flat * shape_[size_t(i)] + v;
    ++i;
  }
  return (*data_)[size_t(flat)];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

// --- Tape -------------------------------------------------------------------

Tensor Tape::watch(const Tensor& value) {
  Tensor t = value;
  if (precision_ == Precision::f32) {
    for (double& v : *t.data_) v = double(float(v));
  }
  t.tape_ = this;
  t.node_ = int(nodes_.size());
  nodes_.push_back(Node{t.shape_, nullptr});
  return t;
}

Tensor Tape::emit(Shape shape, std::vector<double> values, Vjp vjp) {
  if (precision_ == Precision::f32) {
    for (double& v : values) v = double(float(v));
  }
  Tensor t(std::move(shape), std::move(values));
  t.tape_ = this;
  t.node_ = int(nodes_.size());
  nodes_.push_back(Node{t.shape_, std::move(vjp)});
  return t;
}

std::vector<double>& Tape::grad_buf(int node) {
  auto& g = grads_[size_t(node)];
  if (g.empty()) g.assign(size_t(numel(nodes_[size_t(node)].shape)), 0.0);
  return g;
}

void Tape::add_grad(int node, const std::vector<double>& g) {
  auto& buf = grad_buf(node);
  require(buf.size() == g.size(), "add_grad: gradient size mismatch");
  for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void Tape::add_grad_at(int node, int64_t index, double g) {
  grad_buf(node)[size_t(index)] += g;
}

void Tape::backward(const Tensor& loss) {
  require(loss.tape() == this, "backward: loss is not on this tape");
  require(loss.size() == 1, "backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  grads_.assign(nodes_.size(), {});
  grad_buf(loss.node())[0] = 1.0;
  for (int i = loss.node(); i >= 0; --i) {
    auto& g = grads_[size_t(i)];
    if (g.empty()) continue;  // not on the path to the loss
    if (nodes_[size_t(i)].vjp) nodes_[size_t(i)].vjp(*this, g);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  require(t.tape() == this && t.node() >= 0, "grad: tensor is not on this tape");
  const auto& g = grads_[size_t(t.node())];
  if (g.empty()) return Tensor(t.shape());
  return Tensor(t.shape(), g);
}

Tape* common_tape(std::initializer_list<const Tensor*> xs) {
  Tape* tape = nullptr;
  for (const Tensor* x : xs) {
    if (!x->on_tape()) continue;
    if (tape && x->tape() != tape)
      throw TensorError("op: inputs belong to different tapes");
    tape = x->tape();
  }
  return tape;
}

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  Tape* tp = common_tape({&a, &b});
  if (!tp) return Tensor(a.shape(), std::move(out));
  int na = a.node(), nb = b.node();
  return tp->emit(a.shape(), std::move(out),
                  [na, nb](Tape& t, const std::vector<double>& g) {
                    if (na >= 0) t.add_grad(na, g);
                    if (nb >= 0) t.add_grad(nb, g);
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  Tape* tp = common_tape({&a, &b});
  if (!tp) return Tensor(a.shape(), std::move(out));
  int na = a.node(), nb = b.node();
  return tp->emit(a.shape(), std::move(out),
                  [na, nb](Tape& t, const std::vector<double>& g) {
                    if (na >= 0) t.add_grad(na, g);
                    if (nb >= 0) {
                      auto& buf = t.grad_buf(nb);
                      for (size_t i = 0; i < g.size(); ++i) buf[i] -= g[i];
                    }
                  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  Tape* tp = common_tape({&a, &b});
  if (!tp) return Tensor(a.shape(), std::move(out));
  int na = a.node(), nb = b.node();
  Tensor av = a.detached(), bv = b.detached();
  return tp->emit(a.shape(), std::move(out),
                  [na, nb, av, bv](Tape& t, const std::vector<double>& g) {
                    if (na >= 0) {
                      auto& buf = t.grad_buf(na);
                      for (size_t i = 0; i < g.size(); ++i)
                        buf[i] += g[i] * bv.values()[i];
                    }
                    if (nb >= 0) {
                      auto& buf = t.grad_buf(nb);
                      for (size_t i = 0; i < g.size(); ++i)
                        buf[i] += g[i] * av.values()[i];
                    }
                  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= c;
  if (!a.on_tape()) return Tensor(a.shape(), std::move(out));
  int na = a.node();
  return a.tape()->emit(a.shape(), std::move(out),
                        [na, c](Tape& t, const std::vector<double>& g) {
                          auto& buf = t.grad_buf(na);
                          for (size_t i = 0; i < g.size(); ++i) buf[i] += c * g[i];
                        });
}

Tensor smul(const Tensor& a, const Tensor& s) {
  require(s.size() == 1, "smul: scale must be a scalar tensor");
  double c = s.values()[0];
  std::vector<double> out(a.values());
  for (double& v : out) v *= c;
  Tape* tp = common_tape({&a, &s});
  if (!tp) return Tensor(a.shape(), std::move(out));
  int na = a.node(), ns = s.node();
  Tensor av = a.detached();
  return tp->emit(a.shape(), std::move(out),
                  [na, ns, c, av](Tape& t, const std::vector<double>& g) {
                    if (na >= 0) {
                      auto& buf = t.grad_buf(na);
                      for (size_t i = 0; i < g.size(); ++i) buf[i] += c * g[i];
                    }
                    if (ns >= 0) {
                      double acc = 0.0;
                      for (size_t i = 0; i < g.size(); ++i)
                        acc += g[i] * av.values()[i];
                      t.add_grad_at(ns, 0, acc);
                    }
                  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// --- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul: both inputs must be 2-d");
  require(a.cols() == b.rows(), "matmul: inner dimensions disagree, " +
                                    shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(size_t(m) * n);
  {
    ECMap A(a.data(), m, k), B(b.data(), k, n);
    EMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  Tape* tp = common_tape({&a, &b});
  if (!tp) return Tensor({m, n}, std::move(out));
  int na = a.node(), nb = b.node();
  Tensor av = a.detached(), bv = b.detached();
  return tp->emit({m, n}, std::move(out),
                  [na, nb, av, bv, m, k, n](Tape& t, const std::vector<double>& g) {
                    ECMap G(g.data(), m, n);
                    if (na >= 0) {
                      ECMap B(bv.data(), k, n);
                      EMap GA(t.grad_buf(na).data(), m, k);
                      GA.noalias() += G * B.transpose();
                    }
                    if (nb >= 0) {
                      ECMap A(av.data(), m, k);
                      EMap GB(t.grad_buf(nb).data(), k, n);
                      GB.noalias() += A.transpose() * G;
                    }
                  });
}

Tensor transpose(const Tensor& a) {
  require(a.ndim() == 2, "transpose: input must be 2-d");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(size_t(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[size_t(j) * m + i] = a.data()[size_t(i) * n + j];
  if (!a.on_tape()) return Tensor({n, m}, std::move(out));
  int na = a.node();
  return a.tape()->emit({n, m}, std::move(out),
                        [na, m, n](Tape& t, const std::vector<double>& g) {
                          auto& buf = t.grad_buf(na);
                          for (int i = 0; i < n; ++i)
                            for (int j = 0; j < m; ++j)
                              buf[size_t(j) * n + i] += g[size_t(i) * m + j];
                        });
}

Tensor reshape(const Tensor& x, Shape s) {
  require(numel(s) == x.size(), "reshape: cannot view " + shape_str(x.shape()) +
                                    " as " + shape_str(s));
  std::vector<double> out(x.values());
  if (!x.on_tape()) return Tensor(std::move(s), std::move(out));
  int nx = x.node();
  return x.tape()->emit(std::move(s), std::move(out),
                        [nx](Tape& t, const std::vector<double>& g) {
                          t.add_grad(nx, g);
                        });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  require(!xs.empty(), "concat: no inputs");
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  for (const Tensor& x : xs) require(x.ndim() == 2, "concat: inputs must be 2-d");
  int rows = 0, cols = xs[0].cols();
  if (axis == 0) {
    for (const Tensor& x : xs) {
      require(x.cols() == cols, "concat: column mismatch");
      rows += x.rows();
    }
  } else {
    rows = xs[0].rows();
    cols = 0;
    for (const Tensor& x : xs) {
      require(x.rows() == rows, "concat: row mismatch");
      cols += x.cols();
    }
  }
  std::vector<double> out(size_t(rows) * cols);
  std::vector<int> offsets;
  int off = 0;
  for (const Tensor& x : xs) {
    offsets.push_back(off);
    if (axis == 0) {
      std::copy(x.values().begin(), x.values().end(),
                out.begin() + int64_t(off) * cols);
      off += x.rows();
    } else {
      for (int r = 0; r < rows; ++r)
        std::copy(x.data() + int64_t(r) * x.cols(),
                  x.data() + int64_t(r + 1) * x.cols(),
                  out.begin() + int64_t(r) * cols + off);
      off += x.cols();
    }
  }
  Tape* tp = nullptr;
  for (const Tensor& x : xs) {
    Tape* xt = common_tape({&x});
    if (xt) {
      require(!tp || tp == xt, "concat: inputs belong to different tapes");
      tp = xt;
    }
  }
  if (!tp) return Tensor({rows, cols}, std::move(out));
  struct Piece { int node, rows, cols, offset; };
  std::vector<Piece> pieces;
  for (size_t i = 0; i < xs.size(); ++i)
    pieces.push_back({xs[i].node(), xs[i].rows(), xs[i].cols(), offsets[i]});
  return tp->emit({rows, cols}, std::move(out),
                  [pieces, axis, cols](Tape& t, const std::vector<double>& g) {
                    for (const Piece& p : pieces) {
                      if (p.node < 0) continue;
                      auto& buf = t.grad_buf(p.node);
                      if (axis == 0) {
                        for (int64_t i = 0; i < int64_t(p.rows) * p.cols; ++i)
                          buf[size_t(i)] += g[size_t(int64_t(p.offset) * cols + i)];
                      } else {
                        for (int r = 0; r < p.rows; ++r)
                          for (int c = 0; c < p.cols; ++c)
                            buf[size_t(r) * p.cols + c] +=
                                g[size_t(r) * cols + p.offset + c];
                      }
                    }
                  });
}

Tensor slice(const Tensor& x, int r0, int r1, int c0, int c1) {
  require(x.ndim() == 2, "slice: input must be 2-d");
  require(0 <= r0 && r0 <= r1 && r1 <= x.rows() && 0 <= c0 && c0 <= c1 &&
              c1 <= x.cols(),
          "slice: block out of range for " + shape_str(x.shape()));
  const int h = r1 - r0, w = c1 - c0, cols = x.cols();
  std::vector<double> out(size_t(h) * w);
  for (int r = 0; r < h; ++r)
    std::copy(x.data() + int64_t(r0 + r) * cols + c0,
              x.data() + int64_t(r0 + r) * cols + c1, out.begin() + int64_t(r) * w);
  if (!x.on_tape()) return Tensor({h, w}, std::move(out));
  int nx = x.node();
  return x.tape()->emit({h, w}, std::move(out),
                        [nx, r0, c0, h, w, cols](Tape& t, const std::vector<double>& g) {
                          auto& buf = t.grad_buf(nx);
                          for (int r = 0; r < h; ++r)
                            for (int c = 0; c < w; ++c)
                              buf[size_t(r0 + r) * cols + c0 + c] +=
                                  g[size_t(r) * w + c];
                        });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  return slice(x, r0, r1, 0, x.cols());
}

Tensor repeat_interleave_rows(const Tensor& x, int m) {
  require(x.ndim() == 2 && m >= 1, "repeat_interleave_rows: bad arguments");
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(size_t(r) * m * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < m; ++j)
      std::copy(x.data() + int64_t(i) * c, x.data() + int64_t(i + 1) * c,
                out.begin() + (int64_t(i) * m + j) * c);
  if (!x.on_tape()) return Tensor({r * m, c}, std::move(out));
  int nx = x.node();
  return x.tape()->emit({r * m, c}, std::move(out),
                        [nx, r, c, m](Tape& t, const std::vector<double>& g) {
                          auto& buf = t.grad_buf(nx);
                          for (int i = 0; i < r; ++i)
                            for (int j = 0; j < m; ++j)
                              for (int k = 0; k < c; ++k)
                                buf[size_t(i) * c + k] +=
                                    g[(size_t(i) * m + j) * c + k];
                        });
}

Tensor row_group_weighted_sum(const Tensor& s, const Tensor& w) {
  require(s.ndim() == 2 && w.ndim() == 2, "row_group_weighted_sum: 2-d inputs");
  const int k = w.rows(), p = w.cols(), d = s.cols();
  require(s.rows() == k * p, "row_group_weighted_sum: rows " +
                                 std::to_string(s.rows()) + " != K*P = " +
                                 std::to_string(k * p));
  std::vector<double> out(size_t(k) * d, 0.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < p; ++j) {
      const double wij = w.data()[size_t(i) * p + j];
      const double* srow = s.data() + (int64_t(i) * p + j) * d;
      double* orow = out.data() + int64_t(i) * d;
      for (int q = 0; q < d; ++q) orow[q] += wij * srow[q];
    }
  Tape* tp = common_tape({&s, &w});
  if (!tp) return Tensor({k, d}, std::move(out));
  int ns = s.node(), nw = w.node();
  Tensor sv = s.detached(), wv = w.detached();
  return tp->emit({k, d}, std::move(out),
                  [ns, nw, sv, wv, k, p, d](Tape& t, const std::vector<double>& g) {
                    if (ns >= 0) {
                      auto& buf = t.grad_buf(ns);
                      for (int i = 0; i < k; ++i)
                        for (int j = 0; j < p; ++j) {
                          const double wij = wv.data()[size_t(i) * p + j];
                          for (int q = 0; q < d; ++q)
                            buf[(size_t(i) * p + j) * d + q] +=
                                wij * g[size_t(i) * d + q];
                        }
                    }
                    if (nw >= 0) {
                      auto& buf = t.grad_buf(nw);
                      for (int i = 0; i < k; ++i)
                        for (int j = 0; j < p; ++j) {
                          double acc = 0.0;
                          const double* srow = sv.data() + (int64_t(i) * p + j) * d;
                          for (int q = 0; q < d; ++q)
                            acc += srow[q] * g[size_t(i) * d + q];
                          buf[size_t(i) * p + j] += acc;
                        }
                    }
                  });
}

Tensor flip_cols_chw(const Tensor& map) {
  require(map.ndim() == 3, "flip_cols_chw: input must be [C,H,W]");
  const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
  std::vector<double> out(map.values().size());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out[(size_t(ch) * h + i) * w + j] =
            map.data()[(size_t(ch) * h + i) * w + (w - 1 - j)];
  if (!map.on_tape()) return Tensor(map.shape(), std::move(out));
  int nm = map.node();
  return map.tape()->emit(map.shape(), std::move(out),
                          [nm, c, h, w](Tape& t, const std::vector<double>& g) {
                            auto& buf = t.grad_buf(nm);
                            for (int ch = 0; ch < c; ++ch)
                              for (int i = 0; i < h; ++i)
                                for (int j = 0; j < w; ++j)
                                  buf[(size_t(ch) * h + i) * w + (w - 1 - j)] +=
                                      g[(size_t(ch) * h + i) * w + j];
                          });
}

// --- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  if (!x.on_tape()) return Tensor::scalar(acc);
  int nx = x.node();
  return x.tape()->emit({1}, {acc}, [nx](Tape& t, const std::vector<double>& g) {
    auto& buf = t.grad_buf(nx);
    for (double& v : buf) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / double(x.size())); }

Tensor sum_axis(const Tensor& x, int axis) {
  require(x.ndim() == 2, "sum_axis: input must be 2-d");
  require(axis == 0 || axis == 1, "sum_axis: axis must be 0 or 1");
  const int m = x.rows(), n = x.cols();
  const int outn = axis == 0 ? n : m;
  std::vector<double> out(size_t(outn), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[size_t(axis == 0 ? j : i)] += x.data()[size_t(i) * n + j];
  if (!x.on_tape()) return Tensor({outn}, std::move(out));
  int nx = x.node();
  return x.tape()->emit({outn}, std::move(out),
                        [nx, m, n, axis](Tape& t, const std::vector<double>& g) {
                          auto& buf = t.grad_buf(nx);
                          for (int i = 0; i < m; ++i)
                            for (int j = 0; j < n; ++j)
                              buf[size_t(i) * n + j] += g[size_t(axis == 0 ? j : i)];
                        });
}

Tensor mean_axis(const Tensor& x, int axis) {
  const double denom = axis == 0 ? double(x.rows()) : double(x.cols());
  return scale(sum_axis(x, axis), 1.0 / denom);
}

// --- nonlinearities ----------------------------------------------------------

namespace {

// Shared unary-op plumbing: f(values) with df supplied for the VJP.
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(x.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(x.values()[i]);
  if (!x.on_tape()) return Tensor(x.shape(), std::move(out));
  int nx = x.node();
  Tensor xv = x.detached();
  return x.tape()->emit(x.shape(), std::move(out),
                        [nx, xv, df](Tape& t, const std::vector<double>& g) {
                          auto& buf = t.grad_buf(nx);
                          for (size_t i = 0; i < g.size(); ++i)
                            buf[i] += g[i] * df(xv.values()[i]);
                        });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_val(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

// sin(sqrt x)/sqrt x and its derivative in x, series below the cutover so the
// value and gradient stay finite at x = 0 (used by the small-angle branch).
double coeff_a_val(double x) {
  if (x < 1e-8) return 1.0 - x / 6.0 + x * x / 120.0;
  const double s = std::sqrt(x);
  return std::sin(s) / s;
}
double coeff_a_grad(double x) {
  if (x < 1e-6) return -1.0 / 6.0 + x / 60.0;
  const double s = std::sqrt(x);
  return (s * std::cos(s) - std::sin(s)) / (2.0 * s * s * s);
}
// (1 - cos(sqrt x))/x and derivative.
double coeff_b_val(double x) {
  if (x < 1e-8) return 0.5 - x / 24.0 + x * x / 720.0;
  return (1.0 - std::cos(std::sqrt(x))) / x;
}
double coeff_b_grad(double x) {
  if (x < 1e-6) return -1.0 / 24.0 + x / 360.0;
  const double s = std::sqrt(x);
  return (s * std::sin(s) / 2.0 - (1.0 - std::cos(s))) / (x * x);
}

}  // namespace

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double v) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 - s);
      });
}

Tensor gelu(const Tensor& x) { return unary(x, gelu_val, gelu_grad); }

Tensor rot_coeff_a(const Tensor& x) { return unary(x, coeff_a_val, coeff_a_grad); }
Tensor rot_coeff_b(const Tensor& x) { return unary(x, coeff_b_val, coeff_b_grad); }

Tensor softmax(const Tensor& x, int axis) {
  require(axis >= 0 && axis < x.ndim(),
          "softmax: axis " + std::to_string(axis) + " invalid for " +
              shape_str(x.shape()));
  int64_t outer = 1, inner = 1;
  const int n = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  std::vector<double> out(x.values().size());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      double mx = -1e308;
      for (int i = 0; i < n; ++i) mx = std::max(mx, x.values()[size_t(base + i * inner)]);
      double denom = 0.0;
      for (int i = 0; i < n; ++i) {
        const double e = std::exp(x.values()[size_t(base + i * inner)] - mx);
        out[size_t(base + i * inner)] = e;
        denom += e;
      }
      for (int i = 0; i < n; ++i) out[size_t(base + i * inner)] /= denom;
    }
  if (!x.on_tape()) return Tensor(x.shape(), std::move(out));
  int nx = x.node();
  Tensor yv(x.shape(), out);  // keep the normalized values for the VJP
  return x.tape()->emit(
      x.shape(), std::move(out),
      [nx, yv, outer, inner, n](Tape& t, const std::vector<double>& g) {
        auto& buf = t.grad_buf(nx);
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            double dot = 0.0;
            for (int i = 0; i < n; ++i) {
              const size_t idx = size_t(base + i * inner);
              dot += g[idx] * yv.values()[idx];
            }
            for (int i = 0; i < n; ++i) {
              const size_t idx = size_t(base + i * inner);
              buf[idx] += yv.values()[idx] * (g[idx] - dot);
            }
          }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require(x.ndim() >= 1, "layer_norm: input must have at least one axis");
  const int c = x.dim(x.ndim() - 1);
  require(gamma.ndim() == 1 && gamma.dim(0) == c && beta.ndim() == 1 &&
              beta.dim(0) == c,
          "layer_norm: gamma/beta length " + shape_str(gamma.shape()) + "/" +
              shape_str(beta.shape()) + " does not match channels " +
              std::to_string(c));
  require(eps > 0.0, "layer_norm: eps must be positive");
  const int64_t rows = x.size() / c;
  std::vector<double> out(x.values().size());
  std::vector<double> xhat(x.values().size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    double m = 0.0;
    for (int i = 0; i < c; ++i) m += xr[i];
    m /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) var += (xr[i] - m) * (xr[i] - m);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[size_t(r)] = is;
    for (int i = 0; i < c; ++i) {
      const double xh = (xr[i] - m) * is;
      xhat[size_t(r * c + i)] = xh;
      out[size_t(r * c + i)] = xh * gamma.values()[size_t(i)] + beta.values()[size_t(i)];
    }
  }
  Tape* tp = common_tape({&x, &gamma, &beta});
  if (!tp) return Tensor(x.shape(), std::move(out));
  int nx = x.node(), ng = gamma.node(), nb = beta.node();
  Tensor gv = gamma.detached();
  auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
  auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
  return tp->emit(
      x.shape(), std::move(out),
      [nx, ng, nb, gv, xh, is, rows, c](Tape& t, const std::vector<double>& g) {
        if (nb >= 0) {
          auto& buf = t.grad_buf(nb);
          for (int64_t r = 0; r < rows; ++r)
            for (int i = 0; i < c; ++i) buf[size_t(i)] += g[size_t(r * c + i)];
        }
        if (ng >= 0) {
          auto& buf = t.grad_buf(ng);
          for (int64_t r = 0; r < rows; ++r)
            for (int i = 0; i < c; ++i)
              buf[size_t(i)] += g[size_t(r * c + i)] * (*xh)[size_t(r * c + i)];
        }
        if (nx >= 0) {
          auto& buf = t.grad_buf(nx);
          for (int64_t r = 0; r < rows; ++r) {
            // dL/dxhat_i = g_i * gamma_i; project out mean and xhat components.
            double sum_d = 0.0, sum_dx = 0.0;
            for (int i = 0; i < c; ++i) {
              const double d = g[size_t(r * c + i)] * gv.values()[size_t(i)];
              sum_d += d;
              sum_dx += d * (*xh)[size_t(r * c + i)];
            }
            for (int i = 0; i < c; ++i) {
              const double d = g[size_t(r * c + i)] * gv.values()[size_t(i)];
              buf[size_t(r * c + i)] +=
                  (*is)[size_t(r)] *
                  (d - sum_d / c - (*xh)[size_t(r * c + i)] * sum_dx / c);
            }
          }
        }
      });
}

// --- structured ops ----------------------------------------------------------

Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel, int stride) {
  require(x.ndim() == 3, "conv_transpose2d: input must be [C,H,W]");
  require(kernel.ndim() == 4, "conv_transpose2d: kernel must be [C,Cout,k,k]");
  require(stride >= 1, "conv_transpose2d: stride must be >= 1");
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(kernel.dim(0) == ci, "conv_transpose2d: kernel expects " +
                                   std::to_string(kernel.dim(0)) +
                                   " input channels, feature map has " +
                                   std::to_string(ci));
  const int co = kernel.dim(1), k = kernel.dim(2);
  require(kernel.dim(3) == k, "conv_transpose2d: kernel must be square");
  require(k >= stride, "conv_transpose2d: kernel smaller than stride");
  const int pad = (k - stride) / 2;  // begin padding; total is k - stride
  const int oh = stride * h, ow = stride * w;

  // Lower to one dgemm: M = K_mat^T * X with K_mat [Ci, Co*k*k], X [Ci, H*W],
  // then scatter-add M into the output grid.
  const int64_t hw = int64_t(h) * w;
  const int64_t kk = int64_t(co) * k * k;
  std::vector<double> mbuf(size_t(kk * hw));
  {
    ECMap K(kernel.data(), ci, kk), X(x.data(), ci, hw);
    EMap M(mbuf.data(), kk, hw);
    M.noalias() = K.transpose() * X;
  }
  std::vector<double> out(size_t(co) * oh * ow, 0.0);
  for (int c = 0; c < co; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const double* mrow = mbuf.data() + ((int64_t(c) * k + ki) * k + kj) * hw;
        for (int i = 0; i < h; ++i) {
          const int oy = i * stride - pad + ki;
          if (oy < 0 || oy >= oh) continue;
          for (int j = 0; j < w; ++j) {
            const int ox = j * stride - pad + kj;
            if (ox < 0 || ox >= ow) continue;
            out[(size_t(c) * oh + oy) * ow + ox] += mrow[int64_t(i) * w + j];
          }
        }
      }

  Tape* tp = common_tape({&x, &kernel});
  if (!tp) return Tensor({co, oh, ow}, std::move(out));
  int nx = x.node(), nk = kernel.node();
  Tensor xv = x.detached(), kv = kernel.detached();
  return tp->emit(
      {co, oh, ow}, std::move(out),
      [nx, nk, xv, kv, ci, co, h, w, k, stride, pad, oh,
       ow](Tape& t, const std::vector<double>& g) {
        const int64_t hw = int64_t(h) * w;
        const int64_t kk = int64_t(co) * k * k;
        // Gather grad-output into gM, mirroring the forward scatter.
        std::vector<double> gm(size_t(kk * hw), 0.0);
        for (int c = 0; c < co; ++c)
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              double* gmrow = gm.data() + ((int64_t(c) * k + ki) * k + kj) * hw;
              for (int i = 0; i < h; ++i) {
                const int oy = i * stride - pad + ki;
                if (oy < 0 || oy >= oh) continue;
                for (int j = 0; j < w; ++j) {
                  const int ox = j * stride - pad + kj;
                  if (ox < 0 || ox >= ow) continue;
                  gmrow[int64_t(i) * w + j] = g[(size_t(c) * oh + oy) * ow + ox];
                }
              }
            }
        ECMap GM(gm.data(), kk, hw);
        if (nx >= 0) {
          ECMap K(kv.data(), ci, kk);
          EMap GX(t.grad_buf(nx).data(), ci, hw);
          GX.noalias() += K * GM;
        }
        if (nk >= 0) {
          ECMap X(xv.data(), ci, hw);
          EMap GK(t.grad_buf(nk).data(), ci, kk);
          GK.noalias() += X * GM.transpose();
        }
      });
}

namespace {

struct Corner {
  int y0, x0, y1, x1;
  double fy, fx;
  bool clamped_y, clamped_x;
};

Corner locate(double y, double x, int h, int w) {
  Corner c;
  c.clamped_y = y < 0.0 || y > double(h - 1);
  c.clamped_x = x < 0.0 || x > double(w - 1);
  y = std::min(std::max(y, 0.0), double(h - 1));
  x = std::min(std::max(x, 0.0), double(w - 1));
  c.y0 = std::min(int(std::floor(y)), h - 2 >= 0 ? h - 2 : 0);
  c.x0 = std::min(int(std::floor(x)), w - 2 >= 0 ? w - 2 : 0);
  c.y1 = std::min(c.y0 + 1, h - 1);
  c.x1 = std::min(c.x0 + 1, w - 1);
  c.fy = y - c.y0;
  c.fx = x - c.x0;
  return c;
}

}  // namespace

namespace debug {
thread_local std::vector<double>* bilinear_trace = nullptr;
}

Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
  require(map.ndim() == 3, "bilinear_sample: map must be [C,H,W]");
  require(points.ndim() == 2 && points.cols() == 2,
          "bilinear_sample: points must be [P,2]");
  const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const int p = points.rows();
  if (debug::bilinear_trace)
    debug::bilinear_trace->insert(debug::bilinear_trace->end(),
                                  points.values().begin(), points.values().end());
  std::vector<double> out(size_t(p) * c);
  for (int q = 0; q < p; ++q) {
    const double x = points.data()[size_t(q) * 2 + 0];
    const double y = points.data()[size_t(q) * 2 + 1];
    const Corner cr = locate(y, x, h, w);
    const double w00 = (1 - cr.fy) * (1 - cr.fx), w01 = (1 - cr.fy) * cr.fx;
    const double w10 = cr.fy * (1 - cr.fx), w11 = cr.fy * cr.fx;
    for (int ch = 0; ch < c; ++ch) {
      const double* m = map.data() + size_t(ch) * h * w;
      out[size_t(q) * c + ch] = w00 * m[size_t(cr.y0) * w + cr.x0] +
                                w01 * m[size_t(cr.y0) * w + cr.x1] +
                                w10 * m[size_t(cr.y1) * w + cr.x0] +
                                w11 * m[size_t(cr.y1) * w + cr.x1];
    }
  }
  Tape* tp = common_tape({&map, &points});
  if (!tp) return Tensor({p, c}, std::move(out));
  int nm = map.node(), np = points.node();
  Tensor mv = map.detached(), pv = points.detached();
  return tp->emit(
      {p, c}, std::move(out),
      [nm, np, mv, pv, c, h, w, p](Tape& t, const std::vector<double>& g) {
        for (int q = 0; q < p; ++q) {
          const double x = pv.data()[size_t(q) * 2 + 0];
          const double y = pv.data()[size_t(q) * 2 + 1];
          const Corner cr = locate(y, x, h, w);
          const double w00 = (1 - cr.fy) * (1 - cr.fx), w01 = (1 - cr.fy) * cr.fx;
          const double w10 = cr.fy * (1 - cr.fx), w11 = cr.fy * cr.fx;
          double gx = 0.0, gy = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            const double go = g[size_t(q) * c + ch];
            if (go == 0.0) continue;
            const double* m = mv.data() + size_t(ch) * h * w;
            if (nm >= 0) {
              auto& buf = t.grad_buf(nm);
              double* bm = buf.data() + size_t(ch) * h * w;
              bm[size_t(cr.y0) * w + cr.x0] += go * w00;
              bm[size_t(cr.y0) * w + cr.x1] += go * w01;
              bm[size_t(cr.y1) * w + cr.x0] += go * w10;
              bm[size_t(cr.y1) * w + cr.x1] += go * w11;
            }
            if (np >= 0) {
              const double v00 = m[size_t(cr.y0) * w + cr.x0];
              const double v01 = m[size_t(cr.y0) * w + cr.x1];
              const double v10 = m[size_t(cr.y1) * w + cr.x0];
              const double v11 = m[size_t(cr.y1) * w + cr.x1];
              gx += go * ((1 - cr.fy) * (v01 - v00) + cr.fy * (v11 - v10));
              gy += go * ((1 - cr.fx) * (v10 - v00) + cr.fx * (v11 - v01));
            }
          }
          if (np >= 0) {
            auto& buf = t.grad_buf(np);
            if (!cr.clamped_x) buf[size_t(q) * 2 + 0] += gx;
            if (!cr.clamped_y) buf[size_t(q) * 2 + 1] += gy;
          }
        }
      });
}

// --- affine helpers ----------------------------------------------------------

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require(x.ndim() == 2 && b.ndim() == 1 && b.dim(0) == x.cols(),
          "add_rowvec: want [R,C]+[C], got " + shape_str(x.shape()) + "+" +
              shape_str(b.shape()));
  const int m = x.rows(), n = x.cols();
  std::vector<double> out(x.values());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[size_t(i) * n + j] += b.values()[size_t(j)];
  Tape* tp = common_tape({&x, &b});
  if (!tp) return Tensor(x.shape(), std::move(out));
  int nx = x.node(), nb = b.node();
  return tp->emit(x.shape(), std::move(out),
                  [nx, nb, m, n](Tape& t, const std::vector<double>& g) {
                    if (nx >= 0) t.add_grad(nx, g);
                    if (nb >= 0) {
                      auto& buf = t.grad_buf(nb);
                      for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                          buf[size_t(j)] += g[size_t(i) * n + j];
                    }
                  });
}

Tensor add_colvec(const Tensor& x, const Tensor& b) {
  require(x.ndim() == 2 && b.ndim() == 1 && b.dim(0) == x.rows(),
          "add_colvec: want [R,C]+[R], got " + shape_str(x.shape()) + "+" +
              shape_str(b.shape()));
  const int m = x.rows(), n = x.cols();
  std::vector<double> out(x.values());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[size_t(i) * n + j] += b.values()[size_t(i)];
  Tape* tp = common_tape({&x, &b});
  if (!tp) return Tensor(x.shape(), std::move(out));
  int nx = x.node(), nb = b.node();
  return tp->emit(x.shape(), std::move(out),
                  [nx, nb, m, n](Tape& t, const std::vector<double>& g) {
                    if (nx >= 0) t.add_grad(nx, g);
                    if (nb >= 0) {
                      auto& buf = t.grad_buf(nb);
                      for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                          buf[size_t(i)] += g[size_t(i) * n + j];
                    }
                  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, transpose(w));
  if (!b.defined() || b.size() == 0) return y;
  return add_rowvec(y, b);
}

}  // namespace catx
