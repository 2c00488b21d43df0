#include "aunet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "aunet/error.hpp"

namespace aunet::ag {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using MMap = Eigen::Map<MatR>;

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ShapeError("vars belong to different tapes");
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require_same_tape(a, b);
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
}

}  // namespace

// ---- Var ------------------------------------------------------------------

const Shape& Var::shape() const { return tape_->shape(id_); }
std::size_t Var::size() const { return numel(shape()); }
std::span<const double> Var::value() const { return {tape_->data(id_), size()}; }
const double* Var::data() const { return tape_->data(id_); }
double Var::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  return data()[0];
}
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// ---- Tape -----------------------------------------------------------------

Var Tape::constant(Shape shape, std::vector<double> value) {
  if (value.size() != numel(shape))
    throw ShapeError("constant: value size " + std::to_string(value.size()) +
                     " does not match shape " + shape_str(shape));
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::zeros(Shape shape) {
  std::vector<double> v(numel(shape), 0.0);
  return constant(std::move(shape), std::move(v));
}

Var Tape::param(const Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.shape = p.shape;
  n.external = p.value.data();
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::record(Shape shape, std::vector<double> value, bool requires_grad,
                 BackwardFn backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

double* Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(numel(n.shape), 0.0);
  return n.grad.data();
}

std::span<const double> Tape::grad_of(Var v) const {
  const Node& n = nodes_[v.id()];
  return {n.grad.data(), n.grad.size()};
}

void Tape::backward(Var loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
  if (!loss.requires_grad()) return;
  grad(loss.id())[0] += 1.0;
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

void Tape::accumulate_param_grads(GradientBuffer& out, double scale) const {
  for (const auto& [param, id] : param_nodes_) {
    const Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    out.add(*param, n.grad.data(), scale);
  }
}

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* x = a.data();
  const double* y = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib, n](Tape& t, int self) {
                           const double* g = t.grad(self);
                           for (int id : {ia, ib}) {
                             if (!t.requires_grad(id)) continue;
                             double* d = t.grad(id);
                             for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
                           }
                         });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* x = a.data();
  const double* y = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib, n](Tape& t, int self) {
                           const double* g = t.grad(self);
                           const double* x = t.data(ia);
                           const double* y = t.data(ib);
                           if (t.requires_grad(ia)) {
                             double* d = t.grad(ia);
                             for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * y[i];
                           }
                           if (t.requires_grad(ib)) {
                             double* d = t.grad(ib);
                             for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * x[i];
                           }
                         });
}

Var scale(Var a, double s) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* x = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = s * x[i];
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [ia, n, s](Tape& t, int self) {
                           const double* g = t.grad(self);
                           double* d = t.grad(ia);
                           for (std::size_t i = 0; i < n; ++i) d[i] += s * g[i];
                         });
}

Var mul_scalar(Var a, Var s) {
  require_same_tape(a, s);
  if (s.size() != 1) throw ShapeError("mul_scalar: scale must have one element");
  const std::size_t n = a.size();
  const double sv = s.data()[0];
  std::vector<double> out(n);
  const double* x = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = sv * x[i];
  const int ia = a.id(), is = s.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad() || s.requires_grad(),
                         [ia, is, n](Tape& t, int self) {
                           const double* g = t.grad(self);
                           const double* x = t.data(ia);
                           const double sv = t.data(is)[0];
                           if (t.requires_grad(ia)) {
                             double* d = t.grad(ia);
                             for (std::size_t i = 0; i < n; ++i) d[i] += sv * g[i];
                           }
                           if (t.requires_grad(is)) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < n; ++i) acc += g[i] * x[i];
                             t.grad(is)[0] += acc;
                           }
                         });
}

Var relu(Var a) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* x = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [ia, n](Tape& t, int self) {
                           const double* g = t.grad(self);
                           const double* x = t.data(ia);
                           double* d = t.grad(ia);
                           for (std::size_t i = 0; i < n; ++i)
                             if (x[i] > 0.0) d[i] += g[i];
                         });
}

Var sigmoid(Var a) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* x = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [ia, n](Tape& t, int self) {
                           const double* g = t.grad(self);
                           const double* y = t.data(self);
                           double* d = t.grad(ia);
                           for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
                         });
}

Var softplus(Var a) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* x = a.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = x[i] > 0.0 ? x[i] + std::log1p(std::exp(-x[i])) : std::log1p(std::exp(x[i]));
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [ia, n](Tape& t, int self) {
                           const double* g = t.grad(self);
                           const double* x = t.data(ia);
                           double* d = t.grad(ia);
                           for (std::size_t i = 0; i < n; ++i)
                             d[i] += g[i] / (1.0 + std::exp(-x[i]));
                         });
}

Var sum(Var a) {
  const std::size_t n = a.size();
  double acc = 0.0;
  const double* x = a.data();
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  const int ia = a.id();
  return a.tape().record({1}, {acc}, a.requires_grad(), [ia, n](Tape& t, int self) {
    const double g = t.grad(self)[0];
    double* d = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i) d[i] += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var add_n(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("add_n: no inputs");
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

// ---- shape ----------------------------------------------------------------

Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.value().begin(), a.value().end());
  const int ia = a.id();
  const std::size_t n = a.size();
  return a.tape().record(std::move(shape), std::move(out), a.requires_grad(),
                         [ia, n](Tape& t, int self) {
                           const double* g = t.grad(self);
                           double* d = t.grad(ia);
                           for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
                         });
}

Var transpose2d(Var a) {
  require_rank(a, 2, "transpose2d");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.size());
  MMap(out.data(), n, m) = CMap(a.data(), m, n).transpose();
  const int ia = a.id();
  return a.tape().record({n, m}, std::move(out), a.requires_grad(),
                         [ia, m, n](Tape& t, int self) {
                           MMap(t.grad(ia), m, n) += CMap(t.grad(self), n, m).transpose();
                         });
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const int h = xs[0].dim(1), w = xs[0].dim(2);
  int channels = 0;
  bool rg = false;
  for (const Var& x : xs) {
    require_rank(x, 3, "concat_channels");
    require_same_tape(xs[0], x);
    if (x.dim(1) != h || x.dim(2) != w)
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(x.shape()));
    channels += x.dim(0);
    rg = rg || x.requires_grad();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(channels) * h * w);
  std::vector<std::pair<int, std::size_t>> parts;
  for (const Var& x : xs) {
    parts.emplace_back(x.id(), x.size());
    out.insert(out.end(), x.value().begin(), x.value().end());
  }
  return xs[0].tape().record({channels, h, w}, std::move(out), rg,
                             [parts](Tape& t, int self) {
                               const double* g = t.grad(self);
                               std::size_t offset = 0;
                               for (const auto& [id, n] : parts) {
                                 if (t.requires_grad(id)) {
                                   double* d = t.grad(id);
                                   for (std::size_t i = 0; i < n; ++i) d[i] += g[offset + i];
                                 }
                                 offset += n;
                               }
                             });
}

// ---- dense ----------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_same_tape(a, b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MMap(out.data(), m, n).noalias() = CMap(a.data(), m, k) * CMap(b.data(), k, n);
  const int ia = a.id(), ib = b.id();
  return a.tape().record({m, n}, std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib, m, k, n](Tape& t, int self) {
                           CMap g(t.grad(self), m, n);
                           if (t.requires_grad(ia))
                             MMap(t.grad(ia), m, k).noalias() += g * CMap(t.data(ib), k, n).transpose();
                           if (t.requires_grad(ib))
                             MMap(t.grad(ib), k, n).noalias() += CMap(t.data(ia), m, k).transpose() * g;
                         });
}

Var matmul_nt(Var a, Var b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  require_same_tape(a, b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MMap(out.data(), m, n).noalias() = CMap(a.data(), m, k) * CMap(b.data(), n, k).transpose();
  const int ia = a.id(), ib = b.id();
  return a.tape().record({m, n}, std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib, m, k, n](Tape& t, int self) {
                           CMap g(t.grad(self), m, n);
                           if (t.requires_grad(ia))
                             MMap(t.grad(ia), m, k).noalias() += g * CMap(t.data(ib), n, k);
                           if (t.requires_grad(ib))
                             MMap(t.grad(ib), n, k).noalias() += g.transpose() * CMap(t.data(ia), m, k);
                         });
}

Var linear(Var x, Var w, Var b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  require_same_tape(x, w);
  const int rows = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const bool has_bias = b.valid();
  if (has_bias && (b.size() != static_cast<std::size_t>(out_dim)))
    throw ShapeError("linear: bias " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(rows) * out_dim);
  MMap o(out.data(), rows, out_dim);
  o.noalias() = CMap(x.data(), rows, in) * CMap(w.data(), out_dim, in).transpose();
  if (has_bias) {
    Eigen::Map<const Eigen::RowVectorXd> bv(b.data(), out_dim);
    o.rowwise() += bv;
  }
  const int ix = x.id(), iw = w.id(), ib = has_bias ? b.id() : -1;
  const bool rg = x.requires_grad() || w.requires_grad() || (has_bias && b.requires_grad());
  return x.tape().record({rows, out_dim}, std::move(out), rg,
                         [ix, iw, ib, rows, in, out_dim](Tape& t, int self) {
                           CMap g(t.grad(self), rows, out_dim);
                           if (t.requires_grad(ix))
                             MMap(t.grad(ix), rows, in).noalias() += g * CMap(t.data(iw), out_dim, in);
                           if (t.requires_grad(iw))
                             MMap(t.grad(iw), out_dim, in).noalias() +=
                                 g.transpose() * CMap(t.data(ix), rows, in);
                           if (ib >= 0 && t.requires_grad(ib)) {
                             Eigen::Map<Eigen::RowVectorXd> db(t.grad(ib), out_dim);
                             db += g.colwise().sum();
                           }
                         });
}

Var softmax_rows(Var a) {
  require_rank(a, 2, "softmax_rows");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.size());
  const double* x = a.data();
  for (int i = 0; i < m; ++i) {
    const double* row = x + static_cast<std::size_t>(i) * n;
    double* o = out.data() + static_cast<std::size_t>(i) * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    for (int j = 0; j < n; ++j) o[j] /= z;
  }
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [ia, m, n](Tape& t, int self) {
                           const double* g = t.grad(self);
                           const double* y = t.data(self);
                           double* d = t.grad(ia);
                           for (int i = 0; i < m; ++i) {
                             const std::size_t r = static_cast<std::size_t>(i) * n;
                             double dot = 0.0;
                             for (int j = 0; j < n; ++j) dot += g[r + j] * y[r + j];
                             for (int j = 0; j < n; ++j) d[r + j] += y[r + j] * (g[r + j] - dot);
                           }
                         });
}

namespace {

// Normalizes `count` contiguous segments of length `len` each to zero mean and
// unit variance.
struct NormStats {
  std::vector<double> xhat;
  std::vector<double> inv_std;
};

NormStats normalize_segments(const double* x, int count, std::size_t len, double eps) {
  NormStats st;
  st.xhat.resize(static_cast<std::size_t>(count) * len);
  st.inv_std.resize(count);
  for (int s = 0; s < count; ++s) {
    const double* seg = x + s * len;
    double mu = 0.0;
    for (std::size_t e = 0; e < len; ++e) mu += seg[e];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t e = 0; e < len; ++e) var += (seg[e] - mu) * (seg[e] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    st.inv_std[s] = is;
    double* xh = st.xhat.data() + s * len;
    for (std::size_t e = 0; e < len; ++e) xh[e] = (seg[e] - mu) * is;
  }
  return st;
}

}  // namespace

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int rows = x.dim(0), d = x.dim(1);
  if (gamma.size() != static_cast<std::size_t>(d) || beta.size() != static_cast<std::size_t>(d))
    throw ShapeError("layer_norm: affine size mismatch");
  auto st = normalize_segments(x.data(), rows, d, eps);
  std::vector<double> out(x.size());
  const double* g = gamma.data();
  const double* b = beta.data();
  for (int r = 0; r < rows; ++r)
    for (int e = 0; e < d; ++e) {
      const std::size_t i = static_cast<std::size_t>(r) * d + e;
      out[i] = st.xhat[i] * g[e] + b[e];
    }
  const int ix = x.id(), ig = gamma.id(), ibt = beta.id();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return x.tape().record(
      x.shape(), std::move(out), rg,
      [ix, ig, ibt, rows, d, st = std::move(st)](Tape& t, int self) {
        const double* dy = t.grad(self);
        const double* g = t.data(ig);
        if (t.requires_grad(ig)) {
          double* dg = t.grad(ig);
          for (int r = 0; r < rows; ++r)
            for (int e = 0; e < d; ++e) {
              const std::size_t i = static_cast<std::size_t>(r) * d + e;
              dg[e] += dy[i] * st.xhat[i];
            }
        }
        if (t.requires_grad(ibt)) {
          double* db = t.grad(ibt);
          for (int r = 0; r < rows; ++r)
            for (int e = 0; e < d; ++e) db[e] += dy[static_cast<std::size_t>(r) * d + e];
        }
        if (t.requires_grad(ix)) {
          double* dx = t.grad(ix);
          for (int r = 0; r < rows; ++r) {
            const std::size_t o = static_cast<std::size_t>(r) * d;
            double s1 = 0.0, s2 = 0.0;
            for (int e = 0; e < d; ++e) {
              const double dxh = dy[o + e] * g[e];
              s1 += dxh;
              s2 += dxh * st.xhat[o + e];
            }
            const double inv_n = 1.0 / d;
            for (int e = 0; e < d; ++e) {
              const double dxh = dy[o + e] * g[e];
              dx[o + e] += st.inv_std[r] * (dxh - inv_n * s1 - st.xhat[o + e] * inv_n * s2);
            }
          }
        }
      });
}

// ---- spatial --------------------------------------------------------------

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  require_same_tape(x, w);
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/pad");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small");
  const bool has_bias = b.valid();
  const int ckk = c * k * k;
  const int npix = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  // im2col; pointwise convs read the input directly.
  std::vector<double> col;
  const double* xd = x.data();
  if (!pointwise) {
    col.assign(static_cast<std::size_t>(ckk) * npix, 0.0);
    for (int ci = 0; ci < c; ++ci)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double* row = col.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * npix;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            const double* src = xd + (static_cast<std::size_t>(ci) * h + iy) * wd;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < wd) row[oy * wo + ox] = src[ix];
            }
          }
        }
  }
  const double* cold = pointwise ? xd : col.data();

  std::vector<double> out(static_cast<std::size_t>(o) * npix);
  MMap om(out.data(), o, npix);
  om.noalias() = CMap(w.data(), o, ckk) * CMap(cold, ckk, npix);
  if (has_bias) {
    Eigen::Map<const Eigen::VectorXd> bv(b.data(), o);
    om.colwise() += bv;
  }

  const int ix = x.id(), iw = w.id(), ib = has_bias ? b.id() : -1;
  const bool rg = x.requires_grad() || w.requires_grad() || (has_bias && b.requires_grad());
  return x.tape().record(
      {o, ho, wo}, std::move(out), rg,
      [=, col = std::move(col)](Tape& t, int self) {
        CMap g(t.grad(self), o, npix);
        const double* cold = pointwise ? t.data(ix) : col.data();
        if (t.requires_grad(iw))
          MMap(t.grad(iw), o, ckk).noalias() += g * CMap(cold, ckk, npix).transpose();
        if (ib >= 0 && t.requires_grad(ib)) {
          Eigen::Map<Eigen::VectorXd> db(t.grad(ib), o);
          db += g.rowwise().sum();
        }
        if (t.requires_grad(ix)) {
          if (pointwise) {
            MMap(t.grad(ix), c, npix).noalias() += CMap(t.data(iw), o, ckk).transpose() * g;
          } else {
            MatR dcol = CMap(t.data(iw), o, ckk).transpose() * g;
            double* dx = t.grad(ix);
            for (int ci = 0; ci < c; ++ci)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const double* row = dcol.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * npix;
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = dx + (static_cast<std::size_t>(ci) * h + iy) * wd;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ixx = ox * stride - pad + kx;
                      if (ixx >= 0 && ixx < wd) dst[ixx] += row[oy * wo + ox];
                    }
                  }
                }
          }
        }
      });
}

Var group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  require_rank(x, 3, "group_norm");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  if (groups < 1 || c % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c))
    throw ShapeError("group_norm: affine size mismatch");
  const int cpg = c / groups;
  const std::size_t seg = static_cast<std::size_t>(cpg) * hw;
  auto st = normalize_segments(x.data(), groups, seg, eps);
  std::vector<double> out(x.size());
  const double* gm = gamma.data();
  const double* bt = beta.data();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t i = ch * hw + p;
      out[i] = st.xhat[i] * gm[ch] + bt[ch];
    }
  const int ix = x.id(), ig = gamma.id(), ibt = beta.id();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return x.tape().record(
      x.shape(), std::move(out), rg,
      [ix, ig, ibt, c, hw, groups, cpg, seg, st = std::move(st)](Tape& t, int self) {
        const double* dy = t.grad(self);
        const double* gm = t.data(ig);
        if (t.requires_grad(ig)) {
          double* dg = t.grad(ig);
          for (int ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) dg[ch] += dy[ch * hw + p] * st.xhat[ch * hw + p];
        }
        if (t.requires_grad(ibt)) {
          double* db = t.grad(ibt);
          for (int ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) db[ch] += dy[ch * hw + p];
        }
        if (t.requires_grad(ix)) {
          double* dx = t.grad(ix);
          const double inv_n = 1.0 / static_cast<double>(seg);
          for (int g = 0; g < groups; ++g) {
            double s1 = 0.0, s2 = 0.0;
            for (int cc = 0; cc < cpg; ++cc) {
              const int ch = g * cpg + cc;
              for (std::size_t p = 0; p < hw; ++p) {
                const double dxh = dy[ch * hw + p] * gm[ch];
                s1 += dxh;
                s2 += dxh * st.xhat[ch * hw + p];
              }
            }
            for (int cc = 0; cc < cpg; ++cc) {
              const int ch = g * cpg + cc;
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t i = ch * hw + p;
                const double dxh = dy[i] * gm[ch];
                dx[i] += st.inv_std[g] * (dxh - inv_n * s1 - st.xhat[i] * inv_n * s2);
              }
            }
          }
        }
      });
}

Var adaptive_avg_pool(Var x, int out_h, int out_w) {
  require_rank(x, 3, "adaptive_avg_pool");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w)
    throw ShapeError("adaptive_avg_pool: input " + shape_str(x.shape()) + " smaller than grid " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  auto bin = [](int i, int in, int out) {
    const int lo = (i * in) / out;
    const int hi = ((i + 1) * in + out - 1) / out;
    return std::pair{lo, hi};
  };
  std::vector<double> out(static_cast<std::size_t>(c) * out_h * out_w);
  const double* xd = x.data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < out_h; ++i) {
      const auto [y0, y1] = bin(i, h, out_h);
      for (int j = 0; j < out_w; ++j) {
        const auto [x0, x1] = bin(j, w, out_w);
        double acc = 0.0;
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx) acc += xd[(static_cast<std::size_t>(ch) * h + yy) * w + xx];
        out[(static_cast<std::size_t>(ch) * out_h + i) * out_w + j] =
            acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  const int ix = x.id();
  return x.tape().record({c, out_h, out_w}, std::move(out), x.requires_grad(),
                         [=](Tape& t, int self) {
                           const double* g = t.grad(self);
                           double* d = t.grad(ix);
                           for (int ch = 0; ch < c; ++ch)
                             for (int i = 0; i < out_h; ++i) {
                               const auto [y0, y1] = bin(i, h, out_h);
                               for (int j = 0; j < out_w; ++j) {
                                 const auto [x0, x1] = bin(j, w, out_w);
                                 const double gv =
                                     g[(static_cast<std::size_t>(ch) * out_h + i) * out_w + j] /
                                     static_cast<double>((y1 - y0) * (x1 - x0));
                                 for (int yy = y0; yy < y1; ++yy)
                                   for (int xx = x0; xx < x1; ++xx)
                                     d[(static_cast<std::size_t>(ch) * h + yy) * w + xx] += gv;
                               }
                             }
                         });
}

namespace {

struct Tap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

Var bilinear_resize(Var x, int out_h, int out_w) {
  require_rank(x, 3, "bilinear_resize");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: empty output");
  if (out_h == h && out_w == w) return x;
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  std::vector<double> out(static_cast<std::size_t>(c) * out_h * out_w);
  const double* xd = x.data();
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = xd + static_cast<std::size_t>(ch) * h * w;
    for (int i = 0; i < out_h; ++i) {
      const Tap& a = ty[i];
      for (int j = 0; j < out_w; ++j) {
        const Tap& b = tx[j];
        const double top = plane[a.i0 * w + b.i0] * (1 - b.w1) + plane[a.i0 * w + b.i1] * b.w1;
        const double bot = plane[a.i1 * w + b.i0] * (1 - b.w1) + plane[a.i1 * w + b.i1] * b.w1;
        out[(static_cast<std::size_t>(ch) * out_h + i) * out_w + j] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  const int ix = x.id();
  return x.tape().record({c, out_h, out_w}, std::move(out), x.requires_grad(),
                         [=](Tape& t, int self) {
                           const double* g = t.grad(self);
                           double* d = t.grad(ix);
                           for (int ch = 0; ch < c; ++ch) {
                             double* plane = d + static_cast<std::size_t>(ch) * h * w;
                             for (int i = 0; i < out_h; ++i) {
                               const Tap& a = ty[i];
                               for (int j = 0; j < out_w; ++j) {
                                 const Tap& b = tx[j];
                                 const double gv = g[(static_cast<std::size_t>(ch) * out_h + i) * out_w + j];
                                 plane[a.i0 * w + b.i0] += gv * (1 - a.w1) * (1 - b.w1);
                                 plane[a.i0 * w + b.i1] += gv * (1 - a.w1) * b.w1;
                                 plane[a.i1 * w + b.i0] += gv * a.w1 * (1 - b.w1);
                                 plane[a.i1 * w + b.i1] += gv * a.w1 * b.w1;
                               }
                             }
                           }
                         });
}

Var mul_channel_broadcast(Var f, Var m) {
  require_rank(f, 3, "mul_channel_broadcast");
  require_rank(m, 3, "mul_channel_broadcast");
  require_same_tape(f, m);
  if (m.dim(0) != 1 || m.dim(1) != f.dim(1) || m.dim(2) != f.dim(2))
    throw ShapeError("mul_channel_broadcast: map " + shape_str(m.shape()) + " vs feature " +
                     shape_str(f.shape()));
  const int c = f.dim(0);
  const std::size_t hw = static_cast<std::size_t>(f.dim(1)) * f.dim(2);
  std::vector<double> out(f.size());
  const double* fd = f.data();
  const double* md = m.data();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = fd[ch * hw + p] * md[p];
  const int iff = f.id(), im = m.id();
  return f.tape().record(f.shape(), std::move(out), f.requires_grad() || m.requires_grad(),
                         [iff, im, c, hw](Tape& t, int self) {
                           const double* g = t.grad(self);
                           const double* fd = t.data(iff);
                           const double* md = t.data(im);
                           if (t.requires_grad(iff)) {
                             double* d = t.grad(iff);
                             for (int ch = 0; ch < c; ++ch)
                               for (std::size_t p = 0; p < hw; ++p) d[ch * hw + p] += g[ch * hw + p] * md[p];
                           }
                           if (t.requires_grad(im)) {
                             double* d = t.grad(im);
                             for (int ch = 0; ch < c; ++ch)
                               for (std::size_t p = 0; p < hw; ++p) d[p] += g[ch * hw + p] * fd[ch * hw + p];
                           }
                         });
}

}  // namespace aunet::ag
