#include "starformer/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "starformer/errors.hpp"

namespace starformer {

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C[r, c] += A[r, k] * B[k, c], row-major.
void gemm_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t k, std::size_t n) {
  const auto ri = static_cast<Eigen::Index>(r), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
  MutMap(c, ri, ni).noalias() += ConstMap(a, ri, ki) * ConstMap(b, ki, ni);
}

// C[r, k] += A[r, n] * B[k, n]^T
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t n, std::size_t k) {
  const auto ri = static_cast<Eigen::Index>(r), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
  MutMap(c, ri, ki).noalias() += ConstMap(a, ri, ni) * ConstMap(b, ki, ni).transpose();
}

// C[k, n] += A[r, k]^T * B[r, n]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t k, std::size_t n) {
  const auto ri = static_cast<Eigen::Index>(r), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
  MutMap(c, ki, ni).noalias() += ConstMap(a, ri, ki).transpose() * ConstMap(b, ri, ni);
}

using Stride = Eigen::OuterStride<>;
using StridedConst = Eigen::Map<const RowMat, 0, Stride>;
using StridedMut = Eigen::Map<RowMat, 0, Stride>;

// Unmasked key rows of a group, in order.
void live_keys(const AttentionLayout& layout, const AttentionGroup& grp, std::vector<std::size_t>& live) {
  live.clear();
  for (std::size_t j = 0; j < grp.key_count; ++j)
    if (layout.key_masked.empty() || !layout.key_masked[grp.key_begin + j]) live.push_back(j);
}

// Rows base + live[j], columns [off, off + dh) of `src`, packed contiguously.
void gather_head(const Tensor& src, std::size_t base, const std::vector<std::size_t>& live, std::size_t off,
                 std::size_t dh, RowMat& dst) {
  const std::size_t d = src.cols();
  dst.resize(static_cast<Eigen::Index>(live.size()), static_cast<Eigen::Index>(dh));
  for (std::size_t j = 0; j < live.size(); ++j) {
    const double* row = src.ptr() + (base + live[j]) * d + off;
    std::copy(row, row + dh, dst.data() + j * dh);
  }
}

void scatter_add_head(const RowMat& rows, std::size_t base, const std::vector<std::size_t>& live, std::size_t off,
                      Tensor& dst) {
  const std::size_t d = dst.cols(), dh = static_cast<std::size_t>(rows.cols());
  for (std::size_t j = 0; j < live.size(); ++j) {
    double* out = dst.ptr() + (base + live[j]) * d + off;
    const double* in = rows.data() + j * dh;
    for (std::size_t u = 0; u < dh; ++u) out[u] += in[u];
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.ptr();
  const double* s = src.ptr();
  for (std::size_t i = 0, n = dst.numel(); i < n; ++i) d[i] += s[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto s : shape_) require(s > 0, "tensor dimensions must be positive");
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto s : shape_) require(s > 0, "tensor dimensions must be positive");
  require(product(shape_) == data_.size(),
          "shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
              " elements");
}

Tensor Tensor::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  require(rows.size() > 0, "from_rows needs at least one row");
  const std::size_t c = rows.begin()->size();
  std::vector<double> data;
  data.reserve(rows.size() * c);
  for (const auto& r : rows) {
    require(r.size() == c, "ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), c}, std::move(data));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  return data_.size() / shape_.back();
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::watch(const Tensor& external) {
  Node n;
  n.external = &external;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn,
                 std::string_view op) {
  if (!value.all_finite()) throw NumericError("non-finite output from " + std::string(op));
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& p : parents) {
      if (p.valid() && nodes_.at(p.id()).requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.external ? *n.external : n.value;
}

Tensor* Tape::grad_sink(Var v) {
  Node& n = nodes_.at(v.id());
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) {
    const Tensor& val = n.external ? *n.external : n.value;
    n.grad = Tensor(val.shape(), 0.0);
  }
  return &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractError("loss does not belong to this tape");
  const Tensor& lv = value(loss);
  if (lv.numel() != 1) throw ContractError("backward needs a scalar loss, got " + shape_string(lv.shape()));
  backward_visits_ = 0;
  Tensor* seed = grad_sink(loss);
  if (seed == nullptr) return;
  (*seed)[0] += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++backward_visits_;
    if (n.backward) {
      // Closures only touch parent grads, which live at lower indices.
      n.backward(*this, n.grad);
    }
  }
}

const Tensor* Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (!n.requires_grad || n.grad.empty()) return nullptr;
  return &n.grad;
}

// ---------------------------------------------------------------------------
// Plain helpers

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(),
          "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor c = Tensor::zeros(a.rows(), b.cols());
  gemm_acc(a.ptr(), b.ptr(), c.ptr(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor y = x;
  const std::size_t c = x.cols();
  for (std::size_t r = 0, n = x.rows(); r < n; ++r) {
    auto row = y.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
  return y;
}

Tensor transpose(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor y = Tensor::zeros(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y.at(j, i) = x.at(i, j);
  return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Taped ops

Var matmul(Var a, Var b) {
  Tensor out = matmul(a.value(), b.value());
  return a.tape().record(
      std::move(out), {a, b},
      [a, b](Tape& t, const Tensor& g) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        if (Tensor* ga = t.grad_sink(a)) gemm_nt_acc(g.ptr(), bv.ptr(), ga->ptr(), av.rows(), bv.cols(), av.cols());
        if (Tensor* gb = t.grad_sink(b)) gemm_tn_acc(av.ptr(), g.ptr(), gb->ptr(), av.rows(), av.cols(), bv.cols());
      },
      "matmul");
}

Var apply_linear(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require(wv.rank() == 2 && xv.cols() == wv.rows(),
          "linear input " + shape_string(xv.shape()) + " vs weight " + shape_string(wv.shape()));
  require(bv.numel() == wv.cols(), "linear bias " + shape_string(bv.shape()) + " vs weight " + shape_string(wv.shape()));
  const std::size_t rows = xv.rows(), in = xv.cols(), out_dim = wv.cols();
  Shape shape = xv.shape();
  shape.back() = out_dim;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) std::copy(bv.ptr(), bv.ptr() + out_dim, out.ptr() + r * out_dim);
  gemm_acc(xv.ptr(), wv.ptr(), out.ptr(), rows, in, out_dim);
  return x.tape().record(
      std::move(out), {x, w, b},
      [x, w, b, rows, in, out_dim](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x)) gemm_nt_acc(g.ptr(), w.value().ptr(), gx->ptr(), rows, out_dim, in);
        if (Tensor* gw = t.grad_sink(w)) gemm_tn_acc(x.value().ptr(), g.ptr(), gw->ptr(), rows, in, out_dim);
        if (Tensor* gb = t.grad_sink(b)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out_dim; ++j) (*gb)[j] += g[r * out_dim + j];
        }
      },
      "apply_linear");
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  require(av.shape() == b.value().shape(),
          "add " + shape_string(av.shape()) + " + " + shape_string(b.value().shape()));
  Tensor out = av;
  add_into(out, b.value());
  return a.tape().record(
      std::move(out), {a, b},
      [a, b](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_sink(a)) add_into(*ga, g);
        if (Tensor* gb = t.grad_sink(b)) add_into(*gb, g);
      },
      "add");
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), "mul " + shape_string(av.shape()) + " * " + shape_string(bv.shape()));
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape().record(
      std::move(out), {a, b},
      [a, b](Tape& t, const Tensor& g) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        if (Tensor* ga = t.grad_sink(a))
          for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[i];
        if (Tensor* gb = t.grad_sink(b))
          for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
      },
      "mul");
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape().record(
      std::move(out), {a},
      [a, s](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_sink(a))
          for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += s * g[i];
      },
      "scale");
}

Var sum(Var a) {
  const Tensor& av = a.value();
  const double s = std::accumulate(av.data().begin(), av.data().end(), 0.0);
  return a.tape().record(
      Tensor::scalar(s), {a},
      [a](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_sink(a))
          for (double& v : ga->data()) v += g[0];
      },
      "sum");
}

Var softmax_rows(Var x) {
  Tensor y = softmax_rows(x.value());
  return x.tape().record(
      y, {x},
      [x, y](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        const std::size_t c = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g.at(r, j) * y.at(r, j);
          for (std::size_t j = 0; j < c; ++j) gx->at(r, j) += y.at(r, j) * (g.at(r, j) - dot);
        }
      },
      "softmax_rows");
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  require(d >= 1, "layer_norm needs d >= 1");
  require(gamma.value().numel() == d && beta.value().numel() == d,
          "layer_norm affine size does not match feature dim " + std::to_string(d));
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    auto o = xhat.row(r);
    for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mean) * inv_std[r];
  }
  Tensor out = xhat;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto o = out.row(r);
    for (std::size_t j = 0; j < d; ++j) o[j] = gv[j] * o[j] + bv[j];
  }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](Tape& t, const Tensor& g) {
        const Tensor& gv = gamma.value();
        if (Tensor* gg = t.grad_sink(gamma))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g.at(r, j) * xhat.at(r, j);
        if (Tensor* gb = t.grad_sink(beta))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g.at(r, j);
        if (Tensor* gx = t.grad_sink(x)) {
          std::vector<double> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = g.at(r, j) * gv[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat.at(r, j);
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx->at(r, j) += inv_std[r] * (dxhat[j] - m1 - xhat.at(r, j) * m2);
          }
        }
      },
      "layer_norm");
}

Var activation(Var x, Activation kind) {
  Tensor out = x.value();
  if (kind == Activation::gelu) {
    for (double& v : out.data()) v = gelu(v);
  } else {
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  }
  return x.tape().record(
      std::move(out), {x},
      [x, kind](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        const Tensor& xv = x.value();
        if (kind == Activation::gelu) {
          for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * gelu_grad(xv[i]);
        } else {
          for (std::size_t i = 0; i < g.numel(); ++i)
            if (xv[i] > 0.0) (*gx)[i] += g[i];
        }
      },
      kind == Activation::gelu ? "gelu" : "relu");
}

Var dropout(Var x, double p, std::mt19937_64* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - p);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor mask(x.value().shape());
  for (double& m : mask.data()) m = u(*rng) < p ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return x.tape().record(
      std::move(out), {x},
      [x, mask = std::move(mask)](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x))
          for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * mask[i];
      },
      "dropout");
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  Tensor out = Tensor::zeros(1, c);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv.at(r, j);
  for (double& v : out.data()) v /= static_cast<double>(rows);
  return x.tape().record(
      std::move(out), {x},
      [x, rows, c](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gx->at(r, j) += g[j] * inv;
      },
      "mean_rows");
}

Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rows() == bv.rows(), "concat_cols row mismatch");
  const std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out = Tensor::zeros(rows, ca + cb);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), out.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  return a.tape().record(
      std::move(out), {a, b},
      [a, b, rows, ca, cb](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_sink(a))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < ca; ++j) ga->at(r, j) += g.at(r, j);
        if (Tensor* gb = t.grad_sink(b))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cb; ++j) gb->at(r, j) += g.at(r, ca + j);
      },
      "concat_cols");
}

Var transpose(Var x) {
  Tensor out = transpose(x.value());
  return x.tape().record(
      std::move(out), {x},
      [x](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        const std::size_t r = gx->rows(), c = gx->cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gx->at(i, j) += g.at(j, i);
      },
      "transpose");
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require(count > 0 && begin + count <= xv.rows(), "slice_rows out of range");
  const std::size_t c = xv.cols();
  Tensor out = Tensor::zeros(count, c);
  std::copy(xv.ptr() + begin * c, xv.ptr() + (begin + count) * c, out.ptr());
  return x.tape().record(
      std::move(out), {x},
      [x, begin, count, c](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        double* dst = gx->ptr() + begin * c;
        for (std::size_t i = 0; i < count * c; ++i) dst[i] += g[i];
      },
      "slice_rows");
}

Var gather_rows(Var x, std::span<const std::ptrdiff_t> index, const Tensor* pad) {
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  require(!index.empty(), "gather_rows needs at least one index");
  if (pad) require(pad->numel() == c, "gather_rows pad width mismatch");
  Tensor out = Tensor::zeros(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::ptrdiff_t src = index[i];
    if (src < 0) {
      if (pad) std::copy(pad->ptr(), pad->ptr() + c, out.ptr() + i * c);
      continue;
    }
    require(static_cast<std::size_t>(src) < xv.rows(), "gather_rows index out of range");
    std::copy(xv.ptr() + src * static_cast<std::ptrdiff_t>(c), xv.ptr() + (src + 1) * static_cast<std::ptrdiff_t>(c),
              out.ptr() + i * c);
  }
  std::vector<std::ptrdiff_t> idx(index.begin(), index.end());
  return x.tape().record(
      std::move(out), {x},
      [x, idx = std::move(idx), c](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          if (idx[i] < 0) continue;
          double* dst = gx->ptr() + static_cast<std::size_t>(idx[i]) * c;
          for (std::size_t j = 0; j < c; ++j) dst[j] += g[i * c + j];
        }
      },
      "gather_rows");
}

Var cross_entropy(Var logits, std::size_t label) {
  const Tensor& lv = logits.value();
  require(lv.rows() == 1, "cross_entropy expects a single logit row");
  require(label < lv.cols(), "cross_entropy label out of range");
  Tensor p = softmax_rows(lv);
  const double mx = *std::max_element(lv.data().begin(), lv.data().end());
  double s = 0.0;
  for (double v : lv.data()) s += std::exp(v - mx);
  const double loss = mx + std::log(s) - lv[label];
  return logits.tape().record(
      Tensor::scalar(loss), {logits},
      [logits, label, p = std::move(p)](Tape& t, const Tensor& g) {
        Tensor* gl = t.grad_sink(logits);
        if (!gl) return;
        for (std::size_t j = 0; j < p.numel(); ++j)
          (*gl)[j] += g[0] * (p[j] - (j == label ? 1.0 : 0.0));
      },
      "cross_entropy");
}

// ---------------------------------------------------------------------------
// Attention

Var multi_head_attention(Var q, Var k, Var v, const AttentionLayout& layout, Var bias,
                         AttentionStats* stats, const AttentionObserver* observer) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t d = qv.cols();
  const std::size_t heads = layout.heads;
  require(heads >= 1 && d % heads == 0, "model dim " + std::to_string(d) + " not divisible by heads");
  require(kv.cols() == d && vv.cols() == d, "attention q/k/v width mismatch");
  require(kv.rows() == vv.rows(), "attention k/v row mismatch");
  require(layout.key_masked.empty() || layout.key_masked.size() == kv.rows(), "attention mask size mismatch");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool has_bias = bias.valid();
  std::size_t qc0 = 0, kc0 = 0;
  if (!layout.groups.empty()) {
    qc0 = layout.groups.front().query_count;
    kc0 = layout.groups.front().key_count;
  }
  for (const auto& grp : layout.groups) {
    require(grp.query_begin + grp.query_count <= qv.rows(), "attention query range out of bounds");
    require(grp.key_begin + grp.key_count <= kv.rows(), "attention key range out of bounds");
    if (has_bias)
      require(grp.query_count == qc0 && grp.key_count == kc0, "biased attention needs uniform groups");
  }
  if (has_bias)
    require(bias.value().numel() == heads * qc0 * kc0,
            "attention bias " + shape_string(bias.value().shape()) + " vs heads x " + std::to_string(qc0) + " x " +
                std::to_string(kc0));

  // Softmax weights per (group, head), kept for backward.
  std::vector<Tensor> probs;
  probs.reserve(layout.groups.size() * heads);
  Tensor out(qv.shape());
  std::vector<std::size_t> live;
  RowMat kl, vl, scores;
  for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
    const auto& grp = layout.groups[gi];
    live_keys(layout, grp, live);
    if (live.empty()) throw ContractError("attention group with every key masked");
    const auto qc = static_cast<Eigen::Index>(grp.query_count), lc = static_cast<Eigen::Index>(live.size());
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      gather_head(kv, grp.key_begin, live, off, dh, kl);
      gather_head(vv, grp.key_begin, live, off, dh, vl);
      const StridedConst qh(qv.ptr() + grp.query_begin * d + off, qc, static_cast<Eigen::Index>(dh), Stride(d));
      scores.noalias() = (qh * kl.transpose()) * inv_sqrt;
      if (has_bias) {
        const double* b = bias.value().ptr() + h * qc0 * kc0;
        for (Eigen::Index i = 0; i < qc; ++i)
          for (Eigen::Index j = 0; j < lc; ++j) scores(i, j) += b[static_cast<std::size_t>(i) * kc0 + live[j]];
      }
      for (Eigen::Index i = 0; i < qc; ++i) {
        const double mx = scores.row(i).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < lc; ++j) z += (scores(i, j) = std::exp(scores(i, j) - mx));
        scores.row(i) /= z;
      }
      StridedMut(out.ptr() + grp.query_begin * d + off, qc, static_cast<Eigen::Index>(dh), Stride(d)).noalias() +=
          scores * vl;
      Tensor p = Tensor::zeros(grp.query_count, grp.key_count);
      for (Eigen::Index i = 0; i < qc; ++i)
        for (Eigen::Index j = 0; j < lc; ++j) p.at(static_cast<std::size_t>(i), live[j]) = scores(i, j);
      if (stats) {
        stats->score_macs += grp.query_count * live.size() * dh;
        stats->mix_macs += grp.query_count * live.size() * dh;
      }
      if (observer && *observer) (*observer)(gi, h, p);
      probs.push_back(std::move(p));
    }
  }

  return q.tape().record(
      std::move(out), {q, k, v, bias},
      [q, k, v, bias, layout, probs = std::move(probs), dh, heads, inv_sqrt, qc0, kc0](Tape& t, const Tensor& g) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        const std::size_t d = qv.cols();
        Tensor* gq = t.grad_sink(q);
        Tensor* gk = t.grad_sink(k);
        Tensor* gv = t.grad_sink(v);
        Tensor* gb = bias.valid() ? t.grad_sink(bias) : nullptr;
        std::vector<std::size_t> live;
        RowMat kl, vl, pl, dp, acc;
        for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
          const auto& grp = layout.groups[gi];
          live_keys(layout, grp, live);
          const auto qc = static_cast<Eigen::Index>(grp.query_count), lc = static_cast<Eigen::Index>(live.size());
          const auto dhi = static_cast<Eigen::Index>(dh);
          for (std::size_t h = 0; h < heads; ++h) {
            const Tensor& p = probs[gi * heads + h];
            const std::size_t off = h * dh;
            gather_head(kv, grp.key_begin, live, off, dh, kl);
            gather_head(vv, grp.key_begin, live, off, dh, vl);
            pl.resize(qc, lc);
            for (Eigen::Index i = 0; i < qc; ++i)
              for (Eigen::Index j = 0; j < lc; ++j) pl(i, j) = p.at(static_cast<std::size_t>(i), live[j]);
            const StridedConst gh(g.ptr() + grp.query_begin * d + off, qc, dhi, Stride(d));
            const StridedConst qh(qv.ptr() + grp.query_begin * d + off, qc, dhi, Stride(d));
            // dP = G V^T ; dS = P (dP - rowsum(P dP))
            dp.noalias() = gh * vl.transpose();
            for (Eigen::Index i = 0; i < qc; ++i) {
              const double dot = pl.row(i).dot(dp.row(i));
              for (Eigen::Index j = 0; j < lc; ++j) dp(i, j) = pl(i, j) * (dp(i, j) - dot);
            }
            if (gb) {
              double* b = gb->ptr() + h * qc0 * kc0;
              for (Eigen::Index i = 0; i < qc; ++i)
                for (Eigen::Index j = 0; j < lc; ++j) b[static_cast<std::size_t>(i) * kc0 + live[j]] += dp(i, j);
            }
            if (gv) {
              acc.noalias() = pl.transpose() * gh;
              scatter_add_head(acc, grp.key_begin, live, off, *gv);
            }
            if (gq)
              StridedMut(gq->ptr() + grp.query_begin * d + off, qc, dhi, Stride(d)).noalias() += (dp * kl) * inv_sqrt;
            if (gk) {
              acc.noalias() = (dp.transpose() * qh) * inv_sqrt;
              scatter_add_head(acc, grp.key_begin, live, off, *gk);
            }
          }
        }
      },
      "multi_head_attention");
}

}  // namespace starformer
