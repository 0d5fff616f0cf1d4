#pragma once
// Dense 64-bit tensor kernel with a reverse-mode tape.
//
// Tensors are row-major; every op treats its operands as matrices whose
// column count is the last dimension and whose row count is the product of
// the leading dimensions. Ops that record onto a Tape check their outputs
// for NaN/Inf and throw NumericError on the first non-finite value.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace starformer {

using Shape = std::vector<std::size_t>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  // Value of a single-element tensor; ContractError otherwise.
  double item() const;
  bool all_finite() const noexcept;
  void fill(double v) noexcept;
  // Same data reinterpreted with a new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::string shape_string(const Shape& shape);

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Owning leaf.
  Var leaf(Tensor value, bool requires_grad);
  // Non-owning leaf that requires grad; `external` must outlive the tape.
  Var watch(const Tensor& external);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op output. `fn` is dropped when no parent requires grad.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn, std::string_view op);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  // Gradient accumulator for `v`, zero-initialised on first use, or nullptr
  // when `v` does not require grad. Intended for BackwardFn implementations.
  Tensor* grad_sink(Var v);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  void backward(Var loss);

  // Gradient of a requires_grad node after backward(); nullptr if absent.
  const Tensor* grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  // Number of nodes whose adjoint was propagated by the last backward().
  std::size_t backward_visits() const noexcept { return backward_visits_; }

  // When disabled, nothing records a backward closure (evaluation mode).
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  std::size_t backward_visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Plain (untaped) helpers.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x);
Tensor transpose(const Tensor& x);
double gelu(double x);
double gelu_grad(double x);

constexpr double kLayerNormEps = 1e-5;

enum class Activation { gelu, relu };
Activation parse_activation(std::string_view name);

// ---------------------------------------------------------------------------
// Taped ops.

Var matmul(Var a, Var b);
// y = x W + b with x [*, in], W [in, out], b [out].
Var apply_linear(Var x, Var w, Var b);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
Var activation(Var x, Activation kind);
// Inverted dropout; identity when `rng` is null or p == 0.
Var dropout(Var x, double p, std::mt19937_64* rng);
// Column means over all rows -> [1, cols].
Var mean_rows(Var x);
Var concat_cols(Var a, Var b);
Var transpose(Var x);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
// Row gather; negative indices produce padding rows, copied from `pad`
// (a [1, cols] tensor) when given, zeros otherwise. Padding rows are
// constants and receive no gradient.
Var gather_rows(Var x, std::span<const std::ptrdiff_t> index, const Tensor* pad = nullptr);
// Mean-free cross entropy of a single [1, C] logit row against `label`.
Var cross_entropy(Var logits, std::size_t label);

// ---------------------------------------------------------------------------
// Grouped multi-head attention.
//
// Query rows [query_begin, query_begin + query_count) attend to key rows
// [key_begin, key_begin + key_count). Keys flagged in `key_masked` get a
// -inf score: they receive zero weight and zero gradient and their values
// are never read.

struct AttentionGroup {
  std::size_t query_begin = 0;
  std::size_t query_count = 0;
  std::size_t key_begin = 0;
  std::size_t key_count = 0;
};

struct AttentionLayout {
  std::size_t heads = 1;
  std::vector<AttentionGroup> groups;
  std::vector<bool> key_masked;  // empty: nothing masked
};

// Multiply-accumulate counters for the QK^T and PV products.
struct AttentionStats {
  std::uint64_t score_macs = 0;
  std::uint64_t mix_macs = 0;
  std::uint64_t total() const noexcept { return score_macs + mix_macs; }
};

// Receives the softmax weights [query_count, key_count] of each group/head.
using AttentionObserver =
    std::function<void(std::size_t group, std::size_t head, const Tensor& weights)>;

// softmax(Q_h K_h^T / sqrt(d_head) + B_h) V_h per head, heads concatenated.
// `bias`, when valid, has shape [heads, query_count, key_count] and is shared
// by every group (all groups must then have equal query/key counts).
Var multi_head_attention(Var q, Var k, Var v, const AttentionLayout& layout, Var bias = {},
                         AttentionStats* stats = nullptr,
                         const AttentionObserver* observer = nullptr);

}  // namespace starformer
