#pragma once
// Parameter containers and the pre-norm attention block shared by the
// temporal and spatial branches.

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>

#include "starformer/numkernel.hpp"

namespace starformer {

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct BlockParams {
  LayerNormParams ln1;
  Linear q, k, v, o;
  LayerNormParams ln2;
  Linear ff1, ff2;
  Tensor bias;  // [heads, queries, keys]; empty when the block has none
};

struct BlockGeometry {
  std::size_t d = 128;
  std::size_t heads = 8;
  std::size_t ff_hidden = 256;
  void validate() const;
};

// Weights U(-1/sqrt(in), 1/sqrt(in)); biases zero.
Linear init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero = false);
LayerNormParams init_layer_norm(std::size_t d);
// `zero_output` zeroes the attention output projection and the second FF
// layer, making the fresh block an identity map.
BlockParams init_block(const BlockGeometry& geom, std::mt19937_64& rng, bool zero_output);

using ParamVisitor = std::function<void(const std::string& name, Tensor& value)>;
void visit_params(Linear& p, const std::string& prefix, const ParamVisitor& fn);
void visit_params(LayerNormParams& p, const std::string& prefix, const ParamVisitor& fn);
void visit_params(BlockParams& p, const std::string& prefix, const ParamVisitor& fn);

// Binds each parameter tensor to one tape leaf, so repeated uses share a
// gradient accumulator.
class ParamBinder {
 public:
  explicit ParamBinder(Tape& tape) : tape_(tape) {}
  Var operator()(const Tensor& param);
  // Accumulated gradient of `param`, or nullptr if it was never bound or
  // received no gradient.
  const Tensor* grad(const Tensor& param) const;
  Tape& tape() const noexcept { return tape_; }

 private:
  Tape& tape_;
  std::unordered_map<const Tensor*, Var> bound_;
};

// Per-call knobs shared by every forward function.
struct ForwardContext {
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;  // null disables dropout
  AttentionStats* stats = nullptr;
  // Fill for padded key rows; masked rows are never read, so any value works.
  const Tensor* pad_fill = nullptr;
  std::function<void(std::size_t layer, std::size_t group, std::size_t head, const Tensor& weights)>
      temporal_observer;
  std::function<void(std::size_t block, std::size_t head, const Tensor& weights)> spatial_observer;
};

Var linear(ParamBinder& bind, const Linear& p, Var x);
Var layer_norm(ParamBinder& bind, const LayerNormParams& p, Var x);

// Multi-head attention of `xn` onto itself (already normalised). When
// `kv_index` is non-empty, keys and values are gathered from the projected
// sequence through it (negative entries are padding) before attending.
Var attention_sublayer(ParamBinder& bind, const BlockParams& p, Var xn, const AttentionLayout& layout,
                       std::span<const std::ptrdiff_t> kv_index, const ForwardContext& ctx,
                       const AttentionObserver* observer);

// r = x + dropout(attn(LN(x)));  out = r + FF(LN(r)).
Var transformer_block(ParamBinder& bind, const BlockParams& p, Var x, const AttentionLayout& layout,
                      std::span<const std::ptrdiff_t> kv_index, const ForwardContext& ctx,
                      const AttentionObserver* observer = nullptr);

}  // namespace starformer
