#include "starformer/transformer.hpp"

#include <cmath>

#include "starformer/errors.hpp"

namespace starformer {

void BlockGeometry::validate() const {
  if (d == 0 || heads == 0 || ff_hidden == 0) throw ConfigError("model dimensions must be positive");
  if (d % heads != 0)
    throw ConfigError("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
}

Linear init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero) {
  Linear l{Tensor({in, out}), Tensor({out})};
  if (!zero) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : l.w.data()) v = u(rng);
  }
  return l;
}

LayerNormParams init_layer_norm(std::size_t d) { return {Tensor({d}, 1.0), Tensor({d})}; }

BlockParams init_block(const BlockGeometry& geom, std::mt19937_64& rng, bool zero_output) {
  geom.validate();
  BlockParams p;
  p.ln1 = init_layer_norm(geom.d);
  p.q = init_linear(geom.d, geom.d, rng);
  p.k = init_linear(geom.d, geom.d, rng);
  p.v = init_linear(geom.d, geom.d, rng);
  p.o = init_linear(geom.d, geom.d, rng, zero_output);
  p.ln2 = init_layer_norm(geom.d);
  p.ff1 = init_linear(geom.d, geom.ff_hidden, rng);
  p.ff2 = init_linear(geom.ff_hidden, geom.d, rng, zero_output);
  return p;
}

void visit_params(Linear& p, const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w", p.w);
  fn(prefix + ".b", p.b);
}

void visit_params(LayerNormParams& p, const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
}

void visit_params(BlockParams& p, const std::string& prefix, const ParamVisitor& fn) {
  visit_params(p.ln1, prefix + ".ln1", fn);
  visit_params(p.q, prefix + ".q", fn);
  visit_params(p.k, prefix + ".k", fn);
  visit_params(p.v, prefix + ".v", fn);
  visit_params(p.o, prefix + ".o", fn);
  visit_params(p.ln2, prefix + ".ln2", fn);
  visit_params(p.ff1, prefix + ".ff1", fn);
  visit_params(p.ff2, prefix + ".ff2", fn);
  if (!p.bias.empty()) fn(prefix + ".bias", p.bias);
}

Var ParamBinder::operator()(const Tensor& param) {
  auto it = bound_.find(&param);
  if (it != bound_.end()) return it->second;
  Var v = tape_.watch(param);
  bound_.emplace(&param, v);
  return v;
}

const Tensor* ParamBinder::grad(const Tensor& param) const {
  auto it = bound_.find(&param);
  return it == bound_.end() ? nullptr : tape_.grad(it->second);
}

Var linear(ParamBinder& bind, const Linear& p, Var x) { return apply_linear(x, bind(p.w), bind(p.b)); }

Var layer_norm(ParamBinder& bind, const LayerNormParams& p, Var x) {
  return layer_norm(x, bind(p.gamma), bind(p.beta));
}

Var attention_sublayer(ParamBinder& bind, const BlockParams& p, Var xn, const AttentionLayout& layout,
                       std::span<const std::ptrdiff_t> kv_index, const ForwardContext& ctx,
                       const AttentionObserver* observer) {
  Var q = linear(bind, p.q, xn);
  Var k = linear(bind, p.k, xn);
  Var v = linear(bind, p.v, xn);
  if (!kv_index.empty()) {
    k = gather_rows(k, kv_index, ctx.pad_fill);
    v = gather_rows(v, kv_index, ctx.pad_fill);
  }
  Var bias = p.bias.empty() ? Var{} : bind(p.bias);
  Var mixed = multi_head_attention(q, k, v, layout, bias, ctx.stats, observer);
  return linear(bind, p.o, mixed);
}

Var transformer_block(ParamBinder& bind, const BlockParams& p, Var x, const AttentionLayout& layout,
                      std::span<const std::ptrdiff_t> kv_index, const ForwardContext& ctx,
                      const AttentionObserver* observer) {
  Var attn = attention_sublayer(bind, p, layer_norm(bind, p.ln1, x), layout, kv_index, ctx, observer);
  Var r = add(x, dropout(attn, ctx.dropout, ctx.rng));
  Var h = activation(linear(bind, p.ff1, layer_norm(bind, p.ln2, r)), Activation::gelu);
  h = dropout(h, ctx.dropout, ctx.rng);
  return add(r, linear(bind, p.ff2, h));
}

}  // namespace starformer
