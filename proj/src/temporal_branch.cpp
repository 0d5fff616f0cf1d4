#include "starformer/temporal_branch.hpp"

#include <algorithm>

#include "starformer/errors.hpp"

namespace starformer {

Extension parse_extension(std::string_view text) {
  if (text == "w/4") return Extension::quarter;
  if (text == "w/2") return Extension::half;
  if (text == "w") return Extension::full;
  throw ConfigError("extension must be one of w/4, w/2, w; got '" + std::string(text) + "'");
}

std::string_view extension_name(Extension e) {
  switch (e) {
    case Extension::quarter: return "w/4";
    case Extension::half: return "w/2";
    case Extension::full: return "w";
  }
  return "?";
}

namespace {

std::size_t extension_divisor(Extension e) {
  switch (e) {
    case Extension::quarter: return 4;
    case Extension::half: return 2;
    case Extension::full: return 1;
  }
  return 1;
}

std::string schedule_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace

void WindowSchedule::validate() const {
  const auto& s = tokens_per_layer;
  const std::string name = schedule_string(s);
  if (s.empty() || s.size() % 2 != 0) throw ConfigError("schedule " + name + " must have even, nonzero length");
  if (!std::equal(s.begin(), s.begin() + s.size() / 2, s.rbegin()))
    throw ConfigError("schedule " + name + " is not a palindrome");
  for (std::size_t l = 1; l < s.size() / 2; ++l)
    if (s[l] * 2 != s[l - 1]) throw ConfigError("schedule " + name + " must halve the window count while merging");
  const std::size_t div = extension_divisor(extension);
  for (std::size_t g : s) {
    if (g == 0 || sequence_length % g != 0)
      throw ConfigError("sequence length " + std::to_string(sequence_length) + " is not divisible by g=" +
                        std::to_string(g));
    const std::size_t w = sequence_length / g;
    if (w % div != 0)
      throw ConfigError("window length " + std::to_string(w) + " does not admit extension " +
                        std::string(extension_name(extension)));
  }
}

std::size_t WindowSchedule::padding(std::size_t layer) const { return window(layer) / extension_divisor(extension); }

std::vector<Tensor> partition_windows(const Tensor& seq, std::size_t g) {
  const std::size_t m = seq.rows(), d = seq.cols();
  if (g == 0 || m % g != 0)
    throw ConfigError(std::to_string(m) + " tokens cannot be split into " + std::to_string(g) + " windows");
  const std::size_t w = m / g;
  std::vector<Tensor> out;
  out.reserve(g);
  for (std::size_t i = 0; i < g; ++i) {
    Tensor t = Tensor::zeros(w, d);
    std::copy(seq.ptr() + i * w * d, seq.ptr() + (i + 1) * w * d, t.ptr());
    out.push_back(std::move(t));
  }
  return out;
}

Tensor concat_windows(const std::vector<Tensor>& windows) {
  if (windows.empty()) throw ContractError("no windows to concatenate");
  const std::size_t d = windows.front().cols();
  std::size_t m = 0;
  for (const auto& w : windows) {
    if (w.cols() != d) throw DimensionError("windows differ in feature width");
    m += w.rows();
  }
  Tensor out = Tensor::zeros(m, d);
  double* dst = out.ptr();
  for (const auto& w : windows) dst = std::copy(w.ptr(), w.ptr() + w.numel(), dst);
  return out;
}

ExtendedWindowSet extended_window_plan(std::size_t m, std::size_t g, Extension ext) {
  if (g == 0 || m % g != 0)
    throw ConfigError(std::to_string(m) + " tokens cannot be split into " + std::to_string(g) + " windows");
  ExtendedWindowSet set;
  set.windows = g;
  set.window = m / g;
  if (set.window % extension_divisor(ext) != 0)
    throw ConfigError("window length " + std::to_string(set.window) + " does not admit extension " +
                      std::string(extension_name(ext)));
  set.padding = set.window / extension_divisor(ext);
  const std::size_t len = set.extended();
  set.index.resize(g * len);
  set.pad_mask.resize(g * len);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < len; ++j) {
      const auto src = static_cast<std::ptrdiff_t>(i * set.window + j) - static_cast<std::ptrdiff_t>(set.padding);
      const bool pad = src < 0 || src >= static_cast<std::ptrdiff_t>(m);
      set.index[i * len + j] = pad ? -1 : src;
      set.pad_mask[i * len + j] = pad;
    }
  return set;
}

ExtendedWindowSet extend_windows(const Tensor& seq, std::size_t g, Extension ext) {
  ExtendedWindowSet set = extended_window_plan(seq.rows(), g, ext);
  const std::size_t d = seq.cols();
  set.values = Tensor::zeros(set.index.size(), d);
  for (std::size_t r = 0; r < set.index.size(); ++r)
    if (set.index[r] >= 0) {
      const auto src = seq.row(static_cast<std::size_t>(set.index[r]));
      std::copy(src.begin(), src.end(), set.values.row(r).begin());
    }
  return set;
}

AttentionLayout ExtendedWindowSet::layout(std::size_t heads) const {
  AttentionLayout layout;
  layout.heads = heads;
  layout.key_masked = pad_mask;
  for (std::size_t i = 0; i < windows; ++i)
    layout.groups.push_back({i * window, window, i * extended(), extended()});
  return layout;
}

TemporalParams init_temporal(std::size_t n_rois, const BlockGeometry& geom, const WindowSchedule& schedule,
                             std::mt19937_64& rng, bool zero_output) {
  schedule.validate();
  TemporalParams p;
  p.embed = init_linear(n_rois, geom.d, rng);
  for (std::size_t l = 0; l < schedule.layers(); ++l) {
    BlockParams b = init_block(geom, rng, zero_output);
    b.bias = Tensor({geom.heads, schedule.window(l), schedule.extended(l)});
    p.layers.push_back(std::move(b));
  }
  return p;
}

void visit_params(TemporalParams& p, const std::string& prefix, const ParamVisitor& fn) {
  visit_params(p.embed, prefix + ".embed", fn);
  for (std::size_t l = 0; l < p.layers.size(); ++l) visit_params(p.layers[l], prefix + ".layer" + std::to_string(l), fn);
}

Var cross_window_attention(ParamBinder& bind, const BlockParams& p, Var xn, const ExtendedWindowSet& plan,
                           std::size_t heads, const ForwardContext& ctx, const AttentionObserver* observer) {
  // K and V are projected once on the sequence and then gathered into the
  // overlapping extended windows; a projection commutes with row selection.
  return attention_sublayer(bind, p, xn, plan.layout(heads), plan.index, ctx, observer);
}

Var temporal_layer(ParamBinder& bind, const BlockParams& p, Var x, const WindowSchedule& schedule, std::size_t layer,
                   std::size_t heads, const ForwardContext& ctx) {
  const std::size_t m = x.value().rows();
  if (m != schedule.sequence_length)
    throw DimensionError(std::to_string(m) + " tokens for a schedule over " + std::to_string(schedule.sequence_length));
  const ExtendedWindowSet plan = extended_window_plan(m, schedule.tokens_per_layer[layer], schedule.extension);
  if (p.bias.numel() != heads * plan.window * plan.extended())
    throw ConfigError("layer " + std::to_string(layer) + " bias " + shape_string(p.bias.shape()) +
                      " does not match window " + std::to_string(plan.window) + " x " +
                      std::to_string(plan.extended()));
  AttentionObserver observer;
  if (ctx.temporal_observer)
    observer = [&](std::size_t group, std::size_t head, const Tensor& w) { ctx.temporal_observer(layer, group, head, w); };
  return transformer_block(bind, p, x, plan.layout(heads), plan.index, ctx, ctx.temporal_observer ? &observer : nullptr);
}

Var run_merge_segment(ParamBinder& bind, const TemporalParams& p, Var x, const WindowSchedule& schedule,
                      std::size_t heads, const ForwardContext& ctx, std::vector<Tensor>* outputs) {
  schedule.validate();
  const std::size_t layers = schedule.layers();
  if (p.layers.size() != layers)
    throw ConfigError(std::to_string(p.layers.size()) + " layer parameter sets for a " + std::to_string(layers) +
                      "-layer schedule");
  std::vector<Var> stored(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    x = temporal_layer(bind, p.layers[l], x, schedule, l, heads, ctx);
    if (l >= layers / 2) x = add(x, stored[layers - 1 - l]);
    stored[l] = x;
    if (outputs) outputs->push_back(x.value());
  }
  return x;
}

Var temporal_forward(ParamBinder& bind, const TemporalParams& p, Var seq_by_time, const WindowSchedule& schedule,
                     std::size_t heads, const ForwardContext& ctx) {
  if (seq_by_time.value().cols() != p.embed.w.rows())
    throw DimensionError("temporal input has " + std::to_string(seq_by_time.value().cols()) + " ROIs, embedding expects " +
                         std::to_string(p.embed.w.rows()));
  return run_merge_segment(bind, p, linear(bind, p.embed, seq_by_time), schedule, heads, ctx);
}

}  // namespace starformer
