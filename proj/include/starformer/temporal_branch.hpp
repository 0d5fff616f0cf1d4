#pragma once
// Variable-window temporal transformer over time-point tokens.
//
// Layer l splits the m tokens into g_l windows of w_l = m / g_l. Each window
// attends to itself plus e_l neighbouring tokens on either side (the extended
// window); positions that fall outside [0, m) are masked. The schedule halves
// g over the first half of the layers (adjacent windows merge) and mirrors it
// over the second half (windows split), where each layer also adds the output
// of the merge layer with the same window count.

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "starformer/transformer.hpp"

namespace starformer {

// Extension e on each side of a window of length w.
enum class Extension { quarter, half, full };
Extension parse_extension(std::string_view text);  // "w/4", "w/2", "w"
std::string_view extension_name(Extension e);

struct WindowSchedule {
  std::vector<std::size_t> tokens_per_layer{16, 8, 4, 4, 8, 16};
  std::size_t sequence_length = 128;
  Extension extension = Extension::half;

  // ConfigError unless the schedule is an even-length palindrome whose first
  // half halves g at every step, every g divides m, and every window admits
  // the extension.
  void validate() const;
  std::size_t layers() const noexcept { return tokens_per_layer.size(); }
  std::size_t window(std::size_t layer) const { return sequence_length / tokens_per_layer.at(layer); }
  std::size_t padding(std::size_t layer) const;
  std::size_t extended(std::size_t layer) const { return window(layer) + 2 * padding(layer); }
};

std::vector<Tensor> partition_windows(const Tensor& seq, std::size_t g);
Tensor concat_windows(const std::vector<Tensor>& windows);

struct ExtendedWindowSet {
  std::size_t windows = 0;
  std::size_t window = 0;   // w
  std::size_t padding = 0;  // e
  // Window i occupies rows [i * (w + 2e), (i + 1) * (w + 2e)); entry r holds
  // the source token of row r or -1 for padding.
  std::vector<std::ptrdiff_t> index;
  std::vector<bool> pad_mask;
  Tensor values;  // gathered rows; padding rows are zero

  std::size_t extended() const noexcept { return window + 2 * padding; }
  AttentionLayout layout(std::size_t heads) const;
};

ExtendedWindowSet extend_windows(const Tensor& seq, std::size_t g, Extension ext);
// Index and mask only, for a sequence of `m` tokens.
ExtendedWindowSet extended_window_plan(std::size_t m, std::size_t g, Extension ext);

struct TemporalParams {
  Linear embed;                    // [n, d]: ROI vector of a time point -> token
  std::vector<BlockParams> layers;  // layer l carries a [heads, w_l, w_l + 2e_l] bias
};

TemporalParams init_temporal(std::size_t n_rois, const BlockGeometry& geom, const WindowSchedule& schedule,
                             std::mt19937_64& rng, bool zero_output);
void visit_params(TemporalParams& p, const std::string& prefix, const ParamVisitor& fn);

// Cross-window attention for one layer on an already-normalised sequence.
Var cross_window_attention(ParamBinder& bind, const BlockParams& p, Var xn, const ExtendedWindowSet& plan,
                           std::size_t heads, const ForwardContext& ctx, const AttentionObserver* observer = nullptr);

// One schedule layer on the token sequence x [m, d].
Var temporal_layer(ParamBinder& bind, const BlockParams& p, Var x, const WindowSchedule& schedule, std::size_t layer,
                   std::size_t heads, const ForwardContext& ctx);

// Runs every layer with the merge/segment skips. When `outputs` is given it
// receives each layer's output after its skip addition.
Var run_merge_segment(ParamBinder& bind, const TemporalParams& p, Var x, const WindowSchedule& schedule,
                      std::size_t heads, const ForwardContext& ctx, std::vector<Tensor>* outputs = nullptr);

// seq_by_time is [m, n]; returns [m, d].
Var temporal_forward(ParamBinder& bind, const TemporalParams& p, Var seq_by_time, const WindowSchedule& schedule,
                     std::size_t heads, const ForwardContext& ctx);

}  // namespace starformer
