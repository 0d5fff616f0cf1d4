#pragma once
// Full self-attention over ROI tokens with a learnable positional table.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "starformer/transformer.hpp"

namespace starformer {

struct SpatialParams {
  Linear embed;                     // [m, d]: one ROI's series -> token
  Tensor positions;                 // [n_max, d], indexed by position after reordering
  std::vector<BlockParams> blocks;  // no positional bias
};

SpatialParams init_spatial(std::size_t timepoints, std::size_t n_max, const BlockGeometry& geom, std::size_t depth,
                           std::mt19937_64& rng, bool zero_output);
void visit_params(SpatialParams& p, const std::string& prefix, const ParamVisitor& fn);

AttentionLayout full_attention_layout(std::size_t tokens, std::size_t heads);

// Embedded ROI tokens plus positions, before any block: [n, d].
Var spatial_tokens(ParamBinder& bind, const SpatialParams& p, Var rois_by_time);

// rois_by_time is [n, m] with rows already in model order; returns [n, d].
Var spatial_forward(ParamBinder& bind, const SpatialParams& p, Var rois_by_time, std::size_t heads,
                    const ForwardContext& ctx);

}  // namespace starformer
