#include "starformer/spatial_branch.hpp"

#include "starformer/errors.hpp"

namespace starformer {

SpatialParams init_spatial(std::size_t timepoints, std::size_t n_max, const BlockGeometry& geom, std::size_t depth,
                           std::mt19937_64& rng, bool zero_output) {
  if (depth == 0) throw ConfigError("spatial depth must be at least 1");
  SpatialParams p;
  p.embed = init_linear(timepoints, geom.d, rng);
  p.positions = Tensor({n_max, geom.d});
  std::normal_distribution<double> pos(0.0, 0.02);
  for (double& v : p.positions.data()) v = pos(rng);
  for (std::size_t b = 0; b < depth; ++b) p.blocks.push_back(init_block(geom, rng, zero_output));
  return p;
}

void visit_params(SpatialParams& p, const std::string& prefix, const ParamVisitor& fn) {
  visit_params(p.embed, prefix + ".embed", fn);
  fn(prefix + ".positions", p.positions);
  for (std::size_t b = 0; b < p.blocks.size(); ++b) visit_params(p.blocks[b], prefix + ".block" + std::to_string(b), fn);
}

AttentionLayout full_attention_layout(std::size_t tokens, std::size_t heads) {
  AttentionLayout layout;
  layout.heads = heads;
  layout.groups.push_back({0, tokens, 0, tokens});
  return layout;
}

Var spatial_tokens(ParamBinder& bind, const SpatialParams& p, Var rois_by_time) {
  const Tensor& x = rois_by_time.value();
  if (x.cols() != p.embed.w.rows())
    throw DimensionError("spatial input has " + std::to_string(x.cols()) + " timepoints, embedding expects " +
                         std::to_string(p.embed.w.rows()));
  if (x.rows() > p.positions.rows())
    throw ConfigError(std::to_string(x.rows()) + " ROIs exceed the positional table of " +
                      std::to_string(p.positions.rows()));
  return add(linear(bind, p.embed, rois_by_time), slice_rows(bind(p.positions), 0, x.rows()));
}

Var spatial_forward(ParamBinder& bind, const SpatialParams& p, Var rois_by_time, std::size_t heads,
                    const ForwardContext& ctx) {
  Var x = spatial_tokens(bind, p, rois_by_time);
  const AttentionLayout layout = full_attention_layout(x.value().rows(), heads);
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    AttentionObserver observer;
    if (ctx.spatial_observer)
      observer = [&, b](std::size_t, std::size_t head, const Tensor& w) { ctx.spatial_observer(b, head, w); };
    x = transformer_block(bind, p.blocks[b], x, layout, {}, ctx, ctx.spatial_observer ? &observer : nullptr);
  }
  return x;
}

}  // namespace starformer
