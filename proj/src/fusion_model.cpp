#include "starformer/fusion_model.hpp"

#include "starformer/errors.hpp"

namespace starformer {

void ModelConfig::validate() const {
  geometry.validate();
  if (n_rois < 2) throw ConfigError("model needs at least 2 ROIs");
  if (positional_rows() < n_rois) throw ConfigError("positional table smaller than the ROI count");
  if (schedule.sequence_length != timepoints)
    throw ConfigError("schedule sequence length " + std::to_string(schedule.sequence_length) + " differs from crop " +
                      std::to_string(timepoints));
  schedule.validate();
  if (spatial_depth == 0 || mlp_hidden == 0) throw ConfigError("spatial depth and MLP width must be positive");
  if (classes != 2) throw ConfigError("only two output classes are supported");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t ModelConfig::architecture_hash() const {
  const nlohmann::json arch = {
      {"n_rois", n_rois},
      {"n_max", positional_rows()},
      {"timepoints", timepoints},
      {"d", geometry.d},
      {"heads", geometry.heads},
      {"ff_hidden", geometry.ff_hidden},
      {"schedule", schedule.tokens_per_layer},
      {"extension", extension_name(schedule.extension)},
      {"spatial_depth", spatial_depth},
      {"mlp_hidden", mlp_hidden},
      {"classes", classes},
  };
  const std::string text = arch.dump();
  return fnv1a64({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {
      {"n_rois", c.n_rois},
      {"n_max", c.positional_rows()},
      {"timepoints", c.timepoints},
      {"d", c.geometry.d},
      {"heads", c.geometry.heads},
      {"ff_hidden", c.geometry.ff_hidden},
      {"schedule", c.schedule.tokens_per_layer},
      {"extension", extension_name(c.schedule.extension)},
      {"spatial_depth", c.spatial_depth},
      {"mlp_hidden", c.mlp_hidden},
      {"classes", c.classes},
      {"dropout", c.dropout},
      {"zero_init_output", c.zero_init_output},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_rois = j.value("n_rois", c.n_rois);
  c.n_max = j.value("n_max", c.n_max);
  c.timepoints = j.value("timepoints", c.timepoints);
  c.geometry.d = j.value("d", c.geometry.d);
  c.geometry.heads = j.value("heads", c.geometry.heads);
  c.geometry.ff_hidden = j.value("ff_hidden", c.geometry.ff_hidden);
  c.schedule.tokens_per_layer = j.value("schedule", c.schedule.tokens_per_layer);
  c.schedule.extension = parse_extension(j.value("extension", std::string(extension_name(c.schedule.extension))));
  c.schedule.sequence_length = c.timepoints;
  c.spatial_depth = j.value("spatial_depth", c.spatial_depth);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.classes = j.value("classes", c.classes);
  c.dropout = j.value("dropout", c.dropout);
  c.zero_init_output = j.value("zero_init_output", c.zero_init_output);
}

ModelState ModelState::init(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  ModelState s;
  s.config = config;
  s.temporal = init_temporal(config.n_rois, config.geometry, config.schedule, rng, config.zero_init_output);
  s.spatial = init_spatial(config.timepoints, config.positional_rows(), config.geometry, config.spatial_depth, rng,
                           config.zero_init_output);
  s.head_hidden = init_linear(2 * config.geometry.d, config.mlp_hidden, rng);
  s.head_out = init_linear(config.mlp_hidden, config.classes, rng, config.zero_init_output);
  s.ordering = ROIOrdering::identity(config.n_rois);
  return s;
}

void ModelState::visit(const ParamVisitor& fn) {
  visit_params(temporal, "temporal", fn);
  visit_params(spatial, "spatial", fn);
  visit_params(head_hidden, "head.hidden", fn);
  visit_params(head_out, "head.out", fn);
}

std::size_t ModelState::parameter_count() {
  std::size_t total = 0;
  visit([&](const std::string&, Tensor& t) { total += t.numel(); });
  return total;
}

Var fuse_features(Var temporal_out, Var spatial_out) {
  if (temporal_out.value().cols() != spatial_out.value().cols())
    throw DimensionError("branch outputs differ in width");
  return concat_cols(mean_rows(temporal_out), mean_rows(spatial_out));
}

Var classify(ParamBinder& bind, const ModelState& state, Var fused, const ForwardContext& ctx) {
  Var h = activation(linear(bind, state.head_hidden, fused), Activation::relu);
  h = dropout(h, ctx.dropout, ctx.rng);
  return linear(bind, state.head_out, h);
}

ForwardResult model_forward(ParamBinder& bind, const ModelState& state, const Tensor& rois_by_time,
                            const ForwardContext& ctx) {
  const ModelConfig& c = state.config;
  if (rois_by_time.rank() != 2 || rois_by_time.rows() != c.n_rois || rois_by_time.cols() != c.timepoints)
    throw DimensionError("model expects [" + std::to_string(c.n_rois) + ", " + std::to_string(c.timepoints) +
                         "] input, got " + shape_string(rois_by_time.shape()));
  Tape& tape = bind.tape();
  Var x = tape.constant(rois_by_time);
  ForwardResult r;
  r.temporal_out = temporal_forward(bind, state.temporal, tape.constant(transpose(rois_by_time)), c.schedule,
                                    c.geometry.heads, ctx);
  r.spatial_out = spatial_forward(bind, state.spatial, x, c.geometry.heads, ctx);
  r.fused = fuse_features(r.temporal_out, r.spatial_out);
  r.logits = classify(bind, state, r.fused, ctx);
  return r;
}

Tensor predict_proba(const ModelState& state, const Tensor& rois_by_time) {
  Tape tape;
  tape.set_grad_enabled(false);
  ParamBinder bind(tape);
  return softmax_rows(model_forward(bind, state, rois_by_time, {}).logits.value());
}

}  // namespace starformer
