#pragma once
// End-to-end model: temporal branch over time points, spatial branch over
// ROIs, mean-pooled fusion and a two-layer MLP head.

#include <cstdint>
#include <random>
#include <span>
#include <string>

#include <json.hpp>

#include "starformer/centrality.hpp"
#include "starformer/spatial_branch.hpp"
#include "starformer/temporal_branch.hpp"

namespace starformer {

struct ModelConfig {
  std::size_t n_rois = 400;
  std::size_t n_max = 0;  // positional table rows; 0 means n_rois
  std::size_t timepoints = 128;
  BlockGeometry geometry{128, 8, 256};
  WindowSchedule schedule{};
  std::size_t spatial_depth = 1;
  std::size_t mlp_hidden = 256;
  std::size_t classes = 2;
  double dropout = 0.5;
  bool zero_init_output = true;

  std::size_t positional_rows() const noexcept { return n_max ? n_max : n_rois; }
  void validate() const;
  // Hash of the fields that determine tensor shapes.
  std::uint64_t architecture_hash() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

struct ModelState {
  ModelConfig config;
  TemporalParams temporal;
  SpatialParams spatial;
  Linear head_hidden;  // [2d, mlp_hidden]
  Linear head_out;     // [mlp_hidden, classes]
  ROIOrdering ordering;

  static ModelState init(const ModelConfig& config, std::mt19937_64& rng);
  void visit(const ParamVisitor& fn);
  std::size_t parameter_count();
};

// Mean over tokens of each branch, concatenated: [1, 2d].
Var fuse_features(Var temporal_out, Var spatial_out);

struct ForwardResult {
  Var temporal_out;  // [m, d]
  Var spatial_out;   // [n, d]
  Var fused;         // [1, 2d]
  Var logits;        // [1, classes]
};

// Logits from the pooled features through the MLP head.
Var classify(ParamBinder& bind, const ModelState& state, Var fused, const ForwardContext& ctx);

// `rois_by_time` is [n, m], already reordered and cropped.
ForwardResult model_forward(ParamBinder& bind, const ModelState& state, const Tensor& rois_by_time,
                            const ForwardContext& ctx);

// Class probabilities without recording gradients.
Tensor predict_proba(const ModelState& state, const Tensor& rois_by_time);

}  // namespace starformer
