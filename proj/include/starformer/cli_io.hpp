#pragma once
// File formats, dataset loading, synthetic data, checkpoints and run
// configuration.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "starformer/centrality.hpp"
#include "starformer/connectivity.hpp"
#include "starformer/fusion_model.hpp"
#include "starformer/training_eval.hpp"

namespace starformer {

namespace fs = std::filesystem;

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// Time series CSV: header `t,<roi ids>`, one row per timepoint.
void write_timeseries_csv(const TimeSeriesMatrix& ts, const fs::path& path);
TimeSeriesMatrix read_timeseries_csv(const fs::path& path, const std::string& subject = {});

struct AtlasFile {
  AtlasPartition partition;
  std::vector<std::string> roi_names;
};
// Columns roi_id,roi_name,network.
void write_atlas_csv(const AtlasFile& atlas, const fs::path& path);
AtlasFile read_atlas_csv(const fs::path& path);

struct ManifestEntry {
  std::string id;
  int label = 0;
  std::string file;  // relative to the manifest directory
};

struct Manifest {
  std::string profile = "synthetic";
  std::string atlas = "atlas.csv";
  std::optional<std::uint64_t> seed;
  std::vector<ManifestEntry> subjects;
};

void write_manifest(const Manifest& m, const fs::path& path);
Manifest read_manifest(const fs::path& path);

// Reads and validates every subject against the atlas.
Dataset load_dataset(const fs::path& manifest_path);
// Writes atlas, one CSV per subject and the manifest into `dir`.
Manifest write_dataset(const Dataset& data, const fs::path& dir, std::optional<std::uint64_t> seed = {});

struct PlantedEdge {
  std::size_t src = 0, dst = 0;
  double weight = 0.0;
};

struct SyntheticSpec {
  std::size_t rois_per_network = 5;  // 7 networks
  std::size_t timepoints = 96;
  std::size_t subjects_per_class = 100;
  double self_coefficient = 0.5;  // diagonal of the shared VAR matrix
  std::vector<PlantedEdge> base_edges;
  std::vector<PlantedEdge> class1_edges;  // added for patients
  std::vector<PlantedEdge> class0_edges;  // added for controls
  double sigma = 1.0;
  std::size_t burn_in = 200;
  std::uint64_t seed = 0;

  std::size_t rois() const noexcept { return 7 * rois_per_network; }
  // ConfigError on bad indices or a non-stationary class matrix.
  void validate() const;
  // Bundled desk-scale set: planted class-difference edges inside networks.
  static SyntheticSpec bundled();
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

// VAR coefficient matrix A for a class, x(t) = A x(t-1) + noise, A(dst, src).
Tensor var_matrix(const SyntheticSpec& spec, int label);
double spectral_radius(const Tensor& a);

// First half of the subjects are controls, second half patients, ids sub-000...
Dataset generate_synthetic(const SyntheticSpec& spec);

// Binary checkpoint of a model state with its config and ordering.
void save_checkpoint(const ModelState& state, const fs::path& path, const nlohmann::json& metadata = {});
struct LoadedCheckpoint {
  ModelState state;
  nlohmann::json metadata;
};
// IntegrityError on a damaged file; ConfigError when `expected` is given
// and its architecture differs from the stored one.
LoadedCheckpoint load_checkpoint(const fs::path& path, const ModelConfig* expected = nullptr);

struct RunConfig {
  std::string profile = "synthetic";
  ModelConfig model;
  TrainConfig train;
  static RunConfig for_profile(const std::string& profile);
};
// Fields present in `j` override the named profile's defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

nlohmann::json metrics_json(const CVReport& report, const TrainConfig& cfg);
nlohmann::json metrics_json(const Metrics& m);
void write_metrics_csv(const CVReport& report, const fs::path& path);
void write_loss_curve_csv(const FoldResult& fold, const fs::path& path);
void write_importance_csv(const ImportanceScores& s, const AtlasPartition& atlas, const fs::path& path);

nlohmann::json ordering_json(const ROIOrdering& ord, const std::vector<std::string>& roi_ids);
ROIOrdering ordering_from_json(const nlohmann::json& j);

// Binary G with roi ids on both axes; row is the source.
void write_matrix_csv(const Tensor& g, const std::vector<std::string>& roi_ids, const fs::path& path);
Tensor read_matrix_csv(const fs::path& path, std::vector<std::string>* roi_ids = nullptr);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

// Thread count from STARFORMER_THREADS, else 1.
std::size_t env_threads();

}  // namespace starformer
