#pragma once
// Cross-validated training, metrics and attention-based ROI importance.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "starformer/centrality.hpp"
#include "starformer/fusion_model.hpp"
#include "starformer/timeseries.hpp"

namespace starformer {

struct Subject {
  std::string id;
  int label = 0;  // 1 = patient
  TimeSeriesMatrix series;
};

struct Dataset {
  std::string profile;
  AtlasPartition atlas;
  std::vector<std::string> roi_names;
  std::vector<Subject> subjects;
};

enum class OrderingMode { ec, random, identity };
OrderingMode parse_ordering_mode(std::string_view text);
std::string_view ordering_mode_name(OrderingMode m);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 128;
  double lr_init = 5e-5;
  double lr_max = 1e-4;
  double lr_final = 1e-5;
  double warmup_fraction = 0.1;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t folds = 10;
  double ordering_subsample = 0.10;
  OrderingMode ordering = OrderingMode::ec;
  std::size_t lag = 1;
  double alpha = 0.05;
  std::size_t threads = 1;  // concurrent folds
  // When set, every fold and subject uses this ordering instead of `ordering`.
  std::optional<ROIOrdering> fixed_ordering;
  void validate() const;
};

// Contiguous window of `target_m` timepoints at a uniform random offset.
TimeSeriesMatrix crop_time_series(const TimeSeriesMatrix& ts, std::size_t target_m, std::mt19937_64& rng);
// Deterministic centred window, used for evaluation.
TimeSeriesMatrix center_crop(const TimeSeriesMatrix& ts, std::size_t target_m);

struct FoldSplit {
  std::vector<std::size_t> train, val, test;
};

struct SplitPlan {
  std::uint64_t seed = 0;
  std::vector<FoldSplit> folds;
};

// Shuffles subject indices and cuts them into `folds` near-equal chunks;
// fold k tests on chunk k, validates on chunk k+1 and trains on the rest.
SplitPlan make_folds(std::size_t subjects, std::uint64_t seed, std::size_t folds = 10);

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

// Adam with bias-corrected moments over a fixed parameter list.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct Metrics {
  double acc = 0.0, prec = 0.0, rec = 0.0;
  std::optional<double> auc;  // absent for single-class labels
};

// Scores are P(patient); predictions threshold at 0.5.
Metrics evaluate_metrics(std::span<const double> scores, std::span<const int> labels);
// Mann-Whitney AUC with midranks for ties.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
};

struct FoldResult {
  std::size_t fold = 0;
  Metrics test;
  double best_val_acc = 0.0;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> curve;
  ROIOrdering ordering;
  std::vector<double> pbar;  // averaged centrality (ec ordering only)
  std::string error;         // non-empty when the fold aborted
};

struct MetricSummary {
  double mean = 0.0, std = 0.0;
  std::size_t count = 0;
};

struct CVReport {
  std::vector<FoldResult> folds;
  std::vector<std::string> skipped;  // subjects shorter than the crop
  MetricSummary acc, prec, rec, auc;
};

MetricSummary summarize(std::span<const double> values);

// Drops subjects with fewer than `m` timepoints; returns their ids.
std::vector<std::string> drop_short_subjects(Dataset& data, std::size_t m);

// Per-subject orderings for a fold: one shared EC ordering, a fresh random
// permutation per subject, or the identity.
struct FoldOrdering {
  std::vector<ROIOrdering> per_subject;  // indexed by subject
  std::vector<double> pbar;
};
FoldOrdering fold_ordering(const Dataset& data, std::span<const std::size_t> train, const TrainConfig& cfg,
                           std::mt19937_64& rng);

// Seed for an independent stream (fold, purpose) derived from the root seed.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t fold, std::uint64_t purpose);

struct TrainedFold {
  FoldResult result;
  ModelState state;  // best-validation checkpoint
};

TrainedFold train_fold(const Dataset& data, const FoldSplit& split, std::size_t fold, const ModelConfig& model,
                       const TrainConfig& cfg);

CVReport cross_validate(const Dataset& data, const ModelConfig& model, const TrainConfig& cfg,
                        std::vector<ModelState>* states = nullptr);

// Model-ready input: rows reordered, centre-cropped to the model length.
Tensor model_input(const ModelState& state, const TimeSeriesMatrix& ts, const ROIOrdering& ordering);
// P(patient) for each input.
std::vector<double> predict_scores(const ModelState& state, std::span<const Tensor> inputs);

struct ImportanceScores {
  // All in atlas order, each summing to 1.
  std::vector<double> temporal, spatial, combined;
  std::vector<std::size_t> top;  // atlas indices, best first
  double temporal_weight = 0.5;
};

// `inputs` are [n, m] model inputs already in the state's ROI order.
ImportanceScores importance_scores(const ModelState& state, std::span<const Tensor> inputs,
                                   double temporal_weight = 0.5, double top_fraction = 0.05);

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);
std::size_t top_count(std::size_t n, double fraction);

}  // namespace starformer
