#include "starformer/training_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <atomic>
#include <thread>

#include "starformer/connectivity.hpp"
#include "starformer/errors.hpp"

namespace starformer {

OrderingMode parse_ordering_mode(std::string_view text) {
  if (text == "ec") return OrderingMode::ec;
  if (text == "random") return OrderingMode::random;
  if (text == "identity") return OrderingMode::identity;
  throw ConfigError("unknown ordering mode '" + std::string(text) + "'");
}

std::string_view ordering_mode_name(OrderingMode m) {
  switch (m) {
    case OrderingMode::ec: return "ec";
    case OrderingMode::random: return "random";
    case OrderingMode::identity: return "identity";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch == 0) throw ConfigError("epochs and batch must be positive");
  if (!(lr_init <= lr_max && lr_final <= lr_init && lr_final >= 0.0))
    throw ConfigError("learning rates must satisfy lr_final <= lr_init <= lr_max");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup fraction must lie in [0, 1)");
  if (folds < 3) throw ConfigError("need at least 3 folds");
  if (!(ordering_subsample > 0.0 && ordering_subsample <= 1.0))
    throw ConfigError("ordering subsample must lie in (0, 1]");
  if (lag == 0 || !(alpha > 0.0 && alpha < 1.0)) throw ConfigError("bad Granger lag or alpha");
  if (threads == 0) throw ConfigError("threads must be positive");
  if (fixed_ordering) fixed_ordering->validate();
}

namespace {

TimeSeriesMatrix slice_time(const TimeSeriesMatrix& ts, std::size_t offset, std::size_t len) {
  const std::size_t n = ts.rois();
  Tensor out = Tensor::zeros(n, len);
  for (std::size_t r = 0; r < n; ++r) {
    const auto src = ts.series(r);
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(offset), len, out.row(r).begin());
  }
  return TimeSeriesMatrix(std::move(out), ts.roi_ids());
}

void require_length(const TimeSeriesMatrix& ts, std::size_t target_m) {
  if (target_m == 0) throw ContractError("crop length must be positive");
  if (ts.timepoints() < target_m)
    throw DataError("series has " + std::to_string(ts.timepoints()) + " timepoints, crop needs " +
                    std::to_string(target_m));
}

}  // namespace

TimeSeriesMatrix crop_time_series(const TimeSeriesMatrix& ts, std::size_t target_m, std::mt19937_64& rng) {
  require_length(ts, target_m);
  const std::size_t span = ts.timepoints() - target_m;
  const std::size_t offset = std::uniform_int_distribution<std::size_t>(0, span)(rng);
  return slice_time(ts, offset, target_m);
}

TimeSeriesMatrix center_crop(const TimeSeriesMatrix& ts, std::size_t target_m) {
  require_length(ts, target_m);
  return slice_time(ts, (ts.timepoints() - target_m) / 2, target_m);
}

SplitPlan make_folds(std::size_t subjects, std::uint64_t seed, std::size_t folds) {
  if (folds < 3) throw ContractError("need at least 3 folds");
  if (subjects < folds)
    throw ContractError(std::to_string(subjects) + " subjects cannot fill " + std::to_string(folds) + " folds");
  std::vector<std::size_t> order(subjects);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> chunks(folds);
  for (std::size_t k = 0; k < folds; ++k)
    chunks[k].assign(order.begin() + static_cast<std::ptrdiff_t>(k * subjects / folds),
                     order.begin() + static_cast<std::ptrdiff_t>((k + 1) * subjects / folds));
  SplitPlan plan;
  plan.seed = seed;
  for (std::size_t k = 0; k < folds; ++k) {
    FoldSplit f;
    f.test = chunks[k];
    f.val = chunks[(k + 1) % folds];
    for (std::size_t c = 0; c < folds; ++c)
      if (c != k && c != (k + 1) % folds) f.train.insert(f.train.end(), chunks[c].begin(), chunks[c].end());
    std::sort(f.train.begin(), f.train.end());
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) return cfg.lr_init;
  const double s = static_cast<double>(std::min(step, total_steps));
  const double total = static_cast<double>(total_steps);
  const double warm = cfg.warmup_fraction * total;
  if (s < warm) return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * s / warm;
  const double progress = total > warm ? (s - warm) / (total - warm) : 1.0;
  return cfg.lr_final + 0.5 * (cfg.lr_max - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  if (params.size() != grads.size()) throw DimensionError("parameter and gradient counts differ");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }
  if (m_.size() != params.size()) throw DimensionError("optimizer parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    if (g.numel() != p.numel()) throw DimensionError("gradient shape differs from parameter");
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g[i];
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = m_[k][i] / c1;
      const double vhat = v_[k][i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1) {
        pos_rank += midrank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double p = static_cast<double>(pos);
  return (pos_rank - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

Metrics evaluate_metrics(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  if (scores.empty()) throw ContractError("no predictions to evaluate");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("labels must be 0 or 1");
    const bool pred = scores[i] >= 0.5;
    if (pred && labels[i] == 1) ++tp;
    else if (pred) ++fp;
    else if (labels[i] == 1) ++fn;
    else ++tn;
  }
  Metrics m;
  m.acc = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  m.prec = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.rec = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.auc = roc_auc(scores, labels);
  return m;
}

MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::vector<std::string> drop_short_subjects(Dataset& data, std::size_t m) {
  std::vector<std::string> dropped;
  std::erase_if(data.subjects, [&](const Subject& s) {
    if (s.series.timepoints() >= m) return false;
    dropped.push_back(s.id);
    return true;
  });
  return dropped;
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t fold, std::uint64_t purpose) {
  // splitmix64 finaliser over a simple combination of the three inputs
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(root) ^ fold) ^ (purpose * 0x632be59bd9b4e019ULL));
}

FoldOrdering fold_ordering(const Dataset& data, std::span<const std::size_t> train, const TrainConfig& cfg,
                           std::mt19937_64& rng) {
  const std::size_t n = data.atlas.size();
  FoldOrdering out;
  if (cfg.fixed_ordering) {
    if (cfg.fixed_ordering->perm.size() != n) throw DimensionError("fixed ordering length differs from the atlas");
    out.per_subject.assign(data.subjects.size(), *cfg.fixed_ordering);
    return out;
  }
  switch (cfg.ordering) {
    case OrderingMode::identity:
      out.per_subject.assign(data.subjects.size(), ROIOrdering::identity(n));
      break;
    case OrderingMode::random:
      for (std::size_t s = 0; s < data.subjects.size(); ++s) out.per_subject.push_back(ROIOrdering::random(n, rng));
      break;
    case OrderingMode::ec: {
      std::vector<std::size_t> pool;
      for (std::size_t s : train)
        if (data.subjects[s].label == 1) pool.push_back(s);
      if (pool.empty()) pool.assign(train.begin(), train.end());
      if (pool.empty()) throw ContractError("no training subjects to derive an ordering from");
      const auto chosen = sample_subset(pool, cfg.ordering_subsample, rng);
      std::vector<CentralityVector> cents;
      for (std::size_t s : chosen) {
        const auto ec = build_effective_connectivity(data.subjects[s].series, {cfg.lag, cfg.alpha, 1});
        cents.push_back(eigenvector_centrality(ec.g));
      }
      const CentralityVector pbar = average_centrality(cents);
      out.pbar = pbar.p;
      out.per_subject.assign(data.subjects.size(), reorder_within_networks(pbar, data.atlas));
      break;
    }
  }
  return out;
}

Tensor model_input(const ModelState& state, const TimeSeriesMatrix& ts, const ROIOrdering& ordering) {
  return center_crop(apply_ordering(ts, ordering), state.config.timepoints).values();
}

std::vector<double> predict_scores(const ModelState& state, std::span<const Tensor> inputs) {
  std::vector<double> out;
  out.reserve(inputs.size());
  for (const Tensor& x : inputs) out.push_back(predict_proba(state, x)[1]);
  return out;
}

namespace {

std::vector<Tensor*> parameter_list(ModelState& st) {
  std::vector<Tensor*> out;
  st.visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

double accuracy(const ModelState& st, std::span<const Tensor> inputs, std::span<const int> labels) {
  const auto scores = predict_scores(st, inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hit += (scores[i] >= 0.5) == (labels[i] == 1);
  return static_cast<double>(hit) / static_cast<double>(scores.size());
}

}  // namespace

TrainedFold train_fold(const Dataset& data, const FoldSplit& split, std::size_t fold, const ModelConfig& model,
                       const TrainConfig& cfg) {
  cfg.validate();
  if (split.train.empty() || split.val.empty() || split.test.empty()) throw ContractError("empty split");
  std::mt19937_64 rng_init(derive_seed(cfg.seed, fold, 1));
  std::mt19937_64 rng_order(derive_seed(cfg.seed, fold, 2));
  std::mt19937_64 rng_shuffle(derive_seed(cfg.seed, fold, 3));
  std::mt19937_64 rng_crop(derive_seed(cfg.seed, fold, 4));
  std::mt19937_64 rng_drop(derive_seed(cfg.seed, fold, 5));

  TrainedFold out{{}, ModelState::init(model, rng_init)};
  FoldResult& res = out.result;
  res.fold = fold;
  const FoldOrdering ord = fold_ordering(data, split.train, cfg, rng_order);
  res.pbar = ord.pbar;
  const bool per_subject = cfg.ordering == OrderingMode::random && !cfg.fixed_ordering;
  res.ordering = per_subject ? ROIOrdering::identity(model.n_rois) : ord.per_subject.front();
  if (per_subject) res.ordering.provenance = OrderingProvenance::random;
  out.state.ordering = res.ordering;

  std::vector<TimeSeriesMatrix> ordered(data.subjects.size());
  auto prepare = [&](std::span<const std::size_t> ids) {
    for (std::size_t s : ids) ordered[s] = apply_ordering(data.subjects[s].series, ord.per_subject[s]);
  };
  prepare(split.train);
  prepare(split.val);
  prepare(split.test);
  auto eval_set = [&](std::span<const std::size_t> ids, std::vector<Tensor>& xs, std::vector<int>& ys) {
    for (std::size_t s : ids) {
      xs.push_back(center_crop(ordered[s], model.timepoints).values());
      ys.push_back(data.subjects[s].label);
    }
  };
  std::vector<Tensor> val_x, test_x;
  std::vector<int> val_y, test_y;
  eval_set(split.val, val_x, val_y);
  eval_set(split.test, test_x, test_y);

  ModelState& st = out.state;
  const std::vector<Tensor*> params = parameter_list(st);
  std::vector<Tensor> grads;
  for (const Tensor* p : params) grads.emplace_back(p->shape());
  Adam adam(cfg.beta1, cfg.beta2, cfg.adam_eps);

  const std::size_t batch = std::min(cfg.batch, split.train.size());
  const std::size_t per_epoch = (split.train.size() + batch - 1) / batch;
  const std::size_t total_steps = per_epoch * cfg.epochs;
  std::vector<std::size_t> order(split.train);
  ModelState best = st;
  res.best_val_acc = -1.0;
  std::size_t step = 0;

  ForwardContext ctx;
  ctx.dropout = model.dropout;
  ctx.rng = &rng_drop;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng_shuffle);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t b1 = std::min(order.size(), b0 + batch);
      for (Tensor& g : grads) g.fill(0.0);
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      for (std::size_t i = b0; i < b1; ++i) {
        const std::size_t s = order[i];
        const Tensor x = crop_time_series(ordered[s], model.timepoints, rng_crop).values();
        Tape tape;
        ParamBinder bind(tape);
        auto abort = [&](const std::string& why) {
          res.error = "fold " + std::to_string(fold) + ": " + why + " at epoch " + std::to_string(epoch) +
                      " on subject " + data.subjects[s].id;
          return out;
        };
        Var loss;
        try {
          loss = cross_entropy(model_forward(bind, st, x, ctx).logits,
                               static_cast<std::size_t>(data.subjects[s].label));
        } catch (const NumericError& e) {
          return abort(std::string("non-finite loss (") + e.what() + ")");
        }
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) return abort("non-finite loss");
        loss_sum += lv;
        try {
          tape.backward(loss);
        } catch (const NumericError& e) {
          return abort(std::string("non-finite gradient (") + e.what() + ")");
        }
        for (std::size_t k = 0; k < params.size(); ++k)
          if (const Tensor* g = bind.grad(*params[k]))
            for (std::size_t j = 0; j < g->numel(); ++j) grads[k][j] += inv * (*g)[j];
      }
      adam.step(params, grads, lr_at(step++, total_steps, cfg));
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_acc = accuracy(st, val_x, val_y);
    res.curve.push_back(rec);
    if (rec.val_acc > res.best_val_acc) {
      res.best_val_acc = rec.val_acc;
      res.best_epoch = epoch;
      best = st;
    }
  }
  out.state = std::move(best);
  res.test = evaluate_metrics(predict_scores(out.state, test_x), test_y);
  return out;
}

CVReport cross_validate(const Dataset& input, const ModelConfig& model, const TrainConfig& cfg,
                        std::vector<ModelState>* states) {
  cfg.validate();
  model.validate();
  Dataset data = input;
  CVReport report;
  report.skipped = drop_short_subjects(data, model.timepoints);
  if (data.atlas.size() != model.n_rois)
    throw DimensionError("atlas has " + std::to_string(data.atlas.size()) + " ROIs, model expects " +
                         std::to_string(model.n_rois));
  for (const Subject& s : data.subjects)
    if (s.series.rois() != model.n_rois)
      throw DimensionError("subject " + s.id + " has " + std::to_string(s.series.rois()) + " ROIs");
  const SplitPlan plan = make_folds(data.subjects.size(), cfg.seed, cfg.folds);

  std::vector<TrainedFold> trained(cfg.folds);
  std::vector<std::exception_ptr> errors(cfg.folds);
  auto run = [&](std::size_t k) {
    try {
      trained[k] = train_fold(data, plan.folds[k], k, model, cfg);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  if (cfg.threads <= 1) {
    for (std::size_t k = 0; k < cfg.folds; ++k) run(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(cfg.threads, cfg.folds); ++t)
      pool.emplace_back([&] {
        for (std::size_t k; (k = next++) < cfg.folds;) run(k);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<double> acc, prec, rec, auc;
  for (TrainedFold& t : trained) {
    if (t.result.error.empty()) {
      acc.push_back(t.result.test.acc);
      prec.push_back(t.result.test.prec);
      rec.push_back(t.result.test.rec);
      if (t.result.test.auc) auc.push_back(*t.result.test.auc);
    }
    report.folds.push_back(t.result);
    if (states) states->push_back(std::move(t.state));
  }
  report.acc = summarize(acc);
  report.prec = summarize(prec);
  report.rec = summarize(rec);
  report.auc = summarize(auc);
  return report;
}

std::size_t top_count(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("top fraction must lie in (0, 1]");
  // guard against 0.05 * 400 landing a hair above 20
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; });
  idx.resize(k);
  return idx;
}

namespace {

void normalize(std::vector<double>& v) {
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  if (s > 0.0 && std::isfinite(s)) {
    for (double& x : v) x /= s;
  } else {
    std::fill(v.begin(), v.end(), 1.0 / static_cast<double>(v.size()));
  }
}

}  // namespace

ImportanceScores importance_scores(const ModelState& state, std::span<const Tensor> inputs, double temporal_weight,
                                   double top_fraction) {
  if (inputs.empty()) throw ContractError("importance needs at least one input");
  if (!(temporal_weight >= 0.0 && temporal_weight <= 1.0)) throw ConfigError("temporal weight must lie in [0, 1]");
  const ModelConfig& c = state.config;
  const std::size_t n = c.n_rois, m = c.timepoints, heads = c.geometry.heads;
  const auto& sched = c.schedule;
  std::vector<ExtendedWindowSet> plans;
  for (std::size_t l = 0; l < sched.layers(); ++l)
    plans.push_back(extended_window_plan(m, sched.tokens_per_layer[l], sched.extension));

  // Embedding row norms: how strongly each ROI feeds a time token.
  std::vector<double> emb_norm(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (double v : state.temporal.embed.w.row(r)) s += v * v;
    emb_norm[r] = std::sqrt(s);
  }

  std::vector<double> temporal(n, 0.0), spatial(n, 0.0);
  const double t_scale = 1.0 / static_cast<double>(sched.layers() * heads);
  const double s_scale = 1.0 / static_cast<double>(c.spatial_depth * heads);
  for (const Tensor& x : inputs) {
    Tensor time_attn = Tensor::zeros(m, m);  // query time x key time
    Tensor roi_attn = Tensor::zeros(n, n);
    ForwardContext ctx;
    ctx.temporal_observer = [&](std::size_t layer, std::size_t group, std::size_t, const Tensor& w) {
      const ExtendedWindowSet& p = plans[layer];
      const std::size_t ext = p.extended();
      for (std::size_t r = 0; r < w.rows(); ++r) {
        const std::size_t q = group * p.window + r;
        for (std::size_t k = 0; k < ext; ++k) {
          const std::ptrdiff_t src = p.index[group * ext + k];
          if (src >= 0) time_attn.at(q, static_cast<std::size_t>(src)) += t_scale * w.at(r, k);
        }
      }
    };
    ctx.spatial_observer = [&](std::size_t, std::size_t, const Tensor& w) {
      for (std::size_t i = 0; i < roi_attn.numel(); ++i) roi_attn[i] += s_scale * w[i];
    };
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder bind(tape);
    const ForwardResult fr = model_forward(bind, state, x, ctx);

    // attention received by each time point, then split across ROIs
    for (std::size_t t = 0; t < m; ++t) {
      double tau = 0.0;
      for (std::size_t q = 0; q < m; ++q) tau += time_attn.at(q, t);
      double total = 0.0;
      for (std::size_t r = 0; r < n; ++r) total += std::abs(x.at(r, t)) * emb_norm[r];
      for (std::size_t r = 0; r < n; ++r)
        temporal[r] += total > 0.0 ? tau * std::abs(x.at(r, t)) * emb_norm[r] / total
                                   : tau / static_cast<double>(n);
    }
    const Tensor& tokens = fr.spatial_out.value();
    for (std::size_t j = 0; j < n; ++j) {
      double norm = 0.0;
      for (double v : tokens.row(j)) norm += v * v;
      norm = std::sqrt(norm);
      double received = 0.0;
      for (std::size_t i = 0; i < n; ++i) received += roi_attn.at(i, j);
      spatial[j] += received * norm;
    }
  }
  normalize(temporal);
  normalize(spatial);

  ImportanceScores out;
  out.temporal_weight = temporal_weight;
  out.temporal.assign(n, 0.0);
  out.spatial.assign(n, 0.0);
  const auto& perm = state.ordering.perm;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t roi = perm.empty() ? i : perm[i];
    out.temporal[roi] = temporal[i];
    out.spatial[roi] = spatial[i];
  }
  out.combined.resize(n);
  for (std::size_t r = 0; r < n; ++r)
    out.combined[r] = temporal_weight * out.temporal[r] + (1.0 - temporal_weight) * out.spatial[r];
  out.top = top_k(out.combined, top_count(n, top_fraction));
  return out;
}

}  // namespace starformer
