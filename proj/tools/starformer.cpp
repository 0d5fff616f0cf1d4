// Command-line front end: data generation, connectivity, ordering, training,
// evaluation, importance scores and the attention cost audit.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "starformer/cli_io.hpp"
#include "starformer/connectivity.hpp"
#include "starformer/errors.hpp"
#include "starformer/spatial_branch.hpp"
#include "starformer/temporal_branch.hpp"
#include "starformer/training_eval.hpp"

using namespace starformer;
using nlohmann::json;

namespace {

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path, bool config) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    const std::string msg = path.string() + ": " + e.what();
    if (config) throw ConfigError(msg);
    throw DataError(msg);
  }
}

void require_new_or_empty_dir(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
  fs::create_directories(dir);
}

// ---- subcommands

struct GenArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
};

void gen_synthetic(const GenArgs& a) {
  SyntheticSpec spec = SyntheticSpec::bundled();
  if (!a.spec.empty()) {
    try {
      spec = read_json(a.spec, true).get<SyntheticSpec>();
    } catch (const json::exception& e) {
      throw ConfigError(a.spec + ": " + e.what());
    }
  }
  if (a.seed) spec.seed = *a.seed;
  require_new_or_empty_dir(a.out);
  write_dataset(generate_synthetic(spec), a.out, spec.seed);
  write_json(fs::path(a.out) / "spec.json", spec);
}

struct ConnArgs {
  std::string data, out;
  std::size_t lag = 1;
  double alpha = 0.05;
};

void connectivity(const ConnArgs& a) {
  const Dataset d = load_dataset(a.data);
  require_new_or_empty_dir(a.out);
  const ConnectivityOptions opts{a.lag, a.alpha, env_threads()};
  json index = {{"lag", a.lag}, {"alpha", a.alpha}, {"subjects", json::array()}};
  for (const Subject& s : d.subjects) {
    const EffectiveConnectivity ec = build_effective_connectivity(s.series, opts);
    const std::string file = s.id + ".g.csv";
    write_matrix_csv(ec.g, d.atlas.roi_ids, fs::path(a.out) / file);
    index["subjects"].push_back({{"id", s.id}, {"label", s.label}, {"file", file}, {"warnings", ec.warnings}});
  }
  write_json(fs::path(a.out) / "index.json", index);
}

struct CentArgs {
  std::string g_dir, atlas, out;
  double subsample = 0.10;
  std::uint64_t seed = 0;
};

void centrality(const CentArgs& a) {
  const AtlasFile atlas = read_atlas_csv(a.atlas);
  const fs::path dir(a.g_dir);
  const json index = read_json(dir / "index.json", false);
  std::vector<std::size_t> pool, all;
  std::vector<std::pair<std::string, std::string>> entries;
  try {
    for (const auto& e : index.at("subjects")) {
      const std::size_t k = entries.size();
      entries.emplace_back(e.at("id").get<std::string>(), e.at("file").get<std::string>());
      all.push_back(k);
      if (e.at("label").get<int>() == 1) pool.push_back(k);
    }
  } catch (const json::exception& e) {
    throw DataError((dir / "index.json").string() + ": " + e.what());
  }
  if (pool.empty()) pool = all;
  if (pool.empty()) throw DataError((dir / "index.json").string() + ": no subjects");
  std::mt19937_64 rng(a.seed);
  const auto chosen = sample_subset(pool, a.subsample, rng);
  std::vector<CentralityVector> cents;
  json used = json::array();
  for (std::size_t k : chosen) {
    std::vector<std::string> ids;
    const Tensor g = read_matrix_csv(dir / entries[k].second, &ids);
    if (ids != atlas.partition.roi_ids)
      throw DataError(entries[k].second + ": ROI ids differ from the atlas");
    cents.push_back(eigenvector_centrality(g));
    used.push_back(entries[k].first);
  }
  const CentralityVector pbar = average_centrality(cents);
  const ROIOrdering ord = reorder_within_networks(pbar, atlas.partition);
  json out = ordering_json(ord, atlas.partition.roi_ids);
  out["pbar"] = pbar.p;
  out["subjects"] = used;
  out["subsample"] = a.subsample;
  out["seed"] = a.seed;
  write_json(a.out, out);
}

struct TrainArgs {
  std::string data, ordering, config, out;
  std::optional<std::uint64_t> seed;
};

void train(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig::for_profile("synthetic") : run_config_from_json(read_json(a.config, true));
  if (a.seed) rc.train.seed = *a.seed;
  rc.train.threads = env_threads();
  if (!a.ordering.empty()) rc.train.fixed_ordering = ordering_from_json(read_json(a.ordering, true));
  const Dataset d = load_dataset(a.data);
  require_new_or_empty_dir(a.out);
  const fs::path out(a.out);
  std::vector<ModelState> states;
  const CVReport report = cross_validate(d, rc.model, rc.train, &states);
  write_json(out / "metrics.json", metrics_json(report, rc.train));
  write_metrics_csv(report, out / "metrics.csv");
  json orderings = json::array();
  std::size_t best = report.folds.size();
  for (std::size_t k = 0; k < report.folds.size(); ++k) {
    const FoldResult& f = report.folds[k];
    write_loss_curve_csv(f, out / ("loss_curve_fold" + std::to_string(k) + ".csv"));
    json o = ordering_json(f.ordering, d.atlas.roi_ids);
    o["fold"] = k;
    if (!f.pbar.empty()) o["pbar"] = f.pbar;
    orderings.push_back(o);
    if (!f.error.empty()) continue;
    save_checkpoint(states[k], out / ("fold" + std::to_string(k) + ".ckpt"), {{"seed", rc.train.seed}, {"fold", k}});
    if (best == report.folds.size() || f.best_val_acc > report.folds[best].best_val_acc) best = k;
  }
  write_json(out / "orderings.json", orderings);
  json resolved = to_json(rc);
  resolved["train"]["seed"] = rc.train.seed;
  write_json(out / "run_config.json", resolved);
  if (best == report.folds.size()) throw NumericError("every fold aborted; see metrics.json");
  save_checkpoint(states[best], out / "model.ckpt", {{"seed", rc.train.seed}, {"fold", best}});
  std::printf("acc %.4f +- %.4f  auc %.4f +- %.4f\n", report.acc.mean, report.acc.std, report.auc.mean,
              report.auc.std);
}

std::vector<Tensor> inputs_for(const ModelState& st, const Dataset& d, std::vector<int>* labels) {
  if (d.atlas.size() != st.config.n_rois)
    throw DimensionError("dataset has " + std::to_string(d.atlas.size()) + " ROIs, checkpoint expects " +
                         std::to_string(st.config.n_rois));
  std::vector<Tensor> xs;
  for (const Subject& s : d.subjects) {
    if (s.series.timepoints() < st.config.timepoints) continue;
    xs.push_back(model_input(st, s.series, st.ordering));
    if (labels) labels->push_back(s.label);
  }
  if (xs.empty()) throw DataError("no subject is long enough for the model crop");
  return xs;
}

struct EvalArgs {
  std::string checkpoint, data, out;
};

void eval(const EvalArgs& a) {
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const Dataset d = load_dataset(a.data);
  std::vector<int> labels;
  const auto xs = inputs_for(ck.state, d, &labels);
  const auto scores = predict_scores(ck.state, xs);
  json j = metrics_json(evaluate_metrics(scores, labels));
  j["subjects"] = scores.size();
  j["scores"] = scores;
  j["checkpoint"] = ck.metadata;
  write_json(a.out, j);
}

struct ExplainArgs {
  std::string checkpoint, data, out;
  double top = 0.05, temporal_weight = 0.5;
};

void explain(const ExplainArgs& a) {
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const Dataset d = load_dataset(a.data);
  const auto xs = inputs_for(ck.state, d, nullptr);
  const ImportanceScores s = importance_scores(ck.state, xs, a.temporal_weight, a.top);
  write_importance_csv(s, d.atlas, a.out);
  json top = json::array();
  for (std::size_t r : s.top) top.push_back(d.atlas.roi_ids[r]);
  write_json(fs::path(a.out).string() + ".json",
             {{"temporal_weight", a.temporal_weight},
              {"spatial_weight", 1.0 - a.temporal_weight},
              {"top_fraction", a.top},
              {"top", top},
              {"subjects", xs.size()},
              {"temporal_method",
               "window attention averaged over layers and heads, summed per key time point, split across ROIs by "
               "|x| times embedding row norm"},
              {"spatial_method", "ROI attention averaged over blocks and heads, summed per key ROI, times output "
                                 "token L2 norm"},
              {"checkpoint", ck.metadata}});
}

struct AuditArgs {
  std::size_t m = 128, d = 128, heads = 8;
  std::string schedule = "16,8,4,4,8,16", extension = "w/2", out;
  std::uint64_t seed = 0;
};

std::vector<std::size_t> parse_schedule(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ConfigError("schedule entry '" + cell + "' is not a positive integer");
    }
  }
  return out;
}

void audit(const AuditArgs& a) {
  WindowSchedule sched;
  sched.tokens_per_layer = parse_schedule(a.schedule);
  sched.sequence_length = a.m;
  sched.extension = parse_extension(a.extension);
  sched.validate();
  const BlockGeometry geom{a.d, a.heads, 2 * a.d};
  geom.validate();
  std::mt19937_64 rng(a.seed);
  const TemporalParams p = init_temporal(1, geom, sched, rng, false);
  Tensor x({a.m, a.d});
  std::normal_distribution<double> nd;
  for (double& v : x.data()) v = nd(rng);

  auto count = [&](auto&& run) {
    AttentionStats stats;
    ForwardContext ctx;
    ctx.stats = &stats;
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder bind(tape);
    run(bind, tape, ctx);
    return stats;
  };
  json layers = json::array();
  std::uint64_t windowed = 0, full = 0;
  for (std::size_t l = 0; l < sched.layers(); ++l) {
    const AttentionStats w = count([&](ParamBinder& bind, Tape& tape, const ForwardContext& ctx) {
      temporal_layer(bind, p.layers[l], tape.constant(x), sched, l, a.heads, ctx);
    });
    const AttentionStats f = count([&](ParamBinder& bind, Tape& tape, const ForwardContext& ctx) {
      BlockParams plain = p.layers[l];
      plain.bias = Tensor();
      transformer_block(bind, plain, tape.constant(x), full_attention_layout(a.m, a.heads), {}, ctx);
    });
    windowed += w.total();
    full += f.total();
    layers.push_back({{"layer", l},
                      {"g", sched.tokens_per_layer[l]},
                      {"window", sched.window(l)},
                      {"extended", sched.extended(l)},
                      {"windowed_macs", w.total()},
                      {"full_macs", f.total()},
                      {"reduction_factor", static_cast<double>(f.total()) / static_cast<double>(w.total())},
                      {"theoretical_factor", static_cast<double>(sched.tokens_per_layer[l]) / 4.0}});
  }
  const json out = {{"m", a.m},
                    {"d", a.d},
                    {"heads", a.heads},
                    {"schedule", sched.tokens_per_layer},
                    {"extension", a.extension},
                    {"layers", layers},
                    {"windowed_macs", windowed},
                    {"full_macs", full},
                    {"reduction_factor", static_cast<double>(full) / static_cast<double>(windowed)}};
  if (a.out.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    write_json(a.out, out);
  }
}

[[noreturn]] void fail(int code, const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"code", code}, {"message", message}}.dump() << std::endl;
  std::exit(code);
}

std::string kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"STARFormer: effective-connectivity ordering and dual-branch transformer for ROI time series"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-synthetic", "write a synthetic two-class VAR(1) dataset");
  g->add_option("--spec", gen.spec, "synthetic spec JSON (default: bundled spec)");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--seed", gen.seed, "root seed (overrides the spec)");

  ConnArgs conn;
  auto* c = app.add_subcommand("connectivity", "per-subject Granger effective-connectivity matrices");
  c->add_option("--data", conn.data, "dataset manifest")->required();
  c->add_option("--lag", conn.lag, "autoregressive lag")->capture_default_str();
  c->add_option("--alpha", conn.alpha, "significance level")->capture_default_str();
  c->add_option("--out", conn.out, "output directory")->required();

  CentArgs cent;
  auto* e = app.add_subcommand("centrality", "network-grouped ROI ordering from averaged eigenvector centrality");
  e->add_option("--g-dir", cent.g_dir, "directory written by connectivity")->required();
  e->add_option("--atlas", cent.atlas, "atlas CSV")->required();
  e->add_option("--subsample", cent.subsample, "fraction of patient subjects averaged")->capture_default_str();
  e->add_option("--seed", cent.seed, "sampling seed")->capture_default_str();
  e->add_option("--out", cent.out, "ordering JSON")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "10-fold cross-validated training");
  t->add_option("--data", tr.data, "dataset manifest")->required();
  t->add_option("--ordering", tr.ordering, "fixed ordering JSON (default: derived per fold)");
  t->add_option("--config", tr.config, "run config JSON (default: synthetic profile)");
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--seed", tr.seed, "root seed (overrides the config)");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "metrics of a checkpoint on a dataset");
  v->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  v->add_option("--data", ev.data, "dataset manifest")->required();
  v->add_option("--out", ev.out, "metrics JSON")->required();

  ExplainArgs ex;
  auto* x = app.add_subcommand("explain", "attention-based ROI importance scores");
  x->add_option("--checkpoint", ex.checkpoint, "checkpoint file")->required();
  x->add_option("--data", ex.data, "dataset manifest")->required();
  x->add_option("--top", ex.top, "fraction of ROIs reported as most influential")->capture_default_str();
  x->add_option("--temporal-weight", ex.temporal_weight, "weight of the temporal score")->capture_default_str();
  x->add_option("--out", ex.out, "importance CSV")->required();

  AuditArgs au;
  auto* a = app.add_subcommand("audit-complexity", "attention multiply-accumulate counts against full attention");
  a->add_option("--m", au.m, "sequence length")->capture_default_str();
  a->add_option("--d", au.d, "model width")->capture_default_str();
  a->add_option("--heads", au.heads, "attention heads")->capture_default_str();
  a->add_option("--schedule", au.schedule, "windows per layer")->capture_default_str();
  a->add_option("--extension", au.extension, "w/4, w/2 or w")->capture_default_str();
  a->add_option("--seed", au.seed, "seed for the probe weights")->capture_default_str();
  a->add_option("--out", au.out, "audit JSON (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::CallForAllHelp& h) {
    return app.exit(h);
  } catch (const CLI::ParseError& p) {
    fail(2, "config", p.what());
  }

  try {
    if (*g) gen_synthetic(gen);
    else if (*c) connectivity(conn);
    else if (*e) centrality(cent);
    else if (*t) train(tr);
    else if (*v) eval(ev);
    else if (*x) explain(ex);
    else if (*a) audit(au);
  } catch (const Error& err) {
    fail(static_cast<int>(err.kind()), kind_name(err.kind()), err.what());
  } catch (const fs::filesystem_error& err) {
    fail(3, "data", err.what());
  } catch (const std::exception& err) {
    fail(1, "internal", err.what());
  }
  return 0;
}
