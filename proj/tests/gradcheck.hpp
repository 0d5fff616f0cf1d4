#pragma once
// Whole-model finite-difference check. Each perturbed loss re-runs only the
// part of the network downstream of the parameter being perturbed, using
// cached activations for everything upstream; the skip sums of the temporal
// schedule are rebuilt here by hand rather than through run_merge_segment.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "starformer/fusion_model.hpp"
#include "test_support.hpp"

namespace starformer::testing {

struct GradCheckReport {
  std::size_t parameters = 0;  // scalar entries compared
  double worst = 0.0;          // max relative error
  std::string worst_name;
  std::size_t worst_index = 0;
};

class StagedModelLoss {
 public:
  StagedModelLoss(ModelState& state, Tensor input, std::size_t label)
      : st_(state), x_(std::move(input)), xt_(transpose(x_)), label_(label) {
    refresh();
  }

  // Recomputes every cached activation from the current parameters.
  void refresh() {
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder bind(tape);
    embedded_ = linear(bind, st_.temporal.embed, tape.constant(xt_)).value();
    layer_out_.clear();
    Var t = temporal_from(bind, tape, 0, embedded_, &layer_out_);
    temporal_mean_ = mean_rows(t).value();
    spatial_mean_ = mean_rows(spatial_forward(bind, st_.spatial, tape.constant(x_), heads(), {})).value();
  }

  double full() const {
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder bind(tape);
    return loss_of(bind, model_forward(bind, st_, x_, {}).logits);
  }

  double after_embed() const {
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder bind(tape);
    const Tensor e = linear(bind, st_.temporal.embed, tape.constant(xt_)).value();
    return head(bind, tape, mean_rows(temporal_from(bind, tape, 0, e, nullptr)).value(), spatial_mean_);
  }

  double after_temporal_layer(std::size_t layer) const {
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder bind(tape);
    const Tensor& in = layer == 0 ? embedded_ : layer_out_[layer - 1];
    return head(bind, tape, mean_rows(temporal_from(bind, tape, layer, in, nullptr)).value(), spatial_mean_);
  }

  double after_spatial() const {
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder bind(tape);
    const Tensor s = mean_rows(spatial_forward(bind, st_.spatial, tape.constant(x_), heads(), {})).value();
    return head(bind, tape, temporal_mean_, s);
  }

  double after_fusion() const {
    Tape tape;
    tape.set_grad_enabled(false);
    ParamBinder bind(tape);
    return head(bind, tape, temporal_mean_, spatial_mean_);
  }

  // Reverse-mode gradients of the loss for every parameter, by name.
  std::vector<std::pair<std::string, Tensor>> analytic() const {
    Tape tape;
    ParamBinder bind(tape);
    const Var loss = cross_entropy(model_forward(bind, st_, x_, {}).logits, label_);
    tape.backward(loss);
    std::vector<std::pair<std::string, Tensor>> out;
    st_.visit([&](const std::string& name, Tensor& t) {
      const Tensor* g = bind.grad(t);
      out.emplace_back(name, g ? *g : Tensor(t.shape()));
    });
    return out;
  }

  std::size_t heads() const { return st_.config.geometry.heads; }

 private:
  Var temporal_from(ParamBinder& bind, Tape& tape, std::size_t first, const Tensor& in,
                    std::vector<Tensor>* record) const {
    const auto& sched = st_.config.schedule;
    const std::size_t layers = sched.layers();
    std::vector<Tensor> outs(layer_out_.begin(), layer_out_.begin() + static_cast<std::ptrdiff_t>(first));
    Var x = tape.constant(in);
    for (std::size_t l = first; l < layers; ++l) {
      x = temporal_layer(bind, st_.temporal.layers[l], x, sched, l, heads(), {});
      if (l >= layers / 2) x = add(x, tape.constant(outs[layers - 1 - l]));
      outs.push_back(x.value());
      if (record) record->push_back(x.value());
    }
    return x;
  }

  double head(ParamBinder& bind, Tape& tape, const Tensor& t, const Tensor& s) const {
    return loss_of(bind, classify(bind, st_, concat_cols(tape.constant(t), tape.constant(s)), {}));
  }

  double loss_of(ParamBinder&, Var logits) const { return cross_entropy(logits, label_).value().item(); }

  ModelState& st_;
  Tensor x_, xt_;
  std::size_t label_;
  Tensor embedded_;
  std::vector<Tensor> layer_out_;
  Tensor temporal_mean_, spatial_mean_;
};

// Compares every parameter entry (or every `stride`-th one) against central
// differences. Relative error uses max(|a|, |n|, floor) as the denominator.
inline GradCheckReport check_model_gradients(ModelState& state, const Tensor& input, std::size_t label,
                                             std::size_t stride = 1, double h = 1e-5, double floor = 1e-6) {
  StagedModelLoss staged(state, input, label);
  const auto analytic = staged.analytic();
  GradCheckReport report;
  std::size_t k = 0;
  state.visit([&](const std::string& name, Tensor& t) {
    const Tensor& g = analytic[k++].second;
    std::function<double()> loss;
    if (name.rfind("head.", 0) == 0) {
      loss = [&] { return staged.after_fusion(); };
    } else if (name.rfind("spatial.", 0) == 0) {
      loss = [&] { return staged.after_spatial(); };
    } else if (name.rfind("temporal.embed", 0) == 0) {
      loss = [&] { return staged.after_embed(); };
    } else {
      const std::size_t layer = std::stoul(name.substr(std::string("temporal.layer").size()));
      loss = [&, layer] { return staged.after_temporal_layer(layer); };
    }
    for (std::size_t i = 0; i < t.numel(); i += stride) {
      const double keep = t[i];
      t[i] = keep + h;
      const double up = loss();
      t[i] = keep - h;
      const double down = loss();
      t[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(numeric - g[i]) / std::max({floor, std::abs(numeric), std::abs(g[i])});
      ++report.parameters;
      if (err > report.worst) {
        report.worst = err;
        report.worst_name = name;
        report.worst_index = i;
      }
    }
  });
  return report;
}

// Random values everywhere, including tables that start at zero, so that no
// path is dead during the check.
inline void randomize_all(ModelState& state, std::mt19937_64& rng, double scale = 0.2) {
  state.visit([&](const std::string&, Tensor& t) {
    for (double& v : t.data())
      if (v == 0.0) v = std::normal_distribution<double>(0.0, scale)(rng);
  });
}

}  // namespace starformer::testing
