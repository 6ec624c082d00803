#pragma once

/* Full-batch gradient descent on the toy model under the standard or the
 * HarmonicDet objective. */

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hardet/error.hpp"
#include "hardet/harness/gradcheck.hpp"
#include "hardet/harness/model.hpp"
#include "hardet/harness/scene.hpp"
#include "hardet/losses.hpp"
#include "hardet/metrics.hpp"

namespace hardet::harness {

enum class LossMode { standard, harmonic_det };

struct OptimizerConfig {
  double learning_rate = 0.5;
  int steps = 400;
  int log_every = 20;
  LossMode loss_mode = LossMode::harmonic_det;

  void validate() const {
    detail::require(std::isfinite(learning_rate) && learning_rate >= 0.0,
                    "OptimizerConfig: learning_rate must be finite and >= 0");
    detail::require(steps >= 1, "OptimizerConfig: steps must be >= 1");
    detail::require(log_every >= 1, "OptimizerConfig: log_every must be >= 1");
  }
};

struct TrainRecord {
  int step = 0;
  double objective = 0.0;
  double mean_factor_r = 0.0;  // mean of 1 + beta_r over positives
  double mean_factor_c = 0.0;  // mean of 1 + beta_c over positives
  double aic = 0.0;            // mean |p_gt - IoU| over positives
};

struct TrainLog {
  std::vector<TrainRecord> records;
};

// Scenes together with their fixed anchor assignment.
struct TrainingSet {
  SceneSet scenes;
  std::vector<MatchResult> matches;
  std::size_t num_positives = 0;

  std::size_t anchors_per_scene() const { return scenes.anchors.size(); }
  std::size_t num_anchors() const { return scenes.scenes.size() * scenes.anchors.size(); }
  std::size_t slot(std::size_t scene, std::size_t anchor) const { return scene * anchors_per_scene() + anchor; }
};

inline TrainingSet prepare(SceneSet scenes, double positive_iou_threshold) {
  TrainingSet ts;
  ts.scenes = std::move(scenes);
  for (const auto& scene : ts.scenes.scenes) {
    ts.matches.push_back(match_anchors(scene, ts.scenes.anchors, positive_iou_threshold));
    ts.num_positives += ts.matches.back().positives.size();
  }
  detail::require(ts.num_positives > 0, "prepare: no positive anchors");
  return ts;
}

inline TrainingSet prepare(const SceneConfig& cfg) { return prepare(generate_scenes(cfg), cfg.positive_iou_threshold); }

inline ToyModel make_model(const TrainingSet& ts, int num_classes) { return ToyModel(ts.num_anchors(), num_classes); }

inline losses::HyperParams effective_params(const losses::HyperParams& hp, LossMode mode) {
  losses::HyperParams out = hp;
  out.compat_standard = mode == LossMode::standard;
  return out;
}

struct Evaluation {
  double objective = 0.0;
  std::vector<double> grad_logits;   // same layout as the model
  std::vector<double> grad_offsets;
  double mean_factor_r = 0.0;
  double mean_factor_c = 0.0;
  double aic = 0.0;
  std::vector<metrics::ScoreIou> pairs;  // (p_gt, IoU) per positive
};

inline std::vector<losses::PositiveSample> positive_samples(const TrainingSet& ts, const ToyModel& model) {
  std::vector<losses::PositiveSample> out;
  out.reserve(ts.num_positives);
  for (std::size_t s = 0; s < ts.matches.size(); ++s) {
    for (const auto& a : ts.matches[s].positives) {
      const std::size_t i = ts.slot(s, a.anchor_index);
      out.push_back({model.probs(i), a.gt_class, model.offsets(i), a.d_hat, ts.scenes.anchors[a.anchor_index],
                     ts.scenes.scenes[s].objects[a.gt_index].box});
    }
  }
  return out;
}

/**
 * Objective, parameter gradient and logging statistics at the current model.
 * The harmonic factors are reported in both modes; under the standard
 * objective they are diagnostics only.
 */
inline Evaluation evaluate(const TrainingSet& ts, const ToyModel& model, const losses::HyperParams& hp, LossMode mode,
                           unsigned threads = 1) {
  const losses::HyperParams ehp = effective_params(hp, mode);
  const auto pos = positive_samples(ts, model);
  std::vector<losses::NegativeSample> neg;
  std::vector<std::size_t> neg_slots;
  for (std::size_t s = 0; s < ts.matches.size(); ++s) {
    for (std::size_t a : ts.matches[s].negatives) {
      const std::size_t i = ts.slot(s, a);
      neg.push_back({model.probs(i), 0});
      neg_slots.push_back(i);
    }
  }

  const auto batch = losses::batch_objective(pos, neg, ehp, threads);
  Evaluation ev;
  ev.objective = batch.value;
  ev.grad_logits.assign(model.all_logits().size(), 0.0);
  ev.grad_offsets.assign(model.all_offsets().size(), 0.0);
  const std::size_t c = static_cast<std::size_t>(model.num_classes());

  std::size_t k = 0;
  double sum_r = 0.0;
  double sum_c = 0.0;
  for (std::size_t s = 0; s < ts.matches.size(); ++s) {
    for (const auto& a : ts.matches[s].positives) {
      const std::size_t i = ts.slot(s, a.anchor_index);
      const auto& b = batch.positives[k];
      const auto gz = softmax_backward(pos[k].probs, b.grad_probs);
      for (std::size_t j = 0; j < c; ++j) ev.grad_logits[i * c + j] += batch.normalizer * gz[j];
      for (int j = 0; j < 4; ++j) ev.grad_offsets[i * 4 + j] += batch.normalizer * b.grad_d[j];

      const double beta_r_loc = hp.harmonic_loc == losses::HarmonicLoc::full ? b.smooth_l1 + hp.alpha * b.hiou
                                                                             : b.smooth_l1;
      sum_r += 1.0 + std::exp(-beta_r_loc);
      sum_c += 1.0 + std::exp(-b.ce);
      ev.pairs.push_back({pos[k].probs[pos[k].gt_class], b.iou_value});
      ++k;
    }
  }
  for (std::size_t j = 0; j < neg.size(); ++j) {
    const auto gz = softmax_backward(neg[j].probs, batch.negative_grads[j]);
    for (std::size_t q = 0; q < c; ++q) ev.grad_logits[neg_slots[j] * c + q] += batch.normalizer * gz[q];
  }
  const double n = static_cast<double>(pos.size());
  ev.mean_factor_r = sum_r / n;
  ev.mean_factor_c = sum_c / n;
  ev.aic = metrics::aic(ev.pairs);
  return ev;
}

struct TrainOptions {
  unsigned threads = 1;
  // Gradient-oracle gate run before the first step.
  bool gate = true;
  int gate_samples = 64;
  std::uint64_t gate_seed = 0;
  double gate_tolerance = 1e-5;
};

struct TrainResult {
  ToyModel model;
  TrainLog log;
};

/**
 * Plain gradient descent. A record is logged before the updates of steps
 * 0, log_every, 2*log_every, ... and once more for the final model at
 * step == opt.steps.
 */
inline TrainResult train_toy(const TrainingSet& ts, ToyModel model, const OptimizerConfig& opt,
                             const losses::HyperParams& hp, const TrainOptions& options = {}) {
  opt.validate();
  hp.validate();
  detail::require(model.num_anchors() == ts.num_anchors(), "train_toy: model does not match the anchor set");
  detail::require(model.num_classes() == hp.num_classes, "train_toy: model class count differs from HyperParams");

  if (options.gate) {
    GradcheckConfig gc;
    gc.seed = options.gate_seed;
    gc.samples = options.gate_samples;
    gc.tolerance = options.gate_tolerance;
    const auto report = run_gradcheck(gc, effective_params(hp, opt.loss_mode));
    if (!report.pass) {
      std::string failed;
      for (const auto& e : report.entries)
        if (!e.pass) failed += " " + e.name;
      throw NumericalError("train_toy: gradient oracle failed for" + failed);
    }
  }

  TrainResult r{std::move(model), {}};
  const auto record = [&](int step, const Evaluation& ev) {
    r.log.records.push_back({step, ev.objective, ev.mean_factor_r, ev.mean_factor_c, ev.aic});
  };

  for (int step = 0; step <= opt.steps; ++step) {
    Evaluation ev;
    try {
      ev = evaluate(ts, r.model, hp, opt.loss_mode, options.threads);
    } catch (const NumericalError& e) {
      throw NumericalError("train_toy: step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(ev.objective)) {
      throw NumericalError("train_toy: objective became non-finite at step " + std::to_string(step));
    }
    if (step == opt.steps) {
      record(step, ev);
      break;
    }
    if (step % opt.log_every == 0) record(step, ev);

    const std::size_t c = static_cast<std::size_t>(r.model.num_classes());
    for (std::size_t i = 0; i < r.model.num_anchors(); ++i) {
      auto z = r.model.logits(i);
      for (std::size_t j = 0; j < c; ++j) z[j] -= opt.learning_rate * ev.grad_logits[i * c + j];
      auto o = r.model.offsets_mut(i);
      for (std::size_t j = 0; j < 4; ++j) o[j] -= opt.learning_rate * ev.grad_offsets[i * 4 + j];
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Inference on the training scenes

inline std::vector<metrics::GroundTruth> ground_truths(const TrainingSet& ts) {
  std::vector<metrics::GroundTruth> out;
  for (std::size_t s = 0; s < ts.scenes.scenes.size(); ++s)
    for (const auto& obj : ts.scenes.scenes[s].objects) out.push_back({obj.box, obj.class_id, static_cast<int>(s), false});
  return out;
}

// One detection per anchor: best foreground class, its probability, and the
// decoded box. Detections below `score_threshold` are dropped.
inline std::vector<metrics::Detection> detect(const TrainingSet& ts, const ToyModel& model, double score_threshold,
                                              double exp_cap = geom::kDefaultExpCap) {
  std::vector<metrics::Detection> out;
  for (std::size_t s = 0; s < ts.scenes.scenes.size(); ++s) {
    for (std::size_t a = 0; a < ts.anchors_per_scene(); ++a) {
      const std::size_t i = ts.slot(s, a);
      const auto p = model.probs(i);
      int best = 1;
      for (int k = 2; k < model.num_classes(); ++k)
        if (p[k] > p[best]) best = k;
      if (p[best] < score_threshold) continue;
      out.push_back({geom::decode(model.offsets(i), ts.scenes.anchors[a], exp_cap), best, p[best], static_cast<int>(s)});
    }
  }
  return out;
}

}  // namespace hardet::harness
