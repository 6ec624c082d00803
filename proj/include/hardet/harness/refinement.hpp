#pragma once

#include <vector>

#include "hardet/harness/train.hpp"
#include "hardet/metrics.hpp"

namespace hardet::harness {

// (anchor vs GT, decoded prediction vs GT) IoU for every positive anchor.
inline std::vector<metrics::RefinementPair> refinement_pairs(const TrainingSet& ts, const ToyModel& model,
                                                             double exp_cap = geom::kDefaultExpCap) {
  std::vector<metrics::RefinementPair> out;
  out.reserve(ts.num_positives);
  for (std::size_t s = 0; s < ts.matches.size(); ++s) {
    for (const auto& a : ts.matches[s].positives) {
      const Box& gt = ts.scenes.scenes[s].objects[a.gt_index].box;
      const Box& anchor = ts.scenes.anchors[a.anchor_index];
      const Box pred = geom::decode(model.offsets(ts.slot(s, a.anchor_index)), anchor, exp_cap);
      out.push_back({geom::iou(anchor, gt), geom::iou(pred, gt)});
    }
  }
  return out;
}

struct RefinementResult {
  std::vector<metrics::RefinementPair> iou_trained;
  std::vector<metrics::RefinementPair> hiou_trained;
};

/**
 * Trains two models from the same initial state and schedule. The only
 * difference is the localization term: plain IoU loss (gamma = 0, since
 * (1 + IoU)^0 (1 - IoU) = 1 - IoU) versus HIoU with hp.gamma.
 */
inline RefinementResult refinement_experiment(const TrainingSet& ts, const OptimizerConfig& opt,
                                              const losses::HyperParams& hp, const TrainOptions& options = {}) {
  losses::HyperParams plain = hp;
  plain.gamma = 0.0;
  const ToyModel init = make_model(ts, hp.num_classes);
  const auto with_iou = train_toy(ts, init, opt, plain, options);
  const auto with_hiou = train_toy(ts, init, opt, hp, options);
  return {refinement_pairs(ts, with_iou.model, hp.exp_cap), refinement_pairs(ts, with_hiou.model, hp.exp_cap)};
}

}  // namespace hardet::harness
