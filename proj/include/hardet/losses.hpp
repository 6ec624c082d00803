#pragma once

/* HarmonicDet loss family.
 *
 * Every loss here acts on one positive anchor/ground-truth pair (or a batch of
 * them) and returns its value together with analytic gradients with respect to
 * the class probability vector and the predicted offsets. Softmax and the
 * network behind the predictions are the caller's business.
 *
 * Probabilities are treated as free coordinates when differentiating: the
 * returned grad_probs is the partial derivative per entry, not projected onto
 * the simplex.
 */

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hardet/detail/parallel.hpp"
#include "hardet/error.hpp"
#include "hardet/geom.hpp"

namespace hardet::losses {

using geom::Box;
using geom::Offsets;
using geom::Vec4;

// Which localization loss feeds the regression-derived factor beta_r.
enum class HarmonicLoc {
  smooth_l1,  // beta_r = exp(-smooth_l1)
  full,       // beta_r = exp(-(smooth_l1 + alpha * hiou))
};

struct HyperParams {
  double alpha = 1.5;
  double gamma = 0.8;
  double margin = 0.2;
  int num_classes = 2;
  double prob_floor = 1e-12;
  bool beta_e_stop_grad = true;
  // gamma > 1 makes hiou_loss non-monotone in IoU.
  bool allow_gamma_above_one = false;
  HarmonicLoc harmonic_loc = HarmonicLoc::full;
  // Let the task-contrastive term push on the offsets through IoU.
  bool tc_through_iou = true;
  // Freeze both harmonic factors to 0 and drop the HIoU and TC terms. The
  // objective then reduces to the plain CE + smooth-L1 detector loss.
  bool compat_standard = false;
  double exp_cap = geom::kDefaultExpCap;

  void validate() const {
    detail::require(std::isfinite(alpha) && alpha >= 0.0, "HyperParams: alpha must be >= 0");
    detail::require(std::isfinite(gamma), "HyperParams: gamma must be finite");
    detail::require(gamma <= 1.0 || allow_gamma_above_one,
                    "HyperParams: gamma > 1 breaks HIoU monotonicity (set allow_gamma_above_one to override)");
    detail::require(margin >= 0.0 && margin < 1.0, "HyperParams: margin must be in [0, 1)");
    detail::require(num_classes >= 2, "HyperParams: num_classes must be >= 2");
    detail::require(prob_floor > 0.0 && prob_floor < 1.0, "HyperParams: prob_floor must be in (0, 1)");
    detail::require(exp_cap > 0.0, "HyperParams: exp_cap must be > 0");
  }
};

struct PositiveSample {
  std::vector<double> probs;
  int gt_class = 0;
  Offsets d;
  Offsets d_hat;
  Box anchor;
  Box gt_box;
};

struct NegativeSample {
  std::vector<double> probs;
  int gt_class = 0;
};

struct LossBreakdown {
  double ce = 0.0;
  double smooth_l1 = 0.0;
  double iou_value = 0.0;
  double hiou = 0.0;
  double loc_full = 0.0;
  double tc = 0.0;
  double beta_r = 0.0;
  double beta_c = 0.0;
  double beta_e = 1.0;
  double total = 0.0;
  std::vector<double> grad_probs;
  Vec4 grad_d{};
};

inline constexpr double kProbSumTolerance = 1e-6;

inline void validate_probs(std::span<const double> probs, int gt_class, int num_classes) {
  detail::require(static_cast<int>(probs.size()) == num_classes,
                  "probs: expected " + std::to_string(num_classes) + " entries, got " +
                      std::to_string(probs.size()));
  detail::require(gt_class >= 0 && gt_class < num_classes, "gt_class out of range");
  double sum = 0.0;
  for (double p : probs) {
    detail::require(std::isfinite(p) && p >= 0.0 && p <= 1.0, "probs: entries must lie in [0, 1]");
    sum += p;
  }
  detail::require(std::abs(sum - 1.0) <= kProbSumTolerance, "probs: must sum to 1");
}

// Builds a positive sample with the regression target filled in from the boxes.
inline PositiveSample make_positive(std::vector<double> probs, int gt_class, const Offsets& d,
                                    const Box& anchor, const Box& gt_box, const HyperParams& hp) {
  hp.validate();
  validate_probs(probs, gt_class, hp.num_classes);
  detail::require(d.finite(), "offsets must be finite");
  return {std::move(probs), gt_class, d, geom::encode(gt_box, anchor), anchor, gt_box};
}

inline NegativeSample make_negative(std::vector<double> probs, int gt_class, const HyperParams& hp) {
  validate_probs(probs, gt_class, hp.num_classes);
  return {std::move(probs), gt_class};
}

// ---------------------------------------------------------------------------
// Elementary terms

inline double cross_entropy(std::span<const double> probs, int gt_class, double prob_floor = 1e-12) {
  detail::require(gt_class >= 0 && static_cast<std::size_t>(gt_class) < probs.size(),
                  "cross_entropy: gt_class out of range");
  return -std::log(std::max(probs[gt_class], prob_floor));
}

// d CE / d p_gt; zero below the floor where the clamp is active.
inline double cross_entropy_grad(double p_gt, double prob_floor = 1e-12) {
  return p_gt >= prob_floor ? -1.0 / p_gt : 0.0;
}

inline double smooth_l1(const Offsets& d, const Offsets& d_hat) {
  const Vec4 a = d.as_array();
  const Vec4 b = d_hat.as_array();
  double sum = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double x = std::abs(a[k] - b[k]);
    sum += x < 1.0 ? 0.5 * x * x : x - 0.5;
  }
  return sum;
}

inline Vec4 smooth_l1_grad(const Offsets& d, const Offsets& d_hat) {
  const Vec4 a = d.as_array();
  const Vec4 b = d_hat.as_array();
  Vec4 g{};
  for (int k = 0; k < 4; ++k) {
    const double x = a[k] - b[k];
    g[k] = std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0);
  }
  return g;
}

inline double iou_loss(double iou_value) {
  detail::require(iou_value >= 0.0 && iou_value <= 1.0, "iou_loss: IoU outside [0, 1]");
  return 1.0 - iou_value;
}

// (1 + IoU)^gamma * (1 - IoU)
inline double hiou_loss(double iou_value, double gamma) {
  detail::require(iou_value >= 0.0 && iou_value <= 1.0, "hiou_loss: IoU outside [0, 1]");
  return std::pow(1.0 + iou_value, gamma) * (1.0 - iou_value);
}

inline double hiou_loss_deriv(double iou_value, double gamma) {
  const double up = 1.0 + iou_value;
  return gamma * std::pow(up, gamma - 1.0) * (1.0 - iou_value) - std::pow(up, gamma);
}

// IoU between the decoded prediction and the ground truth, plus its gradient
// with respect to the offsets.
struct IouWithGrad {
  double value = 0.0;
  Vec4 grad_d{};
};

inline IouWithGrad predicted_iou(const PositiveSample& s, double exp_cap = geom::kDefaultExpCap) {
  const Box pred = geom::decode(s.d, s.anchor, exp_cap);
  const auto jac = geom::decode_jacobian(s.d, s.anchor, exp_cap);
  return {geom::iou(pred, s.gt_box), geom::pullback(jac, geom::iou_grad(pred, s.gt_box))};
}

// ---------------------------------------------------------------------------
// Localization

struct LocResult {
  double value = 0.0;
  Vec4 grad_d{};
  double smooth_l1 = 0.0;
  Vec4 smooth_l1_grad{};
  double iou_value = 0.0;
  Vec4 iou_grad_d{};
  double hiou = 0.0;
};

// smooth_l1(d, d_hat) + alpha * hiou_loss(IoU(decode(d), gt), gamma)
inline LocResult full_loc_loss(const PositiveSample& s, const HyperParams& hp) {
  LocResult r;
  r.smooth_l1 = smooth_l1(s.d, s.d_hat);
  r.smooth_l1_grad = smooth_l1_grad(s.d, s.d_hat);
  const IouWithGrad io = predicted_iou(s, hp.exp_cap);
  r.iou_value = io.value;
  r.iou_grad_d = io.grad_d;
  r.hiou = hiou_loss(io.value, hp.gamma);
  const double dh = hiou_loss_deriv(io.value, hp.gamma);
  r.value = r.smooth_l1 + hp.alpha * r.hiou;
  for (int k = 0; k < 4; ++k) r.grad_d[k] = r.smooth_l1_grad[k] + hp.alpha * dh * io.grad_d[k];
  return r;
}

// The localization loss that enters the harmonic factor, per hp.harmonic_loc.
inline LocResult harmonic_loc(const PositiveSample& s, const HyperParams& hp) {
  if (hp.harmonic_loc == HarmonicLoc::full) return full_loc_loss(s, hp);
  LocResult r;
  r.smooth_l1 = smooth_l1(s.d, s.d_hat);
  r.smooth_l1_grad = smooth_l1_grad(s.d, s.d_hat);
  r.value = r.smooth_l1;
  r.grad_d = r.smooth_l1_grad;
  return r;
}

// ---------------------------------------------------------------------------
// Harmonic loss

struct HarmonicTerms {
  double value = 0.0;
  double beta_r = 0.0;
  double beta_c = 0.0;
};

// (1 + beta_r) * ce + (1 + beta_c) * loc, beta_r = exp(-loc), beta_c = exp(-ce)
inline HarmonicTerms harmonic_terms(double ce, double loc) {
  const double beta_r = std::exp(-loc);
  const double beta_c = std::exp(-ce);
  return {(1.0 + beta_r) * ce + (1.0 + beta_c) * loc, beta_r, beta_c};
}

inline HarmonicTerms harmonic_loss(const PositiveSample& s, const HyperParams& hp, double loc) {
  return harmonic_terms(cross_entropy(s.probs, s.gt_class, hp.prob_floor), loc);
}

/// d(harmonic loss)/d p_gt = loc - (1 + exp(-loc)) / p_gt.
/// Differentiates through beta_c = p_gt, so the loc term survives.
inline double harmonic_cls_grad(double p_gt, double loc) {
  return loc - (1.0 + std::exp(-loc)) / p_gt;
}

inline double harmonic_cls_grad(const PositiveSample& s, double loc, double prob_floor = 1e-12) {
  detail::require(s.gt_class >= 0 && static_cast<std::size_t>(s.gt_class) < s.probs.size(),
                  "harmonic_cls_grad: gt_class out of range");
  const double p = s.probs[s.gt_class];
  if (p < prob_floor) return loc;  // CE clamped, only beta_c * loc varies
  return harmonic_cls_grad(p, loc);
}

// Scalar factor multiplying d(loc)/dd in the harmonic-loss gradient:
// (1 + beta_c) - ce * exp(-loc).
inline double harmonic_reg_prefactor(double ce, double loc) {
  return (1.0 + std::exp(-ce)) - ce * std::exp(-loc);
}

/// Gradient of harmonic_loss(s, hp, loc(s)) with respect to the offsets, where
/// loc is the localization loss selected by hp.harmonic_loc.
inline Vec4 harmonic_reg_grad(const PositiveSample& s, const HyperParams& hp) {
  const double ce = cross_entropy(s.probs, s.gt_class, hp.prob_floor);
  const LocResult loc = harmonic_loc(s, hp);
  const double f = harmonic_reg_prefactor(ce, loc.value);
  Vec4 g{};
  for (int k = 0; k < 4; ++k) g[k] = f * loc.grad_d[k];
  return g;
}

// ---------------------------------------------------------------------------
// Task-contrastive loss

inline double entropy(std::span<const double> probs, double prob_floor = 1e-12) {
  double h = 0.0;
  for (double p : probs) h -= p * std::log(std::max(p, prob_floor));
  return h;
}

struct TcResult {
  double value = 0.0;
  double beta_e = 1.0;
  std::vector<double> grad_probs;
  Vec4 grad_d{};
};

/**
 * max(0, |p_gt - IoU| - margin) / (1 + beta_e), beta_e = exp(entropy(probs)).
 *
 * The hinge and |.| use a zero subgradient at their kinks. With
 * hp.beta_e_stop_grad the entropy weight is a constant; otherwise its
 * derivative reaches every probability entry.
 */
inline TcResult tc_loss(const PositiveSample& s, const HyperParams& hp, const IouWithGrad& io) {
  TcResult r;
  const std::size_t c = s.probs.size();
  detail::require(s.gt_class >= 0 && static_cast<std::size_t>(s.gt_class) < c, "tc_loss: gt_class out of range");
  r.grad_probs.assign(c, 0.0);
  if (hp.compat_standard) return r;

  r.beta_e = std::exp(entropy(s.probs, hp.prob_floor));
  const double weight = 1.0 / (1.0 + r.beta_e);
  const double diff = s.probs[s.gt_class] - io.value;
  const double hinge = std::abs(diff) - hp.margin;
  if (!(hinge > 0.0)) return r;

  r.value = weight * hinge;
  const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  r.grad_probs[s.gt_class] += weight * sign;
  if (hp.tc_through_iou) {
    for (int k = 0; k < 4; ++k) r.grad_d[k] = -weight * sign * io.grad_d[k];
  }
  if (!hp.beta_e_stop_grad) {
    // d weight / d p_k = -weight^2 * beta_e * d entropy / d p_k
    for (std::size_t k = 0; k < c; ++k) {
      const double p = s.probs[k];
      const double dh = p >= hp.prob_floor ? -(std::log(p) + 1.0) : -std::log(hp.prob_floor);
      r.grad_probs[k] += -weight * weight * r.beta_e * dh * hinge;
    }
  }
  return r;
}

inline TcResult tc_loss(const PositiveSample& s, const HyperParams& hp) {
  return tc_loss(s, hp, predicted_iou(s, hp.exp_cap));
}

// ---------------------------------------------------------------------------
// Per-sample objective

/**
 * Harmonic detection loss of one positive sample:
 *
 *   total = (1 + beta_r) * ce + (1 + beta_c) * loc_full + tc
 *   beta_r = exp(-loc_full) (or exp(-smooth_l1), see HarmonicLoc)
 *   beta_c = exp(-ce) = p_gt
 *
 * Gradients differentiate through both harmonic factors.
 */
inline LossBreakdown harmonic_det_loss(const PositiveSample& s, const HyperParams& hp) {
  const std::size_t c = s.probs.size();
  detail::require(s.gt_class >= 0 && static_cast<std::size_t>(s.gt_class) < c,
                  "harmonic_det_loss: gt_class out of range");

  LossBreakdown b;
  const double p_gt = s.probs[s.gt_class];
  b.ce = cross_entropy(s.probs, s.gt_class, hp.prob_floor);
  const double dce = cross_entropy_grad(p_gt, hp.prob_floor);

  const LocResult loc = full_loc_loss(s, hp);
  b.smooth_l1 = loc.smooth_l1;
  b.iou_value = loc.iou_value;
  b.hiou = loc.hiou;
  b.grad_probs.assign(c, 0.0);

  if (hp.compat_standard) {
    b.loc_full = loc.smooth_l1;
    b.beta_r = 0.0;
    b.beta_c = 0.0;
    b.beta_e = std::exp(entropy(s.probs, hp.prob_floor));
    b.total = b.ce + b.loc_full;
    b.grad_probs[s.gt_class] = dce;
    b.grad_d = loc.smooth_l1_grad;
    return b;
  }

  b.loc_full = loc.value;
  const bool beta_r_from_full = hp.harmonic_loc == HarmonicLoc::full;
  const double beta_r_loc = beta_r_from_full ? loc.value : loc.smooth_l1;
  const Vec4& beta_r_grad = beta_r_from_full ? loc.grad_d : loc.smooth_l1_grad;
  b.beta_r = std::exp(-beta_r_loc);
  b.beta_c = std::exp(-b.ce);

  const TcResult tc = tc_loss(s, hp, IouWithGrad{loc.iou_value, loc.iou_grad_d});
  b.tc = tc.value;
  b.beta_e = tc.beta_e;
  b.total = (1.0 + b.beta_r) * b.ce + (1.0 + b.beta_c) * b.loc_full + b.tc;

  // d/dp_gt: (1 + beta_r) dce + loc_full * d(beta_c) with d(beta_c) = -beta_c * dce
  b.grad_probs[s.gt_class] = (1.0 + b.beta_r) * dce - b.loc_full * b.beta_c * dce;
  for (std::size_t k = 0; k < c; ++k) b.grad_probs[k] += tc.grad_probs[k];

  for (int k = 0; k < 4; ++k) {
    b.grad_d[k] = (1.0 + b.beta_c) * loc.grad_d[k] - b.ce * b.beta_r * beta_r_grad[k] + tc.grad_d[k];
  }
  return b;
}

// ---------------------------------------------------------------------------
// Batch objectives

// (1/N) [sum_pos (ce + smooth_l1) + sum_neg ce], N = number of positives.
inline double standard_det_loss(std::span<const PositiveSample> positives,
                                std::span<const NegativeSample> negatives, double prob_floor = 1e-12) {
  detail::require(!positives.empty(), "standard_det_loss: need at least one positive sample");
  double acc = 0.0;
  for (const auto& s : positives) acc += cross_entropy(s.probs, s.gt_class, prob_floor) + smooth_l1(s.d, s.d_hat);
  for (const auto& s : negatives) acc += cross_entropy(s.probs, s.gt_class, prob_floor);
  return acc / static_cast<double>(positives.size());
}

struct BatchResult {
  double value = 0.0;
  // 1/N. Per-sample gradients below are unscaled; multiply by this for the
  // gradient of `value`.
  double normalizer = 0.0;
  std::vector<LossBreakdown> positives;
  // d ce / d probs per negative sample, C entries each.
  std::vector<std::vector<double>> negative_grads;
};

/**
 * (1/N) [sum_pos harmonic_det_loss + sum_neg ce], N = number of positives.
 * Negatives' CE is also divided by the positive count.
 *
 * Per-sample work may spread over `threads` workers; the reduction runs in
 * sample order so the result does not depend on the thread count.
 */
inline BatchResult batch_objective(std::span<const PositiveSample> positives,
                                   std::span<const NegativeSample> negatives, const HyperParams& hp,
                                   unsigned threads = 1) {
  detail::require(!positives.empty(), "batch_objective: need at least one positive sample");
  BatchResult r;
  r.positives.resize(positives.size());
  r.negative_grads.resize(negatives.size());
  std::vector<double> neg_ce(negatives.size());

  detail::parallel_for(positives.size(), threads,
                       [&](std::size_t i) { r.positives[i] = harmonic_det_loss(positives[i], hp); });
  detail::parallel_for(negatives.size(), threads, [&](std::size_t j) {
    const auto& s = negatives[j];
    neg_ce[j] = cross_entropy(s.probs, s.gt_class, hp.prob_floor);
    auto& g = r.negative_grads[j];
    g.assign(s.probs.size(), 0.0);
    g[s.gt_class] = cross_entropy_grad(s.probs[s.gt_class], hp.prob_floor);
  });

  double acc = 0.0;
  for (const auto& b : r.positives) acc += b.total;
  for (double ce : neg_ce) acc += ce;
  r.normalizer = 1.0 / static_cast<double>(positives.size());
  r.value = acc / static_cast<double>(positives.size());
  return r;
}

// ---------------------------------------------------------------------------
// Gradient surface over (p_gt, loc)

struct Range {
  double start = 0.0;
  double stop = 0.0;
  int count = 1;

  std::vector<double> values() const {
    detail::require(count >= 1, "Range: count must be >= 1");
    detail::require(std::isfinite(start) && std::isfinite(stop), "Range: bounds must be finite");
    std::vector<double> v(count);
    if (count == 1) {
      v[0] = start;
      return v;
    }
    const double step = (stop - start) / (count - 1);
    for (int i = 0; i < count; ++i) v[i] = start + step * i;
    v.back() = stop;
    return v;
  }
};

enum class SurfaceMode { standard, harmonic };

struct Surface {
  std::vector<double> p;
  std::vector<double> loc;
  // grad[i][j]: loc[i], p[j].
  std::vector<std::vector<double>> grad;
};

inline constexpr double kSurfaceLocCap = 4.0;

// d loss / d p_gt over a grid. Standard mode is CE + loc, whose derivative
// is -1/p regardless of loc.
inline Surface gradient_surface(const Range& p_grid, const Range& loc_grid, SurfaceMode mode,
                                double loc_cap = kSurfaceLocCap) {
  Surface s{p_grid.values(), loc_grid.values(), {}};
  for (double p : s.p) detail::require(p > 0.0 && p <= 1.0, "gradient_surface: p must lie in (0, 1]");
  for (double l : s.loc)
    detail::require(l >= 0.0 && l <= loc_cap, "gradient_surface: loc must lie in [0, " + std::to_string(loc_cap) + "]");
  s.grad.assign(s.loc.size(), std::vector<double>(s.p.size()));
  for (std::size_t i = 0; i < s.loc.size(); ++i) {
    for (std::size_t j = 0; j < s.p.size(); ++j) {
      s.grad[i][j] = mode == SurfaceMode::standard ? -1.0 / s.p[j] : harmonic_cls_grad(s.p[j], s.loc[i]);
    }
  }
  return s;
}

}  // namespace hardet::losses
