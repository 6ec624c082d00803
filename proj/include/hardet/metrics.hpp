#pragma once

/* Detection-quality and consistency metrics. */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "hardet/error.hpp"
#include "hardet/geom.hpp"

namespace hardet::metrics {

using geom::Box;

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  int image_id = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
  int image_id = 0;
  bool matched = false;
};

inline const std::vector<double>& default_ap_thresholds() {
  static const std::vector<double> t = {0.5, 0.6, 0.7, 0.8, 0.9};
  return t;
}

inline const std::vector<double>& default_bin_edges() {
  static const std::vector<double> e = {0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  return e;
}

namespace detail {

// Indices sorted by descending score, ties by ascending index.
inline std::vector<std::size_t> score_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NMS

/**
 * Greedy class-wise non-maximum suppression. Detections are visited by
 * descending score (ties by input position); one is kept iff its IoU with every
 * already-kept detection of the same class and image is below the threshold.
 * The result is in visiting order.
 */
inline std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold) {
  hardet::detail::require(iou_threshold > 0.0 && iou_threshold <= 1.0, "nms: threshold must lie in (0, 1]");
  std::vector<Detection> kept;
  for (std::size_t idx : detail::score_order(dets)) {
    const Detection& d = dets[idx];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && k.image_id == d.image_id && geom::iou(k.box, d.box) >= iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Average precision

// Area under the running-max precision envelope of a ranked TP/FP list.
inline double ap_from_ranking(const std::vector<bool>& is_tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  const std::size_t n = is_tp.size();
  std::vector<double> precision(n);
  std::vector<double> recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_tp[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

// AP of one class at one threshold. Detections of other classes are ignored.
// Each detection, in score order, takes the highest-IoU still-unmatched
// ground truth of its image, if that IoU reaches the threshold.
inline double class_average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                                      int class_id, double iou_threshold) {
  std::vector<GroundTruth> pool;
  for (const auto& g : gts)
    if (g.class_id == class_id) pool.push_back({g.box, g.class_id, g.image_id, false});

  std::vector<bool> is_tp;
  for (std::size_t idx : detail::score_order(dets)) {
    const Detection& d = dets[idx];
    if (d.class_id != class_id) continue;
    double best = -1.0;
    GroundTruth* match = nullptr;
    for (auto& g : pool) {
      if (g.matched || g.image_id != d.image_id) continue;
      const double v = geom::iou(d.box, g.box);
      if (v > best) {
        best = v;
        match = &g;
      }
    }
    const bool tp = match != nullptr && best >= iou_threshold;
    if (tp) match->matched = true;
    is_tp.push_back(tp);
  }
  return ap_from_ranking(is_tp, pool.size());
}

struct ApReport {
  std::vector<double> thresholds;
  // Mean over classes that have ground truth; absent when no class has any.
  std::vector<std::optional<double>> per_threshold;
  // class id -> AP per threshold; only classes with ground truth appear.
  std::map<int, std::vector<double>> per_class;
  std::optional<double> mean;
};

inline ApReport average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                                  const std::vector<double>& thresholds = default_ap_thresholds()) {
  hardet::detail::require(!thresholds.empty(), "average_precision: no thresholds");
  for (double t : thresholds)
    hardet::detail::require(t > 0.0 && t <= 1.0, "average_precision: thresholds must lie in (0, 1]");

  ApReport r;
  r.thresholds = thresholds;
  for (const auto& g : gts) r.per_class.try_emplace(g.class_id);
  for (auto& [cls, aps] : r.per_class) {
    for (double t : thresholds) aps.push_back(class_average_precision(dets, gts, cls, t));
  }
  if (r.per_class.empty()) {
    r.per_threshold.assign(thresholds.size(), std::nullopt);
    return r;
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    double s = 0.0;
    for (const auto& [cls, aps] : r.per_class) s += aps[k];
    const double m = s / static_cast<double>(r.per_class.size());
    r.per_threshold.emplace_back(m);
    sum += m;
  }
  r.mean = sum / static_cast<double>(thresholds.size());
  return r;
}

// ---------------------------------------------------------------------------
// Consistency

struct ScoreIou {
  double score = 0.0;
  double iou = 0.0;
};

enum class AicMode { mean, sum };

// Aggregate |score - IoU| over positives. The mean is the default; `sum` is
// the unnormalized total.
inline double aic(std::span<const ScoreIou> pairs, AicMode mode = AicMode::mean) {
  hardet::detail::require(!pairs.empty(), "aic: empty input");
  double sum = 0.0;
  for (const auto& p : pairs) {
    hardet::detail::require(p.score >= 0.0 && p.score <= 1.0 && p.iou >= 0.0 && p.iou <= 1.0,
                            "aic: entries must lie in [0, 1]");
    sum += std::abs(p.score - p.iou);
  }
  return mode == AicMode::sum ? sum : sum / static_cast<double>(pairs.size());
}

// One row per detection: its score and best IoU with a same-class,
// same-image ground truth (0 when there is none).
inline std::vector<ScoreIou> consistency_scatter(std::span<const Detection> dets, std::span<const GroundTruth> gts) {
  std::vector<ScoreIou> rows;
  rows.reserve(dets.size());
  for (const auto& d : dets) {
    double best = 0.0;
    for (const auto& g : gts)
      if (g.class_id == d.class_id && g.image_id == d.image_id) best = std::max(best, geom::iou(d.box, g.box));
    rows.push_back({d.score, best});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
  // In [0, 1] but outside [edges.front(), edges.back()].
  std::size_t below = 0;
  std::size_t above = 0;

  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

inline void validate_edges(const std::vector<double>& edges) {
  hardet::detail::require(edges.size() >= 2, "bin edges: need at least two");
  for (std::size_t k = 0; k < edges.size(); ++k) {
    hardet::detail::require(edges[k] >= 0.0 && edges[k] <= 1.0, "bin edges: must lie in [0, 1]");
    if (k > 0) hardet::detail::require(edges[k] > edges[k - 1], "bin edges: must be strictly increasing");
  }
}

// Bin index for [e_k, e_{k+1}) with the last bin closed; nullopt outside.
inline std::optional<std::size_t> bin_of(double v, const std::vector<double>& edges) {
  if (v < edges.front() || v > edges.back()) return std::nullopt;
  const auto it = std::upper_bound(edges.begin(), edges.end(), v);
  const std::size_t k = static_cast<std::size_t>(it - edges.begin());
  return std::min(k, edges.size() - 1) - 1;
}

inline Histogram iou_histogram(std::span<const double> ious, const std::vector<double>& edges = default_bin_edges()) {
  validate_edges(edges);
  Histogram h{edges, std::vector<std::size_t>(edges.size() - 1, 0), 0, 0};
  for (double v : ious) {
    hardet::detail::require(v >= 0.0 && v <= 1.0, "iou_histogram: value outside [0, 1]");
    if (auto k = bin_of(v, edges)) {
      ++h.counts[*k];
    } else if (v < edges.front()) {
      ++h.below;
    } else {
      ++h.above;
    }
  }
  return h;
}

struct RefinementPair {
  double iou_before = 0.0;
  double iou_after = 0.0;
};

struct GainBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_gain;  // absent for an empty bin
};

// Per bin of iou_before, the mean of iou_after - iou_before.
inline std::vector<GainBin> refinement_gain(std::span<const RefinementPair> pairs,
                                            const std::vector<double>& edges = default_bin_edges()) {
  hardet::detail::require(!pairs.empty(), "refinement_gain: empty input");
  validate_edges(edges);
  std::vector<GainBin> bins(edges.size() - 1);
  std::vector<double> sums(bins.size(), 0.0);
  for (std::size_t k = 0; k < bins.size(); ++k) {
    bins[k].lo = edges[k];
    bins[k].hi = edges[k + 1];
  }
  for (const auto& p : pairs) {
    if (auto k = bin_of(p.iou_before, edges)) {
      ++bins[*k].count;
      sums[*k] += p.iou_after - p.iou_before;
    }
  }
  for (std::size_t k = 0; k < bins.size(); ++k)
    if (bins[k].count > 0) bins[k].mean_gain = sums[k] / static_cast<double>(bins[k].count);
  return bins;
}

}  // namespace hardet::metrics
