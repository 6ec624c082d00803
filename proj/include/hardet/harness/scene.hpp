#pragma once

/* Synthetic scenes, anchor tiling and anchor/ground-truth assignment. */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hardet/detail/rng.hpp"
#include "hardet/error.hpp"
#include "hardet/geom.hpp"

namespace hardet::harness {

using geom::Box;
using geom::Offsets;

struct SceneConfig {
  std::uint64_t seed = 0;
  int num_scenes = 16;
  int min_objects = 1;
  int max_objects = 3;
  double canvas_width = 128.0;
  double canvas_height = 128.0;
  double anchor_stride = 16.0;
  std::vector<double> anchor_sizes = {24.0, 48.0};
  std::vector<double> aspect_ratios = {1.0};
  double min_object_size = 20.0;
  double max_object_size = 56.0;
  // Log-space half-width of the per-axis size perturbation of objects.
  double jitter = 0.3;
  // Includes the background class 0.
  int num_classes = 4;
  double positive_iou_threshold = 0.5;

  void validate() const {
    detail::require(num_scenes >= 1, "SceneConfig: num_scenes must be >= 1");
    detail::require(min_objects >= 1 && max_objects >= min_objects, "SceneConfig: bad object count range");
    detail::require(canvas_width > 0.0 && canvas_height > 0.0, "SceneConfig: canvas must be positive");
    detail::require(anchor_stride > 0.0, "SceneConfig: anchor_stride must be > 0");
    detail::require(!anchor_sizes.empty() && !aspect_ratios.empty(), "SceneConfig: empty anchor spec");
    for (double s : anchor_sizes) detail::require(s > 0.0, "SceneConfig: anchor sizes must be > 0");
    for (double r : aspect_ratios) detail::require(r > 0.0, "SceneConfig: aspect ratios must be > 0");
    detail::require(min_object_size > 0.0 && max_object_size >= min_object_size,
                    "SceneConfig: bad object size range");
    detail::require(jitter >= 0.0, "SceneConfig: jitter must be >= 0");
    detail::require(num_classes >= 2, "SceneConfig: num_classes must be >= 2");
    detail::require(positive_iou_threshold > 0.0 && positive_iou_threshold < 1.0,
                    "SceneConfig: positive_iou_threshold must lie in (0, 1)");
    const double largest = max_object_size * std::exp(jitter);
    detail::require(largest <= canvas_width && largest <= canvas_height,
                    "SceneConfig: objects can be larger than the canvas");
  }
};

struct Object {
  Box box;
  int class_id = 1;
};

struct Scene {
  std::vector<Object> objects;
};

struct SceneSet {
  std::vector<Scene> scenes;
  // Shared by every scene.
  std::vector<Box> anchors;
};

inline std::vector<Box> tile_anchors(const SceneConfig& cfg) {
  std::vector<Box> anchors;
  const int nx = static_cast<int>(std::floor(cfg.canvas_width / cfg.anchor_stride));
  const int ny = static_cast<int>(std::floor(cfg.canvas_height / cfg.anchor_stride));
  for (int iy = 0; iy < ny; ++iy) {
    for (int ix = 0; ix < nx; ++ix) {
      const double cx = (ix + 0.5) * cfg.anchor_stride;
      const double cy = (iy + 0.5) * cfg.anchor_stride;
      for (double size : cfg.anchor_sizes) {
        for (double ratio : cfg.aspect_ratios) {
          const double hw = 0.5 * size * std::sqrt(ratio);
          const double hh = 0.5 * size / std::sqrt(ratio);
          anchors.emplace_back(cx - hw, cy - hh, cx + hw, cy + hh);
        }
      }
    }
  }
  return anchors;
}

// Deterministic in cfg (including its seed).
inline SceneSet generate_scenes(const SceneConfig& cfg) {
  cfg.validate();
  detail::Rng rng(cfg.seed);
  SceneSet out;
  out.anchors = tile_anchors(cfg);
  detail::require(!out.anchors.empty(), "SceneConfig: anchor grid is empty");
  out.scenes.resize(cfg.num_scenes);
  for (auto& scene : out.scenes) {
    const int count = rng.between(cfg.min_objects, cfg.max_objects);
    for (int k = 0; k < count; ++k) {
      const double size = rng.uniform(cfg.min_object_size, cfg.max_object_size);
      const double w = size * std::exp(cfg.jitter * rng.uniform(-1.0, 1.0));
      const double h = size * std::exp(cfg.jitter * rng.uniform(-1.0, 1.0));
      const double cx = rng.uniform(0.5 * w, cfg.canvas_width - 0.5 * w);
      const double cy = rng.uniform(0.5 * h, cfg.canvas_height - 0.5 * h);
      const int cls = rng.between(1, cfg.num_classes - 1);
      scene.objects.push_back({Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), cls});
    }
  }
  return out;
}

struct Assignment {
  std::size_t anchor_index = 0;
  std::size_t gt_index = 0;
  int gt_class = 0;
  Offsets d_hat;
  double iou = 0.0;  // anchor vs ground truth
};

struct MatchResult {
  std::vector<Assignment> positives;  // ascending anchor index
  std::vector<std::size_t> negatives;
};

/**
 * Max-IoU assignment. An anchor is positive for its highest-IoU ground truth
 * when that IoU reaches `threshold`. Every ground truth also claims its own
 * best anchor (lowest index on ties) regardless of the threshold; an anchor
 * claimed by several ground truths goes to the one it overlaps most.
 */
inline MatchResult match_anchors(const Scene& scene, std::span<const Box> anchors, double threshold) {
  detail::require(!anchors.empty(), "match_anchors: no anchors");
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  const std::size_t n_gt = scene.objects.size();
  std::vector<std::size_t> assigned(anchors.size(), kNone);
  std::vector<double> assigned_iou(anchors.size(), -1.0);

  std::vector<std::size_t> gt_best_anchor(n_gt, 0);
  std::vector<double> gt_best_iou(n_gt, -1.0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = -1.0;
    std::size_t best_gt = kNone;
    for (std::size_t g = 0; g < n_gt; ++g) {
      const double v = geom::iou(anchors[a], scene.objects[g].box);
      if (v > best) {
        best = v;
        best_gt = g;
      }
      if (v > gt_best_iou[g]) {
        gt_best_iou[g] = v;
        gt_best_anchor[g] = a;
      }
    }
    if (best_gt != kNone && best >= threshold) {
      assigned[a] = best_gt;
      assigned_iou[a] = best;
    }
  }
  // Forced matches, strongest claim first. A GT whose best anchor is already
  // forced takes its best unclaimed one, so every GT keeps a positive.
  std::vector<std::size_t> order(n_gt);
  for (std::size_t g = 0; g < n_gt; ++g) order[g] = g;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return gt_best_iou[l] > gt_best_iou[r]; });
  std::vector<bool> forced(anchors.size(), false);
  for (std::size_t g : order) {
    std::size_t pick = gt_best_anchor[g];
    double pick_iou = gt_best_iou[g];
    if (forced[pick]) {
      pick = kNone;
      pick_iou = -1.0;
      for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (forced[a]) continue;
        const double v = geom::iou(anchors[a], scene.objects[g].box);
        if (v > pick_iou) {
          pick_iou = v;
          pick = a;
        }
      }
      if (pick == kNone) continue;  // more objects than anchors
    }
    forced[pick] = true;
    assigned[pick] = g;
    assigned_iou[pick] = pick_iou;
  }

  MatchResult r;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (assigned[a] == kNone) {
      r.negatives.push_back(a);
      continue;
    }
    const Object& obj = scene.objects[assigned[a]];
    r.positives.push_back({a, assigned[a], obj.class_id, geom::encode(obj.box, anchors[a]), assigned_iou[a]});
  }
  return r;
}

}  // namespace hardet::harness
