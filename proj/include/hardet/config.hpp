#pragma once

/* RunConfig: the single JSON file every subcommand reads.
 *
 * Every block is optional and every key inside a block defaults. Unknown
 * keys are errors. Field errors name the dotted path ("hyper.gamma"), syntax
 * errors the line and column.
 */

#include <cstdint>
#include <istream>
#include <iterator>
#include <string>
#include <vector>

#include "hardet/error.hpp"
#include "hardet/harness/gradcheck.hpp"
#include "hardet/harness/scene.hpp"
#include "hardet/harness/train.hpp"
#include "hardet/io.hpp"
#include "hardet/losses.hpp"
#include "hardet/metrics.hpp"
#include "json.hpp"

namespace hardet {

struct SurfaceConfig {
  losses::Range p{0.05, 1.0, 20};
  losses::Range loc{0.0, 1.2, 25};
  losses::SurfaceMode mode = losses::SurfaceMode::harmonic;
};

struct EvalConfig {
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  std::vector<double> ap_thresholds = metrics::default_ap_thresholds();
  std::vector<double> bin_edges = metrics::default_bin_edges();
};

struct RefineConfig {
  int steps = 100;
  double learning_rate = 0.5;
  int num_scenes = 64;
  std::vector<double> bin_edges = metrics::default_bin_edges();
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  losses::HyperParams hyper;  // num_classes follows scene.num_classes
  harness::SceneConfig scene;
  harness::OptimizerConfig optimizer;
  int gate_samples = 64;
  harness::GradcheckConfig gradcheck;
  SurfaceConfig surface;
  EvalConfig eval;
  RefineConfig refine;

  // Pushes the shared fields (seed, class count) into the blocks.
  void sync() {
    scene.seed = seed;
    gradcheck.seed = seed;
    hyper.num_classes = scene.num_classes;
  }

  void validate() const {
    hyper.validate();
    scene.validate();
    optimizer.validate();
    detail::require(gate_samples >= 1, "optimizer.gate_samples must be >= 1");
    detail::require(gradcheck.samples >= 1, "gradcheck.samples must be >= 1");
    detail::require(gradcheck.h > 0.0, "gradcheck.h must be > 0");
    detail::require(gradcheck.tolerance >= 0.0, "gradcheck.tolerance must be >= 0");
    detail::require(gradcheck.batch_size >= 1 && gradcheck.batch_negatives >= 0, "gradcheck: bad batch shape");
    detail::require(eval.score_threshold >= 0.0 && eval.score_threshold <= 1.0,
                    "eval.score_threshold must lie in [0, 1]");
    detail::require(eval.nms_threshold > 0.0 && eval.nms_threshold <= 1.0, "eval.nms_threshold must lie in (0, 1]");
    detail::require(!eval.ap_thresholds.empty(), "eval.ap_thresholds must not be empty");
    for (double t : eval.ap_thresholds)
      detail::require(t > 0.0 && t <= 1.0, "eval.ap_thresholds entries must lie in (0, 1]");
    metrics::validate_edges(eval.bin_edges);
    detail::require(refine.steps >= 1, "refine.steps must be >= 1");
    detail::require(refine.learning_rate >= 0.0, "refine.learning_rate must be >= 0");
    detail::require(refine.num_scenes >= 1, "refine.num_scenes must be >= 1");
    metrics::validate_edges(refine.bin_edges);
  }
};

namespace config_detail {

using nlohmann::json;

// Walks one object, tracking which keys were consumed.
class Block {
 public:
  Block(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where() + "expected an object");
  }

  template <typename T>
  void get(const char* key, T& dst) {
    const auto it = j_.find(key);
    used_.emplace_back(key);
    if (it == j_.end()) return;
    try {
      convert(*it, dst);
    } catch (const ValidationError& e) {
      throw ValidationError(join(key) + ": " + e.what());
    }
  }

  // Two-element array into a pair of fields.
  template <typename T>
  void get_pair(const char* key, T& lo, T& hi) {
    const auto it = j_.find(key);
    used_.emplace_back(key);
    if (it == j_.end()) return;
    if (!it->is_array() || it->size() != 2) throw ValidationError(join(key) + ": expected [min, max]");
    try {
      convert((*it)[0], lo);
      convert((*it)[1], hi);
    } catch (const ValidationError& e) {
      throw ValidationError(join(key) + ": " + e.what());
    }
  }

  template <typename Fn>
  void child(const char* key, Fn fn) {
    const auto it = j_.find(key);
    used_.emplace_back(key);
    if (it == j_.end()) return;
    Block b(*it, join(key));
    fn(b);
    b.finish();
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      bool known = false;
      for (const auto& u : used_) known = known || u == key;
      if (!known) throw ValidationError("unknown key '" + join(key) + "'");
    }
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  static void convert(const json& v, double& dst) {
    if (!v.is_number()) throw ValidationError("expected a number");
    dst = v.get<double>();
  }
  static void convert(const json& v, int& dst) {
    if (!v.is_number_integer()) throw ValidationError("expected an integer");
    dst = v.get<int>();
  }
  static void convert(const json& v, std::uint64_t& dst) {
    if (!v.is_number_unsigned()) throw ValidationError("expected a non-negative integer");
    dst = v.get<std::uint64_t>();
  }
  static void convert(const json& v, bool& dst) {
    if (!v.is_boolean()) throw ValidationError("expected true or false");
    dst = v.get<bool>();
  }
  static void convert(const json& v, std::string& dst) {
    if (!v.is_string()) throw ValidationError("expected a string");
    dst = v.get<std::string>();
  }
  static void convert(const json& v, std::vector<double>& dst) {
    if (!v.is_array()) throw ValidationError("expected an array of numbers");
    dst.clear();
    for (const auto& e : v) {
      if (!e.is_number()) throw ValidationError("expected an array of numbers");
      dst.push_back(e.get<double>());
    }
  }
  static void convert(const json& v, losses::HarmonicLoc& dst) {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "full") dst = losses::HarmonicLoc::full;
    else if (s == "smooth_l1") dst = losses::HarmonicLoc::smooth_l1;
    else throw ValidationError("expected \"full\" or \"smooth_l1\"");
  }
  static void convert(const json& v, harness::LossMode& dst) {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "standard") dst = harness::LossMode::standard;
    else if (s == "harmonic_det") dst = harness::LossMode::harmonic_det;
    else throw ValidationError("expected \"standard\" or \"harmonic_det\"");
  }
  static void convert(const json& v, losses::SurfaceMode& dst) {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "standard") dst = losses::SurfaceMode::standard;
    else if (s == "harmonic") dst = losses::SurfaceMode::harmonic;
    else throw ValidationError("expected \"standard\" or \"harmonic\"");
  }
  static void convert(const json& v, losses::Range& dst) {
    Block b(v, "");
    b.get("start", dst.start);
    b.get("stop", dst.stop);
    b.get("count", dst.count);
    b.finish();
  }

  const json& j_;
  std::string path_;
  std::vector<std::string> used_;
};

// 1-based line and column of a byte offset.
inline std::string position(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t k = 0; k < byte && k < text.size(); ++k) {
    if (text[k] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace config_detail

inline const char* to_string(losses::HarmonicLoc m) { return m == losses::HarmonicLoc::full ? "full" : "smooth_l1"; }
inline const char* to_string(harness::LossMode m) {
  return m == harness::LossMode::standard ? "standard" : "harmonic_det";
}
inline const char* to_string(losses::SurfaceMode m) {
  return m == losses::SurfaceMode::standard ? "standard" : "harmonic";
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  config_detail::Block root(j, "");
  root.get("seed", c.seed);
  root.get("out", c.out);
  root.child("hyper", [&](auto& b) {
    b.get("alpha", c.hyper.alpha);
    b.get("gamma", c.hyper.gamma);
    b.get("margin", c.hyper.margin);
    b.get("prob_floor", c.hyper.prob_floor);
    b.get("beta_e_stop_grad", c.hyper.beta_e_stop_grad);
    b.get("allow_gamma_above_one", c.hyper.allow_gamma_above_one);
    b.get("harmonic_loc", c.hyper.harmonic_loc);
    b.get("tc_through_iou", c.hyper.tc_through_iou);
    b.get("exp_cap", c.hyper.exp_cap);
  });
  root.child("scene", [&](auto& b) {
    b.get("num_scenes", c.scene.num_scenes);
    b.get_pair("objects_per_scene", c.scene.min_objects, c.scene.max_objects);
    b.get_pair("canvas", c.scene.canvas_width, c.scene.canvas_height);
    b.get("anchor_stride", c.scene.anchor_stride);
    b.get("anchor_sizes", c.scene.anchor_sizes);
    b.get("aspect_ratios", c.scene.aspect_ratios);
    b.get_pair("object_size", c.scene.min_object_size, c.scene.max_object_size);
    b.get("jitter", c.scene.jitter);
    b.get("num_classes", c.scene.num_classes);
    b.get("positive_iou_threshold", c.scene.positive_iou_threshold);
  });
  root.child("optimizer", [&](auto& b) {
    b.get("learning_rate", c.optimizer.learning_rate);
    b.get("steps", c.optimizer.steps);
    b.get("log_every", c.optimizer.log_every);
    b.get("loss_mode", c.optimizer.loss_mode);
    b.get("gate_samples", c.gate_samples);
  });
  root.child("gradcheck", [&](auto& b) {
    b.get("samples", c.gradcheck.samples);
    b.get("h", c.gradcheck.h);
    b.get("tolerance", c.gradcheck.tolerance);
    b.get("kink_distance", c.gradcheck.kink_distance);
    b.get("batch_size", c.gradcheck.batch_size);
    b.get("batch_negatives", c.gradcheck.batch_negatives);
  });
  root.child("surface", [&](auto& b) {
    b.get("p", c.surface.p);
    b.get("loc", c.surface.loc);
    b.get("mode", c.surface.mode);
  });
  root.child("eval", [&](auto& b) {
    b.get("score_threshold", c.eval.score_threshold);
    b.get("nms_threshold", c.eval.nms_threshold);
    b.get("ap_thresholds", c.eval.ap_thresholds);
    b.get("bin_edges", c.eval.bin_edges);
  });
  root.child("refine", [&](auto& b) {
    b.get("steps", c.refine.steps);
    b.get("learning_rate", c.refine.learning_rate);
    b.get("num_scenes", c.refine.num_scenes);
    b.get("bin_edges", c.refine.bin_edges);
  });
  root.finish();
  c.sync();
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config: syntax error at " + config_detail::position(text, e.byte ? e.byte - 1 : 0) +
                          " (" + e.what() + ")");
  }
  return config_from_json(j);
}

inline RunConfig read_config(std::istream& in) {
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_config(text);
}

// Everything that affects results. The output directory is left out so the
// same run in two places hashes the same.
inline nlohmann::json to_json(const RunConfig& c) {
  const auto range = [](const losses::Range& r) { return nlohmann::json{{"start", r.start}, {"stop", r.stop}, {"count", r.count}}; };
  return {
      {"seed", c.seed},
      {"hyper",
       {{"alpha", c.hyper.alpha},
        {"gamma", c.hyper.gamma},
        {"margin", c.hyper.margin},
        {"prob_floor", c.hyper.prob_floor},
        {"beta_e_stop_grad", c.hyper.beta_e_stop_grad},
        {"allow_gamma_above_one", c.hyper.allow_gamma_above_one},
        {"harmonic_loc", to_string(c.hyper.harmonic_loc)},
        {"tc_through_iou", c.hyper.tc_through_iou},
        {"exp_cap", c.hyper.exp_cap}}},
      {"scene",
       {{"num_scenes", c.scene.num_scenes},
        {"objects_per_scene", {c.scene.min_objects, c.scene.max_objects}},
        {"canvas", {c.scene.canvas_width, c.scene.canvas_height}},
        {"anchor_stride", c.scene.anchor_stride},
        {"anchor_sizes", c.scene.anchor_sizes},
        {"aspect_ratios", c.scene.aspect_ratios},
        {"object_size", {c.scene.min_object_size, c.scene.max_object_size}},
        {"jitter", c.scene.jitter},
        {"num_classes", c.scene.num_classes},
        {"positive_iou_threshold", c.scene.positive_iou_threshold}}},
      {"optimizer",
       {{"learning_rate", c.optimizer.learning_rate},
        {"steps", c.optimizer.steps},
        {"log_every", c.optimizer.log_every},
        {"loss_mode", to_string(c.optimizer.loss_mode)},
        {"gate_samples", c.gate_samples}}},
      {"gradcheck",
       {{"samples", c.gradcheck.samples},
        {"h", c.gradcheck.h},
        {"tolerance", c.gradcheck.tolerance},
        {"kink_distance", c.gradcheck.kink_distance},
        {"batch_size", c.gradcheck.batch_size},
        {"batch_negatives", c.gradcheck.batch_negatives}}},
      {"surface", {{"p", range(c.surface.p)}, {"loc", range(c.surface.loc)}, {"mode", to_string(c.surface.mode)}}},
      {"eval",
       {{"score_threshold", c.eval.score_threshold},
        {"nms_threshold", c.eval.nms_threshold},
        {"ap_thresholds", c.eval.ap_thresholds},
        {"bin_edges", c.eval.bin_edges}}},
      {"refine",
       {{"steps", c.refine.steps},
        {"learning_rate", c.refine.learning_rate},
        {"num_scenes", c.refine.num_scenes},
        {"bin_edges", c.refine.bin_edges}}},
  };
}

// nlohmann::json sorts object keys, so dump() is canonical.
inline std::uint64_t config_hash(const RunConfig& c) { return io::fnv1a64(to_json(c).dump()); }

}  // namespace hardet
