#pragma once

/* JSON / JSONL / CSV formats.
 *
 * Boxes and offsets are 4-element arrays everywhere. Samples use
 *   {"probs":[...],"gt_class":int,"anchor":[x1,y1,x2,y2],"gt_box":[...],"d":[tx,ty,tw,th]}
 * and detections
 *   {"image_id":int,"box":[...],"class_id":int,"score":real}
 */

#include <array>
#include <charconv>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "hardet/error.hpp"
#include "hardet/geom.hpp"
#include "hardet/harness/scene.hpp"
#include "hardet/harness/train.hpp"
#include "hardet/losses.hpp"
#include "hardet/metrics.hpp"
#include "json.hpp"

namespace hardet::io {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Scalars and hashing

// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw NumericalError("format_double: conversion failed");
  return std::string(buf.data(), end);
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xF];
  return s;
}

// ---------------------------------------------------------------------------
// Boxes and offsets

inline json to_json(const geom::Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }
inline json to_json(const geom::Offsets& d) { return json::array({d.tx, d.ty, d.tw, d.th}); }

inline std::array<double, 4> quad_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 4) throw ValidationError(what + ": expected an array of 4 numbers");
  std::array<double, 4> v{};
  for (std::size_t k = 0; k < 4; ++k) {
    if (!j[k].is_number()) throw ValidationError(what + ": expected an array of 4 numbers");
    v[k] = j[k].get<double>();
  }
  return v;
}

inline geom::Box box_from_json(const json& j, const std::string& what = "box") {
  const auto v = quad_from_json(j, what);
  try {
    return {v[0], v[1], v[2], v[3]};
  } catch (const ValidationError& e) {
    throw ValidationError(what + ": " + e.what());
  }
}

inline geom::Offsets offsets_from_json(const json& j, const std::string& what = "d") {
  return geom::Offsets::from_array(quad_from_json(j, what));
}

// ---------------------------------------------------------------------------
// Samples and loss breakdowns

inline json to_json(const losses::LossBreakdown& b) {
  return json{{"ce", b.ce},
              {"smooth_l1", b.smooth_l1},
              {"iou_value", b.iou_value},
              {"hiou", b.hiou},
              {"loc_full", b.loc_full},
              {"tc", b.tc},
              {"beta_r", b.beta_r},
              {"beta_c", b.beta_c},
              {"beta_e", b.beta_e},
              {"total", b.total},
              {"grad_probs", b.grad_probs},
              {"grad_d", b.grad_d}};
}

inline json sample_to_json(const losses::PositiveSample& s) {
  return json{{"probs", s.probs}, {"gt_class", s.gt_class}, {"anchor", to_json(s.anchor)},
              {"gt_box", to_json(s.gt_box)}, {"d", to_json(s.d)}};
}

namespace detail {

inline void expect_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ValidationError(where + ": unknown key '" + key + "'");
  }
}

inline const json& field(const json& j, const char* key, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end()) throw ValidationError(where + ": missing '" + key + "'");
  return *it;
}

inline std::string line_context(std::size_t line_no) { return "line " + std::to_string(line_no); }

// Blank lines and '#' header lines carry no record.
inline bool blank(std::string_view line) {
  const auto k = line.find_first_not_of(" \t\r");
  return k == std::string_view::npos || line[k] == '#';
}

}  // namespace detail

/// Parses one sample line. When hp.num_classes is 0 the class count is taken
/// from the probability vector.
inline losses::PositiveSample sample_from_json(const json& j, losses::HyperParams hp, const std::string& where) {
  detail::expect_keys(j, {"probs", "gt_class", "anchor", "gt_box", "d"}, where);
  const json& probs = detail::field(j, "probs", where);
  if (!probs.is_array()) throw ValidationError(where + ": 'probs' must be an array");
  std::vector<double> p;
  for (const auto& v : probs) {
    if (!v.is_number()) throw ValidationError(where + ": 'probs' must hold numbers");
    p.push_back(v.get<double>());
  }
  const json& g = detail::field(j, "gt_class", where);
  if (!g.is_number_integer()) throw ValidationError(where + ": 'gt_class' must be an integer");
  if (hp.num_classes == 0) hp.num_classes = static_cast<int>(p.size());
  // Fields in a fixed order so the first missing one is the one reported.
  const geom::Box anchor = box_from_json(detail::field(j, "anchor", where), where + ": anchor");
  const geom::Box gt_box = box_from_json(detail::field(j, "gt_box", where), where + ": gt_box");
  const geom::Offsets d = offsets_from_json(detail::field(j, "d", where), where + ": d");
  try {
    return losses::make_positive(std::move(p), g.get<int>(), d, anchor, gt_box, hp);
  } catch (const ValidationError& e) {
    throw ValidationError(where + ": " + e.what());
  }
}

inline losses::PositiveSample parse_sample_line(std::string_view line, std::size_t line_no,
                                                const losses::HyperParams& hp) {
  const std::string where = detail::line_context(line_no);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
  }
  return sample_from_json(j, hp, where);
}

// Blank lines are skipped; line numbers in errors are 1-based file lines.
inline std::vector<losses::PositiveSample> read_samples_jsonl(std::istream& in, const losses::HyperParams& hp) {
  std::vector<losses::PositiveSample> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (detail::blank(line)) continue;
    out.push_back(parse_sample_line(line, n, hp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detections and ground truth

inline json to_json(const metrics::Detection& d) {
  return json{{"image_id", d.image_id}, {"box", to_json(d.box)}, {"class_id", d.class_id}, {"score", d.score}};
}

inline json to_json(const metrics::GroundTruth& g) {
  return json{{"image_id", g.image_id}, {"box", to_json(g.box)}, {"class_id", g.class_id}};
}

inline metrics::Detection detection_from_json(const json& j, const std::string& where) {
  detail::expect_keys(j, {"image_id", "box", "class_id", "score"}, where);
  metrics::Detection d;
  d.box = box_from_json(detail::field(j, "box", where), where + ": box");
  const json& c = detail::field(j, "class_id", where);
  const json& s = detail::field(j, "score", where);
  if (!c.is_number_integer()) throw ValidationError(where + ": 'class_id' must be an integer");
  if (!s.is_number()) throw ValidationError(where + ": 'score' must be a number");
  d.class_id = c.get<int>();
  d.score = s.get<double>();
  if (!(d.score >= 0.0 && d.score <= 1.0)) throw ValidationError(where + ": 'score' must lie in [0, 1]");
  if (j.contains("image_id")) {
    if (!j["image_id"].is_number_integer()) throw ValidationError(where + ": 'image_id' must be an integer");
    d.image_id = j["image_id"].get<int>();
  }
  return d;
}

inline metrics::GroundTruth ground_truth_from_json(const json& j, const std::string& where) {
  detail::expect_keys(j, {"image_id", "box", "class_id"}, where);
  metrics::GroundTruth g;
  g.box = box_from_json(detail::field(j, "box", where), where + ": box");
  const json& c = detail::field(j, "class_id", where);
  if (!c.is_number_integer()) throw ValidationError(where + ": 'class_id' must be an integer");
  g.class_id = c.get<int>();
  if (j.contains("image_id")) {
    if (!j["image_id"].is_number_integer()) throw ValidationError(where + ": 'image_id' must be an integer");
    g.image_id = j["image_id"].get<int>();
  }
  return g;
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(std::istream& in, Parse parse) {
  std::vector<T> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (detail::blank(line)) continue;
    const std::string where = detail::line_context(n);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
    }
    out.push_back(parse(j, where));
  }
  return out;
}

inline std::vector<metrics::Detection> read_detections_jsonl(std::istream& in) {
  return read_jsonl<metrics::Detection>(in, detection_from_json);
}

inline std::vector<metrics::GroundTruth> read_ground_truths_jsonl(std::istream& in) {
  return read_jsonl<metrics::GroundTruth>(in, ground_truth_from_json);
}

// ---------------------------------------------------------------------------
// Scenes

// One sample line per positive anchor of every scene, using the model's
// current predictions.
inline void write_scene_samples(std::ostream& out, const harness::TrainingSet& ts, const harness::ToyModel& model) {
  for (const auto& s : harness::positive_samples(ts, model)) out << sample_to_json(s).dump() << '\n';
}

inline json to_json(const harness::SceneSet& set) {
  json scenes = json::array();
  for (const auto& scene : set.scenes) {
    json objs = json::array();
    for (const auto& o : scene.objects) objs.push_back({{"box", to_json(o.box)}, {"class_id", o.class_id}});
    scenes.push_back({{"objects", objs}});
  }
  json anchors = json::array();
  for (const auto& a : set.anchors) anchors.push_back(to_json(a));
  return {{"scenes", scenes}, {"anchors", anchors}};
}

// ---------------------------------------------------------------------------
// CSV

inline std::string meta_line(std::uint64_t config_hash, std::uint64_t seed) {
  return "# config_hash=" + hex64(config_hash) + " seed=" + std::to_string(seed);
}

class CsvWriter {
 public:
  CsvWriter(std::ostream& out, const std::vector<std::string>& header) : out_(out) { row_strings(header); }

  // Empty optional cells mark absent values.
  template <typename... Cells>
  void row(const Cells&... cells) {
    bool first = true;
    ((out_ << (first ? "" : ","), out_ << cell(cells), first = false), ...);
    out_ << '\n';
  }

 private:
  void row_strings(const std::vector<std::string>& cells) {
    for (std::size_t k = 0; k < cells.size(); ++k) out_ << (k ? "," : "") << cells[k];
    out_ << '\n';
  }
  static std::string cell(double v) { return format_double(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(const std::string& v) { return v; }
  static std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string{}; }

  std::ostream& out_;
};

inline void write_train_log(std::ostream& out, const harness::TrainLog& log) {
  CsvWriter csv(out, {"step", "objective", "mean_factor_r", "mean_factor_c", "aic"});
  for (const auto& r : log.records) csv.row(r.step, r.objective, r.mean_factor_r, r.mean_factor_c, r.aic);
}

inline void write_scatter(std::ostream& out, std::span<const metrics::ScoreIou> rows) {
  CsvWriter csv(out, {"score", "iou"});
  for (const auto& r : rows) csv.row(r.score, r.iou);
}

inline void write_histogram(std::ostream& out, const metrics::Histogram& h) {
  CsvWriter csv(out, {"bin_lo", "bin_hi", "count"});
  for (std::size_t k = 0; k < h.counts.size(); ++k) csv.row(h.edges[k], h.edges[k + 1], h.counts[k]);
}

inline void write_surface(std::ostream& out, const losses::Surface& s) {
  CsvWriter csv(out, {"p", "loc", "grad"});
  for (std::size_t i = 0; i < s.loc.size(); ++i)
    for (std::size_t j = 0; j < s.p.size(); ++j) csv.row(s.p[j], s.loc[i], s.grad[i][j]);
}

inline void write_refinement(std::ostream& out, const std::vector<metrics::GainBin>& iou_bins,
                             const std::vector<metrics::GainBin>& hiou_bins) {
  CsvWriter csv(out, {"bin_lo", "bin_hi", "count", "gain_iou", "gain_hiou"});
  for (std::size_t k = 0; k < iou_bins.size(); ++k)
    csv.row(iou_bins[k].lo, iou_bins[k].hi, iou_bins[k].count, iou_bins[k].mean_gain, hiou_bins[k].mean_gain);
}

}  // namespace hardet::io
