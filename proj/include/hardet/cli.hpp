#pragma once

/* Subcommand bodies. tools/hardet.cpp parses flags and calls these; the
 * acceptance suite calls them directly. */

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "hardet/config.hpp"
#include "hardet/error.hpp"
#include "hardet/harness.hpp"
#include "hardet/io.hpp"
#include "hardet/losses.hpp"
#include "hardet/metrics.hpp"

namespace hardet::cli {

namespace fs = std::filesystem;

// HARDET_THREADS when set to a positive integer, else the core count.
inline unsigned thread_count() {
  if (const char* env = std::getenv("HARDET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    throw ValidationError("HARDET_THREADS must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

class Output {
 public:
  Output(const RunConfig& cfg) : dir_(cfg.out), header_(io::meta_line(config_hash(cfg), cfg.seed)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw ValidationError("cannot create output directory '" + dir_.string() + "': " + ec.message());
  }

  // Opens a file and writes the header line.
  std::ofstream open(const std::string& name) const {
    std::ofstream f(dir_ / name, std::ios::binary);
    if (!f) throw ValidationError("cannot write '" + (dir_ / name).string() + "'");
    f << header_ << '\n';
    return f;
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

 private:
  fs::path dir_;
  std::string header_;
};

// ---------------------------------------------------------------------------

// Returns the report; the caller maps a failed report to exit status 2.
inline harness::GradcheckReport cmd_gradcheck(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto hp = harness::effective_params(cfg.hyper, cfg.optimizer.loss_mode);
  const auto report = harness::run_gradcheck(cfg.gradcheck, hp);

  Output out(cfg);
  auto f = out.open("gradcheck.csv");
  io::CsvWriter csv(f, {"name", "checked", "max_error", "max_abs_error", "pass"});
  for (const auto& e : report.entries) {
    csv.row(e.name, e.checked, e.max_error, e.max_abs_error, std::string(e.pass ? "1" : "0"));
    log << (e.pass ? "PASS " : "FAIL ") << e.name << " checked=" << e.checked
        << " max_rel=" << io::format_double(e.max_error) << '\n';
  }
  log << (report.pass ? "PASS" : "FAIL") << " tolerance=" << io::format_double(report.tolerance) << '\n';
  return report;
}

// Pure JSONL on `out`, one breakdown per sample line.
inline void cmd_loss_eval(std::istream& samples, const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  auto hp = harness::effective_params(cfg.hyper, cfg.optimizer.loss_mode);
  hp.num_classes = 0;  // taken from each line
  std::string line;
  for (std::size_t n = 1; std::getline(samples, line); ++n) {
    if (io::detail::blank(line)) continue;
    const auto s = io::parse_sample_line(line, n, hp);
    losses::HyperParams line_hp = hp;
    line_hp.num_classes = static_cast<int>(s.probs.size());
    try {
      out << io::to_json(losses::harmonic_det_loss(s, line_hp)).dump() << '\n';
    } catch (const std::exception& e) {
      throw NumericalError("line " + std::to_string(n) + ": " + e.what());
    }
  }
}

inline losses::Surface cmd_surface(const RunConfig& cfg) {
  cfg.validate();
  const auto s = losses::gradient_surface(cfg.surface.p, cfg.surface.loc, cfg.surface.mode);
  Output out(cfg);
  auto f = out.open("surface.csv");
  io::write_surface(f, s);
  return s;
}

struct TrainSummary {
  harness::TrainLog log;
  metrics::ApReport ap;
  double aic_positives = 0.0;
  std::optional<double> aic_detections;
  std::size_t detections = 0;
};

// Trains, then evaluates the final model on the training scenes.
inline TrainSummary cmd_train(const RunConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  const auto ts = harness::prepare(cfg.scene);
  harness::TrainOptions opts;
  opts.threads = threads;
  opts.gate_samples = cfg.gate_samples;
  opts.gate_seed = cfg.seed;
  opts.gate_tolerance = cfg.gradcheck.tolerance;
  const auto result = harness::train_toy(ts, harness::make_model(ts, cfg.hyper.num_classes), cfg.optimizer,
                                         cfg.hyper, opts);

  const auto raw = harness::detect(ts, result.model, cfg.eval.score_threshold, cfg.hyper.exp_cap);
  const auto dets = metrics::nms(raw, cfg.eval.nms_threshold);
  const auto gts = harness::ground_truths(ts);
  const auto scatter = metrics::consistency_scatter(dets, gts);

  std::vector<double> anchor_ious;
  for (const auto& m : ts.matches)
    for (const auto& a : m.positives) anchor_ious.push_back(a.iou);

  TrainSummary sum;
  sum.log = result.log;
  sum.ap = metrics::average_precision(dets, gts, cfg.eval.ap_thresholds);
  sum.aic_positives = result.log.records.back().aic;
  if (!scatter.empty()) sum.aic_detections = metrics::aic(scatter);
  sum.detections = dets.size();

  Output out(cfg);
  {
    auto f = out.open("train_log.csv");
    io::write_train_log(f, result.log);
  }
  {
    auto f = out.open("detections.jsonl");
    for (const auto& d : dets) f << io::to_json(d).dump() << '\n';
  }
  {
    auto f = out.open("scatter.csv");
    io::write_scatter(f, scatter);
  }
  {
    auto f = out.open("histogram.csv");
    io::write_histogram(f, metrics::iou_histogram(anchor_ious, cfg.eval.bin_edges));
  }
  {
    nlohmann::json ap = nlohmann::json::object();
    for (std::size_t k = 0; k < sum.ap.thresholds.size(); ++k) {
      const auto& v = sum.ap.per_threshold[k];
      ap[io::format_double(sum.ap.thresholds[k])] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    }
    const nlohmann::json j = {
        {"config_hash", io::hex64(config_hash(cfg))},
        {"seed", cfg.seed},
        {"loss_mode", to_string(cfg.optimizer.loss_mode)},
        {"aic_positives", sum.aic_positives},
        {"aic_detections", sum.aic_detections ? nlohmann::json(*sum.aic_detections) : nlohmann::json(nullptr)},
        {"detections", sum.detections},
        {"ap", ap},
        {"ap_mean", sum.ap.mean ? nlohmann::json(*sum.ap.mean) : nlohmann::json(nullptr)},
    };
    std::ofstream f(out.path("summary.json"), std::ios::binary);
    if (!f) throw ValidationError("cannot write summary.json");
    f << j.dump(2) << '\n';
  }
  return sum;
}

struct RefineSummary {
  std::vector<metrics::GainBin> iou_bins;
  std::vector<metrics::GainBin> hiou_bins;
};

inline RefineSummary cmd_refine(const RunConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  harness::SceneConfig sc = cfg.scene;
  sc.num_scenes = cfg.refine.num_scenes;
  const auto ts = harness::prepare(sc);
  harness::OptimizerConfig opt = cfg.optimizer;
  opt.steps = cfg.refine.steps;
  opt.learning_rate = cfg.refine.learning_rate;
  opt.loss_mode = harness::LossMode::harmonic_det;
  harness::TrainOptions opts;
  opts.threads = threads;
  opts.gate_samples = cfg.gate_samples;
  opts.gate_seed = cfg.seed;
  opts.gate_tolerance = cfg.gradcheck.tolerance;

  const auto r = harness::refinement_experiment(ts, opt, cfg.hyper, opts);
  RefineSummary sum{metrics::refinement_gain(r.iou_trained, cfg.refine.bin_edges),
                    metrics::refinement_gain(r.hiou_trained, cfg.refine.bin_edges)};
  Output out(cfg);
  auto f = out.open("refinement_gain.csv");
  io::write_refinement(f, sum.iou_bins, sum.hiou_bins);
  return sum;
}

}  // namespace hardet::cli
