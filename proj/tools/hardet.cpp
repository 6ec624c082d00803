// hardet: experiment CLI.
//
//   hardet gradcheck [--config F] [--seed N] [--out D] [--tolerance T] [--samples N]
//   hardet loss-eval SAMPLES.jsonl [--config F] [--loss-mode M]
//   hardet surface   [--mode standard|harmonic]
//   hardet train     [--loss-mode M] [--steps N] [--lr X]
//   hardet refine    [--steps N] [--num-scenes N]
//
// Exit status: 0 ok, 1 bad input or config, 2 numerical failure.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "hardet/cli.hpp"

namespace {

using namespace hardet;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> loss_mode;
  std::optional<std::string> surface_mode;
  std::optional<double> tolerance;
  std::optional<int> samples;
  std::optional<int> steps;
  std::optional<double> lr;
  std::optional<int> num_scenes;
  std::string samples_path;
};

RunConfig load(const Flags& f) {
  RunConfig cfg;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ValidationError("cannot read config '" + f.config + "'");
    cfg = read_config(in);
  }
  // Flags win over the file.
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out = *f.out;
  if (f.loss_mode) {
    if (*f.loss_mode == "standard") cfg.optimizer.loss_mode = harness::LossMode::standard;
    else if (*f.loss_mode == "harmonic_det") cfg.optimizer.loss_mode = harness::LossMode::harmonic_det;
    else throw ValidationError("--loss-mode: expected standard or harmonic_det");
  }
  if (f.surface_mode) {
    if (*f.surface_mode == "standard") cfg.surface.mode = losses::SurfaceMode::standard;
    else if (*f.surface_mode == "harmonic") cfg.surface.mode = losses::SurfaceMode::harmonic;
    else throw ValidationError("--mode: expected standard or harmonic");
  }
  if (f.tolerance) cfg.gradcheck.tolerance = *f.tolerance;
  if (f.samples) cfg.gradcheck.samples = *f.samples;
  if (f.steps) cfg.optimizer.steps = cfg.refine.steps = *f.steps;
  if (f.lr) cfg.optimizer.learning_rate = cfg.refine.learning_rate = *f.lr;
  if (f.num_scenes) cfg.refine.num_scenes = *f.num_scenes;
  cfg.sync();
  cfg.validate();
  return cfg;
}

void common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON config file");
  sub->add_option("--seed", f.seed, "seed override");
  sub->add_option("--out", f.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HarmonicDet loss library experiments"};
  app.require_subcommand(1);
  Flags f;

  auto* gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  common(gc, f);
  gc->add_option("--tolerance", f.tolerance, "max error");
  gc->add_option("--samples", f.samples, "random samples per term");
  gc->add_option("--loss-mode", f.loss_mode, "standard | harmonic_det");

  auto* le = app.add_subcommand("loss-eval", "LossBreakdown JSONL for a sample JSONL file");
  common(le, f);
  le->add_option("samples", f.samples_path, "sample JSONL ('-' for stdin)")->required();
  le->add_option("--loss-mode", f.loss_mode, "standard | harmonic_det");

  auto* sf = app.add_subcommand("surface", "d loss / d p over a (p, loc) grid");
  common(sf, f);
  sf->add_option("--mode", f.surface_mode, "standard | harmonic");

  auto* tr = app.add_subcommand("train", "toy training run plus evaluation");
  common(tr, f);
  tr->add_option("--loss-mode", f.loss_mode, "standard | harmonic_det");
  tr->add_option("--steps", f.steps, "gradient steps");
  tr->add_option("--lr", f.lr, "learning rate");

  auto* rf = app.add_subcommand("refine", "IoU vs HIoU refinement gain");
  common(rf, f);
  rf->add_option("--steps", f.steps, "gradient steps");
  rf->add_option("--lr", f.lr, "learning rate");
  rf->add_option("--num-scenes", f.num_scenes, "scene count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    const RunConfig cfg = load(f);
    if (gc->parsed()) {
      return cli::cmd_gradcheck(cfg, std::cout).pass ? 0 : 2;
    }
    if (le->parsed()) {
      if (f.samples_path == "-") {
        cli::cmd_loss_eval(std::cin, cfg, std::cout);
      } else {
        std::ifstream in(f.samples_path);
        if (!in) throw ValidationError("cannot read '" + f.samples_path + "'");
        cli::cmd_loss_eval(in, cfg, std::cout);
      }
      return 0;
    }
    if (sf->parsed()) {
      cli::cmd_surface(cfg);
      return 0;
    }
    if (tr->parsed()) {
      const auto s = cli::cmd_train(cfg, cli::thread_count());
      std::cout << "aic_positives=" << io::format_double(s.aic_positives);
      if (s.ap.mean) std::cout << " ap_mean=" << io::format_double(*s.ap.mean);
      std::cout << '\n';
      return 0;
    }
    if (rf->parsed()) {
      const auto s = cli::cmd_refine(cfg, cli::thread_count());
      for (std::size_t k = 0; k < s.iou_bins.size(); ++k) {
        const auto show = [](const std::optional<double>& v) { return v ? io::format_double(*v) : std::string("-"); };
        std::cout << '[' << s.iou_bins[k].lo << ", " << s.iou_bins[k].hi << ") n=" << s.iou_bins[k].count
                  << " iou=" << show(s.iou_bins[k].mean_gain) << " hiou=" << show(s.hiou_bins[k].mean_gain) << '\n';
      }
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
