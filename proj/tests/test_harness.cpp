#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "hardet/harness.hpp"

using namespace hardet;
using namespace hardet::harness;
using Catch::Matchers::WithinAbs;

namespace {

losses::HyperParams params_for(const SceneConfig& sc) {
  losses::HyperParams hp;
  hp.num_classes = sc.num_classes;
  return hp;
}

TrainOptions no_gate() {
  TrainOptions o;
  o.gate = false;
  return o;
}

}  // namespace

TEST_CASE("SceneConfig validation") {
  SceneConfig sc;
  CHECK_NOTHROW(sc.validate());
  sc.num_scenes = 0;
  CHECK_THROWS_AS(generate_scenes(sc), ValidationError);
  sc = {};
  sc.jitter = -0.1;
  CHECK_THROWS_AS(sc.validate(), ValidationError);
  sc = {};
  sc.positive_iou_threshold = 1.0;
  CHECK_THROWS_AS(sc.validate(), ValidationError);
  sc = {};
  sc.min_objects = 3;
  sc.max_objects = 2;
  CHECK_THROWS_AS(sc.validate(), ValidationError);
  sc = {};
  sc.max_object_size = 200.0;
  CHECK_THROWS_AS(generate_scenes(sc), ValidationError);
}

TEST_CASE("generate_scenes is deterministic and stays on the canvas") {
  SceneConfig sc;
  sc.seed = 12;
  const auto a = generate_scenes(sc);
  const auto b = generate_scenes(sc);
  REQUIRE(a.scenes.size() == b.scenes.size());
  for (std::size_t s = 0; s < a.scenes.size(); ++s) {
    REQUIRE(a.scenes[s].objects.size() == b.scenes[s].objects.size());
    for (std::size_t k = 0; k < a.scenes[s].objects.size(); ++k) {
      const auto& o = a.scenes[s].objects[k];
      CHECK(o.box == b.scenes[s].objects[k].box);
      CHECK(o.class_id == b.scenes[s].objects[k].class_id);
      CHECK(o.box.x1 >= 0.0);
      CHECK(o.box.y1 >= 0.0);
      CHECK(o.box.x2 <= sc.canvas_width);
      CHECK(o.box.y2 <= sc.canvas_height);
      CHECK(o.class_id >= 1);
      CHECK(o.class_id < sc.num_classes);
    }
    CHECK(a.scenes[s].objects.size() >= 1);
    CHECK(a.scenes[s].objects.size() <= 3);
  }
  sc.seed = 13;
  const auto c = generate_scenes(sc);
  CHECK_FALSE(c.scenes[0].objects[0].box == a.scenes[0].objects[0].box);
}

TEST_CASE("anchors tile the grid") {
  SceneConfig sc;
  const auto anchors = tile_anchors(sc);
  CHECK(anchors.size() == 8u * 8u * 2u);
  CHECK(anchors[0] == Box(-4, -4, 20, 20));
  CHECK(anchors[1] == Box(-16, -16, 32, 32));
}

TEST_CASE("matched-positive IoU histogram falls from the 0.5 bin upward at seed 0") {
  SceneConfig sc;
  const auto ts = prepare(sc);
  std::vector<double> ious;
  for (const auto& m : ts.matches)
    for (const auto& a : m.positives)
      if (a.iou >= 0.5) ious.push_back(a.iou);
  const auto h = metrics::iou_histogram(ious);
  INFO("counts " << h.counts[0] << " " << h.counts[1] << " " << h.counts[2] << " " << h.counts[3] << " "
                 << h.counts[4]);
  for (std::size_t k = 1; k < h.counts.size(); ++k) CHECK(h.counts[k] <= h.counts[k - 1]);
  CHECK(h.counts[0] > h.counts[4]);
}

TEST_CASE("match_anchors examples") {
  const std::vector<Box> anchors = {Box(0, 0, 10, 10), Box(100, 100, 110, 110), Box(0, 0, 12, 10)};
  Scene scene;
  scene.objects = {{Box(0, 0, 10, 10), 2}};
  const auto m = match_anchors(scene, anchors, 0.5);
  REQUIRE(m.positives.size() == 2);
  CHECK(m.positives[0].anchor_index == 0);
  CHECK(m.positives[0].d_hat == Offsets{});
  CHECK(m.positives[0].gt_class == 2);
  CHECK(m.negatives == std::vector<std::size_t>{1});

  // Far from everything: the forced match still yields one positive per GT.
  Scene far;
  far.objects = {{Box(50, 50, 52, 52), 1}, {Box(200, 200, 201, 201), 3}};
  const std::vector<Box> grid = {Box(0, 0, 10, 10), Box(20, 20, 30, 30), Box(40, 40, 60, 60), Box(150, 150, 190, 190)};
  const auto f = match_anchors(far, grid, 0.5);
  CHECK(f.positives.size() == far.objects.size());

  CHECK_THROWS_AS(match_anchors(scene, std::vector<Box>{}, 0.5), ValidationError);
}

TEST_CASE("match_anchors partitions the anchors") {
  SceneConfig sc;
  sc.num_scenes = 40;
  sc.max_objects = 5;
  const auto set = generate_scenes(sc);
  for (const auto& scene : set.scenes) {
    const auto m = match_anchors(scene, set.anchors, sc.positive_iou_threshold);
    std::vector<int> seen(set.anchors.size(), 0);
    for (const auto& a : m.positives) {
      ++seen[a.anchor_index];
      const auto& gt = scene.objects[a.gt_index].box;
      const auto t = geom::encode(gt, set.anchors[a.anchor_index]);
      CHECK_THAT(a.d_hat.tx, WithinAbs(t.tx, 1e-12));
      CHECK_THAT(a.d_hat.th, WithinAbs(t.th, 1e-12));
    }
    for (auto a : m.negatives) ++seen[a];
    for (int v : seen) REQUIRE(v == 1);
    CHECK(m.positives.size() + m.negatives.size() == set.anchors.size());
    // Every GT owns at least one positive.
    for (std::size_t g = 0; g < scene.objects.size(); ++g) {
      bool owned = false;
      for (const auto& a : m.positives) owned = owned || a.gt_index == g;
      CHECK(owned);
    }
  }
}

TEST_CASE("softmax and its backward pass") {
  const std::vector<double> z = {1.0, -2.0, 0.5, 3.0};
  const auto p = softmax(z);
  double sum = 0.0;
  for (double v : p) sum += v;
  CHECK_THAT(sum, WithinAbs(1.0, 1e-15));
  // Large logits do not overflow.
  const auto big = softmax(std::vector<double>{1000.0, 999.0});
  CHECK(std::isfinite(big[0]));

  const std::vector<double> g = {0.3, -1.0, 2.0, 0.1};
  const auto back = softmax_backward(p, g);
  const auto fd = finite_diff_grad(
      [&](std::span<const double> x) {
        const auto q = softmax(x);
        double s = 0.0;
        for (std::size_t k = 0; k < q.size(); ++k) s += g[k] * q[k];
        return s;
      },
      z, 1e-6);
  for (std::size_t k = 0; k < z.size(); ++k) CHECK_THAT(back[k], WithinAbs(fd[k], 1e-8));
}

TEST_CASE("ToyModel layout") {
  ToyModel m(10, 4);
  CHECK(m.parameter_count() == 10u * (4u + 4u));
  CHECK(m.probs(3) == std::vector<double>(4, 0.25));
  m.logits(3)[2] = 1.0;
  m.offsets_mut(7)[1] = 0.5;
  CHECK(m.all_logits()[3 * 4 + 2] == 1.0);
  CHECK(m.offsets(7).ty == 0.5);
  CHECK_THROWS_AS(ToyModel(3, 1), ValidationError);
}

TEST_CASE("finite_diff_grad examples") {
  const std::vector<double> x = {3.0};
  const auto g = finite_diff_grad([](std::span<const double> v) { return v[0] * v[0]; }, x, 1e-6);
  CHECK_THAT(g[0], WithinAbs(6.0, 1e-6));
  const std::vector<double> y = {1.0, -2.0, 7.0};
  for (double v : finite_diff_grad([](std::span<const double>) { return 4.2; }, y)) CHECK(v == 0.0);
  CHECK_THROWS_AS(finite_diff_grad([](std::span<const double>) { return NAN; }, y), NumericalError);
  CHECK_THROWS_AS(finite_diff_grad([](std::span<const double> v) { return v[0]; }, y, 0.0), ValidationError);
}

TEST_CASE("gradcheck report") {
  losses::HyperParams hp;
  hp.num_classes = 4;
  GradcheckConfig cfg;
  cfg.samples = 100;
  const auto r = run_gradcheck(cfg, hp);
  CHECK(r.pass);
  const std::vector<std::string> names = {"harmonic_cls_grad", "harmonic_reg_grad", "full_loc_loss",
                                          "tc_loss",           "harmonic_det_loss", "softmax_chain",
                                          "batch_objective",   "iou_grad",          "decode_jacobian"};
  REQUIRE(r.entries.size() == names.size());
  for (std::size_t k = 0; k < names.size(); ++k) {
    CHECK(r.entries[k].name == names[k]);
    CHECK(r.entries[k].checked > 0);
  }
  cfg.tolerance = 0.0;
  CHECK_FALSE(run_gradcheck(cfg, hp).pass);
}

TEST_CASE("learning_rate 0 leaves the model and objective unchanged") {
  SceneConfig sc;
  sc.num_scenes = 4;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  opt.learning_rate = 0.0;
  opt.steps = 10;
  opt.log_every = 1;
  const auto init = make_model(ts, sc.num_classes);
  const auto r = train_toy(ts, init, opt, params_for(sc), no_gate());
  CHECK(r.model == init);
  REQUIRE(r.log.records.size() == 11);
  for (const auto& rec : r.log.records) CHECK(rec.objective == r.log.records[0].objective);
}

TEST_CASE("train log records and factor ranges") {
  SceneConfig sc;
  sc.num_scenes = 4;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  opt.steps = 45;
  opt.log_every = 10;
  const auto r = train_toy(ts, make_model(ts, sc.num_classes), opt, params_for(sc), no_gate());
  std::vector<int> steps;
  for (const auto& rec : r.log.records) {
    steps.push_back(rec.step);
    CHECK(rec.mean_factor_r > 1.0);
    CHECK(rec.mean_factor_r <= 2.0);
    CHECK(rec.mean_factor_c > 1.0);
    CHECK(rec.mean_factor_c <= 2.0);
    CHECK(rec.aic >= 0.0);
    CHECK(rec.aic <= 1.0);
  }
  CHECK(steps == std::vector<int>{0, 10, 20, 30, 40, 45});
}

TEST_CASE("objective decreases over the first 100 steps at seed 0") {
  SceneConfig sc;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  opt.steps = 100;
  opt.log_every = 1;
  const auto r = train_toy(ts, make_model(ts, sc.num_classes), opt, params_for(sc), no_gate());
  CHECK(r.log.records.back().objective < r.log.records.front().objective);
  int rises = 0;
  for (std::size_t k = 1; k < r.log.records.size(); ++k)
    if (r.log.records[k].objective > r.log.records[k - 1].objective) ++rises;
  CHECK(rises == 0);
}

TEST_CASE("training is deterministic and thread-count independent") {
  SceneConfig sc;
  sc.num_scenes = 6;
  sc.seed = 4;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  opt.steps = 30;
  TrainOptions one = no_gate();
  TrainOptions four = no_gate();
  four.threads = 4;
  const auto a = train_toy(ts, make_model(ts, sc.num_classes), opt, params_for(sc), one);
  const auto b = train_toy(ts, make_model(ts, sc.num_classes), opt, params_for(sc), four);
  CHECK(a.model == b.model);
  REQUIRE(a.log.records.size() == b.log.records.size());
  for (std::size_t k = 0; k < a.log.records.size(); ++k) CHECK(a.log.records[k].objective == b.log.records[k].objective);
}

TEST_CASE("divergence is reported with the step") {
  SceneConfig sc;
  sc.num_scenes = 2;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  opt.learning_rate = 1e6;
  opt.steps = 50;
  try {
    train_toy(ts, make_model(ts, sc.num_classes), opt, params_for(sc), no_gate());
    FAIL("expected a NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("the gradient gate blocks training when the oracle fails") {
  SceneConfig sc;
  sc.num_scenes = 2;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  opt.steps = 1;
  TrainOptions o;
  o.gate_samples = 8;
  o.gate_tolerance = 0.0;
  CHECK_THROWS_AS(train_toy(ts, make_model(ts, sc.num_classes), opt, params_for(sc), o), NumericalError);
  o.gate_tolerance = 1e-5;
  CHECK_NOTHROW(train_toy(ts, make_model(ts, sc.num_classes), opt, params_for(sc), o));
}

TEST_CASE("harmonic training lowers AIC and narrows the factor gap against standard") {
  SceneConfig sc;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  const auto hp = params_for(sc);
  opt.loss_mode = LossMode::harmonic_det;
  const auto h = train_toy(ts, make_model(ts, sc.num_classes), opt, hp, no_gate());
  opt.loss_mode = LossMode::standard;
  const auto s = train_toy(ts, make_model(ts, sc.num_classes), opt, hp, no_gate());
  CHECK(h.log.records.back().aic < s.log.records.back().aic);
  const auto gap = [](const TrainRecord& r) { return std::abs(r.mean_factor_r - r.mean_factor_c); };
  CHECK(gap(h.log.records.back()) < gap(h.log.records.front()));
}

TEST_CASE("harmonic-trained detections are more often confident and well localized") {
  SceneConfig sc;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  const auto hp = params_for(sc);
  const auto fraction = [&](LossMode mode) {
    opt.loss_mode = mode;
    const auto r = train_toy(ts, make_model(ts, sc.num_classes), opt, hp, no_gate());
    const auto dets = metrics::nms(detect(ts, r.model, 0.05), 0.5);
    const auto rows = metrics::consistency_scatter(dets, ground_truths(ts));
    int good = 0;
    for (const auto& row : rows)
      if (row.score >= 0.8 && row.iou >= 0.8) ++good;
    return static_cast<double>(good) / static_cast<double>(rows.size());
  };
  CHECK(fraction(LossMode::harmonic_det) > fraction(LossMode::standard));
}

TEST_CASE("refinement_pairs") {
  SceneConfig sc;
  sc.num_scenes = 5;
  const auto ts = prepare(sc);
  const auto init = make_model(ts, sc.num_classes);
  const auto pairs = refinement_pairs(ts, init);
  CHECK(pairs.size() == ts.num_positives);
  for (const auto& p : pairs) CHECK(p.iou_after == p.iou_before);
  for (const auto& b : metrics::refinement_gain(pairs))
    if (b.mean_gain) CHECK(*b.mean_gain == 0.0);
}

TEST_CASE("HIoU refinement gain at [0.8, 0.9) is at least the plain IoU gain") {
  SceneConfig sc;
  sc.num_scenes = 64;
  const auto ts = prepare(sc);
  OptimizerConfig opt;
  opt.steps = 100;
  const auto r = refinement_experiment(ts, opt, params_for(sc), no_gate());
  CHECK(r.iou_trained.size() == ts.num_positives);
  const auto gi = metrics::refinement_gain(r.iou_trained);
  const auto gh = metrics::refinement_gain(r.hiou_trained);
  REQUIRE(gi[3].mean_gain.has_value());
  REQUIRE(gh[3].mean_gain.has_value());
  CHECK(*gh[3].mean_gain >= *gi[3].mean_gain);
}

TEST_CASE("detect and ground_truths") {
  SceneConfig sc;
  sc.num_scenes = 3;
  const auto ts = prepare(sc);
  const auto init = make_model(ts, sc.num_classes);
  // Uniform probs: every anchor scores 1/C.
  const auto all = detect(ts, init, 0.0);
  CHECK(all.size() == ts.num_anchors());
  CHECK(detect(ts, init, 0.3).empty());
  for (const auto& d : all) {
    CHECK(d.class_id == 1);
    CHECK(d.score == 0.25);
  }
  std::size_t objects = 0;
  for (const auto& s : ts.scenes.scenes) objects += s.objects.size();
  CHECK(ground_truths(ts).size() == objects);
}
