#pragma once

/* Central finite differences and the analytic-vs-numeric gradient suite that
 * gates training. */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hardet/detail/rng.hpp"
#include "hardet/error.hpp"
#include "hardet/geom.hpp"
#include "hardet/harness/model.hpp"
#include "hardet/losses.hpp"

namespace hardet::harness {

using geom::Box;
using geom::Offsets;
using ScalarFn = std::function<double(std::span<const double>)>;

// (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate k.
inline std::vector<double> finite_diff_grad(const ScalarFn& fn, std::span<const double> params, double h = 1e-6) {
  detail::require(h > 0.0, "finite_diff_grad: h must be > 0");
  std::vector<double> x(params.begin(), params.end());
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = x[k];
    x[k] = saved + h;
    const double up = fn(x);
    x[k] = saved - h;
    const double down = fn(x);
    x[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(k));
    }
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

// |a - n| / max(1, |a|, |n|): relative for large gradients, absolute near zero.
inline double gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

// ---------------------------------------------------------------------------
// Random non-kink samples

struct RandomSample {
  std::vector<double> logits;
  losses::PositiveSample sample;
};

/**
 * Draws positive samples whose decoded box overlaps the ground truth and that
 * sit at least `kink_distance` away from every non-differentiable point: the
 * smooth-L1 breakpoints, coinciding or touching box edges (scaled by anchor
 * size), the TC hinge and the sign change of p - IoU.
 */
class SampleGenerator {
 public:
  SampleGenerator(std::uint64_t seed, const losses::HyperParams& hp, double kink_distance = 1e-3)
      : rng_(seed), hp_(hp), kink_(kink_distance) {}

  RandomSample next() {
    for (;;) {
      if (auto s = try_draw()) return *std::move(s);
    }
  }

 private:
  std::optional<RandomSample> try_draw() {
    const int c = hp_.num_classes;
    RandomSample out;
    out.logits.resize(c);
    for (auto& z : out.logits) z = 1.5 * rng_.normal();
    auto& s = out.sample;
    s.probs = softmax(out.logits);
    s.gt_class = rng_.between(0, c - 1);
    const double p = s.probs[s.gt_class];
    if (p < 0.01 || p > 0.99) return std::nullopt;

    const double cx = rng_.uniform(0.0, 100.0);
    const double cy = rng_.uniform(0.0, 100.0);
    const double w = rng_.uniform(10.0, 60.0);
    const double h = rng_.uniform(10.0, 60.0);
    s.anchor = Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
    const Offsets truth{rng_.uniform(-0.3, 0.3), rng_.uniform(-0.3, 0.3), rng_.uniform(-0.4, 0.4),
                        rng_.uniform(-0.4, 0.4)};
    s.gt_box = geom::decode(truth, s.anchor);
    s.d_hat = geom::encode(s.gt_box, s.anchor);
    // Mostly quadratic-branch errors, with a tail reaching the linear branch.
    const double spread = rng_.uniform() < 0.25 ? 1.2 : 0.35;
    s.d = {s.d_hat.tx + spread * rng_.normal(), s.d_hat.ty + spread * rng_.normal(),
           s.d_hat.tw + 0.5 * spread * rng_.normal(), s.d_hat.th + 0.5 * spread * rng_.normal()};

    const auto dv = s.d.as_array();
    const auto tv = s.d_hat.as_array();
    for (int k = 0; k < 4; ++k)
      if (std::abs(std::abs(dv[k] - tv[k]) - 1.0) < kink_) return std::nullopt;

    const Box pred = geom::decode(s.d, s.anchor, hp_.exp_cap);
    const double scale = std::min(s.anchor.width(), s.anchor.height());
    const auto pc = pred.corners();
    const auto gc = s.gt_box.corners();
    for (int k = 0; k < 4; ++k)
      if (std::abs(pc[k] - gc[k]) < kink_ * scale) return std::nullopt;
    const double iw = std::min(pred.x2, s.gt_box.x2) - std::max(pred.x1, s.gt_box.x1);
    const double ih = std::min(pred.y2, s.gt_box.y2) - std::max(pred.y1, s.gt_box.y1);
    if (iw < kink_ * scale || ih < kink_ * scale) return std::nullopt;

    const double gap = std::abs(p - geom::iou(pred, s.gt_box));
    if (gap < kink_ || std::abs(gap - hp_.margin) < kink_) return std::nullopt;
    return out;
  }

  detail::Rng rng_;
  losses::HyperParams hp_;
  double kink_;
};

// ---------------------------------------------------------------------------
// Suite

struct GradcheckConfig {
  std::uint64_t seed = 0;
  int samples = 500;
  double h = 1e-6;
  double tolerance = 1e-5;
  double kink_distance = 1e-3;
  int batch_size = 4;
  int batch_negatives = 3;
};

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;  // analytic/numeric component pairs compared
  double max_error = 0.0;   // gradient_error
  double max_abs_error = 0.0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;
  bool pass = true;
};

namespace detail_gc {

inline void accumulate(GradcheckEntry& e, std::span<const double> analytic, std::span<const double> numeric) {
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    e.max_error = std::max(e.max_error, gradient_error(analytic[k], numeric[k]));
    e.max_abs_error = std::max(e.max_abs_error, std::abs(analytic[k] - numeric[k]));
    ++e.checked;
  }
}

inline losses::PositiveSample with_offsets(losses::PositiveSample s, std::span<const double> x, std::size_t at = 0) {
  s.d = {x[at], x[at + 1], x[at + 2], x[at + 3]};
  return s;
}

// With a stop-gradient on the entropy weight, the analytic gradient is that of
// the loss with the weight frozen at the base point; rescaling the TC term by
// (1 + beta_e(x)) / (1 + beta_e(x0)) gives exactly that function.
inline double frozen_total(const losses::LossBreakdown& b, double base_beta_e, const losses::HyperParams& hp) {
  if (!hp.beta_e_stop_grad) return b.total;
  return b.total - b.tc + b.tc * (1.0 + b.beta_e) / (1.0 + base_beta_e);
}

}  // namespace detail_gc

inline GradcheckReport run_gradcheck(const GradcheckConfig& cfg, const losses::HyperParams& hp) {
  hp.validate();
  detail::require(cfg.samples >= 1, "gradcheck: samples must be >= 1");
  detail::require(cfg.batch_size >= 1 && cfg.batch_negatives >= 0, "gradcheck: bad batch shape");
  using namespace detail_gc;
  using losses::PositiveSample;

  GradcheckEntry cls{"harmonic_cls_grad"}, reg{"harmonic_reg_grad"}, loc{"full_loc_loss"}, tc{"tc_loss"},
      det{"harmonic_det_loss"}, chain{"softmax_chain"}, batch{"batch_objective"}, iou_g{"iou_grad"},
      jac{"decode_jacobian"};

  SampleGenerator gen(cfg.seed, hp, cfg.kink_distance);
  const double h = cfg.h;

  for (int n = 0; n < cfg.samples; ++n) {
    const RandomSample rs = gen.next();
    const PositiveSample& s = rs.sample;
    const auto d0 = s.d.as_array();
    const int g = s.gt_class;

    // Classification gradient in closed form, loc held fixed.
    {
      const double loc_val = losses::harmonic_loc(s, hp).value;
      const double p0 = s.probs[g];
      const std::vector<double> x{p0};
      const auto num = finite_diff_grad(
          [&](std::span<const double> v) { return losses::harmonic_terms(-std::log(v[0]), loc_val).value; }, x, h);
      const double ana = losses::harmonic_cls_grad(s, loc_val, hp.prob_floor);
      // Relative, without the unit floor: |grad| >= 1 on this domain.
      cls.max_error = std::max(cls.max_error, std::abs(ana - num[0]) / std::abs(num[0]));
      cls.max_abs_error = std::max(cls.max_abs_error, std::abs(ana - num[0]));
      ++cls.checked;
    }

    // Regression side of the harmonic loss.
    {
      const auto num = finite_diff_grad(
          [&](std::span<const double> x) {
            const auto t = with_offsets(s, x);
            return losses::harmonic_loss(t, hp, losses::harmonic_loc(t, hp).value).value;
          },
          d0, h);
      accumulate(reg, losses::harmonic_reg_grad(s, hp), num);
    }

    // Full localization loss.
    {
      const auto num = finite_diff_grad(
          [&](std::span<const double> x) { return losses::full_loc_loss(with_offsets(s, x), hp).value; }, d0, h);
      accumulate(loc, losses::full_loc_loss(s, hp).grad_d, num);
    }

    // TC over (probs, d).
    const std::size_t c = s.probs.size();
    std::vector<double> joint(s.probs);
    joint.insert(joint.end(), d0.begin(), d0.end());
    const auto unpack = [&](std::span<const double> x) {
      PositiveSample t = with_offsets(s, x, c);
      t.probs.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(c));
      return t;
    };
    {
      const auto base = losses::tc_loss(s, hp);
      const auto num = finite_diff_grad(
          [&](std::span<const double> x) {
            const auto r = losses::tc_loss(unpack(x), hp);
            return hp.beta_e_stop_grad ? r.value * (1.0 + r.beta_e) / (1.0 + base.beta_e) : r.value;
          },
          joint, h);
      std::vector<double> ana(base.grad_probs);
      ana.insert(ana.end(), base.grad_d.begin(), base.grad_d.end());
      accumulate(tc, ana, num);
    }

    // Whole per-sample objective over (probs, d).
    const auto base = losses::harmonic_det_loss(s, hp);
    {
      const auto num = finite_diff_grad(
          [&](std::span<const double> x) { return frozen_total(losses::harmonic_det_loss(unpack(x), hp), base.beta_e, hp); },
          joint, h);
      std::vector<double> ana(base.grad_probs);
      ana.insert(ana.end(), base.grad_d.begin(), base.grad_d.end());
      accumulate(det, ana, num);
    }

    // Same objective through the softmax, as the harness trains it.
    {
      const auto num = finite_diff_grad(
          [&](std::span<const double> z) {
            PositiveSample t = s;
            t.probs = softmax(z);
            return frozen_total(losses::harmonic_det_loss(t, hp), base.beta_e, hp);
          },
          rs.logits, h);
      accumulate(chain, softmax_backward(s.probs, base.grad_probs), num);
    }

    // Geometry: IoU of the decoded box and the decode Jacobian.
    {
      const Box pred = geom::decode(s.d, s.anchor, hp.exp_cap);
      const auto corners = pred.corners();
      const auto num = finite_diff_grad(
          [&](std::span<const double> x) { return geom::iou(Box(x[0], x[1], x[2], x[3]), s.gt_box); }, corners, h);
      accumulate(iou_g, geom::iou_grad(pred, s.gt_box), num);

      const auto j = geom::decode_jacobian(s.d, s.anchor, hp.exp_cap);
      for (int r = 0; r < 4; ++r) {
        const auto num_row = finite_diff_grad(
            [&](std::span<const double> x) {
              return geom::decode(Offsets::from_array({x[0], x[1], x[2], x[3]}), s.anchor, hp.exp_cap).corners()[r];
            },
            d0, h);
        accumulate(jac, j[r], num_row);
      }
    }
  }

  // Batches of fresh samples plus negatives; coordinates are every sample's
  // (probs, d) followed by every negative's probs.
  const int batches = std::max(1, cfg.samples / cfg.batch_size);
  detail::Rng neg_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  for (int n = 0; n < batches; ++n) {
    std::vector<PositiveSample> pos;
    for (int k = 0; k < cfg.batch_size; ++k) pos.push_back(gen.next().sample);
    std::vector<losses::NegativeSample> neg;
    for (int k = 0; k < cfg.batch_negatives; ++k) {
      std::vector<double> z(hp.num_classes);
      for (auto& v : z) v = 1.5 * neg_rng.normal();
      neg.push_back({softmax(z), 0});
    }
    const std::size_t c = static_cast<std::size_t>(hp.num_classes);
    std::vector<double> x0;
    for (const auto& s : pos) {
      x0.insert(x0.end(), s.probs.begin(), s.probs.end());
      const auto d = s.d.as_array();
      x0.insert(x0.end(), d.begin(), d.end());
    }
    for (const auto& s : neg) x0.insert(x0.end(), s.probs.begin(), s.probs.end());

    const auto base = losses::batch_objective(pos, neg, hp);
    const auto rebuild = [&](std::span<const double> x) {
      auto p = pos;
      auto q = neg;
      std::size_t at = 0;
      for (auto& s : p) {
        s.probs.assign(x.begin() + at, x.begin() + at + c);
        at += c;
        s.d = {x[at], x[at + 1], x[at + 2], x[at + 3]};
        at += 4;
      }
      for (auto& s : q) {
        s.probs.assign(x.begin() + at, x.begin() + at + c);
        at += c;
      }
      return std::pair{p, q};
    };
    const auto num = finite_diff_grad(
        [&](std::span<const double> x) {
          const auto [p, q] = rebuild(x);
          const auto r = losses::batch_objective(p, q, hp);
          double acc = 0.0;
          for (std::size_t i = 0; i < r.positives.size(); ++i)
            acc += frozen_total(r.positives[i], base.positives[i].beta_e, hp);
          for (const auto& s : q) acc += losses::cross_entropy(s.probs, s.gt_class, hp.prob_floor);
          return acc * r.normalizer;
        },
        x0, h);
    std::vector<double> ana;
    for (const auto& b : base.positives) {
      for (double v : b.grad_probs) ana.push_back(v * base.normalizer);
      for (double v : b.grad_d) ana.push_back(v * base.normalizer);
    }
    for (const auto& gneg : base.negative_grads)
      for (double v : gneg) ana.push_back(v * base.normalizer);
    accumulate(batch, ana, num);
  }

  GradcheckReport report;
  report.tolerance = cfg.tolerance;
  report.entries = {cls, reg, loc, tc, det, chain, batch, iou_g, jac};
  for (auto& e : report.entries) {
    e.pass = e.max_error < cfg.tolerance;
    report.pass = report.pass && e.pass;
  }
  return report;
}

}  // namespace hardet::harness
