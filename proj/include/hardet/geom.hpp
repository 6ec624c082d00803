#pragma once

/* Axis-aligned box geometry: IoU and its gradient, anchor offset
 * encoding/decoding and the decode Jacobian. */

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "hardet/error.hpp"

namespace hardet::geom {

using Vec4 = std::array<double, 4>;
// Row-major; row r is the gradient of output r.
using Mat4 = std::array<Vec4, 4>;

inline constexpr double kDefaultExpCap = 16.0;

/**
 * Corner-form box (x1, y1) top-left, (x2, y2) bottom-right.
 * Construction rejects inverted or non-finite corners.
 */
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  constexpr Box() = default;
  Box(double x1_, double y1_, double x2_, double y2_) : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
    detail::require(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2),
                    "Box: non-finite coordinate");
    detail::require(x1 <= x2 && y1 <= y2, "Box: expected x1 <= x2 and y1 <= y2");
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool degenerate() const { return !(width() > 0.0 && height() > 0.0); }

  Box translated(double dx, double dy) const { return {x1 + dx, y1 + dy, x2 + dx, y2 + dy}; }
  Vec4 corners() const { return {x1, y1, x2, y2}; }
  static Box from_corners(const Vec4& c) { return {c[0], c[1], c[2], c[3]}; }

  friend bool operator==(const Box&, const Box&) = default;
};

struct Offsets {
  double tx = 0.0;
  double ty = 0.0;
  double tw = 0.0;
  double th = 0.0;

  Vec4 as_array() const { return {tx, ty, tw, th}; }
  static Offsets from_array(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }
  bool finite() const {
    return std::isfinite(tx) && std::isfinite(ty) && std::isfinite(tw) && std::isfinite(th);
  }

  friend bool operator==(const Offsets&, const Offsets&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

// Zero when the union is empty (both boxes degenerate).
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/**
 * Gradient of iou(a, b) with respect to a's corners (x1, y1, x2, y2), b held fixed.
 *
 * Kinks are resolved one-sidedly. When an edge of a coincides with the matching
 * edge of b, b's edge is taken as the binding one (the derivative in the
 * direction that widens a past b). When the boxes touch along an edge with zero
 * overlap, the derivative is taken from the overlapping side. A strictly
 * positive gap on either axis gives the zero vector.
 */
inline Vec4 iou_grad(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (!(uni > 0.0)) throw ValidationError("iou_grad: degenerate union");

  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw < 0.0 || ih < 0.0 || (iw == 0.0 && ih == 0.0)) return {0.0, 0.0, 0.0, 0.0};

  // d(iw)/d(a corner): the edge of a only matters while it is the inner one.
  const double dw_dx1 = a.x1 > b.x1 ? -1.0 : 0.0;
  const double dw_dx2 = a.x2 < b.x2 ? 1.0 : 0.0;
  const double dh_dy1 = a.y1 > b.y1 ? -1.0 : 0.0;
  const double dh_dy2 = a.y2 < b.y2 ? 1.0 : 0.0;

  const Vec4 d_inter = {ih * dw_dx1, iw * dh_dy1, ih * dw_dx2, iw * dh_dy2};
  const Vec4 d_area = {-a.height(), -a.width(), a.height(), a.width()};

  // d(I/U) = (dI * U - I * (dA - dI)) / U^2
  Vec4 g{};
  const double u2 = uni * uni;
  for (int k = 0; k < 4; ++k) g[k] = (d_inter[k] * (uni + inter) - inter * d_area[k]) / u2;
  return g;
}

/// Offsets of `gt` relative to `anchor` in (cx, cy, log w, log h) form.
inline Offsets encode(const Box& gt, const Box& anchor) {
  detail::require(!anchor.degenerate(), "encode: degenerate anchor");
  detail::require(!gt.degenerate(), "encode: degenerate ground-truth box");
  const double wa = anchor.width();
  const double ha = anchor.height();
  return {(gt.cx() - anchor.cx()) / wa, (gt.cy() - anchor.cy()) / ha, std::log(gt.width() / wa),
          std::log(gt.height() / ha)};
}

inline void check_decodable(const Offsets& d, const Box& anchor, double exp_cap) {
  detail::require(!anchor.degenerate(), "decode: degenerate anchor");
  if (!d.finite()) throw NumericalError("decode: non-finite offsets");
  if (std::abs(d.tw) > exp_cap || std::abs(d.th) > exp_cap) {
    throw NumericalError("decode: |tw| or |th| exceeds exp cap " + std::to_string(exp_cap));
  }
}

inline Box decode(const Offsets& d, const Box& anchor, double exp_cap = kDefaultExpCap) {
  check_decodable(d, anchor, exp_cap);
  const double wa = anchor.width();
  const double ha = anchor.height();
  const double cx = anchor.cx() + d.tx * wa;
  const double cy = anchor.cy() + d.ty * ha;
  const double hw = 0.5 * wa * std::exp(d.tw);
  const double hh = 0.5 * ha * std::exp(d.th);
  return {cx - hw, cy - hh, cx + hw, cy + hh};
}

// Rows: decoded (x1, y1, x2, y2). Columns: (tx, ty, tw, th).
inline Mat4 decode_jacobian(const Offsets& d, const Box& anchor, double exp_cap = kDefaultExpCap) {
  check_decodable(d, anchor, exp_cap);
  const double wa = anchor.width();
  const double ha = anchor.height();
  const double hw = 0.5 * wa * std::exp(d.tw);
  const double hh = 0.5 * ha * std::exp(d.th);
  return {{
      {wa, 0.0, -hw, 0.0},
      {0.0, ha, 0.0, -hh},
      {wa, 0.0, hw, 0.0},
      {0.0, ha, 0.0, hh},
  }};
}

// J^T * v: pulls a corner-space gradient back to offset space.
inline Vec4 pullback(const Mat4& jac, const Vec4& corner_grad) {
  Vec4 out{};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) out[c] += jac[r][c] * corner_grad[r];
  return out;
}

}  // namespace hardet::geom
