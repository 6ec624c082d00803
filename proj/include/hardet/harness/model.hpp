#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "hardet/error.hpp"
#include "hardet/geom.hpp"

namespace hardet::harness {

inline std::vector<double> softmax(std::span<const double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) sum += p[k] = std::exp(logits[k] - top);
  for (auto& v : p) v /= sum;
  return p;
}

// dL/dz from dL/dp through p = softmax(z): p_j * (g_j - sum_k p_k g_k).
inline std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> grad_probs) {
  double dot = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) dot += probs[k] * grad_probs[k];
  std::vector<double> out(probs.size());
  for (std::size_t k = 0; k < probs.size(); ++k) out[k] = probs[k] * (grad_probs[k] - dot);
  return out;
}

/**
 * Detector head stand-in: every anchor of every scene owns its own class
 * logits and offset prediction. Anchor slot i is anchor (i % anchors_per_scene)
 * of scene (i / anchors_per_scene).
 */
class ToyModel {
 public:
  ToyModel(std::size_t num_anchors, int num_classes)
      : num_anchors_(num_anchors),
        num_classes_(num_classes),
        logits_(num_anchors * static_cast<std::size_t>(num_classes), 0.0),
        offsets_(num_anchors * 4, 0.0) {
    detail::require(num_classes >= 2, "ToyModel: num_classes must be >= 2");
  }

  std::size_t num_anchors() const { return num_anchors_; }
  int num_classes() const { return num_classes_; }
  std::size_t parameter_count() const { return logits_.size() + offsets_.size(); }

  std::span<double> logits(std::size_t i) { return {logits_.data() + i * num_classes_, static_cast<std::size_t>(num_classes_)}; }
  std::span<const double> logits(std::size_t i) const {
    return {logits_.data() + i * num_classes_, static_cast<std::size_t>(num_classes_)};
  }
  geom::Offsets offsets(std::size_t i) const {
    const double* o = offsets_.data() + 4 * i;
    return {o[0], o[1], o[2], o[3]};
  }
  std::span<double> offsets_mut(std::size_t i) { return {offsets_.data() + 4 * i, 4}; }

  std::vector<double> probs(std::size_t i) const { return softmax(logits(i)); }

  const std::vector<double>& all_logits() const { return logits_; }
  const std::vector<double>& all_offsets() const { return offsets_; }

  friend bool operator==(const ToyModel&, const ToyModel&) = default;

 private:
  std::size_t num_anchors_;
  int num_classes_;
  std::vector<double> logits_;
  std::vector<double> offsets_;
};

}  // namespace hardet::harness
