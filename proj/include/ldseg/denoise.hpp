#pragma once

// Label-denoising core: class-balanced pseudo-label selection, mid-rank
// complementary labels and the positive/negative learning objectives.
//
// Every loss reports its value and its gradient with respect to the logits
// that produced the SoftmaxMap, so callers can backpropagate without an
// autodiff engine.

#include <cstdint>
#include <span>
#include <vector>

#include "ldseg/softmax_map.hpp"

namespace ldseg {

/// Lower clamp applied to every log argument.
inline constexpr double kLogEps = 1e-7;

enum class LossReduction { mean, sum };

struct ClassThresholds {
  /// Strictly above any probability, so `conf >= kUnselectable` never holds.
  static constexpr double kUnselectable = 2.0;

  std::vector<double> delta;
  double alpha = 0.2;

  int classes() const { return static_cast<int>(delta.size()); }
  bool selectable(int c) const { return delta[static_cast<std::size_t>(c)] <= 1.0; }
};

struct PseudoLabelSelection {
  MapShape shape;  // classes field carries C
  std::vector<std::uint8_t> pseudo_labels;
  std::vector<std::uint8_t> selected;
  std::vector<double> confidences;

  std::size_t selected_count() const;
};

struct ComplementaryLabelMap {
  MapShape shape;
  std::vector<std::uint8_t> comp_labels;
  std::vector<std::uint8_t> ranks;  // sampled K, 1-based
  int epsilon = 0;
};

struct LossValue {
  double value = 0.0;
  std::vector<double> grad_logits;  // empty when not requested
};

/// Selected-pixel CE, entropy and negative terms of the combined objective.
struct LdTerms {
  double sce = 0.0;
  double ent = 0.0;
  double neg = 0.0;
  LossValue total;
};

struct LdWeights {
  double sce = 1.0;
  double ent = 1.0;
  double neg = 1.0;
};

/// Band the sampled rank K is drawn from, around floor(C/2).
enum class HclsBand {
  symmetric,   // [C/2 - eps, C/2 + eps]
  lower_only,  // [C/2 - eps, C/2]
};

// ---------------------------------------------------------------------------
// Pseudo-label selection

/// Per-class cutoff: the ceil(alpha * N_c)-th largest argmax confidence among
/// pixels whose argmax is c. Classes without pixels are unselectable.
ClassThresholds compute_class_thresholds(const SoftmaxMap& preds, double alpha);

/// Same rule on precomputed argmax labels and confidences. Used by the trainer,
/// which streams a whole split through the network without keeping every
/// probability vector.
ClassThresholds compute_class_thresholds(std::span<const std::uint8_t> labels,
                                         std::span<const double> confidences,
                                         std::span<const std::uint8_t> valid, int classes,
                                         double alpha);

PseudoLabelSelection select_pseudo_labels(const SoftmaxMap& preds, const ClassThresholds& thresholds);

/// Argmax labels and confidences without applying any threshold.
PseudoLabelSelection argmax_labels(const SoftmaxMap& preds);

/// Applies thresholds in place: selected = valid && conf >= delta[label].
void apply_thresholds(PseudoLabelSelection& sel, const ClassThresholds& thresholds,
                      std::span<const std::uint8_t> valid);

// ---------------------------------------------------------------------------
// Complementary labels

/// Largest epsilon satisfying the sampling preconditions for C classes, or -1
/// when no epsilon works (C < 4).
int max_hcls_epsilon(int classes, HclsBand band = HclsBand::symmetric);

/// Throws ConfigError naming the violated bound.
void check_hcls_preconditions(int classes, int epsilon, HclsBand band = HclsBand::symmetric);

/// Draws K per pixel uniformly from the band and returns the class holding
/// descending rank K. The draw for pixel (b,h,w) depends only on
/// (rng_seed, b, h, w), so results do not depend on evaluation order.
ComplementaryLabelMap hcls_sample(const SoftmaxMap& preds, int epsilon, std::uint64_t rng_seed,
                                  HclsBand band = HclsBand::symmetric);

// ---------------------------------------------------------------------------
// Losses

LossValue loss_sce(const SoftmaxMap& preds, const PseudoLabelSelection& sel,
                   LossReduction reduction = LossReduction::mean);

LossValue loss_ent(const SoftmaxMap& preds, LossReduction reduction = LossReduction::mean);

LossValue loss_pos(const SoftmaxMap& preds, const PseudoLabelSelection& sel, double lambda_ent,
                   LossReduction reduction = LossReduction::mean);

LossValue loss_neg(const SoftmaxMap& preds, const ComplementaryLabelMap& comp,
                   LossReduction reduction = LossReduction::mean);

LossValue loss_ld(const SoftmaxMap& preds, const PseudoLabelSelection& sel,
                  const ComplementaryLabelMap& comp, double lambda_ent, double lambda_neg,
                  LossReduction reduction = LossReduction::mean);

/// Weighted combination with the unweighted components reported separately.
/// A zero weight skips that component entirely (reported as 0).
LdTerms loss_ld_terms(const SoftmaxMap& preds, const PseudoLabelSelection& sel,
                      const ComplementaryLabelMap* comp, const LdWeights& weights,
                      LossReduction reduction = LossReduction::mean);

// ---------------------------------------------------------------------------
// Gradient plumbing shared with the baselines

/// Converts dL/dp (per pixel, per class) to dL/dlogits through the softmax
/// Jacobian: g_z[k] = p[k] * (g_p[k] - sum_c p[c] g_p[c]).
std::vector<double> grad_probs_to_logits(const SoftmaxMap& preds, std::span<const double> grad_probs);

void add_scaled(std::vector<double>& acc, std::span<const double> v, double scale);

}  // namespace ldseg
