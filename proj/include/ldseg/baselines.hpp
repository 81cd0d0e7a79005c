#pragma once

// Comparison objectives for source-free adaptation: entropy minimization,
// naive argmax pseudo-labelling (optionally with entropy or a fixed confidence
// cut) and information maximization.

#include <string>
#include <string_view>

#include "ldseg/denoise.hpp"

namespace ldseg {

enum class BaselineKind { entmin, pseudo, pseudo_ent, pseudo_sel, shot_im };

struct BaselineSpec {
  BaselineKind kind = BaselineKind::entmin;
  double confidence_threshold = 0.9;  // pseudo_sel
  double tradeoff = 1.0;              // pseudo_ent
  double diversity_weight = 1.0;      // shot_im

  void validate() const;
};

std::string_view to_string(BaselineKind kind);
BaselineKind parse_baseline_kind(std::string_view name);

/// Per-term breakdown for logging. `ce` is the pseudo-label cross-entropy,
/// `ent` the mean per-pixel entropy, `div` the entropy of the batch-mean
/// prediction (shot_im only).
struct BaselineTerms {
  double ce = 0.0;
  double ent = 0.0;
  double div = 0.0;
  LossValue total;
};

/// Pseudo labels are recomputed from `preds` on every call and treated as
/// constants when differentiating.
LossValue baseline_loss(const BaselineSpec& spec, const SoftmaxMap& preds);
BaselineTerms baseline_loss_terms(const BaselineSpec& spec, const SoftmaxMap& preds);

/// Shannon entropy of the mean class distribution over valid pixels, with its
/// gradient with respect to the logits.
LossValue marginal_entropy(const SoftmaxMap& preds);

}  // namespace ldseg
