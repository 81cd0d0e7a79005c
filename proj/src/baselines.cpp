#include "ldseg/baselines.hpp"

#include <cmath>
#include <string>

#include "ldseg/errors.hpp"

namespace ldseg {

void BaselineSpec::validate() const {
  if (!(confidence_threshold > 0.0 && confidence_threshold < 1.0)) {
    throw ConfigError("confidence_threshold must lie in (0, 1), got " + std::to_string(confidence_threshold));
  }
  if (!std::isfinite(tradeoff) || tradeoff < 0.0) throw ConfigError("tradeoff must be a non-negative number");
  if (!std::isfinite(diversity_weight) || diversity_weight < 0.0) {
    throw ConfigError("diversity_weight must be a non-negative number");
  }
}

std::string_view to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::entmin: return "entmin";
    case BaselineKind::pseudo: return "pseudo";
    case BaselineKind::pseudo_ent: return "pseudo_ent";
    case BaselineKind::pseudo_sel: return "pseudo_sel";
    case BaselineKind::shot_im: return "shot_im";
  }
  return "unknown";
}

BaselineKind parse_baseline_kind(std::string_view name) {
  for (auto k : {BaselineKind::entmin, BaselineKind::pseudo, BaselineKind::pseudo_ent, BaselineKind::pseudo_sel,
                 BaselineKind::shot_im}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError("unknown baseline kind '" + std::string(name) + "'");
}

LossValue marginal_entropy(const SoftmaxMap& preds) {
  const auto C = static_cast<std::size_t>(preds.classes());
  const std::size_t n = preds.valid_count();
  LossValue out;
  out.grad_logits.assign(preds.data().size(), 0.0);
  if (n == 0) return out;

  std::vector<double> mean(C, 0.0);
  for (std::size_t i = 0; i < preds.pixels(); ++i) {
    if (!preds.valid(i)) continue;
    const auto p = preds.pixel(i);
    for (std::size_t c = 0; c < C; ++c) mean[c] += p[c];
  }
  for (auto& m : mean) m /= static_cast<double>(n);

  // H(m) = -sum m log max(m, eps); dH/dm_c, then dm_c/dp_ic = 1/n.
  std::vector<double> dm(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mean[c] >= kLogEps) {
      const double lm = std::log(mean[c]);
      out.value -= mean[c] * lm;
      dm[c] = -(lm + 1.0) / static_cast<double>(n);
    } else {
      out.value -= mean[c] * std::log(kLogEps);
      dm[c] = -std::log(kLogEps) / static_cast<double>(n);
    }
  }
  std::vector<double> gp(preds.data().size(), 0.0);
  for (std::size_t i = 0; i < preds.pixels(); ++i) {
    if (!preds.valid(i)) continue;
    for (std::size_t c = 0; c < C; ++c) gp[i * C + c] = dm[c];
  }
  out.grad_logits = grad_probs_to_logits(preds, gp);
  return out;
}

BaselineTerms baseline_loss_terms(const BaselineSpec& spec, const SoftmaxMap& preds) {
  spec.validate();
  BaselineTerms t;
  auto& total = t.total;
  total.grad_logits.assign(preds.data().size(), 0.0);

  auto add = [&total](const LossValue& l, double w) {
    total.value += w * l.value;
    add_scaled(total.grad_logits, l.grad_logits, w);
  };
  auto pseudo_ce = [&](double min_confidence) {
    auto sel = argmax_labels(preds);
    for (std::size_t i = 0; i < sel.selected.size(); ++i) {
      sel.selected[i] = preds.valid(i) && sel.confidences[i] >= min_confidence;
    }
    return loss_sce(preds, sel);
  };

  switch (spec.kind) {
    case BaselineKind::entmin: {
      const auto l = loss_ent(preds);
      t.ent = l.value;
      add(l, 1.0);
      break;
    }
    case BaselineKind::pseudo: {
      const auto l = pseudo_ce(0.0);
      t.ce = l.value;
      add(l, 1.0);
      break;
    }
    case BaselineKind::pseudo_ent: {
      const auto ce = pseudo_ce(0.0);
      t.ce = ce.value;
      add(ce, 1.0);
      if (spec.tradeoff != 0.0) {
        const auto ent = loss_ent(preds);
        t.ent = ent.value;
        add(ent, spec.tradeoff);
      }
      break;
    }
    case BaselineKind::pseudo_sel: {
      const auto l = pseudo_ce(spec.confidence_threshold);
      t.ce = l.value;
      add(l, 1.0);
      break;
    }
    case BaselineKind::shot_im: {
      const auto ent = loss_ent(preds);
      t.ent = ent.value;
      add(ent, 1.0);
      const auto div = marginal_entropy(preds);
      t.div = div.value;
      add(div, -spec.diversity_weight);
      break;
    }
  }
  return t;
}

LossValue baseline_loss(const BaselineSpec& spec, const SoftmaxMap& preds) {
  return std::move(baseline_loss_terms(spec, preds).total);
}

}  // namespace ldseg
