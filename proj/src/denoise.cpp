#include "ldseg/denoise.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "ldseg/errors.hpp"
#include "ldseg/hashing.hpp"

namespace ldseg {

namespace {

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
}

void check_grid(const SoftmaxMap& preds, const MapShape& other, const char* what) {
  if (!preds.shape().same_grid(other) || preds.classes() != other.classes) {
    throw InputError(std::string(what) + " shape does not match the prediction map");
  }
}

double normalizer(LossReduction reduction, std::size_t count) {
  if (reduction == LossReduction::sum) return 1.0;
  return count == 0 ? 0.0 : 1.0 / static_cast<double>(count);
}

// -log(max(x, kLogEps)) and its derivative in x.
double neg_log_clamped(double x, double* dx) {
  if (x >= kLogEps) {
    *dx = -1.0 / x;
    return -std::log(x);
  }
  *dx = 0.0;
  return -std::log(kLogEps);
}

}  // namespace

std::size_t PseudoLabelSelection::selected_count() const {
  return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), std::uint8_t{1}));
}

// ---------------------------------------------------------------------------

ClassThresholds compute_class_thresholds(std::span<const std::uint8_t> labels,
                                         std::span<const double> confidences,
                                         std::span<const std::uint8_t> valid, int classes,
                                         double alpha) {
  check_alpha(alpha);
  if (labels.size() != confidences.size() || (!valid.empty() && valid.size() != labels.size())) {
    throw InputError("label, confidence and valid arrays differ in length");
  }
  std::vector<std::vector<double>> per_class(static_cast<std::size_t>(classes));
  std::size_t n_valid = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!valid.empty() && valid[i] == 0) continue;
    const double conf = confidences[i];
    if (!std::isfinite(conf)) throw InputError("non-finite confidence at pixel " + std::to_string(i));
    if (labels[i] >= classes) throw InputError("pseudo label out of range at pixel " + std::to_string(i));
    per_class[labels[i]].push_back(conf);
    ++n_valid;
  }
  if (n_valid == 0) throw InputError("threshold computation needs at least one valid pixel");

  ClassThresholds out;
  out.alpha = alpha;
  out.delta.assign(static_cast<std::size_t>(classes), ClassThresholds::kUnselectable);
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    auto& confs = per_class[c];
    if (confs.empty()) continue;
    const auto n = static_cast<double>(confs.size());
    // The small offset keeps alpha*N at an exact integer from rounding up.
    auto k = static_cast<std::size_t>(std::ceil(alpha * n - 1e-9));
    k = std::clamp<std::size_t>(k, 1, confs.size());
    std::nth_element(confs.begin(), confs.begin() + static_cast<std::ptrdiff_t>(k - 1), confs.end(),
                     std::greater<>());
    out.delta[c] = confs[k - 1];
  }
  return out;
}

PseudoLabelSelection argmax_labels(const SoftmaxMap& preds) {
  PseudoLabelSelection sel;
  sel.shape = preds.shape();
  const std::size_t n = preds.pixels();
  sel.pseudo_labels.resize(n);
  sel.confidences.resize(n);
  sel.selected.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = preds.pixel(i);
    const int c = argmax_class(p);
    sel.pseudo_labels[i] = static_cast<std::uint8_t>(c);
    sel.confidences[i] = p[static_cast<std::size_t>(c)];
  }
  return sel;
}

ClassThresholds compute_class_thresholds(const SoftmaxMap& preds, double alpha) {
  check_alpha(alpha);
  const auto sel = argmax_labels(preds);
  return compute_class_thresholds(sel.pseudo_labels, sel.confidences, preds.valid_mask(),
                                  preds.classes(), alpha);
}

void apply_thresholds(PseudoLabelSelection& sel, const ClassThresholds& thresholds,
                      std::span<const std::uint8_t> valid) {
  if (thresholds.classes() != sel.shape.classes) {
    throw InputError("thresholds cover " + std::to_string(thresholds.classes()) +
                     " classes, predictions have " + std::to_string(sel.shape.classes));
  }
  if (!valid.empty() && valid.size() != sel.pseudo_labels.size()) {
    throw InputError("valid mask size does not match the selection grid");
  }
  for (std::size_t i = 0; i < sel.pseudo_labels.size(); ++i) {
    const bool ok = valid.empty() || valid[i] != 0;
    sel.selected[i] = ok && sel.confidences[i] >= thresholds.delta[sel.pseudo_labels[i]] ? 1 : 0;
  }
}

PseudoLabelSelection select_pseudo_labels(const SoftmaxMap& preds, const ClassThresholds& thresholds) {
  auto sel = argmax_labels(preds);
  apply_thresholds(sel, thresholds, preds.valid_mask());
  return sel;
}

// ---------------------------------------------------------------------------

int max_hcls_epsilon(int classes, HclsBand band) {
  const int half = classes / 2;
  // Lowest rank must stay >= 2 so the sample never hits the argmax class.
  int eps = half - 2;
  if (band == HclsBand::symmetric) eps = std::min(eps, classes - 1 - half);
  return eps < 0 ? -1 : eps;
}

void check_hcls_preconditions(int classes, int epsilon, HclsBand band) {
  const int half = classes / 2;
  if (epsilon < 0) throw ConfigError("epsilon must be non-negative, got " + std::to_string(epsilon));
  if (half - epsilon < 2) {
    throw ConfigError("HCLS lower bound violated: floor(C/2) - epsilon = " + std::to_string(half - epsilon) +
                      " < 2 (C=" + std::to_string(classes) + ", epsilon=" + std::to_string(epsilon) + ")");
  }
  if (band == HclsBand::symmetric && epsilon > classes - 1 - half) {
    throw ConfigError("HCLS upper bound violated: epsilon = " + std::to_string(epsilon) +
                      " > C - 1 - floor(C/2) = " + std::to_string(classes - 1 - half));
  }
}

ComplementaryLabelMap hcls_sample(const SoftmaxMap& preds, int epsilon, std::uint64_t rng_seed,
                                  HclsBand band) {
  const int C = preds.classes();
  check_hcls_preconditions(C, epsilon, band);
  const int lo = C / 2 - epsilon;
  const int hi = band == HclsBand::symmetric ? C / 2 + epsilon : C / 2;
  const auto width = static_cast<std::uint64_t>(hi - lo + 1);

  const MapShape& s = preds.shape();
  ComplementaryLabelMap out;
  out.shape = s;
  out.epsilon = epsilon;
  out.comp_labels.resize(s.pixels());
  out.ranks.resize(s.pixels());
  const std::uint64_t base = mix64(rng_seed);
  for (int b = 0; b < s.batch; ++b) {
    for (int h = 0; h < s.height; ++h) {
      for (int w = 0; w < s.width; ++w) {
        const std::size_t i = s.pixel_index(b, h, w);
        const std::uint64_t r = mix64(base, static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(h),
                                      static_cast<std::uint64_t>(w));
        const int k = lo + static_cast<int>(r % width);
        out.ranks[i] = static_cast<std::uint8_t>(k);
        out.comp_labels[i] = static_cast<std::uint8_t>(class_at_rank(preds.pixel(i), k));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> grad_probs_to_logits(const SoftmaxMap& preds, std::span<const double> grad_probs) {
  const auto C = static_cast<std::size_t>(preds.classes());
  std::vector<double> g(grad_probs.size(), 0.0);
  for (std::size_t i = 0; i < preds.pixels(); ++i) {
    const auto p = preds.pixel(i);
    const double* gp = grad_probs.data() + i * C;
    double dot = 0.0;
    for (std::size_t c = 0; c < C; ++c) dot += p[c] * gp[c];
    if (dot == 0.0 && std::all_of(gp, gp + C, [](double v) { return v == 0.0; })) continue;
    for (std::size_t c = 0; c < C; ++c) g[i * C + c] = p[c] * (gp[c] - dot);
  }
  return g;
}

void add_scaled(std::vector<double>& acc, std::span<const double> v, double scale) {
  if (acc.empty()) acc.assign(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) acc[i] += scale * v[i];
}

LossValue loss_sce(const SoftmaxMap& preds, const PseudoLabelSelection& sel, LossReduction reduction) {
  check_grid(preds, sel.shape, "selection");
  const auto C = static_cast<std::size_t>(preds.classes());
  std::size_t count = 0;
  for (std::size_t i = 0; i < preds.pixels(); ++i) count += sel.selected[i] != 0 && preds.valid(i);
  const double scale = normalizer(reduction, count);

  LossValue out;
  std::vector<double> gp(preds.data().size(), 0.0);
  for (std::size_t i = 0; i < preds.pixels(); ++i) {
    if (sel.selected[i] == 0 || !preds.valid(i)) continue;
    const std::size_t y = sel.pseudo_labels[i];
    double d = 0.0;
    out.value += scale * neg_log_clamped(preds.prob(i, static_cast<int>(y)), &d);
    gp[i * C + y] = scale * d;
  }
  out.grad_logits = grad_probs_to_logits(preds, gp);
  return out;
}

LossValue loss_ent(const SoftmaxMap& preds, LossReduction reduction) {
  const auto C = static_cast<std::size_t>(preds.classes());
  const double scale = normalizer(reduction, preds.valid_count());
  const double log_eps = std::log(kLogEps);

  LossValue out;
  std::vector<double> gp(preds.data().size(), 0.0);
  for (std::size_t i = 0; i < preds.pixels(); ++i) {
    if (!preds.valid(i)) continue;
    const auto p = preds.pixel(i);
    double h = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      // -p log max(p, eps); the clamped branch is linear in p.
      if (p[c] >= kLogEps) {
        const double lp = std::log(p[c]);
        h -= p[c] * lp;
        gp[i * C + c] = -scale * (lp + 1.0);
      } else {
        h -= p[c] * log_eps;
        gp[i * C + c] = -scale * log_eps;
      }
    }
    out.value += scale * h;
  }
  out.grad_logits = grad_probs_to_logits(preds, gp);
  return out;
}

LossValue loss_pos(const SoftmaxMap& preds, const PseudoLabelSelection& sel, double lambda_ent,
                   LossReduction reduction) {
  auto terms = loss_ld_terms(preds, sel, nullptr, {1.0, lambda_ent, 0.0}, reduction);
  return std::move(terms.total);
}

LossValue loss_neg(const SoftmaxMap& preds, const ComplementaryLabelMap& comp, LossReduction reduction) {
  check_grid(preds, comp.shape, "complementary label map");
  const auto C = static_cast<std::size_t>(preds.classes());
  const double scale = normalizer(reduction, preds.valid_count());

  LossValue out;
  std::vector<double> gp(preds.data().size(), 0.0);
  for (std::size_t i = 0; i < preds.pixels(); ++i) {
    if (!preds.valid(i)) continue;
    const std::size_t y = comp.comp_labels[i];
    if (y >= C) throw InputError("complementary label out of range at pixel " + std::to_string(i));
    double d = 0.0;
    out.value += scale * neg_log_clamped(1.0 - preds.prob(i, static_cast<int>(y)), &d);
    gp[i * C + y] = -scale * d;  // d/dp of -log(1-p)
  }
  out.grad_logits = grad_probs_to_logits(preds, gp);
  return out;
}

LdTerms loss_ld_terms(const SoftmaxMap& preds, const PseudoLabelSelection& sel,
                      const ComplementaryLabelMap* comp, const LdWeights& weights, LossReduction reduction) {
  LdTerms t;
  t.total.grad_logits.assign(preds.data().size(), 0.0);
  if (weights.sce != 0.0) {
    const auto l = loss_sce(preds, sel, reduction);
    t.sce = l.value;
    t.total.value += weights.sce * l.value;
    add_scaled(t.total.grad_logits, l.grad_logits, weights.sce);
  }
  if (weights.ent != 0.0) {
    const auto l = loss_ent(preds, reduction);
    t.ent = l.value;
    t.total.value += weights.ent * l.value;
    add_scaled(t.total.grad_logits, l.grad_logits, weights.ent);
  }
  if (weights.neg != 0.0) {
    if (comp == nullptr) throw ContractViolation("negative term weighted but no complementary labels given");
    const auto l = loss_neg(preds, *comp, reduction);
    t.neg = l.value;
    t.total.value += weights.neg * l.value;
    add_scaled(t.total.grad_logits, l.grad_logits, weights.neg);
  }
  return t;
}

LossValue loss_ld(const SoftmaxMap& preds, const PseudoLabelSelection& sel, const ComplementaryLabelMap& comp,
                  double lambda_ent, double lambda_neg, LossReduction reduction) {
  auto terms = loss_ld_terms(preds, sel, &comp, {1.0, lambda_ent, lambda_neg}, reduction);
  return std::move(terms.total);
}

}  // namespace ldseg
