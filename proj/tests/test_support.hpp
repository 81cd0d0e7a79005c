#pragma once

// Shared oracles for the unit and acceptance suites. Nothing here calls into
// the code under test except to build inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "ldseg/softmax_map.hpp"

namespace ldseg::testing {

inline std::vector<double> random_logits(std::mt19937_64& rng, const MapShape& shape, double scale = 2.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> z(shape.elements());
  for (auto& v : z) v = dist(rng);
  return z;
}

inline SoftmaxMap random_softmax(std::mt19937_64& rng, const MapShape& shape, double scale = 2.0) {
  return SoftmaxMap::from_logits(shape, random_logits(rng, shape, scale));
}

/// Softmax written out independently of the library.
inline std::vector<double> reference_softmax(std::span<const double> logits, int classes) {
  std::vector<double> p(logits.size());
  const auto C = static_cast<std::size_t>(classes);
  for (std::size_t i = 0; i < logits.size() / C; ++i) {
    double m = -INFINITY;
    for (std::size_t c = 0; c < C; ++c) m = std::max(m, logits[i * C + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(logits[i * C + c] - m);
    for (std::size_t c = 0; c < C; ++c) p[i * C + c] = std::exp(logits[i * C + c] - m) / s;
  }
  return p;
}

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central finite differences of f at x, compared coordinate-wise against
/// `analytic`. The relative error's denominator is max(|analytic|, |numeric|,
/// floor): below `floor` the difference is dominated by cancellation round-off.
inline GradientCheck check_gradient(const std::function<double(const std::vector<double>&)>& f,
                                    std::vector<double> x, std::span<const double> analytic,
                                    double step = 1e-5, double floor = 1e-6) {
  GradientCheck out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = f(x);
    x[i] = orig - step;
    const double fm = f(x);
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double scale = std::max(std::abs(numeric), std::abs(analytic[i]));
    const double err = std::abs(numeric - analytic[i]) / std::max(scale, floor);
    if (err > out.max_relative_error) {
      out = {err, i, analytic[i], numeric};
    }
  }
  return out;
}

/// ceil(alpha * n) computed with exact rational arithmetic where alpha is a
/// multiple of 1/100.
inline std::size_t ceil_fraction(double alpha, std::size_t n) {
  const auto pct = static_cast<std::size_t>(std::llround(alpha * 100.0));
  return (pct * n + 99) / 100;
}

/// Brute-force class-balanced selection: a pixel is kept when fewer than
/// ceil(alpha N_c) pixels of its argmax class are strictly more confident.
inline std::vector<std::uint8_t> brute_force_selection(const SoftmaxMap& preds, double alpha) {
  const std::size_t n = preds.pixels();
  const int C = preds.classes();
  std::vector<int> label(n);
  std::vector<double> conf(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = preds.pixel(i);
    int best = 0;
    for (int c = 1; c < C; ++c) {
      if (p[static_cast<std::size_t>(c)] > p[static_cast<std::size_t>(best)]) best = c;
    }
    label[i] = best;
    conf[i] = p[static_cast<std::size_t>(best)];
  }
  std::vector<std::size_t> class_count(static_cast<std::size_t>(C), 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (preds.valid(i)) ++class_count[static_cast<std::size_t>(label[i])];
  }
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!preds.valid(i)) continue;
    std::size_t strictly_greater = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (preds.valid(j) && label[j] == label[i] && conf[j] > conf[i]) ++strictly_greater;
    }
    mask[i] = strictly_greater < ceil_fraction(alpha, class_count[static_cast<std::size_t>(label[i])]);
  }
  return mask;
}

/// Full sort of one pixel's classes, descending probability, ties to lower index.
inline std::vector<int> sorted_classes(std::span<const double> p) {
  std::vector<int> order(p.size());
  for (std::size_t c = 0; c < p.size(); ++c) order[c] = static_cast<int>(c);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
  });
  return order;
}

/// Upper 1% point of the chi-square distribution for small degrees of freedom.
inline double chi_square_99(int dof) {
  static constexpr double table[] = {0.0,    6.635,  9.210,  11.345, 13.277, 15.086,
                                     16.812, 18.475, 20.090, 21.666, 23.209};
  return table[dof];
}

}  // namespace ldseg::testing
