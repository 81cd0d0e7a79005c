#include "ldseg/softmax_map.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ldseg/errors.hpp"

namespace ldseg {

namespace {

template <typename T>
std::vector<double> softmax_rows(const MapShape& shape, std::span<const T> logits) {
  if (logits.size() != shape.elements()) {
    throw InputError("logits size " + std::to_string(logits.size()) + " does not match shape (" +
                     std::to_string(shape.elements()) + " expected)");
  }
  const auto C = static_cast<std::size_t>(shape.classes);
  std::vector<double> probs(logits.size());
  for (std::size_t i = 0; i < shape.pixels(); ++i) {
    const T* z = logits.data() + i * C;
    double* p = probs.data() + i * C;
    double zmax = static_cast<double>(z[0]);
    for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, static_cast<double>(z[c]));
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      p[c] = std::exp(static_cast<double>(z[c]) - zmax);
      sum += p[c];
    }
    for (std::size_t c = 0; c < C; ++c) p[c] /= sum;
  }
  return probs;
}

}  // namespace

SoftmaxMap::SoftmaxMap(MapShape shape, std::vector<double> probs, std::vector<std::uint8_t> valid)
    : shape_(shape), probs_(std::move(probs)), valid_(std::move(valid)) {
  if (shape_.batch <= 0 || shape_.height <= 0 || shape_.width <= 0) {
    throw InputError("softmax map needs positive batch and spatial dimensions");
  }
  if (shape_.classes < 3 || shape_.classes > 255) {
    throw InputError("softmax map needs 3..255 classes, got " + std::to_string(shape_.classes));
  }
  if (probs_.size() != shape_.elements()) {
    throw InputError("probability tensor has " + std::to_string(probs_.size()) + " entries, shape needs " +
                     std::to_string(shape_.elements()));
  }
  if (!valid_.empty() && valid_.size() != shape_.pixels()) {
    throw InputError("valid mask size does not match the pixel grid");
  }
  const auto C = static_cast<std::size_t>(shape_.classes);
  for (std::size_t i = 0; i < shape_.pixels(); ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double v = probs_[i * C + c];
      if (!std::isfinite(v)) throw InputError("non-finite probability at pixel " + std::to_string(i));
      if (v < 0.0 || v > 1.0) throw InputError("probability outside [0,1] at pixel " + std::to_string(i));
      sum += v;
    }
    if (this->valid(i)) {
      ++valid_count_;
      if (std::abs(sum - 1.0) > kSumTolerance) {
        throw InputError("probabilities at pixel " + std::to_string(i) + " sum to " + std::to_string(sum));
      }
    }
  }
}

SoftmaxMap SoftmaxMap::from_logits(MapShape shape, std::span<const double> logits,
                                   std::vector<std::uint8_t> valid) {
  return SoftmaxMap(shape, softmax_rows(shape, logits), std::move(valid));
}

SoftmaxMap SoftmaxMap::from_logits(MapShape shape, std::span<const float> logits,
                                   std::vector<std::uint8_t> valid) {
  return SoftmaxMap(shape, softmax_rows(shape, logits), std::move(valid));
}

int argmax_class(std::span<const double> p) {
  int best = 0;
  for (std::size_t c = 1; c < p.size(); ++c) {
    if (p[c] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  }
  return best;
}

int descending_rank(std::span<const double> p, int c) {
  const double pc = p[static_cast<std::size_t>(c)];
  int rank = 1;
  for (std::size_t j = 0; j < p.size(); ++j) {
    const auto jc = static_cast<int>(j);
    if (p[j] > pc || (p[j] == pc && jc < c)) ++rank;
  }
  return rank;
}

int class_at_rank(std::span<const double> p, int k) {
  const auto C = static_cast<int>(p.size());
  if (k < 1 || k > C) throw ContractViolation("rank " + std::to_string(k) + " outside [1, C]");
  // C is small; a partial selection over class indices is enough.
  int order[256];
  for (int c = 0; c < C; ++c) order[c] = c;
  auto before = [&](int a, int b) {
    const double pa = p[static_cast<std::size_t>(a)];
    const double pb = p[static_cast<std::size_t>(b)];
    return pa > pb || (pa == pb && a < b);
  };
  std::nth_element(order, order + (k - 1), order + C, before);
  return order[k - 1];
}

}  // namespace ldseg
