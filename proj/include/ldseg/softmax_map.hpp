#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace ldseg {

/// Dimensions of a per-pixel prediction tensor, laid out (B, H, W, C).
struct MapShape {
  int batch = 0;
  int height = 0;
  int width = 0;
  int classes = 0;

  std::size_t pixels() const {
    return static_cast<std::size_t>(batch) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  std::size_t elements() const { return pixels() * static_cast<std::size_t>(classes); }
  std::size_t pixel_index(int b, int h, int w) const {
    return (static_cast<std::size_t>(b) * height + h) * width + w;
  }
  bool same_grid(const MapShape& o) const {
    return batch == o.batch && height == o.height && width == o.width;
  }
  bool operator==(const MapShape&) const = default;
};

/// Per-pixel class probabilities for a batch of images.
///
/// Construction validates the tensor: every entry in [0,1], finite, and each
/// valid pixel's distribution sums to one within 1e-5. At least three classes
/// are required because complementary-label sampling needs a mid-rank band.
class SoftmaxMap {
 public:
  static constexpr double kSumTolerance = 1e-5;

  SoftmaxMap(MapShape shape, std::vector<double> probs, std::vector<std::uint8_t> valid = {});

  /// Row-wise softmax of raw logits with the same layout.
  static SoftmaxMap from_logits(MapShape shape, std::span<const double> logits,
                                std::vector<std::uint8_t> valid = {});
  static SoftmaxMap from_logits(MapShape shape, std::span<const float> logits,
                                std::vector<std::uint8_t> valid = {});

  const MapShape& shape() const { return shape_; }
  int classes() const { return shape_.classes; }
  std::size_t pixels() const { return shape_.pixels(); }

  std::span<const double> pixel(std::size_t i) const {
    return {probs_.data() + i * static_cast<std::size_t>(shape_.classes),
            static_cast<std::size_t>(shape_.classes)};
  }
  double prob(std::size_t i, int c) const {
    return probs_[i * static_cast<std::size_t>(shape_.classes) + static_cast<std::size_t>(c)];
  }
  std::span<const double> data() const { return probs_; }

  bool has_valid_mask() const { return !valid_.empty(); }
  bool valid(std::size_t i) const { return valid_.empty() || valid_[i] != 0; }
  std::span<const std::uint8_t> valid_mask() const { return valid_; }
  std::size_t valid_count() const { return valid_count_; }

 private:
  MapShape shape_;
  std::vector<double> probs_;
  std::vector<std::uint8_t> valid_;
  std::size_t valid_count_ = 0;
};

/// Argmax with ties broken by the lowest class index.
int argmax_class(std::span<const double> p);

/// 1-based descending rank of class `c`; ties go to the lower class index.
int descending_rank(std::span<const double> p, int c);

/// Class holding 1-based descending rank `k`, same tie convention.
int class_at_rank(std::span<const double> p, int k);

}  // namespace ldseg
