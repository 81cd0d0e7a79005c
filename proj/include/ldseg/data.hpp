#pragma once

// Procedural paired source/target segmentation scenes: shapes on a background,
// per-class colour and stripe texture, and a global appearance shift (hue
// rotation, gain, additive noise) that never touches label geometry.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ldseg {

struct ClassAppearance {
  std::array<double, 3> color{0.5, 0.5, 0.5};
  double texture_amplitude = 0.0;
  /// Stripe spatial frequency in cycles per pixel and orientation in degrees.
  double texture_frequency = 0.1;
  double texture_angle = 0.0;
};

struct DomainShift {
  double hue_degrees = 0.0;
  double noise_sigma = 0.0;
  double gain = 1.0;

  bool operator==(const DomainShift&) const = default;
};

struct DomainSpec {
  std::string domain = "source";
  std::vector<double> class_frequencies;
  std::vector<ClassAppearance> appearance;
  /// Per-scene multiplicative brightness jitter and per-object colour jitter.
  double scene_jitter = 0.0;
  double object_jitter = 0.0;
  DomainShift shift;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(class_frequencies.size()); }
  /// Throws ConfigError on any violated invariant.
  void validate() const;
  /// Stable fingerprint of every field.
  std::uint64_t hash() const;
};

struct LabeledScene {
  int height = 0;
  int width = 0;
  /// (H, W, 3) row-major, values in [0, 1].
  std::vector<float> image;
  /// (H, W) class indices; empty when labels are withheld.
  std::vector<std::uint8_t> labels;
  std::string domain;
  std::uint64_t seed = 0;
  std::uint32_t index = 0;

  bool operator==(const LabeledScene&) const = default;
};

/// Background class is the most frequent class (lowest index on ties).
int background_class(const DomainSpec& spec);

LabeledScene generate_scene(const DomainSpec& spec, std::uint32_t index);

/// Checks the target spec only differs from the source in appearance and seed.
void check_paired(const DomainSpec& source, const DomainSpec& target);

// Scene collections. Adaptation code receives an ImageView, which has no way
// to reach labels.
class SceneDataset {
 public:
  virtual ~SceneDataset() = default;
  virtual std::size_t size() const = 0;
  virtual int height() const = 0;
  virtual int width() const = 0;
  virtual int num_classes() const = 0;
  virtual std::span<const float> image(std::size_t i) const = 0;
  virtual bool has_labels() const = 0;
  /// Throws InputError when labels are absent.
  virtual std::span<const std::uint8_t> labels(std::size_t i) const = 0;
};

class InMemoryDataset final : public SceneDataset {
 public:
  InMemoryDataset(DomainSpec spec, std::vector<LabeledScene> scenes);

  std::size_t size() const override { return scenes_.size(); }
  int height() const override { return spec_.height; }
  int width() const override { return spec_.width; }
  int num_classes() const override { return spec_.num_classes(); }
  std::span<const float> image(std::size_t i) const override;
  bool has_labels() const override;
  std::span<const std::uint8_t> labels(std::size_t i) const override;

  const DomainSpec& spec() const { return spec_; }
  const std::vector<LabeledScene>& scenes() const { return scenes_; }

 private:
  DomainSpec spec_;
  std::vector<LabeledScene> scenes_;
};

class ImageView {
 public:
  explicit ImageView(const SceneDataset& data) : data_(&data) {}

  std::size_t size() const { return data_->size(); }
  int height() const { return data_->height(); }
  int width() const { return data_->width(); }
  int num_classes() const { return data_->num_classes(); }
  std::span<const float> image(std::size_t i) const { return data_->image(i); }

 private:
  const SceneDataset* data_;
};

/// Generates scenes [0, count) with `workers` threads; order is by index.
InMemoryDataset generate_dataset(const DomainSpec& spec, std::size_t count, bool keep_labels = true,
                                 int workers = 1);

// Directory layout: manifest.json plus scene_NNNNN.bin records.
inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const InMemoryDataset& data, const std::filesystem::path& dir);
void write_dataset(const DomainSpec& spec, std::size_t count, const std::filesystem::path& dir,
                   bool keep_labels = true, int workers = 1);
InMemoryDataset read_dataset(const std::filesystem::path& dir);

/// Paired splits of the default benchmark.
struct BenchmarkSpec {
  DomainSpec source;
  DomainSpec target_train;
  DomainSpec target_eval;
  std::size_t source_count = 400;
  std::size_t target_train_count = 400;
  std::size_t target_eval_count = 100;
};

DomainSpec default_source_spec(std::uint64_t seed = 0);
DomainShift default_target_shift();
BenchmarkSpec default_benchmark(std::uint64_t seed = 0);

/// Empirical per-class pixel mass over labelled scenes.
std::vector<double> class_pixel_mass(const SceneDataset& data);

}  // namespace ldseg
