#pragma once

// Segmentation networks: a small encoder-decoder trained on CPU, behind a
// backend registry keyed by architecture name so that a larger backbone can be
// slotted in without changing callers.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ldseg {

/// Float storage aligned for the widest SIMD width Eigen was configured with,
/// so kernels take the same code path regardless of heap layout.
using FloatBuffer = std::vector<float, Eigen::aligned_allocator<float>>;

/// Dense float tensor in NHWC layout.
struct Tensor4 {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;
  FloatBuffer data;

  Tensor4() = default;
  Tensor4(int n_, int h_, int w_, int c_, float fill = 0.0f)
      : n(n_), h(h_), w(w_), c(c_), data(static_cast<std::size_t>(n_) * h_ * w_ * c_, fill) {}

  std::size_t pixels() const { return static_cast<std::size_t>(n) * h * w; }
  std::size_t size() const { return data.size(); }
  float* pixel(std::size_t i) { return data.data() + i * static_cast<std::size_t>(c); }
  const float* pixel(std::size_t i) const { return data.data() + i * static_cast<std::size_t>(c); }
};

struct ArchitectureDescriptor {
  std::string name = "toy_encoder_decoder";
  int in_channels = 3;
  int num_classes = 8;
  std::vector<int> widths{16, 32, 64, 64};
  std::vector<int> strides{1, 2, 2, 1};
  /// Full-resolution 1x1 projection of the first stage added to the upsampled
  /// logits. Requires strides[0] == 1.
  bool skip_connection = true;
  /// Reserved for atrous pyramid heads; the toy backend requires it empty.
  std::vector<int> atrous_rates;

  bool operator==(const ArchitectureDescriptor&) const = default;
};

struct Parameter {
  std::string name;
  std::vector<int> shape;
  FloatBuffer value;
};

using Gradients = std::vector<FloatBuffer>;

/// Activations kept by a training forward pass for the backward pass.
class ForwardTrace {
 public:
  virtual ~ForwardTrace() = default;
};

class NetworkBackend {
 public:
  virtual ~NetworkBackend() = default;

  /// Throws ConfigError when the descriptor is not supported.
  virtual void validate(const ArchitectureDescriptor& arch) const = 0;
  virtual std::vector<Parameter> init(const ArchitectureDescriptor& arch, std::uint64_t seed) const = 0;
  virtual Tensor4 forward(const ArchitectureDescriptor& arch, const std::vector<Parameter>& params,
                          const Tensor4& images, std::unique_ptr<ForwardTrace>* trace) const = 0;
  virtual Gradients backward(const ArchitectureDescriptor& arch, const std::vector<Parameter>& params,
                             const ForwardTrace& trace, const Tensor4& grad_logits) const = 0;
};

/// Looks up the backend registered for `name`; throws ConfigError if none.
const NetworkBackend& network_backend(const std::string& name);

class SegmentationModel {
 public:
  /// Fresh model with He-style fan-in initialization from `seed`.
  SegmentationModel(ArchitectureDescriptor arch, std::uint64_t seed);
  /// Model from existing parameters; names and shapes must match a fresh init.
  SegmentationModel(ArchitectureDescriptor arch, std::vector<Parameter> params);

  const ArchitectureDescriptor& descriptor() const { return arch_; }
  int num_classes() const { return arch_.num_classes; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Logits (N, H, W, C) for images (N, H, W, in_channels) with values in [0,1].
  Tensor4 forward(const Tensor4& images) const;

  struct TrainingPass {
    Tensor4 logits;
    std::unique_ptr<ForwardTrace> trace;
  };
  TrainingPass forward_train(const Tensor4& images) const;
  Gradients backward(const TrainingPass& pass, const Tensor4& grad_logits) const;

  void set_zero();
  /// FNV-1a over parameter names and raw bytes.
  std::uint64_t fingerprint() const;

 private:
  void check_images(const Tensor4& images) const;

  ArchitectureDescriptor arch_;
  std::vector<Parameter> params_;
  const NetworkBackend* backend_;
};

enum class TrainingStage { initialized, source_pretrained, adapted };

std::string to_string(TrainingStage stage);
TrainingStage parse_training_stage(const std::string& name);

struct Checkpoint {
  SegmentationModel model;
  TrainingStage stage = TrainingStage::initialized;
  int epoch = 0;
  std::string rng_state;
  std::uint64_t config_hash = 0;
};

struct CheckpointExpectations {
  std::optional<int> num_classes;
  std::optional<std::uint64_t> config_hash;
  std::optional<TrainingStage> stage;
};

/// Layout: format version byte, 4-byte magic, little-endian u32 header length,
/// JSON header (architecture, stage, epoch, rng state, config hash, parameter
/// table, payload checksum), then each parameter as little-endian float32.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, const CheckpointExpectations& expect = {});

inline constexpr std::uint8_t kCheckpointVersion = 1;

}  // namespace ldseg
