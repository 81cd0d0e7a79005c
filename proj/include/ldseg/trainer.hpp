#pragma once

// Two-stage protocol: supervised pre-training on the labelled source split,
// then source-free adaptation on target images only.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldseg/baselines.hpp"
#include "ldseg/data.hpp"
#include "ldseg/denoise.hpp"
#include "ldseg/model.hpp"

namespace ldseg {

enum class AdaptMethod { ld, entmin, pseudo, pseudo_ent, pseudo_sel, shot_im };

std::string to_string(AdaptMethod m);
AdaptMethod parse_adapt_method(const std::string& name);

struct AdaptationConfig {
  std::string method = "ld";
  double alpha = 0.2;
  int epsilon = 3;
  std::string hcls_band = "symmetric";
  double lambda_ent = 1.0;
  double lambda_neg = 1.0;
  double lr0 = 1e-3;
  double source_lr0 = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double poly_power = 0.9;
  int batch_size = 8;
  int source_epochs = 20;
  int adapt_epochs = 20;
  std::uint64_t seed = 0;
  bool disable_pos = false;
  bool disable_neg = false;
  std::string loss_reduction = "mean";
  bool augment_flip = true;
  double confidence_threshold = 0.9;
  double pseudo_ent_tradeoff = 1.0;
  double diversity_weight = 1.0;
  ArchitectureDescriptor architecture;

  /// Throws ConfigError.
  void validate() const;
  /// Fingerprint of every field.
  std::uint64_t hash() const;

  AdaptMethod adapt_method() const { return parse_adapt_method(method); }
  HclsBand band() const;
  LossReduction reduction() const;
  BaselineSpec baseline() const;
};

nlohmann::json to_json(const AdaptationConfig& cfg);
/// Fields absent from `j` keep their current value in `base`; unknown keys
/// are rejected.
AdaptationConfig config_from_json(const nlohmann::json& j, AdaptationConfig base = {});
AdaptationConfig load_config(const std::filesystem::path& path, AdaptationConfig base = {});

/// The epsilon adaptation actually uses: the configured value, reduced to the
/// largest admissible one for C classes. Throws ConfigError if none exists.
int effective_epsilon(const AdaptationConfig& cfg, int classes);

/// lr0 * (1 - iter/max_iter)^power.
double poly_lr(long iter, long max_iter, double lr0, double power);

/// SGD with momentum; weight decay enters the gradient as an L2 term.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(std::vector<Parameter>& params, const Gradients& grads, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<FloatBuffer> velocity_;
};

struct StepRecord {
  int epoch = 0;
  long iter = 0;
  double lr = 0.0;
  double sce = 0.0;
  double ent = 0.0;
  double neg = 0.0;
  double div = 0.0;
  double total = 0.0;
  /// Weights the components were combined with.
  double w_sce = 0.0;
  double w_ent = 0.0;
  double w_neg = 0.0;
  double w_div = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  /// Empty for source pre-training and for baselines.
  std::vector<double> thresholds;
  std::size_t selected_pixels = 0;
  std::size_t total_pixels = 0;
  /// Argmax class mass over the split at the start of the epoch.
  std::vector<double> prediction_mass;
  /// Mean training loss over the epoch.
  double mean_loss = 0.0;
  /// Fingerprint of the cached selection, for refresh checks.
  std::uint64_t selection_hash = 0;
};

struct TrainingObserver {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch_start;
  /// Called after the last step of each epoch with the current checkpoint.
  std::function<void(const Checkpoint&, const EpochRecord&)> on_epoch_end;
};

/// Cross-entropy training on labelled source scenes, starting from `init`.
/// Throws NumericalError if the loss becomes non-finite.
Checkpoint source_pretrain(SegmentationModel init, const SceneDataset& source, const AdaptationConfig& cfg,
                           const TrainingObserver& observer = {});

/// Source-free adaptation. Only target images are reachable from here.
Checkpoint run_adaptation(const Checkpoint& start, const ImageView& target, const AdaptationConfig& cfg,
                          const TrainingObserver& observer = {});

/// Mean cross-entropy against integer labels over all pixels, with gradient.
LossValue cross_entropy(const SoftmaxMap& preds, std::span<const std::uint8_t> labels);

}  // namespace ldseg
