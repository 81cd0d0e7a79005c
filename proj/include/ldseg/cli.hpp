#pragma once

// Subcommand implementations behind the `ldseg` executable. Each returns a
// process exit code: 0 success, 1 usage or configuration error, 2 runtime or
// numerical failure.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ldseg/trainer.hpp"

namespace ldseg::cli {

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kRuntimeError = 2 };

struct CommonOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  bool force = false;
};

/// Effective configuration: --seed flag, then LD_SFSS_SEED, then the config
/// file, then built-in defaults.
AdaptationConfig resolve_config(const CommonOptions& common);

/// Runs `body`, mapping exceptions to exit codes and logging the message.
int guarded(const std::function<int()>& body);

struct DatasetGenOptions {
  /// DomainSpec JSON file; alternatively a built-in preset.
  std::optional<std::filesystem::path> spec;
  std::string preset;  // source | target-train | target-eval
  std::filesystem::path out;
  long count = 0;
  bool labels = true;
};

struct TrainSourceOptions {
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::filesystem::path> eval_data;
};

struct AdaptOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::string> method;
  std::string ablation = "none";  // none | no-pos | no-neg
  std::optional<std::filesystem::path> eval_data;
};

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out;
  std::vector<int> exclude_classes;
  /// Source-only checkpoint for the gain column.
  std::optional<std::filesystem::path> reference;
  std::string label = "model";
};

struct ReproduceOptions {
  std::filesystem::path out;
  /// Small, fast profile for smoke tests.
  bool quick = false;
};

int cmd_dataset_gen(const CommonOptions& common, const DatasetGenOptions& opts);
int cmd_train_source(const CommonOptions& common, const TrainSourceOptions& opts);
int cmd_adapt(const CommonOptions& common, const AdaptOptions& opts);
int cmd_eval(const CommonOptions& common, const EvalOptions& opts);
int cmd_reproduce(const CommonOptions& common, const ReproduceOptions& opts);

/// Content hash of the sources this binary was built from.
std::string code_version();

}  // namespace ldseg::cli
