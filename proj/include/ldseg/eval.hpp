#pragma once

// Segmentation metrics and diagnostics: confusion matrices, per-class IoU with
// class exclusion, prediction mass and the true-class softmax rank histogram.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ldseg/data.hpp"
#include "ldseg/model.hpp"
#include "ldseg/softmax_map.hpp"

namespace ldseg {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes = 0);

  int classes() const { return classes_; }
  std::uint64_t at(int truth, int pred) const { return counts_[index(truth, pred)]; }
  void add(int truth, int pred, std::uint64_t n = 1) {
    counts_[index(truth, pred)] += n;
    total_ += n;
  }
  std::uint64_t total() const { return total_; }
  std::uint64_t row_sum(int c) const;
  std::uint64_t col_sum(int c) const;
  void merge(const ConfusionMatrix& other);
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t index(int t, int p) const;

  int classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

/// Adds one count per valid pixel; throws InputError on out-of-range labels or
/// mismatched sizes. An empty `valid` span means every pixel is valid.
void accumulate_confusion(ConfusionMatrix& cm, std::span<const std::uint8_t> predicted,
                          std::span<const std::uint8_t> truth, std::span<const std::uint8_t> valid = {});
ConfusionMatrix accumulate_confusion(int classes, std::span<const std::uint8_t> predicted,
                                     std::span<const std::uint8_t> truth, std::span<const std::uint8_t> valid = {});

struct IouResult {
  /// nullopt where the class is absent from both truth and prediction.
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0.0;
  std::vector<int> excluded_classes;
};

/// Throws InputError when no class is both applicable and not excluded.
IouResult compute_iou(const ConfusionMatrix& cm, std::span<const int> excluded = {});

/// Bin x-1 counts valid pixels whose true class has descending softmax rank x
/// (ties broken toward the lower class index).
std::vector<std::uint64_t> rank_histogram(const SoftmaxMap& preds, std::span<const std::uint8_t> truth);

struct EvalReport {
  int epoch = 0;
  ConfusionMatrix confusion;
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0.0;
  std::vector<int> excluded_classes;
  /// Fraction of evaluated pixels predicted as each class; sums to 1.
  std::vector<double> per_class_prediction_mass;
  std::vector<std::uint64_t> rank_histogram;
};

/// Runs `model` over a labelled dataset. Throws InputError if labels are missing.
EvalReport evaluate(const SegmentationModel& model, const SceneDataset& data, std::span<const int> excluded = {},
                    int batch_size = 16);

/// Argmax label maps for every scene, in dataset order.
std::vector<std::vector<std::uint8_t>> predict_labels(const SegmentationModel& model, const ImageView& images,
                                                      int batch_size = 16);

struct MethodRow {
  std::string method;
  EvalReport report;
};

struct ReportContext {
  std::string method;
  std::uint64_t config_hash = 0;
  /// mIoU of the source-only model; enables the gain column.
  std::optional<double> source_only_miou;
  /// Extra rows for a method comparison table.
  std::vector<MethodRow> comparison;
};

/// Writes per_class_iou.txt/.csv, class_mass.csv/.svg (one row per report),
/// rank_hist.csv/.svg (last report) and summary.json.
void emit_report(std::span<const EvalReport> reports, const ReportContext& ctx, const std::filesystem::path& out_dir);

}  // namespace ldseg
