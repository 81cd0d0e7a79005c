#include "ldseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "ldseg/errors.hpp"
#include "ldseg/hashing.hpp"

namespace ldseg {

ConfusionMatrix::ConfusionMatrix(int classes)
    : classes_(classes), counts_(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0) {
  if (classes < 0) throw InputError("negative class count");
}

std::size_t ConfusionMatrix::index(int t, int p) const {
  if (t < 0 || t >= classes_ || p < 0 || p >= classes_) {
    throw InputError("label out of range: truth " + std::to_string(t) + ", prediction " + std::to_string(p) +
                     " for " + std::to_string(classes_) + " classes");
  }
  return static_cast<std::size_t>(t) * static_cast<std::size_t>(classes_) + static_cast<std::size_t>(p);
}

std::uint64_t ConfusionMatrix::row_sum(int c) const {
  std::uint64_t s = 0;
  for (int p = 0; p < classes_; ++p) s += at(c, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(int c) const {
  std::uint64_t s = 0;
  for (int t = 0; t < classes_; ++t) s += at(t, c);
  return s;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw InputError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

void accumulate_confusion(ConfusionMatrix& cm, std::span<const std::uint8_t> predicted,
                          std::span<const std::uint8_t> truth, std::span<const std::uint8_t> valid) {
  if (predicted.size() != truth.size() || (!valid.empty() && valid.size() != truth.size())) {
    throw InputError("prediction, truth and mask sizes differ");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    cm.add(truth[i], predicted[i]);
  }
}

ConfusionMatrix accumulate_confusion(int classes, std::span<const std::uint8_t> predicted,
                                     std::span<const std::uint8_t> truth, std::span<const std::uint8_t> valid) {
  ConfusionMatrix cm(classes);
  accumulate_confusion(cm, predicted, truth, valid);
  return cm;
}

IouResult compute_iou(const ConfusionMatrix& cm, std::span<const int> excluded) {
  const int C = cm.classes();
  IouResult r;
  r.per_class_iou.resize(static_cast<std::size_t>(C));
  for (int e : excluded) {
    if (e < 0 || e >= C) throw InputError("excluded class " + std::to_string(e) + " out of range");
    r.excluded_classes.push_back(e);
  }
  std::sort(r.excluded_classes.begin(), r.excluded_classes.end());
  r.excluded_classes.erase(std::unique(r.excluded_classes.begin(), r.excluded_classes.end()),
                           r.excluded_classes.end());

  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < C; ++c) {
    const auto tp = cm.at(c, c);
    const auto denom = cm.row_sum(c) + cm.col_sum(c) - tp;
    if (denom == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    r.per_class_iou[static_cast<std::size_t>(c)] = iou;
    if (std::binary_search(r.excluded_classes.begin(), r.excluded_classes.end(), c)) continue;
    sum += iou;
    ++used;
  }
  if (used == 0) throw InputError("no applicable class left for mIoU");
  r.miou = sum / used;
  return r;
}

std::vector<std::uint64_t> rank_histogram(const SoftmaxMap& preds, std::span<const std::uint8_t> truth) {
  if (truth.size() != preds.pixels()) throw InputError("ground truth size does not match the prediction grid");
  const int C = preds.classes();
  std::vector<std::uint64_t> bins(static_cast<std::size_t>(C), 0);
  for (std::size_t i = 0; i < preds.pixels(); ++i) {
    if (!preds.valid(i)) continue;
    if (truth[i] >= C) throw InputError("ground-truth label out of range");
    ++bins[static_cast<std::size_t>(descending_rank(preds.pixel(i), truth[i]) - 1)];
  }
  return bins;
}

namespace {

Tensor4 gather_batch(const ImageView& images, std::size_t begin, std::size_t end) {
  Tensor4 x(static_cast<int>(end - begin), images.height(), images.width(), 3);
  const std::size_t stride = static_cast<std::size_t>(images.height()) * images.width() * 3;
  for (std::size_t i = begin; i < end; ++i) {
    const auto img = images.image(i);
    std::copy(img.begin(), img.end(), x.data.begin() + static_cast<std::ptrdiff_t>((i - begin) * stride));
  }
  return x;
}

}  // namespace

std::vector<std::vector<std::uint8_t>> predict_labels(const SegmentationModel& model, const ImageView& images,
                                                      int batch_size) {
  const std::size_t hw = static_cast<std::size_t>(images.height()) * images.width();
  const auto C = static_cast<std::size_t>(model.num_classes());
  std::vector<std::vector<std::uint8_t>> out(images.size(), std::vector<std::uint8_t>(hw));
  for (std::size_t b = 0; b < images.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(images.size(), b + static_cast<std::size_t>(batch_size));
    const auto logits = model.forward(gather_batch(images, b, e));
    for (std::size_t i = b; i < e; ++i) {
      for (std::size_t p = 0; p < hw; ++p) {
        const float* z = logits.pixel((i - b) * hw + p);
        out[i][p] = static_cast<std::uint8_t>(std::max_element(z, z + C) - z);
      }
    }
  }
  return out;
}

EvalReport evaluate(const SegmentationModel& model, const SceneDataset& data, std::span<const int> excluded,
                    int batch_size) {
  if (!data.has_labels()) throw InputError("evaluation split has no labels");
  if (data.num_classes() != model.num_classes()) {
    throw InputError("model predicts " + std::to_string(model.num_classes()) + " classes but the data has " +
                     std::to_string(data.num_classes()));
  }
  const int C = model.num_classes();
  const ImageView images(data);
  const std::size_t hw = static_cast<std::size_t>(data.height()) * data.width();
  EvalReport r;
  r.confusion = ConfusionMatrix(C);
  r.rank_histogram.assign(static_cast<std::size_t>(C), 0);
  for (std::size_t b = 0; b < data.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(data.size(), b + static_cast<std::size_t>(batch_size));
    const auto logits = model.forward(gather_batch(images, b, e));
    const auto preds = SoftmaxMap::from_logits({static_cast<int>(e - b), data.height(), data.width(), C},
                                               std::span<const float>(logits.data));
    std::vector<std::uint8_t> truth;
    truth.reserve((e - b) * hw);
    for (std::size_t i = b; i < e; ++i) {
      const auto l = data.labels(i);
      truth.insert(truth.end(), l.begin(), l.end());
    }
    std::vector<std::uint8_t> pred(truth.size());
    for (std::size_t p = 0; p < pred.size(); ++p) pred[p] = static_cast<std::uint8_t>(argmax_class(preds.pixel(p)));
    accumulate_confusion(r.confusion, pred, truth);
    const auto bins = rank_histogram(preds, truth);
    for (std::size_t c = 0; c < bins.size(); ++c) r.rank_histogram[c] += bins[c];
  }
  const auto iou = compute_iou(r.confusion, excluded);
  r.per_class_iou = iou.per_class_iou;
  r.miou = iou.miou;
  r.excluded_classes = iou.excluded_classes;
  r.per_class_prediction_mass.assign(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c) {
    r.per_class_prediction_mass[static_cast<std::size_t>(c)] =
        static_cast<double>(r.confusion.col_sum(c)) / static_cast<double>(r.confusion.total());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Report emission

namespace {

const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
                          "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw InputError("cannot write " + p.string());
  return os;
}

std::string iou_cell(const std::optional<double>& v) { return v ? fmt(100.0 * *v) : "n/a"; }

void write_svg_lines(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::vector<double>>& rows, const std::vector<int>& xs) {
  const double W = 640, H = 400, L = 60, R = 120, T = 40, B = 50;
  const int C = rows.empty() ? 0 : static_cast<int>(rows.front().size());
  double ymax = 0.0;
  for (const auto& r : rows) {
    for (double v : r) ymax = std::max(ymax, v);
  }
  ymax = ymax > 0.0 ? ymax * 1.05 : 1.0;
  const double x0 = xs.empty() ? 0 : xs.front();
  const double x1 = xs.size() > 1 ? xs.back() : x0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - y / ymax * (H - T - B); };

  auto os = open_out(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\">" << title
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = ymax * k / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
       << fmt(y, 3) << "</text>\n";
  }
  for (int x : xs) {
    os << "<text x=\"" << px(x) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"10\">" << x
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\">epoch</text>\n";
  for (int c = 0; c < C; ++c) {
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[c % 10] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i) os << px(xs[i]) << ',' << py(rows[i][static_cast<std::size_t>(c)]) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 14 * c + 10 << "\" font-size=\"11\" fill=\""
       << kPalette[c % 10] << "\">class " << c << "</text>\n";
  }
  os << "</svg>\n";
}

void write_svg_bars(const std::filesystem::path& path, const std::string& title,
                    const std::vector<std::uint64_t>& bins) {
  const double W = 640, H = 400, L = 60, R = 20, T = 40, B = 50;
  std::uint64_t total = 0;
  for (auto b : bins) total += b;
  const double bw = (W - L - R) / std::max<std::size_t>(bins.size(), 1);
  auto os = open_out(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\">" << title
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const double frac = total ? static_cast<double>(bins[i]) / static_cast<double>(total) : 0.0;
    const double h = frac * (H - T - B);
    os << "<rect x=\"" << L + i * bw + 2 << "\" y=\"" << H - B - h << "\" width=\"" << bw - 4 << "\" height=\"" << h
       << "\" fill=\"#4e79a7\"/>\n";
    os << "<text x=\"" << L + (i + 0.5) * bw << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\" font-size=\"10\">Top " << i + 1 << "</text>\n";
    os << "<text x=\"" << L + (i + 0.5) * bw << "\" y=\"" << H - B - h - 4
       << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(100.0 * frac, 1) << "%</text>\n";
  }
  os << "</svg>\n";
}

nlohmann::json iou_json(const EvalReport& r) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) a.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return a;
}

}  // namespace

void emit_report(std::span<const EvalReport> reports, const ReportContext& ctx, const std::filesystem::path& out_dir) {
  if (reports.empty()) throw InputError("emit_report needs at least one report");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw InputError("cannot create report directory " + out_dir.string() + ": " + ec.message());
  const auto& last = reports.back();
  const int C = last.confusion.classes();

  std::vector<MethodRow> rows{{ctx.method, last}};
  rows.insert(rows.end(), ctx.comparison.begin(), ctx.comparison.end());
  auto gain = [&](double miou) { return 100.0 * (miou - *ctx.source_only_miou); };

  {
    auto os = open_out(out_dir / "per_class_iou.csv");
    os << "method";
    for (int c = 0; c < C; ++c) os << ",class_" << c;
    os << ",miou";
    if (ctx.source_only_miou) os << ",gain";
    os << '\n';
    for (const auto& row : rows) {
      os << row.method;
      for (const auto& v : row.report.per_class_iou) os << ',' << iou_cell(v);
      os << ',' << fmt(100.0 * row.report.miou);
      if (ctx.source_only_miou) os << ',' << fmt(gain(row.report.miou));
      os << '\n';
    }
  }
  {
    auto os = open_out(out_dir / "per_class_iou.txt");
    std::size_t name_w = 6;
    for (const auto& row : rows) name_w = std::max(name_w, row.method.size());
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-*s", static_cast<int>(name_w), "method");
    os << buf;
    for (int c = 0; c < C; ++c) {
      std::snprintf(buf, sizeof(buf), " %7s", ("c" + std::to_string(c)).c_str());
      os << buf;
    }
    os << "    mIoU";
    if (ctx.source_only_miou) os << "     gain";
    os << '\n';
    for (const auto& row : rows) {
      std::snprintf(buf, sizeof(buf), "%-*s", static_cast<int>(name_w), row.method.c_str());
      os << buf;
      for (const auto& v : row.report.per_class_iou) {
        std::snprintf(buf, sizeof(buf), " %7s", iou_cell(v).c_str());
        os << buf;
      }
      std::snprintf(buf, sizeof(buf), " %7.2f", 100.0 * row.report.miou);
      os << buf;
      if (ctx.source_only_miou) {
        std::snprintf(buf, sizeof(buf), " %+8.2f", gain(row.report.miou));
        os << buf;
      }
      os << '\n';
    }
    if (!last.excluded_classes.empty()) {
      os << "excluded from mIoU:";
      for (int e : last.excluded_classes) os << ' ' << e;
      os << '\n';
    }
  }
  {
    auto os = open_out(out_dir / "class_mass.csv");
    os << "epoch";
    for (int c = 0; c < C; ++c) os << ",class_" << c;
    os << '\n';
    std::vector<std::vector<double>> mass;
    std::vector<int> xs;
    for (const auto& r : reports) {
      os << r.epoch;
      for (double m : r.per_class_prediction_mass) os << ',' << fmt(m, 6);
      os << '\n';
      mass.push_back(r.per_class_prediction_mass);
      xs.push_back(r.epoch);
    }
    write_svg_lines(out_dir / "class_mass.svg", "predicted class mass per epoch", mass, xs);
  }
  {
    auto os = open_out(out_dir / "rank_hist.csv");
    os << "rank,count\n";
    for (std::size_t i = 0; i < last.rank_histogram.size(); ++i) os << i + 1 << ',' << last.rank_histogram[i] << '\n';
    write_svg_bars(out_dir / "rank_hist.svg", "rank of the true class in the softmax output", last.rank_histogram);
  }
  {
    nlohmann::json methods = nlohmann::json::array();
    for (const auto& row : rows) {
      nlohmann::json m = {{"method", row.method}, {"miou", row.report.miou}, {"per_class_iou", iou_json(row.report)}};
      if (ctx.source_only_miou) m["gain"] = row.report.miou - *ctx.source_only_miou;
      methods.push_back(m);
    }
    nlohmann::json summary = {{"method", ctx.method},
                              {"config_hash", hex64(ctx.config_hash)},
                              {"miou", last.miou},
                              {"per_class_iou", iou_json(last)},
                              {"excluded_classes", last.excluded_classes},
                              {"prediction_mass", last.per_class_prediction_mass},
                              {"rank_histogram", last.rank_histogram},
                              {"methods", methods}};
    summary["gain"] = ctx.source_only_miou ? nlohmann::json(last.miou - *ctx.source_only_miou) : nlohmann::json(nullptr);
    auto os = open_out(out_dir / "summary.json");
    os << summary.dump(2) << '\n';
  }
}

}  // namespace ldseg
