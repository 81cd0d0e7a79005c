#include "ldseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <spdlog/spdlog.h>

#include "ldseg/errors.hpp"
#include "ldseg/hashing.hpp"
#include "ldseg/json_io.hpp"
#include "ldseg/random.hpp"

namespace ldseg {

std::string to_string(AdaptMethod m) {
  switch (m) {
    case AdaptMethod::ld: return "ld";
    case AdaptMethod::entmin: return "entmin";
    case AdaptMethod::pseudo: return "pseudo";
    case AdaptMethod::pseudo_ent: return "pseudo_ent";
    case AdaptMethod::pseudo_sel: return "pseudo_sel";
    case AdaptMethod::shot_im: return "shot_im";
  }
  return "?";
}

AdaptMethod parse_adapt_method(const std::string& name) {
  if (name == "ld") return AdaptMethod::ld;
  if (name == "entmin") return AdaptMethod::entmin;
  if (name == "pseudo") return AdaptMethod::pseudo;
  if (name == "pseudo_ent") return AdaptMethod::pseudo_ent;
  if (name == "pseudo_sel") return AdaptMethod::pseudo_sel;
  if (name == "shot_im") return AdaptMethod::shot_im;
  throw ConfigError("unknown method '" + name + "' (expected ld, entmin, pseudo, pseudo_ent, pseudo_sel, shot_im)");
}

HclsBand AdaptationConfig::band() const {
  if (hcls_band == "symmetric") return HclsBand::symmetric;
  if (hcls_band == "lower_only") return HclsBand::lower_only;
  throw ConfigError("hcls_band must be 'symmetric' or 'lower_only', got '" + hcls_band + "'");
}

LossReduction AdaptationConfig::reduction() const {
  if (loss_reduction == "mean") return LossReduction::mean;
  if (loss_reduction == "sum") return LossReduction::sum;
  throw ConfigError("loss_reduction must be 'mean' or 'sum', got '" + loss_reduction + "'");
}

BaselineSpec AdaptationConfig::baseline() const {
  BaselineSpec s;
  s.kind = parse_baseline_kind(method);
  s.confidence_threshold = confidence_threshold;
  s.tradeoff = pseudo_ent_tradeoff;
  s.diversity_weight = diversity_weight;
  return s;
}

void AdaptationConfig::validate() const {
  const auto m = adapt_method();
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
  require(epsilon >= 0, "epsilon must be non-negative");
  require(std::isfinite(lambda_ent) && lambda_ent >= 0.0, "lambda_ent must be non-negative");
  require(std::isfinite(lambda_neg) && lambda_neg >= 0.0, "lambda_neg must be non-negative");
  require(std::isfinite(lr0) && lr0 >= 0.0, "lr0 must be non-negative");
  require(std::isfinite(source_lr0) && source_lr0 >= 0.0, "source_lr0 must be non-negative");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  require(std::isfinite(weight_decay) && weight_decay >= 0.0, "weight_decay must be non-negative");
  require(std::isfinite(poly_power) && poly_power >= 0.0, "poly_power must be non-negative");
  require(batch_size >= 1, "batch_size must be at least 1");
  require(source_epochs >= 0 && adapt_epochs >= 0, "epoch counts must be non-negative");
  require(!(disable_pos && disable_neg), "disable_pos and disable_neg together leave no training signal");
  if ((disable_pos || disable_neg) && m != AdaptMethod::ld) {
    throw ConfigError("ablation flags only apply to method ld");
  }
  band();
  reduction();
  if (m != AdaptMethod::ld) baseline().validate();
}

nlohmann::json to_json(const AdaptationConfig& c) {
  return {{"method", c.method},
          {"alpha", c.alpha},
          {"epsilon", c.epsilon},
          {"hcls_band", c.hcls_band},
          {"lambda_ent", c.lambda_ent},
          {"lambda_neg", c.lambda_neg},
          {"lr0", c.lr0},
          {"source_lr0", c.source_lr0},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"poly_power", c.poly_power},
          {"batch_size", c.batch_size},
          {"source_epochs", c.source_epochs},
          {"adapt_epochs", c.adapt_epochs},
          {"seed", c.seed},
          {"disable_pos", c.disable_pos},
          {"disable_neg", c.disable_neg},
          {"loss_reduction", c.loss_reduction},
          {"augment_flip", c.augment_flip},
          {"confidence_threshold", c.confidence_threshold},
          {"pseudo_ent_tradeoff", c.pseudo_ent_tradeoff},
          {"diversity_weight", c.diversity_weight},
          {"architecture", to_json(c.architecture)}};
}

AdaptationConfig config_from_json(const nlohmann::json& j, AdaptationConfig c) {
  if (!j.is_object()) throw ConfigError("config must be a key-value object");
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("method", c.method);
    get("alpha", c.alpha);
    get("epsilon", c.epsilon);
    get("hcls_band", c.hcls_band);
    get("lambda_ent", c.lambda_ent);
    get("lambda_neg", c.lambda_neg);
    get("lr0", c.lr0);
    get("source_lr0", c.source_lr0);
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("poly_power", c.poly_power);
    get("batch_size", c.batch_size);
    get("source_epochs", c.source_epochs);
    get("adapt_epochs", c.adapt_epochs);
    get("seed", c.seed);
    get("disable_pos", c.disable_pos);
    get("disable_neg", c.disable_neg);
    get("loss_reduction", c.loss_reduction);
    get("augment_flip", c.augment_flip);
    get("confidence_threshold", c.confidence_threshold);
    get("pseudo_ent_tradeoff", c.pseudo_ent_tradeoff);
    get("diversity_weight", c.diversity_weight);
    if (j.contains("architecture")) {
      auto arch = to_json(c.architecture);
      arch.update(j.at("architecture"));
      c.architecture = architecture_from_json(arch);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

AdaptationConfig load_config(const std::filesystem::path& path, AdaptationConfig base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::move(base));
}

std::uint64_t AdaptationConfig::hash() const { return fnv1a(to_json(*this).dump()); }

int effective_epsilon(const AdaptationConfig& cfg, int classes) {
  const auto band = cfg.band();
  const int max_eps = max_hcls_epsilon(classes, band);
  if (max_eps < 0) {
    throw ConfigError("complementary-label sampling needs at least 4 classes, got " + std::to_string(classes));
  }
  if (cfg.epsilon > max_eps) {
    spdlog::warn("epsilon {} violates the sampling bounds for {} classes; using {}", cfg.epsilon, classes, max_eps);
    return max_eps;
  }
  check_hcls_preconditions(classes, cfg.epsilon, band);
  return cfg.epsilon;
}

double poly_lr(long iter, long max_iter, double lr0, double power) {
  if (iter < 0 || max_iter <= 0 || iter > max_iter) {
    throw ContractViolation("poly_lr needs 0 <= iter <= max_iter, got iter " + std::to_string(iter) +
                            ", max_iter " + std::to_string(max_iter));
  }
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

void Sgd::step(std::vector<Parameter>& params, const Gradients& grads, double lr) {
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.value.size(), 0.0f);
  }
  const auto m = static_cast<float>(momentum_);
  const auto wd = static_cast<float>(weight_decay_);
  const auto step = static_cast<float>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k].value;
    auto& v = velocity_[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = m * v[i] + g[i] + wd * w[i];
      w[i] -= step * v[i];
    }
  }
}

LossValue cross_entropy(const SoftmaxMap& preds, std::span<const std::uint8_t> labels) {
  if (labels.size() != preds.pixels()) throw InputError("label map does not match the prediction grid");
  const auto C = static_cast<std::size_t>(preds.classes());
  LossValue out;
  out.grad_logits.assign(preds.data().begin(), preds.data().end());
  const double scale = 1.0 / static_cast<double>(preds.pixels());
  for (std::size_t i = 0; i < preds.pixels(); ++i) {
    if (labels[i] >= C) throw InputError("label out of range");
    out.value -= std::log(std::max(preds.prob(i, labels[i]), kLogEps));
    out.grad_logits[i * C + labels[i]] -= 1.0;
  }
  out.value *= scale;
  for (auto& g : out.grad_logits) g *= scale;
  return out;
}

namespace {

constexpr std::uint64_t kSourceStream = 0x736f75726365;
constexpr std::uint64_t kAdaptStream = 0x6164617074;

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// Copies an (H, W, K) map into slot `slot` of a batch, optionally mirrored.
template <typename T>
void copy_map(std::span<const T> src, T* dst, int H, int W, int K, bool flip) {
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int sx = flip ? W - 1 - x : x;
      const T* s = src.data() + (static_cast<std::size_t>(y) * W + sx) * K;
      T* d = dst + (static_cast<std::size_t>(y) * W + x) * K;
      std::copy(s, s + K, d);
    }
  }
}

struct Batch {
  std::vector<std::size_t> index;
  std::vector<bool> flip;
};

std::vector<Batch> plan_epoch(std::size_t n, int batch_size, bool augment, Rng& rng) {
  const auto order = shuffled(n, rng);
  std::vector<Batch> out;
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch_size)) {
    Batch batch;
    for (std::size_t i = b; i < std::min(n, b + static_cast<std::size_t>(batch_size)); ++i) {
      batch.index.push_back(order[i]);
      batch.flip.push_back(augment && rng.uniform() < 0.5);
    }
    out.push_back(std::move(batch));
  }
  return out;
}

Tensor4 batch_images(const Batch& batch, const std::function<std::span<const float>(std::size_t)>& image, int H,
                     int W) {
  Tensor4 x(static_cast<int>(batch.index.size()), H, W, 3);
  const std::size_t stride = static_cast<std::size_t>(H) * W * 3;
  for (std::size_t k = 0; k < batch.index.size(); ++k) {
    copy_map<float>(image(batch.index[k]), x.data.data() + k * stride, H, W, 3, batch.flip[k]);
  }
  return x;
}

Tensor4 to_tensor(const std::vector<double>& g, const Tensor4& like) {
  Tensor4 t(like.n, like.h, like.w, like.c);
  for (std::size_t i = 0; i < g.size(); ++i) t.data[i] = static_cast<float>(g[i]);
  return t;
}

void check_finite(double loss, int epoch, long iter) {
  if (!std::isfinite(loss)) {
    throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", iteration " +
                         std::to_string(iter) + "; lower the learning rate");
  }
}

void check_finite(const Tensor4& logits, int epoch, long iter) {
  for (float v : logits.data) {
    if (!std::isfinite(v)) check_finite(std::nan(""), epoch, iter);
  }
}

}  // namespace

Checkpoint source_pretrain(SegmentationModel model, const SceneDataset& source, const AdaptationConfig& cfg,
                           const TrainingObserver& observer) {
  cfg.validate();
  if (!source.has_labels()) throw InputError("source pre-training needs labelled scenes");
  if (source.size() == 0) throw InputError("source split is empty");
  if (source.num_classes() != model.num_classes()) {
    throw InputError("source data has " + std::to_string(source.num_classes()) + " classes, model predicts " +
                     std::to_string(model.num_classes()));
  }
  const int H = source.height();
  const int W = source.width();
  const int C = model.num_classes();
  const auto hw = static_cast<std::size_t>(H) * W;
  Rng rng(mix64(cfg.seed, kSourceStream));
  Sgd opt(cfg.momentum, cfg.weight_decay);
  const long batches = static_cast<long>((source.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long max_iter = std::max(1L, static_cast<long>(cfg.source_epochs) * batches);
  long iter = 0;
  const auto image = [&](std::size_t i) { return source.image(i); };

  for (int epoch = 1; epoch <= cfg.source_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    if (observer.on_epoch_start) observer.on_epoch_start(rec);
    double loss_sum = 0.0;
    for (const auto& batch : plan_epoch(source.size(), cfg.batch_size, cfg.augment_flip, rng)) {
      const auto x = batch_images(batch, image, H, W);
      std::vector<std::uint8_t> labels(batch.index.size() * hw);
      for (std::size_t k = 0; k < batch.index.size(); ++k) {
        copy_map<std::uint8_t>(source.labels(batch.index[k]), labels.data() + k * hw, H, W, 1, batch.flip[k]);
      }
      auto pass = model.forward_train(x);
      check_finite(pass.logits, epoch, iter);
      const auto preds = SoftmaxMap::from_logits({x.n, H, W, C}, std::span<const float>(pass.logits.data));
      const auto ce = cross_entropy(preds, labels);
      check_finite(ce.value, epoch, iter);
      const auto grads = model.backward(pass, to_tensor(ce.grad_logits, pass.logits));
      const double lr = poly_lr(iter, max_iter, cfg.source_lr0, cfg.poly_power);
      opt.step(model.parameters(), grads, lr);
      if (observer.on_step) {
        StepRecord s;
        s.epoch = epoch;
        s.iter = iter;
        s.lr = lr;
        s.sce = ce.value;
        s.total = ce.value;
        s.w_sce = 1.0;
        observer.on_step(s);
      }
      loss_sum += ce.value;
      ++iter;
    }
    rec.mean_loss = loss_sum / static_cast<double>(batches);
    spdlog::info("source epoch {}/{}: mean cross-entropy {:.4f}", epoch, cfg.source_epochs, rec.mean_loss);
    if (observer.on_epoch_end) {
      observer.on_epoch_end(Checkpoint{model, TrainingStage::source_pretrained, epoch, rng.state(), cfg.hash()}, rec);
    }
  }
  return Checkpoint{std::move(model), TrainingStage::source_pretrained, cfg.source_epochs, rng.state(), cfg.hash()};
}

Checkpoint run_adaptation(const Checkpoint& start, const ImageView& target, const AdaptationConfig& cfg,
                          const TrainingObserver& observer) {
  cfg.validate();
  if (start.stage == TrainingStage::initialized) {
    throw ConfigError("adaptation needs a source-pretrained checkpoint");
  }
  const int C = start.model.num_classes();
  if (target.num_classes() != C) {
    throw InputError("target data has " + std::to_string(target.num_classes()) + " classes, model predicts " +
                     std::to_string(C));
  }
  const auto method = cfg.adapt_method();
  const bool ld = method == AdaptMethod::ld;
  LdWeights weights{cfg.disable_pos ? 0.0 : 1.0, cfg.disable_pos ? 0.0 : cfg.lambda_ent,
                    cfg.disable_neg ? 0.0 : cfg.lambda_neg};
  const int epsilon = ld && weights.neg > 0.0 ? effective_epsilon(cfg, C) : cfg.epsilon;
  const auto band = cfg.band();
  const auto reduction = cfg.reduction();
  const BaselineSpec baseline = ld ? BaselineSpec{} : cfg.baseline();

  if (cfg.adapt_epochs == 0) return start;
  if (target.size() == 0) throw InputError("target split is empty");

  SegmentationModel model = start.model;
  const int H = target.height();
  const int W = target.width();
  const auto hw = static_cast<std::size_t>(H) * W;
  const std::size_t n_pixels = target.size() * hw;
  Rng rng(mix64(cfg.seed, kAdaptStream));
  Sgd opt(cfg.momentum, cfg.weight_decay);
  const long batches = static_cast<long>((target.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long max_iter = static_cast<long>(cfg.adapt_epochs) * batches;
  long iter = 0;
  const auto image = [&](std::size_t i) { return target.image(i); };

  std::vector<std::uint8_t> cached_labels(n_pixels);
  std::vector<std::uint8_t> cached_selected(n_pixels);
  std::vector<double> cached_conf(n_pixels);

  for (int epoch = 1; epoch <= cfg.adapt_epochs; ++epoch) {
    // Epoch-start refresh over the whole split with the current model.
    EpochRecord rec;
    rec.epoch = epoch;
    rec.total_pixels = n_pixels;
    rec.prediction_mass.assign(static_cast<std::size_t>(C), 0.0);
    constexpr std::size_t kInferBatch = 16;
    for (std::size_t b = 0; b < target.size(); b += kInferBatch) {
      const std::size_t e = std::min(target.size(), b + kInferBatch);
      Batch batch;
      for (std::size_t i = b; i < e; ++i) {
        batch.index.push_back(i);
        batch.flip.push_back(false);
      }
      const auto logits = model.forward(batch_images(batch, image, H, W));
      check_finite(logits, epoch, iter);
      const auto preds = SoftmaxMap::from_logits({static_cast<int>(e - b), H, W, C},
                                                 std::span<const float>(logits.data));
      for (std::size_t p = 0; p < preds.pixels(); ++p) {
        const auto px = preds.pixel(p);
        const int c = argmax_class(px);
        cached_labels[b * hw + p] = static_cast<std::uint8_t>(c);
        cached_conf[b * hw + p] = px[static_cast<std::size_t>(c)];
        rec.prediction_mass[static_cast<std::size_t>(c)] += 1.0;
      }
    }
    for (auto& m : rec.prediction_mass) m /= static_cast<double>(n_pixels);
    if (ld) {
      const auto thresholds = compute_class_thresholds(cached_labels, cached_conf, {}, C, cfg.alpha);
      for (std::size_t p = 0; p < n_pixels; ++p) {
        cached_selected[p] = cached_conf[p] >= thresholds.delta[cached_labels[p]];
        rec.selected_pixels += cached_selected[p];
      }
      rec.thresholds = thresholds.delta;
      rec.selection_hash = fnv1a(std::as_bytes(std::span(cached_selected)),
                                 fnv1a(std::as_bytes(std::span(cached_labels))));
    }
    if (observer.on_epoch_start) observer.on_epoch_start(rec);

    double loss_sum = 0.0;
    for (const auto& batch : plan_epoch(target.size(), cfg.batch_size, cfg.augment_flip, rng)) {
      const auto x = batch_images(batch, image, H, W);
      auto pass = model.forward_train(x);
      check_finite(pass.logits, epoch, iter);
      const MapShape shape{x.n, H, W, C};
      const auto preds = SoftmaxMap::from_logits(shape, std::span<const float>(pass.logits.data));
      const double lr = poly_lr(iter, max_iter, cfg.lr0, cfg.poly_power);
      StepRecord s;
      s.epoch = epoch;
      s.iter = iter;
      s.lr = lr;
      const std::vector<double>* grad = nullptr;
      LdTerms ld_terms;
      BaselineTerms base_terms;
      if (ld) {
        PseudoLabelSelection sel;
        sel.shape = shape;
        sel.pseudo_labels.resize(preds.pixels());
        sel.selected.resize(preds.pixels());
        sel.confidences.resize(preds.pixels());
        for (std::size_t k = 0; k < batch.index.size(); ++k) {
          const std::size_t off = batch.index[k] * hw;
          copy_map<std::uint8_t>(std::span(cached_labels).subspan(off, hw), sel.pseudo_labels.data() + k * hw, H, W,
                                 1, batch.flip[k]);
          copy_map<std::uint8_t>(std::span(cached_selected).subspan(off, hw), sel.selected.data() + k * hw, H, W, 1,
                                 batch.flip[k]);
          copy_map<double>(std::span<const double>(cached_conf).subspan(off, hw), sel.confidences.data() + k * hw, H,
                           W, 1, batch.flip[k]);
        }
        std::optional<ComplementaryLabelMap> comp;
        if (weights.neg > 0.0) comp = hcls_sample(preds, epsilon, mix64(cfg.seed, kAdaptStream, iter), band);
        ld_terms = loss_ld_terms(preds, sel, comp ? &*comp : nullptr, weights, reduction);
        s.sce = ld_terms.sce;
        s.ent = ld_terms.ent;
        s.neg = ld_terms.neg;
        s.total = ld_terms.total.value;
        s.w_sce = weights.sce;
        s.w_ent = weights.ent;
        s.w_neg = weights.neg;
        grad = &ld_terms.total.grad_logits;
      } else {
        base_terms = baseline_loss_terms(baseline, preds);
        s.sce = base_terms.ce;
        s.ent = base_terms.ent;
        s.div = base_terms.div;
        s.total = base_terms.total.value;
        switch (baseline.kind) {
          case BaselineKind::entmin: s.w_ent = 1.0; break;
          case BaselineKind::pseudo:
          case BaselineKind::pseudo_sel: s.w_sce = 1.0; break;
          case BaselineKind::pseudo_ent:
            s.w_sce = 1.0;
            s.w_ent = baseline.tradeoff;
            break;
          case BaselineKind::shot_im:
            s.w_ent = 1.0;
            s.w_div = -baseline.diversity_weight;
            break;
        }
        grad = &base_terms.total.grad_logits;
      }
      check_finite(s.total, epoch, iter);
      const auto grads = model.backward(pass, to_tensor(*grad, pass.logits));
      opt.step(model.parameters(), grads, lr);
      if (observer.on_step) observer.on_step(s);
      loss_sum += s.total;
      ++iter;
    }
    rec.mean_loss = loss_sum / static_cast<double>(batches);
    spdlog::info("adapt[{}] epoch {}/{}: mean loss {:.4f}, selected {}/{}", cfg.method, epoch, cfg.adapt_epochs,
                 rec.mean_loss, rec.selected_pixels, rec.total_pixels);
    if (observer.on_epoch_end) {
      observer.on_epoch_end(Checkpoint{model, TrainingStage::adapted, epoch, rng.state(), cfg.hash()}, rec);
    }
  }
  return Checkpoint{std::move(model), TrainingStage::adapted, cfg.adapt_epochs, rng.state(), cfg.hash()};
}

}  // namespace ldseg
