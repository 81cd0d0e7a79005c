#include "ldseg/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>

#include <spdlog/spdlog.h>

#include "ldseg/code_version.hpp"
#include "ldseg/errors.hpp"
#include "ldseg/eval.hpp"
#include "ldseg/hashing.hpp"
#include "ldseg/json_io.hpp"

namespace ldseg::cli {

namespace fs = std::filesystem;

std::string code_version() { return kCodeVersion; }

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw InputError("cannot write " + p.string());
  return os;
}

void write_json(const fs::path& p, const nlohmann::json& j) { open_out(p) << j.dump(2) << '\n'; }

// One run directory with exactly one manifest.json.
class RunDir {
 public:
  RunDir(fs::path dir, bool force, std::string subcommand, nlohmann::json config, nlohmann::json inputs)
      : dir_(std::move(dir)) {
    if (fs::exists(dir_ / "manifest.json")) {
      if (!force) {
        throw ConfigError("output directory " + dir_.string() + " already holds a run; pass --force to overwrite");
      }
      fs::remove_all(dir_);
    }
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw InputError("cannot create " + dir_.string() + ": " + ec.message());
    manifest_ = {{"subcommand", std::move(subcommand)},
                 {"config", std::move(config)},
                 {"inputs", std::move(inputs)},
                 {"output", dir_.string()},
                 {"code_version", code_version()},
                 {"started_at", utc_now()},
                 {"status", "running"}};
    flush();
  }

  const fs::path& path() const { return dir_; }
  nlohmann::json& manifest() { return manifest_; }

  void finish() {
    manifest_["finished_at"] = utc_now();
    manifest_["status"] = "completed";
    flush();
  }

 private:
  void flush() { write_json(dir_ / "manifest.json", manifest_); }

  fs::path dir_;
  nlohmann::json manifest_;
};

class MetricsLog {
 public:
  explicit MetricsLog(const fs::path& p) : os_(open_out(p)) {
    os_ << "epoch,iter,lr,L_sce,L_ent,L_neg,L_div,L_total\n";
  }
  void add(const StepRecord& s) {
    os_ << s.epoch << ',' << s.iter << ',' << num(s.lr) << ',' << num(s.sce) << ',' << num(s.ent) << ','
        << num(s.neg) << ',' << num(s.div) << ',' << num(s.total) << '\n';
  }

 private:
  std::ofstream os_;
};

class EpochLog {
 public:
  EpochLog(const fs::path& p, int classes) : os_(open_out(p)) {
    os_ << "epoch,mean_loss,selected_pixels,total_pixels";
    for (int c = 0; c < classes; ++c) os_ << ",delta_" << c;
    for (int c = 0; c < classes; ++c) os_ << ",mass_" << c;
    os_ << '\n';
    classes_ = classes;
  }
  void start(const EpochRecord& r) { pending_ = r; }
  void end(const EpochRecord& r) {
    os_ << r.epoch << ',' << num(r.mean_loss) << ',' << pending_.selected_pixels << ',' << pending_.total_pixels;
    for (int c = 0; c < classes_; ++c) {
      os_ << ',' << (pending_.thresholds.empty() ? std::string() : num(pending_.thresholds[static_cast<std::size_t>(c)]));
    }
    for (int c = 0; c < classes_; ++c) {
      os_ << ','
          << (pending_.prediction_mass.empty() ? std::string()
                                                : num(pending_.prediction_mass[static_cast<std::size_t>(c)]));
    }
    os_ << '\n';
  }

 private:
  std::ofstream os_;
  EpochRecord pending_;
  int classes_ = 0;
};

fs::path epoch_checkpoint(const fs::path& dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
  return dir / "checkpoints" / name;
}

std::uint64_t parse_seed(const std::string& text, const std::string& origin) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used, 10);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(origin + " must be a non-negative integer, got '" + text + "'");
  }
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw InputError(what + " not found: " + p.string());
}

InMemoryDataset open_dataset(const fs::path& dir) {
  require_exists(dir / "manifest.json", "dataset manifest");
  return read_dataset(dir);
}

Checkpoint open_checkpoint(const fs::path& p, const CheckpointExpectations& expect = {}) {
  require_exists(p, "checkpoint");
  return load_checkpoint(p, expect);
}

EvalReport evaluate_epoch(const SegmentationModel& model, const SceneDataset& data, int epoch) {
  auto r = evaluate(model, data);
  r.epoch = epoch;
  return r;
}

}  // namespace

AdaptationConfig resolve_config(const CommonOptions& common) {
  AdaptationConfig cfg;
  if (common.config) cfg = load_config(*common.config, cfg);
  if (const char* env = std::getenv("LD_SFSS_SEED"); env && *env) cfg.seed = parse_seed(env, "LD_SFSS_SEED");
  if (common.seed) cfg.seed = *common.seed;
  cfg.validate();
  return cfg;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kUsageError;
  } catch (const InputError& e) {
    spdlog::error("input error: {}", e.what());
    return kUsageError;
  } catch (const ContractViolation& e) {
    spdlog::error("contract violation: {}", e.what());
    return kRuntimeError;
  } catch (const NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return kRuntimeError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntimeError;
  }
}

int cmd_dataset_gen(const CommonOptions& common, const DatasetGenOptions& opts) {
  if (opts.count <= 0) throw ConfigError("--count must be positive; empty datasets are refused");
  DomainSpec spec;
  if (opts.spec) {
    std::ifstream is(*opts.spec);
    if (!is) throw ConfigError("cannot read spec " + opts.spec->string());
    try {
      spec = domain_spec_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("spec " + opts.spec->string() + " is not valid JSON: " + e.what());
    }
    if (common.seed || std::getenv("LD_SFSS_SEED")) spec.seed = resolve_config(common).seed;
  } else {
    const auto bench = default_benchmark(resolve_config(common).seed);
    if (opts.preset == "source") {
      spec = bench.source;
    } else if (opts.preset == "target-train") {
      spec = bench.target_train;
    } else if (opts.preset == "target-eval") {
      spec = bench.target_eval;
    } else {
      throw ConfigError("need --spec or --preset source|target-train|target-eval");
    }
  }
  spec.validate();
  if (fs::exists(opts.out / "manifest.json") && !common.force) {
    throw ConfigError("output directory " + opts.out.string() + " already holds a dataset; pass --force to overwrite");
  }
  if (common.force && fs::exists(opts.out / "manifest.json")) fs::remove_all(opts.out);
  const auto started = utc_now();
  write_dataset(spec, static_cast<std::size_t>(opts.count), opts.out, opts.labels, common.workers);

  // The dataset manifest doubles as the run manifest.
  std::ifstream ms(opts.out / "manifest.json");
  auto manifest = nlohmann::json::parse(ms);
  ms.close();
  manifest["run"] = {{"subcommand", "dataset gen"},
                     {"inputs", {{"spec", opts.spec ? opts.spec->string() : "preset:" + opts.preset}}},
                     {"code_version", code_version()},
                     {"started_at", started},
                     {"finished_at", utc_now()}};
  write_json(opts.out / "manifest.json", manifest);
  spdlog::info("wrote {} scenes to {}", opts.count, opts.out.string());
  return kSuccess;
}

int cmd_train_source(const CommonOptions& common, const TrainSourceOptions& opts) {
  const auto cfg = resolve_config(common);
  const auto source = open_dataset(opts.data);
  std::optional<InMemoryDataset> held_out;
  if (opts.eval_data) held_out = open_dataset(*opts.eval_data);
  nlohmann::json inputs = {{"data", opts.data.string()}};
  if (opts.eval_data) inputs["eval_data"] = opts.eval_data->string();
  RunDir run(opts.out, common.force, "train-source", to_json(cfg), inputs);
  write_json(run.path() / "config.json", to_json(cfg));
  fs::create_directories(run.path() / "checkpoints");

  MetricsLog metrics(run.path() / "metrics.csv");
  EpochLog epochs(run.path() / "epochs.csv", cfg.architecture.num_classes);
  TrainingObserver ob;
  ob.on_step = [&](const StepRecord& s) { metrics.add(s); };
  ob.on_epoch_start = [&](const EpochRecord& r) { epochs.start(r); };
  ob.on_epoch_end = [&](const Checkpoint& c, const EpochRecord& r) {
    epochs.end(r);
    save_checkpoint(c, epoch_checkpoint(run.path(), r.epoch));
  };
  const auto ckpt = source_pretrain(SegmentationModel(cfg.architecture, cfg.seed), source, cfg, ob);
  save_checkpoint(ckpt, run.path() / "model.ckpt");
  if (held_out) {
    const auto report = evaluate_epoch(ckpt.model, *held_out, ckpt.epoch);
    emit_report(std::span(&report, 1), {"source_only", cfg.hash(), {}, {}}, run.path() / "report");
    run.manifest()["source_eval_miou"] = report.miou;
    spdlog::info("held-out source mIoU {:.2f}", 100.0 * report.miou);
  }
  run.finish();
  return kSuccess;
}

int cmd_adapt(const CommonOptions& common, const AdaptOptions& opts) {
  auto cfg = resolve_config(common);
  if (opts.method) cfg.method = *opts.method;
  if (opts.ablation == "no-pos") {
    cfg.disable_pos = true;
  } else if (opts.ablation == "no-neg") {
    cfg.disable_neg = true;
  } else if (opts.ablation != "none") {
    throw ConfigError("--ablation must be none, no-pos or no-neg");
  }
  cfg.validate();
  const auto start = open_checkpoint(opts.checkpoint, {.num_classes = cfg.architecture.num_classes,
                                                       .config_hash = std::nullopt,
                                                       .stage = std::nullopt});
  const auto target = open_dataset(opts.data);
  std::optional<InMemoryDataset> eval_split;
  if (opts.eval_data) eval_split = open_dataset(*opts.eval_data);

  nlohmann::json inputs = {{"checkpoint", opts.checkpoint.string()}, {"data", opts.data.string()}};
  if (opts.eval_data) inputs["eval_data"] = opts.eval_data->string();
  RunDir run(opts.out, common.force, "adapt", to_json(cfg), inputs);
  write_json(run.path() / "config.json", to_json(cfg));
  fs::create_directories(run.path() / "checkpoints");

  MetricsLog metrics(run.path() / "metrics.csv");
  EpochLog epochs(run.path() / "epochs.csv", cfg.architecture.num_classes);
  std::vector<EvalReport> reports;
  if (eval_split) reports.push_back(evaluate_epoch(start.model, *eval_split, 0));
  TrainingObserver ob;
  ob.on_step = [&](const StepRecord& s) { metrics.add(s); };
  ob.on_epoch_start = [&](const EpochRecord& r) { epochs.start(r); };
  ob.on_epoch_end = [&](const Checkpoint& c, const EpochRecord& r) {
    epochs.end(r);
    save_checkpoint(c, epoch_checkpoint(run.path(), r.epoch));
    if (eval_split) reports.push_back(evaluate_epoch(c.model, *eval_split, r.epoch));
  };
  // Only images of the target split cross this boundary.
  const auto out = run_adaptation(start, ImageView(target), cfg, ob);
  save_checkpoint(out, run.path() / "model.ckpt");
  if (eval_split) {
    emit_report(reports, {cfg.method, cfg.hash(), reports.front().miou, {}}, run.path() / "report");
    run.manifest()["eval_miou"] = reports.back().miou;
  }
  run.finish();
  return kSuccess;
}

int cmd_eval(const CommonOptions& common, const EvalOptions& opts) {
  const auto cfg = resolve_config(common);
  const auto ckpt = open_checkpoint(opts.checkpoint);
  const auto data = open_dataset(opts.data);
  if (!data.has_labels()) throw InputError("evaluation split " + opts.data.string() + " has no labels");
  nlohmann::json inputs = {{"checkpoint", opts.checkpoint.string()}, {"data", opts.data.string()}};
  if (opts.reference) inputs["reference"] = opts.reference->string();
  RunDir run(opts.out, common.force, "eval", to_json(cfg), inputs);
  auto report = evaluate(ckpt.model, data, opts.exclude_classes);
  report.epoch = ckpt.epoch;
  ReportContext ctx{opts.label, ckpt.config_hash, {}, {}};
  if (opts.reference) {
    const auto ref = open_checkpoint(*opts.reference);
    auto ref_report = evaluate(ref.model, data, opts.exclude_classes);
    ctx.source_only_miou = ref_report.miou;
    ctx.comparison.push_back({"source_only", std::move(ref_report)});
  }
  emit_report(std::span(&report, 1), ctx, run.path());
  spdlog::info("mIoU {:.2f}", 100.0 * report.miou);
  run.finish();
  return kSuccess;
}

int cmd_reproduce(const CommonOptions& common, const ReproduceOptions& opts) {
  auto cfg = resolve_config(common);
  auto bench = default_benchmark(cfg.seed);
  if (opts.quick) {
    for (auto* s : {&bench.source, &bench.target_train, &bench.target_eval}) s->height = s->width = 32;
    bench.source_count = 48;
    bench.target_train_count = 48;
    bench.target_eval_count = 24;
    cfg.source_epochs = 3;
    cfg.adapt_epochs = 2;
  }
  const nlohmann::json bench_json = {{"source", to_json(bench.source)},
                                     {"target_train", to_json(bench.target_train)},
                                     {"target_eval", to_json(bench.target_eval)},
                                     {"source_count", bench.source_count},
                                     {"target_train_count", bench.target_train_count},
                                     {"target_eval_count", bench.target_eval_count}};
  RunDir run(opts.out, common.force, "reproduce", to_json(cfg), {{"benchmark", bench_json}, {"quick", opts.quick}});
  write_json(run.path() / "config.json", to_json(cfg));
  write_json(run.path() / "benchmark.json", bench_json);

  const auto source = generate_dataset(bench.source, bench.source_count, true, common.workers);
  const auto target_train = generate_dataset(bench.target_train, bench.target_train_count, false, common.workers);
  const auto target_eval = generate_dataset(bench.target_eval, bench.target_eval_count, true, common.workers);

  fs::create_directories(run.path() / "source");
  Checkpoint base = [&] {
    MetricsLog metrics(run.path() / "source" / "metrics.csv");
    TrainingObserver ob;
    ob.on_step = [&](const StepRecord& s) { metrics.add(s); };
    return source_pretrain(SegmentationModel(cfg.architecture, cfg.seed), source, cfg, ob);
  }();
  save_checkpoint(base, run.path() / "source" / "model.ckpt");
  const auto source_report = evaluate_epoch(base.model, target_eval, 0);
  spdlog::info("source-only target mIoU {:.2f}", 100.0 * source_report.miou);

  struct Variant {
    std::string name;
    std::string method;
    bool no_pos;
    bool no_neg;
  };
  const std::vector<Variant> variants{{"ld", "ld", false, false},          {"ld_no_pos", "ld", true, false},
                                      {"ld_no_neg", "ld", false, true},    {"entmin", "entmin", false, false},
                                      {"pseudo", "pseudo", false, false},  {"pseudo_ent", "pseudo_ent", false, false},
                                      {"pseudo_sel", "pseudo_sel", false, false},
                                      {"shot_im", "shot_im", false, false}};
  std::vector<EvalReport> ld_reports;
  std::vector<MethodRow> rows{{"source_only", source_report}};
  for (const auto& v : variants) {
    auto vcfg = cfg;
    vcfg.method = v.method;
    vcfg.disable_pos = v.no_pos;
    vcfg.disable_neg = v.no_neg;
    const auto dir = run.path() / "methods" / v.name;
    fs::create_directories(dir);
    write_json(dir / "config.json", to_json(vcfg));
    std::vector<EvalReport> reports{source_report};
    MetricsLog metrics(dir / "metrics.csv");
    EpochLog epochs(dir / "epochs.csv", vcfg.architecture.num_classes);
    TrainingObserver ob;
    ob.on_step = [&](const StepRecord& s) { metrics.add(s); };
    ob.on_epoch_start = [&](const EpochRecord& r) { epochs.start(r); };
    ob.on_epoch_end = [&](const Checkpoint& c, const EpochRecord& r) {
      epochs.end(r);
      reports.push_back(evaluate_epoch(c.model, target_eval, r.epoch));
    };
    const auto out = run_adaptation(base, ImageView(target_train), vcfg, ob);
    save_checkpoint(out, dir / "model.ckpt");
    emit_report(reports, {v.name, vcfg.hash(), source_report.miou, {}}, dir);
    spdlog::info("{}: target mIoU {:.2f} (gain {:+.2f})", v.name, 100.0 * reports.back().miou,
                 100.0 * (reports.back().miou - source_report.miou));
    if (v.name == "ld") {
      ld_reports = reports;
    } else {
      rows.push_back({v.name, reports.back()});
    }
  }
  emit_report(ld_reports, {"ld", cfg.hash(), source_report.miou, rows}, run.path());
  run.finish();
  return kSuccess;
}

}  // namespace ldseg::cli
