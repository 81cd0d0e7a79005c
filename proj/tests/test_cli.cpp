#include <unistd.h>

#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "ldseg/cli.hpp"
#include "ldseg/errors.hpp"
#include "ldseg/eval.hpp"
#include "ldseg/json_io.hpp"
#include "nlohmann/json.hpp"

using namespace ldseg;
using namespace ldseg::cli;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() / ("ldseg_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "tiny.json") << R"({
      // small enough for a unit test
      "source_epochs": 1, "adapt_epochs": 1, "batch_size": 4,
      "architecture": {"widths": [4, 8, 8, 8]}
    })";
  }
  ~Workspace() { fs::remove_all(root); }
  fs::path operator/(const std::string& s) const { return root / s; }

  CommonOptions common() const { return {.config = root / "tiny.json", .seed = 5, .workers = 1, .force = false}; }
};

int gen(const Workspace& ws, const std::string& preset, const std::string& out, long count, bool labels = true) {
  return guarded([&] {
    return cmd_dataset_gen(ws.common(), {.spec = std::nullopt, .preset = preset, .out = ws / out, .count = count,
                                         .labels = labels});
  });
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  return nlohmann::json::parse(is);
}

std::vector<std::string> csv_column(const fs::path& p, const std::string& name) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  std::vector<std::string> header;
  std::stringstream hs(line);
  for (std::string cell; std::getline(hs, cell, ',');) header.push_back(cell);
  const auto col = static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  REQUIRE(col < header.size());
  std::vector<std::string> out;
  while (std::getline(is, line)) {
    std::stringstream ls(line);
    std::vector<std::string> cells;
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    out.push_back(cells.at(col));
  }
  return out;
}

struct Prepared {
  Workspace ws;
  Prepared() {
    REQUIRE(gen(ws, "source", "src", 8) == kSuccess);
    REQUIRE(gen(ws, "target-train", "tt", 8, false) == kSuccess);
    REQUIRE(gen(ws, "target-eval", "te", 4) == kSuccess);
    REQUIRE(guarded([&] {
              return cmd_train_source(ws.common(), {.data = ws / "src", .out = ws / "run_src", .eval_data = {}});
            }) == kSuccess);
  }
};

}  // namespace

TEST_CASE("seed precedence: flag over environment over file") {
  Workspace ws;
  std::ofstream(ws / "seeded.json") << R"({"seed": 11})";
  CommonOptions c{.config = ws / "seeded.json", .seed = std::nullopt, .workers = 1, .force = false};
  ::unsetenv("LD_SFSS_SEED");
  CHECK(resolve_config(c).seed == 11);
  ::setenv("LD_SFSS_SEED", "22", 1);
  CHECK(resolve_config(c).seed == 22);
  c.seed = 33;
  CHECK(resolve_config(c).seed == 33);
  c.seed.reset();
  ::setenv("LD_SFSS_SEED", "x1", 1);
  CHECK_THROWS_AS(resolve_config(c), ConfigError);
  ::unsetenv("LD_SFSS_SEED");
  CHECK(resolve_config({}).seed == AdaptationConfig{}.seed);
}

TEST_CASE("exception to exit code mapping") {
  CHECK(guarded([] { return 0; }) == kSuccess);
  CHECK(guarded([]() -> int { throw ConfigError("x"); }) == kUsageError);
  CHECK(guarded([]() -> int { throw InputError("x"); }) == kUsageError);
  CHECK(guarded([]() -> int { throw FormatError("x"); }) == kRuntimeError);
  CHECK(guarded([]() -> int { throw NumericalError("x"); }) == kRuntimeError);
  CHECK(guarded([]() -> int { throw std::runtime_error("x"); }) == kRuntimeError);
}

TEST_CASE("dataset gen") {
  Workspace ws;
  CHECK(gen(ws, "source", "empty", 0) == kUsageError);
  CHECK_FALSE(fs::exists(ws / "empty" / "manifest.json"));
  CHECK(gen(ws, "nonsense", "bad", 2) == kUsageError);

  REQUIRE(gen(ws, "source", "d", 3) == kSuccess);
  const auto m = read_json(ws / "d" / "manifest.json");
  CHECK(m["count"] == 3);
  CHECK(m["run"]["subcommand"] == "dataset gen");
  CHECK(m["run"].contains("code_version"));
  CHECK(read_dataset(ws / "d").size() == 3);

  SUBCASE("rerun without --force is refused and leaves the data alone") {
    CHECK(gen(ws, "source", "d", 5) == kUsageError);
    CHECK(read_dataset(ws / "d").size() == 3);
  }
  SUBCASE("--force overwrites") {
    auto c = ws.common();
    c.force = true;
    CHECK(cmd_dataset_gen(c, {.spec = std::nullopt, .preset = "source", .out = ws / "d", .count = 5, .labels = true}) ==
          kSuccess);
    CHECK(read_dataset(ws / "d").size() == 5);
  }
  SUBCASE("spec file") {
    std::ofstream(ws / "spec.json") << to_json(default_source_spec(3)).dump();
    CHECK(guarded([&] {
            return cmd_dataset_gen(ws.common(), {.spec = ws / "spec.json", .preset = "", .out = ws / "s", .count = 2,
                                                 .labels = true});
          }) == kSuccess);
    std::ofstream(ws / "broken.json") << "{";
    CHECK(guarded([&] {
            return cmd_dataset_gen(ws.common(), {.spec = ws / "broken.json", .preset = "", .out = ws / "b",
                                                 .count = 2, .labels = true});
          }) == kUsageError);
  }
}

TEST_CASE("train-source") {
  Prepared p;
  const auto& ws = p.ws;
  const auto run = ws / "run_src";
  for (const char* f : {"manifest.json", "config.json", "metrics.csv", "epochs.csv", "model.ckpt",
                        "checkpoints/epoch_001.ckpt"}) {
    CHECK_MESSAGE(fs::exists(run / f), f);
  }
  const auto m = read_json(run / "manifest.json");
  CHECK(m["subcommand"] == "train-source");
  CHECK(m["status"] == "completed");
  CHECK(m["config"]["seed"] == 5);
  CHECK(load_checkpoint(run / "model.ckpt").stage == TrainingStage::source_pretrained);

  CHECK(guarded([&] {
          return cmd_train_source(ws.common(), {.data = ws / "src", .out = run, .eval_data = {}});
        }) == kUsageError);
  CHECK(guarded([&] {
          return cmd_train_source(ws.common(), {.data = ws / "missing", .out = ws / "r2", .eval_data = {}});
        }) == kUsageError);
  std::ofstream(ws / "bad.json") << R"({"alpha": 0})";
  CHECK(guarded([&] {
          CommonOptions c{.config = ws / "bad.json", .seed = {}, .workers = 1, .force = false};
          return cmd_train_source(c, {.data = ws / "src", .out = ws / "r3", .eval_data = {}});
        }) == kUsageError);
  std::ofstream(ws / "unknown.json") << R"({"alpah": 0.2})";
  CHECK(guarded([&] {
          CommonOptions c{.config = ws / "unknown.json", .seed = {}, .workers = 1, .force = false};
          return cmd_train_source(c, {.data = ws / "src", .out = ws / "r4", .eval_data = {}});
        }) == kUsageError);
}

TEST_CASE("adapt") {
  Prepared p;
  const auto& ws = p.ws;
  const auto ckpt = ws / "run_src" / "model.ckpt";
  auto adapt = [&](AdaptOptions o) { return guarded([&] { return cmd_adapt(ws.common(), o); }); };

  SUBCASE("no-neg ablation logs a zero negative loss") {
    REQUIRE(adapt({.checkpoint = ckpt, .data = ws / "tt", .out = ws / "a", .method = {}, .ablation = "no-neg",
                   .eval_data = ws / "te"}) == kSuccess);
    const auto neg = csv_column(ws / "a" / "metrics.csv", "L_neg");
    REQUIRE_FALSE(neg.empty());
    for (const auto& v : neg) CHECK(std::stod(v) == 0.0);
    for (const auto& v : csv_column(ws / "a" / "metrics.csv", "L_sce")) CHECK(std::stod(v) > 0.0);
    CHECK(read_json(ws / "a" / "config.json")["disable_neg"] == true);
    CHECK(fs::exists(ws / "a" / "report" / "summary.json"));
    CHECK(load_checkpoint(ws / "a" / "model.ckpt").stage == TrainingStage::adapted);
  }
  SUBCASE("baseline method") {
    REQUIRE(adapt({.checkpoint = ckpt, .data = ws / "tt", .out = ws / "p", .method = "pseudo", .ablation = "none",
                   .eval_data = {}}) == kSuccess);
    CHECK(read_json(ws / "p" / "manifest.json")["config"]["method"] == "pseudo");
    for (const auto& v : csv_column(ws / "p" / "metrics.csv", "L_neg")) CHECK(std::stod(v) == 0.0);
  }
  SUBCASE("errors") {
    CHECK(adapt({.checkpoint = ws / "nope.ckpt", .data = ws / "tt", .out = ws / "e1", .method = {},
                 .ablation = "none", .eval_data = {}}) == kUsageError);
    CHECK(adapt({.checkpoint = ckpt, .data = ws / "tt", .out = ws / "e2", .method = "magic", .ablation = "none",
                 .eval_data = {}}) == kUsageError);
    CHECK(adapt({.checkpoint = ckpt, .data = ws / "tt", .out = ws / "e3", .method = {}, .ablation = "no-both",
                 .eval_data = {}}) == kUsageError);
    std::ofstream(ws / "junk.ckpt") << "not a checkpoint";
    CHECK(adapt({.checkpoint = ws / "junk.ckpt", .data = ws / "tt", .out = ws / "e4", .method = {},
                 .ablation = "none", .eval_data = {}}) == kRuntimeError);
  }
}

TEST_CASE("eval") {
  Prepared p;
  const auto& ws = p.ws;
  const auto ckpt = ws / "run_src" / "model.ckpt";
  auto eval = [&](EvalOptions o) { return guarded([&] { return cmd_eval(ws.common(), o); }); };

  REQUIRE(eval({.checkpoint = ckpt, .data = ws / "te", .out = ws / "full", .exclude_classes = {}, .reference = {},
                .label = "model"}) == kSuccess);
  REQUIRE(eval({.checkpoint = ckpt, .data = ws / "te", .out = ws / "ex", .exclude_classes = {0, 1},
                .reference = ckpt, .label = "model"}) == kSuccess);
  for (const char* f : {"per_class_iou.csv", "per_class_iou.txt", "class_mass.csv", "class_mass.svg", "rank_hist.csv",
                        "rank_hist.svg", "summary.json", "manifest.json"}) {
    CHECK_MESSAGE(fs::exists(ws / "full" / f), f);
  }

  const auto full = read_json(ws / "full" / "summary.json");
  const auto ex = read_json(ws / "ex" / "summary.json");
  CHECK(ex["excluded_classes"] == nlohmann::json::array({0, 1}));
  double sum = 0.0;
  int n = 0;
  const auto& iou = full["per_class_iou"];
  for (std::size_t c = 2; c < iou.size(); ++c) {
    if (!iou[c].is_null()) {
      sum += iou[c].get<double>();
      ++n;
    }
  }
  REQUIRE(n > 0);
  CHECK(ex["miou"].get<double>() == doctest::Approx(sum / n).epsilon(1e-12));
  CHECK(ex["gain"].get<double>() == 0.0);

  CHECK(eval({.checkpoint = ckpt, .data = ws / "tt", .out = ws / "nolab", .exclude_classes = {}, .reference = {},
              .label = "model"}) == kUsageError);
  CHECK_FALSE(fs::exists(ws / "nolab" / "manifest.json"));
}
