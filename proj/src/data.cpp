#include "ldseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <thread>

#include "ldseg/binary_io.hpp"
#include "ldseg/errors.hpp"
#include "ldseg/hashing.hpp"
#include "ldseg/json_io.hpp"
#include "ldseg/random.hpp"

namespace ldseg {

namespace {

constexpr char kRecordMagic[4] = {'L', 'D', 'S', 'C'};
constexpr std::uint64_t kGeometryStream = 0x67656f6d;
constexpr std::uint64_t kAppearanceStream = 0x61707065;
constexpr std::uint64_t kNoiseStream = 0x6e6f6973;

using Mat3 = std::array<std::array<double, 3>, 3>;

// Rotation about the grey axis.
Mat3 hue_rotation(double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a);
  const double s = std::sin(a);
  const double d = (1.0 - c) / 3.0;
  const double t = std::sqrt(1.0 / 3.0) * s;
  const double m0 = c + d;
  const double m1 = d - t;
  const double m2 = d + t;
  return {{{m0, m1, m2}, {m2, m0, m1}, {m1, m2, m0}}};
}

struct Geometry {
  std::vector<std::uint8_t> labels;
  std::vector<std::int32_t> object;
  std::vector<int> object_class;
};

int paint_rect(Geometry& g, int H, int W, int bg, int cls, int id, double cy, double cx, double hh, double hw) {
  int painted = 0;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - hh)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + hh)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - hw)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + hw)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (std::abs(y + 0.5 - cy) > hh || std::abs(x + 0.5 - cx) > hw) continue;
      const auto i = static_cast<std::size_t>(y) * W + x;
      if (g.labels[i] != bg) continue;
      g.labels[i] = static_cast<std::uint8_t>(cls);
      g.object[i] = id;
      ++painted;
    }
  }
  return painted;
}

int paint_ellipse(Geometry& g, int H, int W, int bg, int cls, int id, double cy, double cx, double ry, double rx) {
  int painted = 0;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + ry)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + rx)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dy = (y + 0.5 - cy) / ry;
      const double dx = (x + 0.5 - cx) / rx;
      if (dy * dy + dx * dx > 1.0) continue;
      const auto i = static_cast<std::size_t>(y) * W + x;
      if (g.labels[i] != bg) continue;
      g.labels[i] = static_cast<std::uint8_t>(cls);
      g.object[i] = id;
      ++painted;
    }
  }
  return painted;
}

Geometry generate_geometry(const DomainSpec& spec, std::uint32_t index) {
  const int H = spec.height;
  const int W = spec.width;
  const int bg = background_class(spec);
  const auto n = static_cast<std::size_t>(H) * W;
  Geometry g{std::vector<std::uint8_t>(n, static_cast<std::uint8_t>(bg)), std::vector<std::int32_t>(n, 0), {bg}};

  std::vector<int> order;
  for (int c = 0; c < spec.num_classes(); ++c) {
    if (c != bg && spec.class_frequencies[static_cast<std::size_t>(c)] > 0.0) order.push_back(c);
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return spec.class_frequencies[static_cast<std::size_t>(a)] > spec.class_frequencies[static_cast<std::size_t>(b)];
  });

  Rng rng(mix64(spec.seed, index, kGeometryStream));
  for (int c : order) {
    const double expected = spec.class_frequencies[static_cast<std::size_t>(c)] * static_cast<double>(n);
    const double target = expected * rng.uniform(0.6, 1.4);
    const auto objects = rng.uniform_int(1, 3);
    const double typical = std::max(6.0, target / static_cast<double>(objects));
    double count = 0.0;
    for (int attempt = 0; attempt < 40 && count < 0.9 * target; ++attempt) {
      const double area = std::clamp(std::min(typical, 1.1 * (target - count)), 6.0, typical);
      const double aspect = std::exp(rng.uniform(-0.7, 0.7));
      const double cy = rng.uniform(0.0, H);
      const double cx = rng.uniform(0.0, W);
      const int id = static_cast<int>(g.object_class.size());
      int painted = 0;
      if (rng.uniform() < 0.5) {
        const double hw = 0.5 * std::sqrt(area * aspect);
        const double hh = 0.5 * area / (2.0 * hw);
        painted = paint_rect(g, H, W, bg, c, id, cy, cx, hh, hw);
      } else {
        const double rx = std::sqrt(area * aspect / std::numbers::pi);
        const double ry = area / (std::numbers::pi * rx);
        painted = paint_ellipse(g, H, W, bg, c, id, cy, cx, ry, rx);
      }
      if (painted > 0) g.object_class.push_back(c);
      count += painted;
    }
  }
  return g;
}

nlohmann::json appearance_json(const ClassAppearance& a) {
  return {{"color", a.color},
          {"texture_amplitude", a.texture_amplitude},
          {"texture_frequency", a.texture_frequency},
          {"texture_angle", a.texture_angle}};
}

std::filesystem::path record_path(const std::filesystem::path& dir, std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof(name), "scene_%05zu.bin", i);
  return dir / name;
}

}  // namespace

nlohmann::json to_json(const DomainShift& s) {
  return {{"hue_degrees", s.hue_degrees}, {"noise_sigma", s.noise_sigma}, {"gain", s.gain}};
}

nlohmann::json to_json(const DomainSpec& spec) {
  nlohmann::json app = nlohmann::json::array();
  for (const auto& a : spec.appearance) app.push_back(appearance_json(a));
  return {{"domain", spec.domain},
          {"class_frequencies", spec.class_frequencies},
          {"appearance", app},
          {"scene_jitter", spec.scene_jitter},
          {"object_jitter", spec.object_jitter},
          {"shift", to_json(spec.shift)},
          {"height", spec.height},
          {"width", spec.width},
          {"seed", spec.seed}};
}

DomainSpec domain_spec_from_json(const nlohmann::json& j) {
  try {
    DomainSpec s;
    s.domain = j.value("domain", s.domain);
    s.class_frequencies = j.at("class_frequencies").get<std::vector<double>>();
    for (const auto& a : j.at("appearance")) {
      ClassAppearance ca;
      ca.color = a.at("color").get<std::array<double, 3>>();
      ca.texture_amplitude = a.value("texture_amplitude", 0.0);
      ca.texture_frequency = a.value("texture_frequency", ca.texture_frequency);
      ca.texture_angle = a.value("texture_angle", 0.0);
      s.appearance.push_back(ca);
    }
    s.scene_jitter = j.value("scene_jitter", 0.0);
    s.object_jitter = j.value("object_jitter", 0.0);
    if (j.contains("shift")) {
      const auto& sh = j.at("shift");
      s.shift.hue_degrees = sh.value("hue_degrees", 0.0);
      s.shift.noise_sigma = sh.value("noise_sigma", 0.0);
      s.shift.gain = sh.value("gain", 1.0);
    }
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed domain spec: ") + e.what());
  }
}

void DomainSpec::validate() const {
  const int C = num_classes();
  if (C < 3 || C > 255) throw ConfigError("domain spec needs 3..255 classes, got " + std::to_string(C));
  if (static_cast<int>(appearance.size()) != C) {
    throw ConfigError("appearance has " + std::to_string(appearance.size()) + " entries but class_frequencies has " +
                      std::to_string(C));
  }
  double sum = 0.0;
  for (double f : class_frequencies) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw ConfigError("class frequencies must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("class frequencies sum to " + std::to_string(sum) + ", not 1");
  if (height < 4 || width < 4) throw ConfigError("scene size must be at least 4x4");
  for (const auto& a : appearance) {
    for (double v : a.color) {
      if (v < 0.0 || v > 1.0) throw ConfigError("class colours must lie in [0,1]");
    }
    if (a.texture_amplitude < 0.0) throw ConfigError("texture amplitude must be non-negative");
  }
  if (!(shift.noise_sigma >= 0.0) || !(shift.gain > 0.0) || !std::isfinite(shift.hue_degrees)) {
    throw ConfigError("shift needs noise_sigma >= 0, gain > 0 and a finite hue rotation");
  }
  if (scene_jitter < 0.0 || object_jitter < 0.0) throw ConfigError("jitter must be non-negative");
}

std::uint64_t DomainSpec::hash() const { return fnv1a(to_json(*this).dump()); }

int background_class(const DomainSpec& spec) {
  const auto& f = spec.class_frequencies;
  return static_cast<int>(std::max_element(f.begin(), f.end()) - f.begin());
}

LabeledScene generate_scene(const DomainSpec& spec, std::uint32_t index) {
  spec.validate();
  const int H = spec.height;
  const int W = spec.width;
  const auto n = static_cast<std::size_t>(H) * W;
  Geometry g = generate_geometry(spec, index);

  Rng look(mix64(spec.seed, index, kAppearanceStream));
  const double scene_gain = 1.0 + spec.scene_jitter * look.uniform(-1.0, 1.0);
  std::vector<double> phase(static_cast<std::size_t>(spec.num_classes()));
  for (auto& p : phase) p = look.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<std::array<double, 3>> object_color(g.object_class.size());
  for (std::size_t o = 0; o < g.object_class.size(); ++o) {
    const auto& base = spec.appearance[static_cast<std::size_t>(g.object_class[o])].color;
    for (int k = 0; k < 3; ++k) object_color[o][k] = base[k] * scene_gain + spec.object_jitter * look.uniform(-1.0, 1.0);
  }

  const Mat3 rot = hue_rotation(spec.shift.hue_degrees);
  Rng noise(mix64(spec.seed, index, kNoiseStream));
  LabeledScene scene{H, W, std::vector<float>(n * 3), g.labels, spec.domain, spec.seed, index};
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const auto i = static_cast<std::size_t>(y) * W + x;
      const int c = g.labels[i];
      const auto& a = spec.appearance[static_cast<std::size_t>(c)];
      const double ang = a.texture_angle * std::numbers::pi / 180.0;
      const double tex = a.texture_amplitude *
                         std::sin(2.0 * std::numbers::pi * a.texture_frequency * (x * std::cos(ang) + y * std::sin(ang)) +
                                  phase[static_cast<std::size_t>(c)]);
      const auto& base = object_color[static_cast<std::size_t>(g.object[i])];
      const double v[3] = {base[0] + tex, base[1] + tex, base[2] + tex};
      for (int k = 0; k < 3; ++k) {
        double out = (rot[k][0] * v[0] + rot[k][1] * v[1] + rot[k][2] * v[2]) * spec.shift.gain;
        if (spec.shift.noise_sigma > 0.0) out += spec.shift.noise_sigma * noise.normal();
        scene.image[i * 3 + k] = static_cast<float>(std::clamp(out, 0.0, 1.0));
      }
    }
  }
  return scene;
}

void check_paired(const DomainSpec& source, const DomainSpec& target) {
  source.validate();
  target.validate();
  if (source.class_frequencies != target.class_frequencies) {
    throw ConfigError("source and target specs must share class frequencies");
  }
  if (source.height != target.height || source.width != target.width) {
    throw ConfigError("source and target specs must share the scene size");
  }
}

InMemoryDataset::InMemoryDataset(DomainSpec spec, std::vector<LabeledScene> scenes)
    : spec_(std::move(spec)), scenes_(std::move(scenes)) {
  spec_.validate();
  const auto n = static_cast<std::size_t>(spec_.height) * spec_.width;
  for (const auto& s : scenes_) {
    if (s.height != spec_.height || s.width != spec_.width || s.image.size() != n * 3) {
      throw InputError("scene " + std::to_string(s.index) + " does not match the dataset size");
    }
    if (!s.labels.empty() && s.labels.size() != n) {
      throw InputError("scene " + std::to_string(s.index) + " has a malformed label map");
    }
  }
}

std::span<const float> InMemoryDataset::image(std::size_t i) const { return scenes_.at(i).image; }

bool InMemoryDataset::has_labels() const {
  return !scenes_.empty() &&
         std::all_of(scenes_.begin(), scenes_.end(), [](const LabeledScene& s) { return !s.labels.empty(); });
}

std::span<const std::uint8_t> InMemoryDataset::labels(std::size_t i) const {
  const auto& s = scenes_.at(i);
  if (s.labels.empty()) throw InputError("scene " + std::to_string(s.index) + " has no labels");
  return s.labels;
}

InMemoryDataset generate_dataset(const DomainSpec& spec, std::size_t count, bool keep_labels, int workers) {
  spec.validate();
  std::vector<LabeledScene> scenes(count);
  const auto n_workers = static_cast<std::size_t>(std::max(1, workers));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < count; i += n_workers) {
      scenes[i] = generate_scene(spec, static_cast<std::uint32_t>(i));
      if (!keep_labels) scenes[i].labels.clear();
    }
  };
  if (n_workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work, w);
  }
  return InMemoryDataset(spec, std::move(scenes));
}

void write_dataset(const InMemoryDataset& data, const std::filesystem::path& dir) {
  if (data.size() == 0) throw InputError("refusing to write an empty dataset");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  const auto& spec = data.spec();
  const std::uint64_t spec_hash = spec.hash();
  const bool labelled = data.has_labels();

  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.scenes()[i];
    const auto path = record_path(dir, i);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot write " + path.string());
    os.write(kRecordMagic, sizeof(kRecordMagic));
    binary::write<std::uint32_t>(os, kDatasetVersion);
    binary::write<std::uint32_t>(os, s.index);
    binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(s.height));
    binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(s.width));
    binary::write<std::uint8_t>(os, labelled ? 1 : 0);
    binary::write<std::uint64_t>(os, spec_hash);
    binary::write_array<float>(os, s.image);
    if (labelled) binary::write_array<std::uint8_t>(os, s.labels);
    if (!os) throw InputError("failed writing " + path.string());
  }

  const nlohmann::json manifest = {{"format_version", kDatasetVersion},
                                   {"spec", to_json(spec)},
                                   {"spec_hash", hex64(spec_hash)},
                                   {"count", data.size()},
                                   {"has_labels", labelled},
                                   {"record_pattern", "scene_%05d.bin"}};
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw InputError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << '\n';
}

void write_dataset(const DomainSpec& spec, std::size_t count, const std::filesystem::path& dir, bool keep_labels,
                   int workers) {
  if (count == 0) throw InputError("refusing to write an empty dataset");
  write_dataset(generate_dataset(spec, count, keep_labels, workers), dir);
}

InMemoryDataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream ms(manifest_path);
  if (!ms) throw InputError("no dataset manifest at " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format_version", 0u) != kDatasetVersion) {
    throw FormatError("unsupported dataset format version in " + manifest_path.string());
  }
  DomainSpec spec = domain_spec_from_json(manifest.at("spec"));
  spec.validate();
  const std::uint64_t spec_hash = spec.hash();
  const std::string recorded = manifest.value("spec_hash", "");
  if (recorded != hex64(spec_hash)) {
    throw FormatError("manifest spec hash mismatch: recorded " + recorded + ", spec hashes to " + hex64(spec_hash));
  }
  const auto count = manifest.at("count").get<std::size_t>();
  const bool labelled = manifest.value("has_labels", false);
  const auto n = static_cast<std::size_t>(spec.height) * spec.width;

  std::vector<LabeledScene> scenes(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto path = record_path(dir, i);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("missing scene record " + path.string());
    char magic[4];
    is.read(magic, sizeof(magic));
    if (!is || !std::equal(magic, magic + 4, kRecordMagic)) throw FormatError("not a scene record: " + path.string());
    if (binary::read<std::uint32_t>(is, "record version") != kDatasetVersion) {
      throw FormatError("unsupported record version in " + path.string());
    }
    auto& s = scenes[i];
    s.index = binary::read<std::uint32_t>(is, "scene index");
    s.height = static_cast<int>(binary::read<std::uint32_t>(is, "scene height"));
    s.width = static_cast<int>(binary::read<std::uint32_t>(is, "scene width"));
    const bool has_labels = binary::read<std::uint8_t>(is, "label flag") != 0;
    const auto record_hash = binary::read<std::uint64_t>(is, "spec hash");
    if (record_hash != spec_hash) {
      throw FormatError("record " + path.string() + " spec hash " + hex64(record_hash) + " does not match manifest " +
                        hex64(spec_hash));
    }
    if (s.height != spec.height || s.width != spec.width || has_labels != labelled) {
      throw FormatError("record " + path.string() + " disagrees with the manifest");
    }
    s.image.resize(n * 3);
    binary::read_array<float>(is, s.image, "scene image");
    if (has_labels) {
      s.labels.resize(n);
      binary::read_array<std::uint8_t>(is, s.labels, "scene labels");
      for (auto v : s.labels) {
        if (v >= spec.num_classes()) throw FormatError("label out of range in " + path.string());
      }
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in " + path.string());
    s.domain = spec.domain;
    s.seed = spec.seed;
  }
  return InMemoryDataset(std::move(spec), std::move(scenes));
}

std::vector<double> class_pixel_mass(const SceneDataset& data) {
  std::vector<double> mass(static_cast<std::size_t>(data.num_classes()), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (auto v : data.labels(i)) mass[v] += 1.0;
    total += static_cast<double>(data.labels(i).size());
  }
  if (total > 0.0) {
    for (auto& m : mass) m /= total;
  }
  return mass;
}

DomainSpec default_source_spec(std::uint64_t seed) {
  DomainSpec s;
  s.domain = "source";
  s.class_frequencies = {0.45, 0.18, 0.12, 0.10, 0.07, 0.05, 0.015, 0.015};
  // The two minority classes share the background colour and differ from it
  // only by stripe texture, which target noise partly masks.
  s.appearance = {
      {{0.45, 0.45, 0.45}, 0.06, 0.05, 0.0},  // background
      {{0.18, 0.18, 0.18}, 0.03, 0.25, 90.0},
      {{0.90, 0.55, 0.20}, 0.10, 0.12, 0.0},
      {{0.25, 0.50, 0.25}, 0.08, 0.20, 45.0},
      {{0.30, 0.75, 0.90}, 0.05, 0.30, 135.0},
      {{0.35, 0.25, 0.55}, 0.10, 0.15, 90.0},
      {{0.45, 0.45, 0.45}, 0.30, 0.35, 0.0},  // minority
      {{0.45, 0.45, 0.45}, 0.30, 0.35, 90.0},  // minority
  };
  s.scene_jitter = 0.08;
  s.object_jitter = 0.05;
  s.shift = {0.0, 0.02, 1.0};
  s.seed = seed;
  return s;
}

DomainShift default_target_shift() { return {40.0, 0.05, 1.2}; }

BenchmarkSpec default_benchmark(std::uint64_t seed) {
  BenchmarkSpec b;
  b.source = default_source_spec(mix64(seed, 1));
  b.target_train = b.source;
  b.target_train.domain = "target";
  b.target_train.shift = default_target_shift();
  b.target_train.seed = mix64(seed, 2);
  b.target_eval = b.target_train;
  b.target_eval.seed = mix64(seed, 3);
  return b;
}

}  // namespace ldseg
