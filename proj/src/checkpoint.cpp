#include <fstream>
#include <sstream>

#include "ldseg/binary_io.hpp"
#include "ldseg/errors.hpp"
#include "ldseg/hashing.hpp"
#include "ldseg/json_io.hpp"
#include "ldseg/model.hpp"

namespace ldseg {

namespace {

constexpr char kMagic[4] = {'L', 'D', 'C', 'K'};

std::uint64_t payload_checksum(const std::vector<Parameter>& params) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : params) h = fnv1a(std::as_bytes(std::span(p.value)), h);
  return h;
}

}  // namespace

nlohmann::json to_json(const ArchitectureDescriptor& arch) {
  return {{"name", arch.name},
          {"in_channels", arch.in_channels},
          {"num_classes", arch.num_classes},
          {"widths", arch.widths},
          {"strides", arch.strides},
          {"skip_connection", arch.skip_connection},
          {"atrous_rates", arch.atrous_rates}};
}

ArchitectureDescriptor architecture_from_json(const nlohmann::json& j) {
  try {
    ArchitectureDescriptor a;
    a.name = j.at("name").get<std::string>();
    a.in_channels = j.at("in_channels").get<int>();
    a.num_classes = j.at("num_classes").get<int>();
    a.widths = j.at("widths").get<std::vector<int>>();
    a.strides = j.at("strides").get<std::vector<int>>();
    a.skip_connection = j.at("skip_connection").get<bool>();
    a.atrous_rates = j.value("atrous_rates", std::vector<int>{});
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed architecture descriptor: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto& params = ckpt.model.parameters();
  nlohmann::json table = nlohmann::json::array();
  for (const auto& p : params) table.push_back({{"name", p.name}, {"shape", p.shape}});
  const nlohmann::json header = {{"architecture", to_json(ckpt.model.descriptor())},
                                 {"stage", to_string(ckpt.stage)},
                                 {"epoch", ckpt.epoch},
                                 {"rng_state", ckpt.rng_state},
                                 {"config_hash", hex64(ckpt.config_hash)},
                                 {"parameters", table},
                                 {"payload_checksum", hex64(payload_checksum(params))}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
  binary::write<std::uint8_t>(os, kCheckpointVersion);
  os.write(kMagic, sizeof(kMagic));
  binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) binary::write_array<float>(os, p.value);
  if (!os) throw FormatError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const CheckpointExpectations& expect) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path.string());
  const auto version = binary::read<std::uint8_t>(is, "format version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  char magic[4];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 4, kMagic)) throw FormatError("not a checkpoint file: " + path.string());
  const auto len = binary::read<std::uint32_t>(is, "header length");
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw FormatError("truncated checkpoint header in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto arch = architecture_from_json(header.at("architecture"));
  if (expect.num_classes && *expect.num_classes != arch.num_classes) {
    throw FormatError("checkpoint class count mismatch: expected " + std::to_string(*expect.num_classes) +
                      ", found " + std::to_string(arch.num_classes));
  }

  std::vector<Parameter> params;
  try {
    for (const auto& entry : header.at("parameters")) {
      Parameter p{entry.at("name").get<std::string>(), entry.at("shape").get<std::vector<int>>(), {}};
      std::size_t count = 1;
      for (int s : p.shape) count *= static_cast<std::size_t>(s);
      p.value.resize(count);
      params.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed parameter table: ") + e.what());
  }
  for (auto& p : params) binary::read_array<float>(is, p.value, "parameter payload");
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");

  const std::string stored_sum = header.value("payload_checksum", "");
  const std::string actual_sum = hex64(payload_checksum(params));
  const std::string stored_config = header.value("config_hash", "");
  if (stored_sum != actual_sum) {
    throw FormatError("checkpoint payload corrupt (checksum " + actual_sum + ", header says " + stored_sum +
                      "; config hash " + stored_config + ")");
  }
  if (expect.config_hash && stored_config != hex64(*expect.config_hash)) {
    throw FormatError("checkpoint config hash mismatch: expected " + hex64(*expect.config_hash) + ", found " +
                      stored_config);
  }

  Checkpoint ckpt{SegmentationModel(arch, std::move(params)), parse_training_stage(header.value("stage", "")),
                  header.value("epoch", 0), header.value("rng_state", ""),
                  std::stoull(stored_config.empty() ? "0" : stored_config, nullptr, 16)};
  if (expect.stage && *expect.stage != ckpt.stage) {
    throw FormatError("checkpoint stage mismatch: expected " + to_string(*expect.stage) + ", found " +
                      to_string(ckpt.stage));
  }
  return ckpt;
}

}  // namespace ldseg
