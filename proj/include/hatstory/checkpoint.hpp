#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "hatstory/data.hpp"
#include "hatstory/errors.hpp"
#include "hatstory/model.hpp"
#include "hatstory/training.hpp"

HATSTORY_BEGIN

// Layout: the 9 magic bytes "HATSTORY1", a little-endian u64 header length, a
// UTF-8 JSON header (version, model config, vocabulary, train config,
// fingerprint, tensor manifest), then every tensor in manifest order as
// little-endian IEEE-754 doubles.
inline constexpr char kCheckpointMagic[] = "HATSTORY1";
inline constexpr std::size_t kCheckpointMagicLen = 9;
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  Vocabulary vocab;
  TrainConfig config;
  nlohmann::json fingerprint = nlohmann::json::object();
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_fingerprint(const TrainConfig& cfg) { return hex64(fnv1a64(nlohmann::json(cfg).dump())); }

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"k", c.k},         {"d_s", c.d_s},     {"d_g", c.d_g},
          {"d_w", c.d_w},     {"vocab", c.vocab}, {"steps", c.steps},
          {"kind", model_kind_name(c.kind)}, {"reset_state_per_sentence", c.reset_state_per_sentence}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.k = j.at("k").get<std::size_t>();
  c.d_s = j.at("d_s").get<std::size_t>();
  c.d_g = j.at("d_g").get<std::size_t>();
  c.d_w = j.at("d_w").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.steps = j.at("steps").get<std::size_t>();
  c.kind = parse_model_kind(j.at("kind").get<std::string>());
  c.reset_state_per_sentence = j.at("reset_state_per_sentence").get<bool>();
  return c;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ModelParams& params, const Vocabulary& vocab, const TrainConfig& cfg) {
  params.validate();
  if (vocab.size() != params.config.vocab) throw ContractError("checkpoint: vocabulary size differs from model");
  nlohmann::json manifest = nlohmann::json::array();
  const NamedTensors tensors = params.named_tensors();
  for (const auto& [name, t] : tensors) manifest.push_back({{"name", name}, {"shape", t.shape()}});
  const nlohmann::json header{{"version", kCheckpointVersion},
                              {"model", model_config_json(params.config)},
                              {"vocabulary", vocab.tokens()},
                              {"config", cfg},
                              {"fingerprint", {{"config", config_fingerprint(cfg)}, {"seed", cfg.seed}}},
                              {"manifest", manifest}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, kCheckpointMagicLen);
  detail::put_u64(out, text.size());
  out += text;
  for (const auto& [name, t] : tensors) {
    for (Real v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < kCheckpointMagicLen || bytes.compare(0, kCheckpointMagicLen, kCheckpointMagic) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  if (bytes.size() < kCheckpointMagicLen + 8) throw CorruptionError("checkpoint: truncated header length");
  const std::uint64_t header_len = detail::get_u64(bytes, kCheckpointMagicLen);
  const std::size_t header_start = kCheckpointMagicLen + 8;
  if (header_len > bytes.size() - header_start) throw CorruptionError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_start, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint: unreadable header: ") + e.what());
  }

  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> manifest;
  try {
    if (header.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported version " + header.at("version").dump());
    }
    const ModelConfig mc = model_config_from_json(header.at("model"));
    mc.validate();
    ck.vocab = Vocabulary::from_tokens(header.at("vocabulary").get<std::vector<std::string>>());
    ck.config = header.at("config").get<TrainConfig>();
    ck.fingerprint = header.at("fingerprint");
    Rng scratch(0);
    ck.params = ModelParams::init(mc, scratch);
    for (const auto& entry : header.at("manifest")) {
      manifest.emplace_back(entry.at("name").get<std::string>(), entry.at("shape").get<Shape>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }

  NamedTensors tensors = ck.params.named_tensors();
  if (manifest.size() != tensors.size()) throw FormatError("checkpoint: manifest does not match the model layout");
  std::size_t total = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (manifest[i].first != tensors[i].first || manifest[i].second != tensors[i].second.shape()) {
      throw FormatError("checkpoint: manifest entry " + manifest[i].first + " does not match the model layout");
    }
    total += shape_numel(manifest[i].second);
  }
  std::size_t pos = header_start + header_len;
  if (bytes.size() - pos != total * 8) {
    throw CorruptionError("checkpoint: payload holds " + std::to_string(bytes.size() - pos) + " bytes, manifest needs " +
                          std::to_string(total * 8));
  }
  for (auto& [name, t] : tensors) {
    auto values = t.mutable_data();
    for (Real& v : values) {
      v = std::bit_cast<double>(detail::get_u64(bytes, pos));
      pos += 8;
    }
    detail::check_finite(values, "checkpoint payload");
  }
  if (ck.vocab.size() != ck.params.config.vocab) throw FormatError("checkpoint: vocabulary size differs from model");
  return ck;
}

inline void save_checkpoint(const ModelParams& params, const Vocabulary& vocab, const TrainConfig& cfg,
                            const std::string& path) {
  const std::string bytes = serialize_checkpoint(params, vocab, cfg);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

HATSTORY_END
