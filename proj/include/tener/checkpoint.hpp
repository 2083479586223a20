#pragma once

// Single-file checkpoint archive:
//   "TENERCKP" | u32 version | u64 manifest bytes | manifest JSON | u32 crc
//   u32 tensor count, then per tensor:
//   u32 name bytes | name | u32 rank | u64 dims… | float32 values | u32 crc
// Integers and floats are little-endian; each crc is zlib crc32 over the
// bytes of its block that precede it.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tener/config.hpp"
#include "tener/data.hpp"
#include "tener/model.hpp"
#include "tener/training.hpp"

namespace tener {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'T', 'E', 'N', 'E', 'R', 'C', 'K', 'P'};

class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
  using CheckpointError::CheckpointError;
};

class CheckpointIntegrityError : public CheckpointError {
  using CheckpointError::CheckpointError;
};

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.append(s); }
  std::size_t mark() const { return bytes_.size(); }
  std::uint32_t crc_since(std::size_t from) const {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes_.data() + from),
                static_cast<uInt>(bytes_.size() - from)));
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t mark() const { return pos_; }
  std::uint32_t crc_since(std::size_t from) const {
    return static_cast<std::uint32_t>(::crc32(
        0L, reinterpret_cast<const Bytef*>(bytes_.data() + from), static_cast<uInt>(pos_ - from)));
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointIntegrityError("checkpoint truncated");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, sizeof kCheckpointMagic));
  w.u32(kCheckpointVersion);
  const auto manifest = ckpt.manifest.dump();
  auto m = w.mark();
  w.u64(manifest.size());
  w.raw(manifest);
  w.u32(w.crc_since(m));
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    std::uint64_t n = 1;
    for (auto d : t.dims) n *= d;
    if (n != t.values.size())
      throw CheckpointError("tensor '" + t.name + "' has inconsistent dimensions");
    m = w.mark();
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name);
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u64(d);
    for (auto v : t.values) w.f32(v);
    w.u32(w.crc_since(m));
  }
  return w.bytes();
}

inline Checkpoint deserialize_checkpoint(std::string bytes, const std::string& source = "<checkpoint>") {
  detail::ByteReader r(std::move(bytes));
  if (r.raw(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic))
    throw CheckpointIntegrityError(source + ": not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version > kCheckpointVersion || version == 0)
    throw CheckpointVersionError(source + ": checkpoint format version " + std::to_string(version) +
                                 " is not supported (this build reads up to version " +
                                 std::to_string(kCheckpointVersion) + ")");
  Checkpoint ckpt;
  auto m = r.mark();
  const auto len = r.u64();
  auto text = r.raw(len);
  if (r.crc_since(m) != r.u32())
    throw CheckpointIntegrityError(source + ": manifest checksum mismatch");
  try {
    ckpt.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointIntegrityError(source + ": manifest is not valid JSON");
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    m = r.mark();
    t.name = r.raw(r.u32());
    const auto rank = r.u32();
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.u64());
      n *= t.dims.back();
    }
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32();
    if (r.crc_since(m) != r.u32())
      throw CheckpointIntegrityError(source + ": checksum mismatch in tensor '" + t.name + "'");
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointIntegrityError(source + ": trailing bytes after last tensor");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  const auto bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), path);
}

/// Rounds every parameter to float32 so the stored model and the in-memory
/// one compute identical forward passes.
inline void round_parameters_to_float(NerTagger& model) {
  for (auto& [_, t] : model.parameters())
    for (auto& v : t.data()) v = static_cast<Scalar>(static_cast<float>(v));
}

inline Checkpoint make_checkpoint(NerTagger& model, const Settings& settings,
                                  const std::vector<EpochRecord>& history = {}) {
  round_parameters_to_float(model);
  Checkpoint ckpt;
  auto& m = ckpt.manifest;
  m["format_version"] = kCheckpointVersion;
  const auto model_kv = settings.model_key_values();
  nlohmann::json config = nlohmann::json::object();
  for (const auto& [k, v] : settings.to_key_values()) config[k] = v;
  m["config"] = config;
  m["config_hash"] = config_hash(model_kv);
  m["word_vocab"] = model.words().tokens();
  m["char_vocab"] = model.chars().tokens();
  m["labels"] = model.labels();
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : history)
    hist.push_back({{"epoch", r.epoch},
                    {"train_loss", r.train_loss},
                    {"dev_p", r.dev.precision},
                    {"dev_r", r.dev.recall},
                    {"dev_f1", r.dev.f1},
                    {"lr", r.lr}});
  m["history"] = hist;
  for (const auto& [name, t] : model.parameters()) {
    NamedTensor nt{name, {}, {}};
    for (auto d : t.shape()) nt.dims.push_back(d);
    for (auto v : t.data()) nt.values.push_back(static_cast<float>(v));
    ckpt.tensors.push_back(std::move(nt));
  }
  return ckpt;
}

inline Settings checkpoint_settings(const Checkpoint& ckpt) {
  KeyValues kv;
  for (const auto& [k, v] : ckpt.manifest.at("config").items()) kv.set(k, v.get<std::string>());
  return Settings::from_key_values(kv);
}

/// Warning text when `expected` describes a different architecture.
inline std::optional<std::string> config_mismatch(const Checkpoint& ckpt, const Settings& expected) {
  const auto stored = ckpt.manifest.value("config_hash", std::string{});
  const auto wanted = config_hash(expected.model_key_values());
  if (stored == wanted) return std::nullopt;
  return "checkpoint config hash " + stored + " differs from requested config hash " + wanted;
}

inline NerTagger model_from_checkpoint(const Checkpoint& ckpt) {
  const auto settings = checkpoint_settings(ckpt);
  auto words = Vocabulary::from_tokens(ckpt.manifest.at("word_vocab").get<std::vector<std::string>>());
  auto chars = Vocabulary::from_tokens(ckpt.manifest.at("char_vocab").get<std::vector<std::string>>());
  auto labels = ckpt.manifest.at("labels").get<std::vector<std::string>>();
  NerTagger model(settings.model, std::move(words), std::move(chars), std::move(labels), 0);
  auto& params = model.parameters();
  if (params.size() != ckpt.tensors.size())
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                          " tensors but the model has " + std::to_string(params.size()));
  for (const auto& nt : ckpt.tensors) {
    if (!params.contains(nt.name))
      throw CheckpointError("checkpoint tensor '" + nt.name + "' is not a model parameter");
    auto& t = params.get(nt.name);
    Shape shape(nt.dims.begin(), nt.dims.end());
    if (shape != t.shape())
      throw CheckpointError("checkpoint tensor '" + nt.name + "' has shape " + format_shape(shape) +
                            ", model expects " + format_shape(t.shape()));
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = nt.values[i];
  }
  return model;
}

inline std::vector<EpochRecord> checkpoint_history(const Checkpoint& ckpt) {
  std::vector<EpochRecord> out;
  if (!ckpt.manifest.contains("history")) return out;
  for (const auto& h : ckpt.manifest.at("history")) {
    EpochRecord r;
    r.epoch = h.at("epoch").get<std::size_t>();
    r.train_loss = h.at("train_loss").get<Scalar>();
    r.dev.precision = h.at("dev_p").get<Scalar>();
    r.dev.recall = h.at("dev_r").get<Scalar>();
    r.dev.f1 = h.at("dev_f1").get<Scalar>();
    r.lr = h.at("lr").get<Scalar>();
    out.push_back(r);
  }
  return out;
}

}  // namespace tener
