#pragma once

// Flat `key = value` configuration and its mapping onto model and training
// settings.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tener/attention.hpp"
#include "tener/char_encoder.hpp"
#include "tener/data.hpp"
#include "tener/model.hpp"
#include "tener/seed.hpp"
#include "tener/training.hpp"

namespace tener {

/// Last assignment wins; iteration order is sorted by key.
class KeyValues {
 public:
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool contains(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const { return values_.at(key); }
  std::size_t size() const { return values_.size(); }
  auto begin() const { return values_.begin(); }
  auto end() const { return values_.end(); }

  /// Entries of `over` replace ours.
  KeyValues merged(const KeyValues& over) const {
    KeyValues out = *this;
    for (const auto& [k, v] : over.values_) out.values_[k] = v;
    return out;
  }

  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  friend bool operator==(const KeyValues&, const KeyValues&) = default;

 private:
  std::map<std::string, std::string> values_;
};

inline std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
inline KeyValues parse_key_values(std::istream& in, const std::string& source = "<config>") {
  KeyValues kv;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(source, n, "expected key = value");
    auto key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ParseError(source, n, "empty key");
    kv.set(key, trim(std::string_view(t).substr(eq + 1)));
  }
  return kv;
}

inline KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  return parse_key_values(in, path);
}

inline std::string config_hash(const KeyValues& kv) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(kv.canonical())));
  return buf;
}

namespace detail {

inline std::string format_real(Scalar v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || text.empty())
    throw ConfigError("invalid value '" + text + "' for " + key);
  return v;
}

inline Scalar parse_real(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    Scalar v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid value '" + text + "' for " + key);
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("invalid value '" + text + "' for " + key + " (expected true|false)");
}

}  // namespace detail

/// Everything a run needs besides file paths.
struct Settings {
  ModelConfig model;
  TrainConfig train;
  std::size_t min_word_freq = 1;

  Settings() {
    model.word_dim = 100;
    model.chars.kind = CharEncoderKind::cnn;
    model.encoder.d_model = 128;
    model.encoder.n_heads = 4;
    model.encoder.d_k = 32;
    model.encoder.d_ff = 256;
  }

  void validate() const {
    model.validate();
    train.validate();
  }

  KeyValues to_key_values() const {
    using detail::format_real;
    KeyValues kv;
    const auto& c = model.chars;
    const auto& e = model.encoder;
    kv.set("word_dim", std::to_string(model.word_dim));
    kv.set("min_word_freq", std::to_string(min_word_freq));
    kv.set("char_encoder", to_string(c.kind));
    kv.set("char_emb_dim", std::to_string(c.char_emb_dim));
    kv.set("char_kernel_size", std::to_string(c.kernel_size));
    kv.set("char_kernels", std::to_string(c.n_kernels));
    kv.set("char_stride", std::to_string(c.stride));
    kv.set("char_lstm_hidden", std::to_string(c.lstm_hidden));
    kv.set("char_heads", std::to_string(c.heads));
    kv.set("char_head_dim", std::to_string(c.head_dim));
    kv.set("char_d_ff", std::to_string(c.d_ff));
    kv.set("char_dropout", format_real(c.dropout));
    kv.set("char_output_dim", std::to_string(c.output_dim));
    kv.set("max_word_len", std::to_string(c.max_word_len));
    kv.set("encoder", to_string(e.mode));
    kv.set("scaled", e.scaled ? "true" : "false");
    kv.set("layers", std::to_string(e.n_layers));
    kv.set("heads", std::to_string(e.n_heads));
    kv.set("d_model", std::to_string(e.d_model));
    kv.set("head_dim", std::to_string(e.d_k));
    kv.set("d_ff", std::to_string(e.d_ff));
    kv.set("attn_dropout", format_real(e.attn_dropout));
    kv.set("ffn_dropout", format_real(e.ffn_dropout));
    kv.set("projection_bias", e.projection_bias ? "true" : "false");
    kv.set("max_len", std::to_string(e.max_len));
    kv.set("fc_dropout", format_real(model.fc_dropout));
    kv.set("epochs", std::to_string(train.epochs));
    kv.set("batch_size", std::to_string(train.batch_size));
    kv.set("lr", format_real(train.lr));
    kv.set("momentum", format_real(train.momentum));
    kv.set("warmup_fraction", format_real(train.warmup_fraction));
    kv.set("clip_norm", format_real(train.clip_norm));
    kv.set("seed", std::to_string(train.seed));
    kv.set("shuffle", train.shuffle ? "true" : "false");
    return kv;
  }

  /// Applies every entry; unknown keys and malformed values throw ConfigError.
  void apply(const KeyValues& kv) {
    using detail::parse_bool;
    using detail::parse_number;
    using detail::parse_real;
    auto& c = model.chars;
    auto& e = model.encoder;
    for (const auto& [k, v] : kv) {
      auto size = [&] { return parse_number<std::size_t>(k, v); };
      if (k == "word_dim") model.word_dim = size();
      else if (k == "min_word_freq") min_word_freq = size();
      else if (k == "char_encoder") c.kind = parse_char_encoder_kind(v);
      else if (k == "char_emb_dim") c.char_emb_dim = size();
      else if (k == "char_kernel_size") c.kernel_size = size();
      else if (k == "char_kernels") c.n_kernels = size();
      else if (k == "char_stride") c.stride = size();
      else if (k == "char_lstm_hidden") c.lstm_hidden = size();
      else if (k == "char_heads") c.heads = size();
      else if (k == "char_head_dim") c.head_dim = size();
      else if (k == "char_d_ff") c.d_ff = size();
      else if (k == "char_dropout") c.dropout = parse_real(k, v);
      else if (k == "char_output_dim") c.output_dim = size();
      else if (k == "max_word_len") c.max_word_len = size();
      else if (k == "encoder") e.mode = parse_attention_mode(v);
      else if (k == "scaled") e.scaled = parse_bool(k, v);
      else if (k == "layers") e.n_layers = size();
      else if (k == "heads") e.n_heads = size();
      else if (k == "d_model") e.d_model = size();
      else if (k == "head_dim") e.d_k = size();
      else if (k == "d_ff") e.d_ff = size();
      else if (k == "attn_dropout") e.attn_dropout = parse_real(k, v);
      else if (k == "ffn_dropout") e.ffn_dropout = parse_real(k, v);
      else if (k == "projection_bias") e.projection_bias = parse_bool(k, v);
      else if (k == "max_len") e.max_len = size();
      else if (k == "fc_dropout") model.fc_dropout = parse_real(k, v);
      else if (k == "epochs") train.epochs = size();
      else if (k == "batch_size") train.batch_size = size();
      else if (k == "lr") train.lr = parse_real(k, v);
      else if (k == "momentum") train.momentum = parse_real(k, v);
      else if (k == "warmup_fraction") train.warmup_fraction = parse_real(k, v);
      else if (k == "clip_norm") train.clip_norm = parse_real(k, v);
      else if (k == "seed") train.seed = parse_number<std::uint64_t>(k, v);
      else if (k == "shuffle") train.shuffle = parse_bool(k, v);
      else throw ConfigError("unknown config key '" + k + "'");
    }
  }

  static Settings from_key_values(const KeyValues& kv) {
    Settings s;
    s.apply(kv);
    return s;
  }

  /// Keys that determine the model architecture (checked against checkpoints).
  KeyValues model_key_values() const {
    static const std::vector<std::string> train_keys = {
        "epochs", "batch_size", "lr", "momentum", "warmup_fraction", "clip_norm", "seed", "shuffle"};
    KeyValues out;
    for (const auto& [k, v] : to_key_values())
      if (std::find(train_keys.begin(), train_keys.end(), k) == train_keys.end()) out.set(k, v);
    return out;
  }
};

/// Keys a user may set, in a stable order, for flag registration.
inline std::vector<std::string> settings_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : Settings().to_key_values()) keys.push_back(k);
  return keys;
}

}  // namespace tener
