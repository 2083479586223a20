#pragma once

// Corpus ingestion and evaluation: column-format files, BIO→BIOES conversion,
// digit normalization, vocabularies, pre-trained embeddings, span-level F1.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "tener/tensor.hpp"

namespace tener {

/// Malformed input file; carries the 1-based line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct LabeledSentence {
  std::vector<std::string> tokens;
  std::vector<std::string> labels;

  bool operator==(const LabeledSentence&) const = default;
};

// ------------------------------------------------------------- column files

/// Parses whitespace-separated columns; blank lines end sentences and
/// `-DOCSTART-` lines are skipped. A negative label column counts from the end.
inline std::vector<LabeledSentence> parse_columns(std::istream& in, const std::string& source,
                                                  int token_col = 0, int label_col = -1) {
  std::vector<LabeledSentence> out;
  LabeledSentence current;
  std::string line;
  std::size_t lineno = 0;
  auto flush = [&] {
    if (!current.tokens.empty()) out.push_back(std::move(current));
    current = {};
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    std::vector<std::string> cols;
    for (std::string f; fields >> f;) cols.push_back(std::move(f));
    if (cols.empty()) {
      flush();
      continue;
    }
    if (cols[0] == "-DOCSTART-") continue;
    const auto n = static_cast<int>(cols.size());
    const int tc = token_col < 0 ? n + token_col : token_col;
    const int lc = label_col < 0 ? n + label_col : label_col;
    if (tc < 0 || tc >= n || lc < 0 || lc >= n)
      throw ParseError(source, lineno,
                       "column index out of range for line with " + std::to_string(n) +
                           " columns");
    current.tokens.push_back(cols[static_cast<std::size_t>(tc)]);
    current.labels.push_back(cols[static_cast<std::size_t>(lc)]);
  }
  flush();
  return out;
}

inline std::vector<LabeledSentence> read_column_file(const std::string& path, int token_col = 0,
                                                     int label_col = -1) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file '" + path + "'");
  return parse_columns(in, path, token_col, label_col);
}

/// Canonical two-column form: `token label`, sentences separated by one blank line.
inline void write_columns(std::ostream& os, const std::vector<LabeledSentence>& sentences) {
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i)
      os << s.tokens[i] << ' ' << s.labels[i] << '\n';
    os << '\n';
  }
}

inline void write_column_file(const std::string& path,
                              const std::vector<LabeledSentence>& sentences) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  write_columns(os, sentences);
}

// ------------------------------------------------------------------- labels

struct Span {
  std::size_t start;
  std::size_t end;  // inclusive
  std::string type;

  auto operator<=>(const Span&) const = default;
};

namespace detail {

inline std::pair<char, std::string> label_parts(const std::string& label) {
  if (label == "O") return {'O', ""};
  if (label.size() >= 3 && label[1] == '-' &&
      std::string("BIES").find(label[0]) != std::string::npos)
    return {label[0], label.substr(2)};
  throw std::invalid_argument("label '" + label + "' is not O or {B,I,E,S}-TYPE");
}

}  // namespace detail

inline bool is_valid_label(const std::string& label) {
  try {
    detail::label_parts(label);
    return true;
  } catch (const std::invalid_argument&) {
    return false;
  }
}

/// Spans of a BIO sequence; an I-X that does not continue an X span opens one.
inline std::vector<Span> bio_spans(const std::vector<std::string>& labels) {
  std::vector<Span> spans;
  bool open = false;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    auto [p, type] = detail::label_parts(labels[t]);
    if (p == 'I' && open && spans.back().type == type) {
      spans.back().end = t;
      continue;
    }
    open = false;
    if (p == 'B' || p == 'I') {
      spans.push_back({t, t, type});
      open = true;
    } else if (p != 'O') {
      throw std::invalid_argument("bio_spans: '" + labels[t] + "' is not a BIO label");
    }
  }
  return spans;
}

/// Spans of a BIOES sequence: S-X, or B-X (I-X)* E-X. Ill-formed fragments are dropped.
inline std::vector<Span> bioes_spans(const std::vector<std::string>& labels) {
  std::vector<Span> spans;
  std::optional<Span> open;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    auto [p, type] = detail::label_parts(labels[t]);
    switch (p) {
      case 'S':
        open.reset();
        spans.push_back({t, t, type});
        break;
      case 'B':
        open = Span{t, t, type};
        break;
      case 'I':
        if (open && open->type == type) open->end = t;
        else open.reset();
        break;
      case 'E':
        if (open && open->type == type) {
          open->end = t;
          spans.push_back(*open);
        }
        open.reset();
        break;
      default:
        open.reset();
    }
  }
  return spans;
}

/// True iff every transition is legal BIOES and no span is left open.
inline bool is_valid_bioes(const std::vector<std::string>& labels) {
  bool open = false;
  std::string open_type;
  for (const auto& l : labels) {
    if (!is_valid_label(l)) return false;
    auto [p, type] = detail::label_parts(l);
    if (open) {
      if ((p != 'I' && p != 'E') || type != open_type) return false;
      open = p == 'I';
    } else {
      if (p == 'I' || p == 'E') return false;
      open = p == 'B';
      open_type = type;
    }
  }
  return !open;
}

struct BioesConversion {
  std::vector<std::string> labels;
  std::size_t repairs = 0;  // orphan I-X tokens rewritten as span starts
};

/// BIO → BIOES. Input that already uses E-/S- is validated and returned as is.
inline BioesConversion to_bioes(const std::vector<std::string>& labels) {
  bool has_bioes_only = false;
  for (const auto& l : labels) {
    auto [p, _] = detail::label_parts(l);
    has_bioes_only = has_bioes_only || p == 'E' || p == 'S';
  }
  if (has_bioes_only) {
    if (!is_valid_bioes(labels))
      throw std::invalid_argument("to_bioes: label sequence mixes schemes or is invalid BIOES");
    return {labels, 0};
  }
  BioesConversion out;
  out.labels.resize(labels.size());
  for (std::size_t t = 0; t < labels.size(); ++t) {
    auto [p, type] = detail::label_parts(labels[t]);
    if (p == 'I') {
      auto [pp, ptype] =
          t > 0 ? detail::label_parts(labels[t - 1]) : std::pair<char, std::string>{'O', ""};
      if (!((pp == 'B' || pp == 'I') && ptype == type)) {
        p = 'B';
        ++out.repairs;
      }
    }
    out.labels[t] = labels[t];
    if (p == 'O') continue;
    bool continues = false;
    if (t + 1 < labels.size()) {
      auto [np, ntype] = detail::label_parts(labels[t + 1]);
      continues = np == 'I' && ntype == type;
    }
    const char prefix = p == 'B' ? (continues ? 'B' : 'S') : (continues ? 'I' : 'E');
    out.labels[t] = std::string(1, prefix) + "-" + type;
  }
  return out;
}

// ----------------------------------------------------------------- text

/// UTF-8 code points of a string, each as its own byte sequence. Invalid lead
/// bytes are passed through one byte at a time.
inline std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
    if (i + len > s.size()) len = 1;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

namespace detail {

inline char32_t decode_utf8(const std::string& ch) {
  const auto b0 = static_cast<unsigned char>(ch[0]);
  if (ch.size() == 1) return b0;
  char32_t cp = ch.size() == 2 ? (b0 & 0x1F) : ch.size() == 3 ? (b0 & 0x0F) : (b0 & 0x07);
  for (std::size_t i = 1; i < ch.size(); ++i)
    cp = (cp << 6) | (static_cast<unsigned char>(ch[i]) & 0x3F);
  return cp;
}

// First code point of every run of ten Unicode decimal digits (category Nd).
inline constexpr char32_t kDigitZeros[] = {
    0x0030,  0x0660,  0x06F0,  0x07C0,  0x0966,  0x09E6,  0x0A66,  0x0AE6,  0x0B66,  0x0BE6,
    0x0C66,  0x0CE6,  0x0D66,  0x0DE6,  0x0E50,  0x0ED0,  0x0F20,  0x1040,  0x1090,  0x17E0,
    0x1810,  0x1946,  0x19D0,  0x1A80,  0x1A90,  0x1B50,  0x1BB0,  0x1C40,  0x1C50,  0xA620,
    0xA8D0,  0xA900,  0xA9D0,  0xA9F0,  0xAA50,  0xABF0,  0xFF10,  0x104A0, 0x10D30, 0x11066,
    0x110F0, 0x11136, 0x111D0, 0x112F0, 0x11450, 0x114D0, 0x11650, 0x116C0, 0x11730, 0x118E0,
    0x11950, 0x11C50, 0x11D50, 0x11DA0, 0x11F50, 0x16A60, 0x16AC0, 0x16B50, 0x1D7CE, 0x1D7D8,
    0x1D7E2, 0x1D7EC, 0x1D7F6, 0x1E140, 0x1E2F0, 0x1E4F0, 0x1E950, 0x1FBF0};

inline bool is_decimal_digit(char32_t cp) {
  for (auto zero : kDigitZeros)
    if (cp >= zero && cp < zero + 10) return true;
  return false;
}

}  // namespace detail

/// Replaces every decimal digit (any script) with ASCII '0'.
inline std::string digit_normalize(const std::string& token) {
  std::string out;
  out.reserve(token.size());
  for (const auto& ch : utf8_chars(token))
    out += detail::is_decimal_digit(detail::decode_utf8(ch)) ? std::string("0") : ch;
  return out;
}

inline std::string ascii_lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

struct PreparedCorpus {
  std::vector<LabeledSentence> sentences;
  std::size_t repairs = 0;
};

/// Digit-normalizes tokens and converts labels to BIOES.
inline PreparedCorpus prepare_corpus(std::vector<LabeledSentence> raw) {
  PreparedCorpus out;
  for (auto& s : raw) {
    for (auto& t : s.tokens) t = digit_normalize(t);
    auto conv = to_bioes(s.labels);
    s.labels = std::move(conv.labels);
    out.repairs += conv.repairs;
    out.sentences.push_back(std::move(s));
  }
  return out;
}

// --------------------------------------------------------------- vocabulary

/// Token↔index map with 0 = pad and 1 = unknown.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnknown = 1;

  Vocabulary() : tokens_{"<pad>", "<unk>"}, counts_{0, 0} {
    index_.emplace(tokens_[0], kPad);
    index_.emplace(tokens_[1], kUnknown);
  }

  /// Adds or counts a token; returns its index.
  std::size_t add(const std::string& token, std::size_t count = 1) {
    auto [it, inserted] = index_.try_emplace(token, tokens_.size());
    if (inserted) {
      tokens_.push_back(token);
      counts_.push_back(0);
    }
    counts_[it->second] += count;
    return it->second;
  }

  std::size_t lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnknown : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(std::size_t i) const { return tokens_.at(i); }
  std::size_t count(std::size_t i) const { return counts_.at(i); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Rebuilds from an index-ordered token list (reserved entries first).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>")
      throw std::invalid_argument("vocabulary must start with <pad>, <unk>");
    Vocabulary v;
    for (std::size_t i = 2; i < tokens.size(); ++i)
      if (v.add(tokens[i], 0) != i)
        throw std::invalid_argument("duplicate vocabulary entry '" + tokens[i] + "'");
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::size_t> counts_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Vocabulary build_word_vocabulary(const std::vector<LabeledSentence>& train,
                                        std::size_t min_freq = 1) {
  std::map<std::string, std::size_t> freq;
  std::vector<std::string> order;
  for (const auto& s : train)
    for (const auto& t : s.tokens)
      if (freq[t]++ == 0) order.push_back(t);
  Vocabulary v;
  for (const auto& t : order)
    if (freq[t] >= min_freq) v.add(t, freq[t]);
  return v;
}

/// Printable ASCII plus every code point seen in training tokens.
inline Vocabulary build_char_vocabulary(const std::vector<LabeledSentence>& train) {
  Vocabulary v;
  for (char c = 0x20; c < 0x7F; ++c) v.add(std::string(1, c), 0);
  for (const auto& s : train)
    for (const auto& t : s.tokens)
      for (const auto& ch : utf8_chars(t)) v.add(ch);
  return v;
}

/// Label inventory in first-seen order; no reserved entries.
inline std::vector<std::string> build_label_set(const std::vector<LabeledSentence>& train) {
  std::vector<std::string> labels;
  for (const auto& s : train)
    for (const auto& l : s.labels)
      if (std::find(labels.begin(), labels.end(), l) == labels.end()) labels.push_back(l);
  return labels;
}

// --------------------------------------------------------------- embeddings

struct EmbeddingMatrix {
  std::size_t dim = 0;
  std::vector<Scalar> values;  // vocab.size() × dim, row-major
  bool finetune = true;
  std::size_t exact_hits = 0;
  std::size_t lowercase_hits = 0;
  std::size_t missing = 0;

  std::size_t rows() const { return dim ? values.size() / dim : 0; }
  std::span<const Scalar> row(std::size_t i) const {
    return std::span<const Scalar>(values).subspan(i * dim, dim);
  }
  Scalar coverage() const {
    const std::size_t total = exact_hits + lowercase_hits + missing;
    return total ? static_cast<Scalar>(exact_hits + lowercase_hits) / static_cast<Scalar>(total) : 0;
  }
};

/// Rows for the vocabulary: zeros for pad, uniform(−0.1, 0.1) for everything
/// else. Used directly when no pre-trained file is given.
inline EmbeddingMatrix random_embeddings(const Vocabulary& vocab, std::size_t dim,
                                         std::mt19937_64& rng) {
  if (dim == 0) throw ConfigError("embedding dimension must be positive");
  EmbeddingMatrix m;
  m.dim = dim;
  m.values.assign(vocab.size() * dim, 0);
  std::uniform_real_distribution<Scalar> dist(-0.1, 0.1);
  for (std::size_t i = 0; i < vocab.size(); ++i)
    for (std::size_t c = 0; c < dim; ++c)
      if (i != Vocabulary::kPad) m.values[i * dim + c] = dist(rng);
  m.missing = vocab.size() > 2 ? vocab.size() - 2 : 0;
  return m;
}

/// Text embeddings `token v1 … vdim`, optional `count dim` header. In-vocabulary
/// tokens take the file row (exact match, else lowercase match); others keep
/// their random initialization.
inline EmbeddingMatrix load_embeddings(std::istream& in, const std::string& source,
                                       const Vocabulary& vocab, std::size_t dim,
                                       std::mt19937_64& rng) {
  EmbeddingMatrix m = random_embeddings(vocab, dim, rng);
  m.missing = 0;
  std::unordered_map<std::string, std::vector<Scalar>> exact, lower;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    std::vector<std::string> rest;
    for (std::string f; fields >> f;) rest.push_back(std::move(f));
    if (lineno == 1 && rest.size() == 1 &&
        std::all_of(token.begin(), token.end(), ::isdigit) &&
        std::all_of(rest[0].begin(), rest[0].end(), ::isdigit))
      continue;  // `count dim` header
    if (rest.size() != dim)
      throw ParseError(source, lineno,
                       "expected " + std::to_string(dim) + " values, found " +
                           std::to_string(rest.size()));
    std::vector<Scalar> v(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      try {
        std::size_t used = 0;
        v[i] = std::stod(rest[i], &used);
        if (used != rest[i].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParseError(source, lineno, "malformed number '" + rest[i] + "'");
      }
    }
    const bool want_exact = vocab.contains(token);
    const std::string low = ascii_lower(token);
    if (want_exact) exact.emplace(token, v);
    lower.try_emplace(low, std::move(v));
  }
  for (std::size_t i = 2; i < vocab.size(); ++i) {
    const auto& tok = vocab.token(i);
    const std::vector<Scalar>* src = nullptr;
    if (auto it = exact.find(tok); it != exact.end()) {
      src = &it->second;
      ++m.exact_hits;
    } else if (auto jt = lower.find(ascii_lower(tok)); jt != lower.end()) {
      src = &jt->second;
      ++m.lowercase_hits;
    } else {
      ++m.missing;
    }
    if (src) std::copy(src->begin(), src->end(), m.values.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  return m;
}

inline EmbeddingMatrix load_embeddings(const std::string& path, const Vocabulary& vocab,
                                       std::size_t dim, std::mt19937_64& rng) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file '" + path + "'");
  return load_embeddings(in, path, vocab, dim, rng);
}

// --------------------------------------------------------------- evaluation

struct SpanScores {
  std::size_t correct = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
  Scalar precision = 0;
  Scalar recall = 0;
  Scalar f1 = 0;

  void finalize() {
    precision = predicted ? static_cast<Scalar>(correct) / static_cast<Scalar>(predicted) : 0;
    recall = gold ? static_cast<Scalar>(correct) / static_cast<Scalar>(gold) : 0;
    f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0;
  }
};

struct SpanEvaluation {
  SpanScores overall;
  std::map<std::string, SpanScores> per_type;
};

/// Exact-match span scores; a span counts only if start, end and type agree.
inline SpanEvaluation evaluate_spans(const std::vector<std::vector<std::string>>& pred,
                                     const std::vector<std::vector<std::string>>& gold) {
  if (pred.size() != gold.size())
    throw ContractError("span_f1: " + std::to_string(pred.size()) + " predicted vs " +
                        std::to_string(gold.size()) + " gold sentences");
  SpanEvaluation ev;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    if (pred[s].size() != gold[s].size())
      throw ContractError("span_f1: sentence " + std::to_string(s) + " has " +
                          std::to_string(pred[s].size()) + " predicted vs " +
                          std::to_string(gold[s].size()) + " gold labels");
    auto ps = bioes_spans(pred[s]);
    auto gs = bioes_spans(gold[s]);
    std::sort(ps.begin(), ps.end());
    std::sort(gs.begin(), gs.end());
    for (const auto& sp : ps) {
      ++ev.overall.predicted;
      ++ev.per_type[sp.type].predicted;
    }
    for (const auto& sp : gs) {
      ++ev.overall.gold;
      ++ev.per_type[sp.type].gold;
    }
    std::vector<Span> common;
    std::set_intersection(ps.begin(), ps.end(), gs.begin(), gs.end(), std::back_inserter(common));
    for (const auto& sp : common) {
      ++ev.overall.correct;
      ++ev.per_type[sp.type].correct;
    }
  }
  ev.overall.finalize();
  for (auto& [_, sc] : ev.per_type) sc.finalize();
  return ev;
}

inline SpanScores span_f1(const std::vector<std::vector<std::string>>& pred,
                          const std::vector<std::vector<std::string>>& gold) {
  return evaluate_spans(pred, gold).overall;
}

}  // namespace tener
