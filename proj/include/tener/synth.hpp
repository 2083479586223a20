#pragma once

// Synthetic tagging corpora.
//
// directional: filler words w00..w49 with 1-3 triggers. The run of entity
// words x00..x29 directly after "in" is a LOC span, the run directly before
// "inc" is an ORG span. Entity-word runs on the other side of a trigger, or
// away from triggers, are O, so the label of an entity word depends on which
// side of a trigger it sits.
//
// copy_pattern: sentences of filler words where one word appears twice; the
// second occurrence is S-COPY.

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tener/data.hpp"
#include "tener/seed.hpp"

namespace tener {

enum class SynthTask { directional, copy_pattern };

inline SynthTask parse_synth_task(const std::string& s) {
  if (s == "directional") return SynthTask::directional;
  if (s == "copy_pattern") return SynthTask::copy_pattern;
  throw ConfigError("unknown synth task '" + s + "' (expected directional|copy_pattern)");
}

struct SynthOptions {
  std::size_t fillers = 50;
  std::size_t min_len = 8;
  std::size_t max_len = 20;
  std::size_t max_triggers = 3;
  std::size_t entity_words = 30;
  std::size_t max_entity_len = 3;
};

inline const char* kLocTrigger = "in";
inline const char* kOrgTrigger = "inc";

namespace detail {

inline std::string filler_word(std::size_t i) {
  return (i < 10 ? "w0" : "w") + std::to_string(i);
}

inline std::string entity_word(std::size_t i) {
  return (i < 10 ? "x0" : "x") + std::to_string(i);
}

inline void label_run(std::vector<std::string>& labels, std::size_t begin, std::size_t len,
                      const std::string& type) {
  if (len == 1) {
    labels[begin] = "S-" + type;
    return;
  }
  labels[begin] = "B-" + type;
  for (std::size_t i = begin + 1; i + 1 < begin + len; ++i) labels[i] = "I-" + type;
  labels[begin + len - 1] = "E-" + type;
}

inline LabeledSentence directional_sentence(std::mt19937_64& rng, const SynthOptions& o) {
  std::uniform_int_distribution<std::size_t> len_dist(o.min_len, o.max_len);
  std::uniform_int_distribution<std::size_t> filler(0, o.fillers - 1);
  std::uniform_int_distribution<std::size_t> entity(0, o.entity_words - 1);
  std::uniform_int_distribution<std::size_t> run_len(1, o.max_entity_len);
  std::uniform_int_distribution<std::size_t> count(1, o.max_triggers);
  std::bernoulli_distribution coin(0.5);

  const std::size_t n = len_dist(rng);
  LabeledSentence s;
  for (std::size_t i = 0; i < n; ++i) s.tokens.push_back(filler_word(filler(rng)));
  s.labels.assign(n, "O");

  // A block is [run] trigger [run]; the run on the trigger's labeled side
  // is an entity, the optional run on the other side is a distractor (O).
  // Blocks are separated by at least one filler so runs never merge.
  std::vector<bool> taken(n, false);
  const std::size_t wanted = count(rng);
  std::size_t placed = 0;
  for (int attempt = 0; attempt < 200 && placed < wanted; ++attempt) {
    const bool loc = coin(rng);
    const std::size_t entity_len = run_len(rng);
    const std::size_t distractor_len = coin(rng) ? run_len(rng) : 0;
    const std::size_t before = loc ? distractor_len : entity_len;
    const std::size_t after = loc ? entity_len : distractor_len;
    const std::size_t width = before + 1 + after;
    if (width > n) continue;
    std::uniform_int_distribution<std::size_t> start(0, n - width);
    const std::size_t a = start(rng);
    const std::size_t lo = a == 0 ? 0 : a - 1;
    const std::size_t hi = std::min(n, a + width + 1);
    bool free = true;
    for (std::size_t c = lo; c < hi; ++c) free = free && !taken[c];
    if (!free) continue;
    for (std::size_t c = lo; c < hi; ++c) taken[c] = true;
    for (std::size_t c = a; c < a + width; ++c) s.tokens[c] = entity_word(entity(rng));
    const std::size_t trigger = a + before;
    s.tokens[trigger] = loc ? kLocTrigger : kOrgTrigger;
    if (loc)
      label_run(s.labels, trigger + 1, entity_len, "LOC");
    else
      label_run(s.labels, a, entity_len, "ORG");
    ++placed;
  }
  // Free-standing entity-word runs away from any trigger are O.
  for (int attempt = 0; attempt < 4; ++attempt) {
    if (!coin(rng)) continue;
    const std::size_t len = run_len(rng);
    if (len + 2 > n) continue;
    std::uniform_int_distribution<std::size_t> start(1, n - len - 1);
    const std::size_t a = start(rng);
    bool free = true;
    for (std::size_t c = a - 1; c < a + len + 1; ++c) free = free && !taken[c];
    if (!free) continue;
    for (std::size_t c = a - 1; c < a + len + 1; ++c) taken[c] = true;
    for (std::size_t c = a; c < a + len; ++c) s.tokens[c] = entity_word(entity(rng));
  }
  return s;
}

inline LabeledSentence copy_sentence(std::mt19937_64& rng, const SynthOptions& o) {
  std::uniform_int_distribution<std::size_t> len_dist(o.min_len, o.max_len);
  const std::size_t n = len_dist(rng);
  std::vector<std::size_t> pool(o.fillers);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  std::shuffle(pool.begin(), pool.end(), rng);
  LabeledSentence s;
  for (std::size_t i = 0; i < n; ++i) s.tokens.push_back(filler_word(pool[i % pool.size()]));
  s.labels.assign(n, "O");
  std::uniform_int_distribution<std::size_t> first(0, n - 2);
  const std::size_t a = first(rng);
  std::uniform_int_distribution<std::size_t> second(a + 1, n - 1);
  const std::size_t b = second(rng);
  s.tokens[b] = s.tokens[a];
  s.labels[b] = "S-COPY";
  return s;
}

}  // namespace detail

inline std::vector<LabeledSentence> synth_sentences(SynthTask task, std::size_t count,
                                                    std::uint64_t seed,
                                                    const SynthOptions& options = {}) {
  std::mt19937_64 rng(seed);
  std::vector<LabeledSentence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(task == SynthTask::directional ? detail::directional_sentence(rng, options)
                                                 : detail::copy_sentence(rng, options));
  return out;
}

struct SynthCorpus {
  std::vector<LabeledSentence> train, dev, test;
};

/// `size` training sentences plus size/10 each for dev and test.
inline SynthCorpus synth_corpus(SynthTask task, std::size_t size, std::uint64_t seed,
                                const SynthOptions& options = {}) {
  if (size < 50) throw ConfigError("synth size must be at least 50");
  return {synth_sentences(task, size, derive_seed(seed, "synth.train"), options),
          synth_sentences(task, size / 10, derive_seed(seed, "synth.dev"), options),
          synth_sentences(task, size / 10, derive_seed(seed, "synth.test"), options)};
}

inline void write_synth_corpus(const SynthCorpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_column_file((dir / "train.txt").string(), c.train);
  write_column_file((dir / "dev.txt").string(), c.dev);
  write_column_file((dir / "test.txt").string(), c.test);
}

/// Tags each token with the label it most often carried in training.
class MajorityBaseline {
 public:
  explicit MajorityBaseline(const std::vector<LabeledSentence>& train) {
    std::map<std::string, std::map<std::string, std::size_t>> counts;
    std::map<std::string, std::size_t> overall;
    for (const auto& s : train)
      for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        ++counts[s.tokens[i]][s.labels[i]];
        ++overall[s.labels[i]];
      }
    auto argmax = [](const std::map<std::string, std::size_t>& m) {
      std::string best = "O";
      std::size_t n = 0;
      for (const auto& [label, c] : m)
        if (c > n) best = label, n = c;
      return best;
    };
    fallback_ = argmax(overall);
    for (const auto& [tok, m] : counts) best_[tok] = argmax(m);
  }

  std::vector<std::string> predict(const std::vector<std::string>& tokens) const {
    std::vector<std::string> out;
    for (const auto& t : tokens) {
      auto it = best_.find(t);
      out.push_back(it == best_.end() ? fallback_ : it->second);
    }
    return out;
  }

 private:
  std::map<std::string, std::string> best_;
  std::string fallback_;
};

}  // namespace tener
