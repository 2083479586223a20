#pragma once

#include <cmath>
#include <ostream>
#include <vector>

#include "tener/attention.hpp"
#include "tener/data.hpp"
#include "tener/model.hpp"

namespace tener {

struct HeadEntropy {
  std::size_t layer = 0;
  std::size_t head = 0;
  Scalar unscaled = 0;  // mean row entropy of softmax(scores)
  Scalar scaled = 0;    // mean row entropy of softmax(scores / √d_k)
  std::size_t rows = 0;
};

/// Mean attention entropy per head over every query row of `sentences`,
/// applying both softmax variants to the same raw scores.
inline std::vector<HeadEntropy> attention_entropy(const NerTagger& model,
                                                  const std::vector<LabeledSentence>& sentences) {
  const auto& cfg = model.encoder().config();
  std::vector<HeadEntropy> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t h = 0; h < cfg.n_heads; ++h) out.push_back({l, h, 0, 0, 0});
  NoGradGuard guard;
  for (const auto& s : sentences) {
    if (s.tokens.empty()) continue;
    auto logits = model.attention_logits(model.encode_tokens(s.tokens));
    for (std::size_t l = 0; l < logits.size(); ++l)
      for (std::size_t h = 0; h < logits[l].size(); ++h) {
        auto& acc = out[l * cfg.n_heads + h];
        const auto raw = row_entropies(attention_weights(logits[l][h], false, cfg.d_k));
        const auto cooled = row_entropies(attention_weights(logits[l][h], true, cfg.d_k));
        for (std::size_t r = 0; r < raw.size(); ++r) {
          acc.unscaled += raw[r];
          acc.scaled += cooled[r];
        }
        acc.rows += raw.size();
      }
  }
  for (auto& e : out)
    if (e.rows) {
      e.unscaled /= static_cast<Scalar>(e.rows);
      e.scaled /= static_cast<Scalar>(e.rows);
    }
  return out;
}

inline void write_entropy_csv(std::ostream& os, const std::vector<HeadEntropy>& rows) {
  os << "layer,head,unscaled_entropy,scaled_entropy\n";
  os.precision(17);
  for (const auto& e : rows) os << e.layer << ',' << e.head << ',' << e.unscaled << ',' << e.scaled << '\n';
}

}  // namespace tener
