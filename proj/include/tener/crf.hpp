#pragma once

// Linear-chain CRF over L labels with two virtual states: start (index L) and
// end (index L+1). A path y_0..y_{n−1} scores
//   T[start][y_0] + Σ_t E[t][y_t] + Σ_{t≥1} T[y_{t−1}][y_t] + T[y_{n−1}][end].
// The likelihood is the standard product of exponentiated potentials,
// normalized over all L^n paths.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tener/layers.hpp"
#include "tener/tensor.hpp"

namespace tener {

/// No label path has finite score under the active constraints.
class InfeasibleDecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr Scalar kNegInf = -std::numeric_limits<Scalar>::infinity();

inline std::size_t crf_start(std::size_t labels) { return labels; }
inline std::size_t crf_end(std::size_t labels) { return labels + 1; }

/// (L+2)×(L+2) table of allowed transitions, rows = from, cols = to.
struct TransitionMask {
  std::size_t labels = 0;
  std::vector<bool> allowed;

  bool operator()(std::size_t from, std::size_t to) const {
    return allowed[from * (labels + 2) + to];
  }
};

namespace detail {

struct BioesTag {
  char prefix;  // 'O', 'B', 'I', 'E', 'S'
  std::string type;
};

inline BioesTag split_bioes(const std::string& label) {
  if (label == "O") return {'O', ""};
  if (label.size() < 3 || label[1] != '-' || std::string("BIES").find(label[0]) == std::string::npos)
    throw std::invalid_argument("label '" + label + "' is not O or {B,I,E,S}-TYPE");
  return {label[0], label.substr(2)};
}

}  // namespace detail

/// Legal BIOES moves: an open span (B/I) must continue with I/E of its type;
/// a closed position (start/O/E/S) may only open with B/S or emit O.
inline TransitionMask bioes_transition_mask(const std::vector<std::string>& labels) {
  const std::size_t L = labels.size();
  const std::size_t S = L + 2;
  std::vector<detail::BioesTag> tags;
  for (const auto& l : labels) tags.push_back(detail::split_bioes(l));
  TransitionMask m{L, std::vector<bool>(S * S, false)};
  auto closed_after = [&](std::size_t from) {
    return from == crf_start(L) || tags[from].prefix == 'O' || tags[from].prefix == 'E' ||
           tags[from].prefix == 'S';
  };
  for (std::size_t from = 0; from < S; ++from) {
    if (from == crf_end(L)) continue;
    for (std::size_t to = 0; to < S; ++to) {
      if (to == crf_start(L)) continue;
      bool ok;
      if (closed_after(from)) {
        ok = to == crf_end(L) ? from != crf_start(L)
                              : (tags[to].prefix == 'O' || tags[to].prefix == 'B' ||
                                 tags[to].prefix == 'S');
      } else {
        ok = to != crf_end(L) && (tags[to].prefix == 'I' || tags[to].prefix == 'E') &&
             tags[to].type == tags[from].type;
      }
      m.allowed[from * S + to] = ok;
    }
  }
  return m;
}

namespace detail {

inline std::size_t check_crf_shapes(const Tensor& emissions, const Tensor& transitions,
                                    const Mask& mask) {
  require_rank2(emissions, "crf");
  require_rank2(transitions, "crf");
  const std::size_t L = emissions.dim(1);
  if (transitions.dim(0) != L + 2 || transitions.dim(1) != L + 2)
    throw ShapeError("crf: transitions " + format_shape(transitions.shape()) +
                     " do not match " + std::to_string(L) + " labels plus start/end");
  const std::size_t n = valid_prefix_length(mask, emissions.dim(0));
  if (n == 0) throw ContractError("crf: sequence has no unmasked token");
  return n;
}

inline Scalar lse(std::span<const Scalar> xs) {
  const Scalar mx = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(mx)) return mx;
  Scalar z = 0;
  for (auto x : xs) z += std::exp(x - mx);
  return mx + std::log(z);
}

// alpha[t][y] = log Σ over prefixes ending in y at t.
inline std::vector<Scalar> forward_scores(const Tensor& e, const Tensor& tr, std::size_t n) {
  const std::size_t L = e.dim(1);
  std::vector<Scalar> alpha(n * L), terms(L);
  for (std::size_t y = 0; y < L; ++y) alpha[y] = tr.at(crf_start(L), y) + e.at(0, y);
  for (std::size_t t = 1; t < n; ++t)
    for (std::size_t y = 0; y < L; ++y) {
      for (std::size_t p = 0; p < L; ++p) terms[p] = alpha[(t - 1) * L + p] + tr.at(p, y);
      alpha[t * L + y] = lse(terms) + e.at(t, y);
    }
  return alpha;
}

inline Scalar partition_from_alpha(const std::vector<Scalar>& alpha, const Tensor& tr,
                                   std::size_t n, std::size_t L) {
  std::vector<Scalar> terms(L);
  for (std::size_t y = 0; y < L; ++y) terms[y] = alpha[(n - 1) * L + y] + tr.at(y, crf_end(L));
  return lse(terms);
}

}  // namespace detail

/// Unnormalized log-score of one label path over the unmasked prefix.
inline Scalar score_sequence(const Tensor& emissions, const Tensor& transitions,
                             std::span<const std::size_t> tags, const Mask& mask = {}) {
  const std::size_t n = detail::check_crf_shapes(emissions, transitions, mask);
  const std::size_t L = emissions.dim(1);
  if (tags.size() < n)
    throw ContractError("score_sequence: " + std::to_string(tags.size()) + " tags for " +
                        std::to_string(n) + " tokens");
  for (std::size_t t = 0; t < n; ++t)
    if (tags[t] >= L)
      throw ContractError("score_sequence: tag " + std::to_string(tags[t]) + " >= " +
                          std::to_string(L) + " labels");
  Scalar s = transitions.at(crf_start(L), tags[0]);
  for (std::size_t t = 0; t < n; ++t) {
    s += emissions.at(t, tags[t]);
    if (t > 0) s += transitions.at(tags[t - 1], tags[t]);
  }
  return s + transitions.at(tags[n - 1], crf_end(L));
}

/// log Σ_paths exp(score), by the forward recursion.
inline Scalar log_partition(const Tensor& emissions, const Tensor& transitions,
                            const Mask& mask = {}) {
  const std::size_t n = detail::check_crf_shapes(emissions, transitions, mask);
  const std::size_t L = emissions.dim(1);
  return detail::partition_from_alpha(detail::forward_scores(emissions, transitions, n),
                                      transitions, n, L);
}

/// log P(tags | emissions); differentiable in both emissions and transitions.
inline Tensor log_likelihood(const Tensor& emissions, const Tensor& transitions,
                             std::span<const std::size_t> tags, const Mask& mask = {}) {
  const std::size_t n = detail::check_crf_shapes(emissions, transitions, mask);
  const std::size_t L = emissions.dim(1);
  const Scalar gold = score_sequence(emissions, transitions, tags, mask);
  auto alpha = detail::forward_scores(emissions, transitions, n);
  const Scalar log_z = detail::partition_from_alpha(alpha, transitions, n, L);
  std::vector<std::size_t> path(tags.begin(), tags.begin() + static_cast<std::ptrdiff_t>(n));

  return detail::make_result(
      {1}, {gold - log_z}, {emissions, transitions},
      [n, L, log_z, alpha = std::move(alpha), path = std::move(path)](detail::Node& node) {
        auto& e = *node.inputs[0];
        auto& tr = *node.inputs[1];
        const Scalar g = node.grad[0];
        const std::size_t S = L + 2;
        auto E = [&](std::size_t t, std::size_t y) { return e.value[t * L + y]; };
        auto T = [&](std::size_t a, std::size_t b) { return tr.value[a * S + b]; };

        // beta[t][y] = log Σ over suffixes after position t given y_t = y.
        std::vector<Scalar> beta(n * L), terms(L);
        for (std::size_t y = 0; y < L; ++y) beta[(n - 1) * L + y] = T(y, crf_end(L));
        for (std::size_t t = n - 1; t-- > 0;)
          for (std::size_t y = 0; y < L; ++y) {
            for (std::size_t q = 0; q < L; ++q)
              terms[q] = T(y, q) + E(t + 1, q) + beta[(t + 1) * L + q];
            beta[t * L + y] = detail::lse(terms);
          }

        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t y = 0; y < L; ++y) {
            const Scalar marginal = std::exp(alpha[t * L + y] + beta[t * L + y] - log_z);
            const Scalar indicator = path[t] == y ? 1 : 0;
            if (e.requires_grad) e.grad[t * L + y] += g * (indicator - marginal);
            if (tr.requires_grad) {
              if (t == 0) tr.grad[crf_start(L) * S + y] += g * (indicator - marginal);
              if (t == n - 1) tr.grad[y * S + crf_end(L)] += g * (indicator - marginal);
            }
          }
        if (!tr.requires_grad) return;
        for (std::size_t t = 1; t < n; ++t) {
          for (std::size_t p = 0; p < L; ++p)
            for (std::size_t q = 0; q < L; ++q)
              tr.grad[p * S + q] -= g * std::exp(alpha[(t - 1) * L + p] + T(p, q) + E(t, q) +
                                                 beta[t * L + q] - log_z);
          tr.grad[path[t - 1] * S + path[t]] += g;
        }
      });
}

struct ViterbiResult {
  std::vector<std::size_t> path;
  Scalar score = kNegInf;
};

/// Highest-scoring path over the unmasked prefix. With `allowed`, forbidden
/// transitions score −∞. Ties go to the lowest label index at every decision.
inline ViterbiResult viterbi_decode(const Tensor& emissions, const Tensor& transitions,
                                    const Mask& mask = {},
                                    const TransitionMask* allowed = nullptr) {
  const std::size_t n = detail::check_crf_shapes(emissions, transitions, mask);
  const std::size_t L = emissions.dim(1);
  if (allowed && allowed->labels != L)
    throw ShapeError("viterbi_decode: constraint table built for " +
                     std::to_string(allowed->labels) + " labels, emissions have " +
                     std::to_string(L));
  auto trans = [&](std::size_t a, std::size_t b) {
    return allowed && !(*allowed)(a, b) ? kNegInf : transitions.at(a, b);
  };
  std::vector<Scalar> best(n * L);
  std::vector<std::size_t> back(n * L, 0);
  for (std::size_t y = 0; y < L; ++y) best[y] = trans(crf_start(L), y) + emissions.at(0, y);
  for (std::size_t t = 1; t < n; ++t)
    for (std::size_t y = 0; y < L; ++y) {
      Scalar top = kNegInf;
      std::size_t arg = 0;
      for (std::size_t p = 0; p < L; ++p) {
        const Scalar s = best[(t - 1) * L + p] + trans(p, y);
        if (s > top) {
          top = s;
          arg = p;
        }
      }
      best[t * L + y] = top + emissions.at(t, y);
      back[t * L + y] = arg;
    }
  ViterbiResult result;
  std::size_t last = 0;
  for (std::size_t y = 0; y < L; ++y) {
    const Scalar s = best[(n - 1) * L + y] + trans(y, crf_end(L));
    if (s > result.score) {
      result.score = s;
      last = y;
    }
  }
  if (!std::isfinite(result.score))
    throw InfeasibleDecodeError("viterbi_decode: no label path has finite score");
  result.path.assign(n, 0);
  result.path[n - 1] = last;
  for (std::size_t t = n - 1; t > 0; --t) result.path[t - 1] = back[t * L + result.path[t]];
  return result;
}

}  // namespace tener
