#pragma once

// Sinusoidal absolute position embeddings, signed relative encodings, and the
// dot-product curves used to inspect them.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <random>
#include <vector>

#include "tener/tensor.hpp"

namespace tener {

namespace detail {

inline void require_even_dim(std::size_t d, const char* what) {
  if (d < 2 || d % 2 != 0)
    throw ConfigError(std::string(what) + ": dimension must be even and >= 2, got " +
                      std::to_string(d));
}

// c_i = 10000^(−2i/d)
inline Scalar frequency(std::size_t i, std::size_t d) {
  return 1 / std::pow(Scalar{10000}, static_cast<Scalar>(2 * i) / static_cast<Scalar>(d));
}

inline std::vector<Scalar> interleaved_sincos(Scalar position, std::size_t d) {
  std::vector<Scalar> v(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const Scalar angle = position * frequency(i, d);
    v[2 * i] = std::sin(angle);
    v[2 * i + 1] = std::cos(angle);
  }
  return v;
}

inline Scalar dot(const std::vector<Scalar>& a, const std::vector<Scalar>& b) {
  Scalar s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Absolute position embedding PE_t: element 2i is sin(t·c_i), 2i+1 is cos(t·c_i).
/// Negative t is accepted so offsets around a fixed position can be probed.
inline std::vector<Scalar> sinusoidal_pe(std::int64_t t, std::size_t d) {
  detail::require_even_dim(d, "sinusoidal_pe");
  return detail::interleaved_sincos(static_cast<Scalar>(t), d);
}

/// Encoding R_r of a signed query−key offset r, same layout at head width d_k.
inline std::vector<Scalar> relative_encoding(std::int64_t offset, std::size_t d_k) {
  detail::require_even_dim(d_k, "relative_encoding");
  return detail::interleaved_sincos(static_cast<Scalar>(offset), d_k);
}

/// max_len × dim table of absolute embeddings; immutable after construction.
class SinusoidalTable {
 public:
  SinusoidalTable(std::size_t dim, std::size_t max_len) : dim_(dim), max_len_(max_len) {
    detail::require_even_dim(dim, "SinusoidalTable");
    if (max_len == 0) throw ConfigError("SinusoidalTable: max_len must be positive");
    std::vector<Scalar> v;
    v.reserve(dim * max_len);
    for (std::size_t t = 0; t < max_len; ++t) {
      auto row = sinusoidal_pe(static_cast<std::int64_t>(t), dim);
      v.insert(v.end(), row.begin(), row.end());
    }
    rows_ = Tensor::matrix(max_len, dim, std::move(v));
  }

  std::size_t dim() const { return dim_; }
  std::size_t max_len() const { return max_len_; }
  const Tensor& rows() const { return rows_; }

  /// First `length` rows as a constant tensor.
  Tensor prefix(std::size_t length) const {
    if (length == 0 || length > max_len_)
      throw ConfigError("sequence length " + std::to_string(length) +
                        " exceeds position table of " + std::to_string(max_len_));
    NoGradGuard guard;
    return slice(rows_, 0, 0, length);
  }

 private:
  std::size_t dim_, max_len_;
  Tensor rows_;
};

/// (2·window+1) × head_dim table of relative encodings; row r+window holds R_r.
class RelativeTable {
 public:
  RelativeTable(std::size_t head_dim, std::size_t window)
      : head_dim_(head_dim), window_(window) {
    detail::require_even_dim(head_dim, "RelativeTable");
    std::vector<Scalar> v;
    v.reserve((2 * window + 1) * head_dim);
    const auto w = static_cast<std::int64_t>(window);
    for (std::int64_t r = -w; r <= w; ++r) {
      auto row = relative_encoding(r, head_dim);
      v.insert(v.end(), row.begin(), row.end());
    }
    rows_ = Tensor::matrix(2 * window + 1, head_dim, std::move(v));
  }

  std::size_t head_dim() const { return head_dim_; }
  std::size_t window() const { return window_; }
  const Tensor& rows() const { return rows_; }

  std::span<const Scalar> row(std::int64_t offset) const {
    const auto w = static_cast<std::int64_t>(window_);
    if (offset < -w || offset > w)
      throw ConfigError("relative offset " + std::to_string(offset) +
                        " outside window " + std::to_string(window_));
    return rows_.data().subspan(static_cast<std::size_t>(offset + w) * head_dim_,
                                head_dim_);
  }

  /// Rows for offsets −(length−1)..(length−1), the span a length-l sequence uses.
  Tensor for_length(std::size_t length) const {
    if (length == 0 || length - 1 > window_)
      throw ConfigError("relative table window " + std::to_string(window_) +
                        " is smaller than sequence length " + std::to_string(length) +
                        " minus one");
    NoGradGuard guard;
    return slice(rows_, 0, window_ - (length - 1), 2 * length - 1);
  }

 private:
  std::size_t head_dim_, window_;
  Tensor rows_;
};

/// Process-wide cache of read-only tables keyed by (dim, length).
inline std::shared_ptr<const SinusoidalTable> shared_sinusoidal_table(std::size_t dim,
                                                                      std::size_t max_len) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, std::shared_ptr<const SinusoidalTable>>
      cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{dim, max_len}];
  if (!slot) slot = std::make_shared<const SinusoidalTable>(dim, max_len);
  return slot;
}

inline std::shared_ptr<const RelativeTable> shared_relative_table(std::size_t head_dim,
                                                                  std::size_t window) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, std::shared_ptr<const RelativeTable>>
      cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{head_dim, window}];
  if (!slot) slot = std::make_shared<const RelativeTable>(head_dim, window);
  return slot;
}

// ---------------------------------------------------------------- curves

struct CurvePoint {
  std::int64_t k;
  Scalar value;
};

/// Σ_j cos(c_j·k), the value PE_t·PE_{t+k} takes for every t.
inline Scalar pe_dot_closed_form(std::size_t d, std::int64_t k) {
  detail::require_even_dim(d, "pe_dot_closed_form");
  Scalar s = 0;
  for (std::size_t j = 0; j < d / 2; ++j)
    s += std::cos(detail::frequency(j, d) * static_cast<Scalar>(k));
  return s;
}

/// PE_t·PE_{t+k} for k in [k_min, k_max], by explicit inner product at position t.
inline std::vector<CurvePoint> pe_dot_curve(std::size_t d, std::int64_t k_min,
                                            std::int64_t k_max, std::int64_t t = 100) {
  detail::require_even_dim(d, "pe_dot_curve");
  if (k_min > k_max) throw ConfigError("pe_dot_curve: k_min must not exceed k_max");
  const auto base = sinusoidal_pe(t, d);
  std::vector<CurvePoint> out;
  for (std::int64_t k = k_min; k <= k_max; ++k)
    out.push_back({k, detail::dot(base, sinusoidal_pe(t + k, d))});
  return out;
}

/// Random d×d projection with entries uniform in ±1/√d.
inline Tensor random_projection(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NoGradGuard guard;
  return init_uniform({d, d}, d, rng).detach();
}

/// PE_tᵀ·W·PE_{t+k} for k in [k_min, k_max] with an explicit projection W.
inline std::vector<CurvePoint> pe_projected_dot_curve(std::size_t d, std::int64_t k_min,
                                                      std::int64_t k_max,
                                                      const Tensor& projection,
                                                      std::int64_t t = 100) {
  detail::require_even_dim(d, "pe_projected_dot_curve");
  if (k_min > k_max) throw ConfigError("pe_projected_dot_curve: k_min must not exceed k_max");
  if (projection.rank() != 2 || projection.dim(0) != d || projection.dim(1) != d)
    throw ShapeError("pe_projected_dot_curve: projection must be " + std::to_string(d) +
                     "x" + std::to_string(d) + ", got " + format_shape(projection.shape()));
  const auto base = sinusoidal_pe(t, d);
  std::vector<Scalar> projected(d, 0);  // PE_tᵀ W
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) projected[c] += base[r] * projection.at(r, c);
  std::vector<CurvePoint> out;
  for (std::int64_t k = k_min; k <= k_max; ++k)
    out.push_back({k, detail::dot(projected, sinusoidal_pe(t + k, d))});
  return out;
}

inline std::vector<CurvePoint> pe_projected_dot_curve(std::size_t d, std::int64_t k_min,
                                                      std::int64_t k_max, std::uint64_t seed,
                                                      std::int64_t t = 100) {
  return pe_projected_dot_curve(d, k_min, k_max, random_projection(d, seed), t);
}

/// CSV with header `k,dot,projected_dot_seed<N>`.
inline void write_pe_curve_csv(std::ostream& os, const std::vector<CurvePoint>& dot,
                               const std::vector<CurvePoint>& projected, std::uint64_t seed) {
  if (dot.size() != projected.size())
    throw ContractError("write_pe_curve_csv: series lengths differ");
  os << "k,dot,projected_dot_seed" << seed << '\n';
  os.precision(17);
  for (std::size_t i = 0; i < dot.size(); ++i)
    os << dot[i].k << ',' << dot[i].value << ',' << projected[i].value << '\n';
}

}  // namespace tener
