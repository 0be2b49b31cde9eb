#pragma once

// Attention maps, entropy-reduced self-attention and iterative cross-attention
// refinement. Everything here is a pure function of its arguments.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "iseg/log.hpp"
#include "iseg/types.hpp"

namespace iseg {

namespace detail {

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw DomainError(std::string(what) + " contains NaN or Inf");
}

}  // namespace detail

/// Row-wise softmax. The row maximum is subtracted before exponentiation.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Softmax(Q K^T / sqrt(d)). Q is HW x dk, K is M x dk; result is HW x M.
inline Matrix attention_from_qk(const Matrix& q, const Matrix& k, double d) {
  if (q.cols() != k.cols())
    throw ShapeError("query/key inner dimensions differ: " + std::to_string(q.cols()) + " vs " +
                     std::to_string(k.cols()));
  if (!(d > 0.0)) throw ParameterError("normalization factor d must be positive");
  detail::require_finite(q, "query");
  detail::require_finite(k, "key");
  if (k.rows() == 0) throw ShapeError("key has no rows");
  const Matrix logits = (q * k.transpose()) / std::sqrt(d);
  return softmax_rows(logits);
}

/// Per-token weights: gamma on category tokens, 1 elsewhere.
inline Vector category_weights(const TokenMeta& meta, Eigen::Index token_count) {
  Vector w = Vector::Ones(token_count);
  for (int j : meta.category_indices()) {
    if (j < 0 || j >= token_count) throw ParameterError("category index " + std::to_string(j) + " out of range");
    w(j) = meta.gamma;
  }
  return w;
}

/// Cross-attention with category keys scaled by gamma before the softmax.
inline Matrix category_enhanced_attention(const Matrix& q, const Matrix& k, const TokenMeta& meta, double d) {
  if (!(meta.gamma >= 1.0)) throw ParameterError("gamma must be >= 1");
  if (meta.category_indices().empty()) {
    spdlog::warn("category-enhanced attention called with an empty category set; using plain attention");
    return attention_from_qk(q, k, d);
  }
  const Vector w = category_weights(meta, k.rows());
  return attention_from_qk(q, w.asDiagonal() * k, d);
}

/// Shannon entropy -sum a log a over all entries (natural log, 0 log 0 = 0).
inline double self_attention_entropy(const Matrix& a) {
  double e = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double v = a(i, j);
      if (v < 0.0 || std::isnan(v)) throw DomainError("entropy undefined for negative or NaN entries");
      if (v > 0.0) e -= v * std::log(v);
    }
  }
  return e;
}

inline double self_attention_entropy(const SelfAttentionMap& a) { return self_attention_entropy(a.data); }

/// One step against the entropy gradient:
///   a <- clamp(a + lambda * (1 + log(max(a, eps))), 0, 1).
/// Rows are not renormalized. Entries equal to 1/e are fixed points.
inline SelfAttentionMap entropy_reduce(const SelfAttentionMap& a, double lambda, double epsilon_log = 1e-8) {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
  if (!(epsilon_log > 0.0)) throw ParameterError("epsilon_log must be positive");
  SelfAttentionMap out{a.grid, a.data, true};
  if (lambda == 0.0) return out;
  out.data = a.data.unaryExpr([lambda, epsilon_log](double v) {
    const double step = v + lambda * (1.0 + std::log(std::max(v, epsilon_log)));
    return std::clamp(step, 0.0, 1.0);
  });
  return out;
}

/// Min-max normalizes every column to [0, 1] in place. A constant column maps
/// to all ones when its value is positive and to all zeros otherwise.
inline void normalize_channels(Matrix& maps, NormalizeMode mode = NormalizeMode::min_max) {
  if (mode == NormalizeMode::none) return;
  for (Eigen::Index c = 0; c < maps.cols(); ++c) {
    auto col = maps.col(c);
    const double lo = col.minCoeff();
    const double hi = col.maxCoeff();
    const double range = hi - lo;
    if (range <= 1e-12 * std::max(1.0, std::abs(hi))) {
      col.setConstant(hi > 0.0 ? 1.0 : 0.0);
    } else {
      col = (col.array() - lo) / range;
    }
  }
}

/// Called after every iteration with the iteration index n (1-based) and the
/// normalized maps; those maps equal iterative_refine(initial, a, n).
using RefineObserver = std::function<void(int, const Matrix&)>;

/// N rounds of: normalize each channel, then channel <- A_ent * channel,
/// followed by a final normalization.
inline CategoryMaps iterative_refine(const CategoryMaps& initial, const SelfAttentionMap& a_ent, int iterations,
                                     NormalizeMode mode = NormalizeMode::min_max,
                                     const RefineObserver& observer = {}) {
  if (iterations < 1) throw ParameterError("iteration count must be >= 1");
  if (a_ent.data.rows() != a_ent.data.cols()) throw ShapeError("self-attention must be square");
  if (initial.maps.rows() != a_ent.data.rows())
    throw ShapeError("category map length " + std::to_string(initial.maps.rows()) +
                     " does not match self-attention size " + std::to_string(a_ent.data.rows()));
  Matrix x = initial.maps;
  for (int n = 1; n <= iterations; ++n) {
    normalize_channels(x, mode);
    x = a_ent.data * x;
    if (observer) {
      Matrix snapshot = x;
      normalize_channels(snapshot, mode);
      observer(n, snapshot);
    }
  }
  normalize_channels(x, mode);
  CategoryMaps out = initial;
  out.maps = std::move(x);
  out.iteration = initial.iteration + iterations;
  return out;
}

/// n-th matrix power of the (entropy-reduced) self-attention. n = 0 gives the identity.
inline SelfAttentionMap refined_self_attention_power(const SelfAttentionMap& a, int n) {
  if (n < 0) throw ParameterError("power must be >= 0");
  const Eigen::Index hw = a.data.rows();
  Matrix result = Matrix::Identity(hw, hw);
  Matrix base = a.data;
  bool first = true;
  for (int e = n; e > 0; e >>= 1) {
    if (e & 1) {
      result = first ? base : Matrix(result * base);
      first = false;
    }
    if (e > 1) base = base * base;
  }
  return {a.grid, std::move(result), a.reduced};
}

/// Row `pixel` of A^n, computed with n vector-matrix products.
inline Vector refined_affinity_row(const SelfAttentionMap& a, Eigen::Index pixel, int n) {
  if (n < 0) throw ParameterError("power must be >= 0");
  if (pixel < 0 || pixel >= a.data.rows()) throw ParameterError("pixel index out of range");
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(a.data.cols());
  row(pixel) = 1.0;
  for (int i = 0; i < n; ++i) row = row * a.data;
  return row.transpose();
}

}  // namespace iseg
