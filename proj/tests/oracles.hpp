#pragma once

// Independent reference implementations used to check the library. They are
// deliberately naive: direct loops over pixels, no shared helpers.

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "iseg/types.hpp"

namespace oracle {

struct Metrics {
  double miou = 0.0;
  double acc = 0.0;
};

/// Per-pixel counting over the classes present in either map.
inline Metrics brute_force_metrics(const iseg::SegMask& pred, const iseg::SegMask& gt) {
  std::set<int> classes;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    classes.insert(gt.labels[i]);
    classes.insert(pred.labels[i]);
  }
  double sum = 0.0;
  for (int k : classes) {
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      const bool p = pred.labels[i] == k;
      const bool g = gt.labels[i] == k;
      inter += (p && g) ? 1 : 0;
      uni += (p || g) ? 1 : 0;
    }
    sum += static_cast<double>(inter) / static_cast<double>(uni);
  }
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) correct += pred.labels[i] == gt.labels[i] ? 1 : 0;
  return {sum / static_cast<double>(classes.size()), static_cast<double>(correct) / static_cast<double>(gt.labels.size())};
}

/// Row-normalized self-correlation M M^T of the one-hot mask, built densely.
inline iseg::Matrix gt_affinity(const iseg::SegMask& mask) {
  const auto n = static_cast<Eigen::Index>(mask.labels.size());
  iseg::Matrix a = iseg::Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = mask.labels[i] == mask.labels[j] ? 1.0 : 0.0;
    a.row(i) /= a.row(i).sum();
  }
  return a;
}

/// Shannon entropy of a matrix, accumulated in long double.
inline double entropy(const iseg::Matrix& a) {
  long double e = 0.0L;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const long double v = a.data()[i];
    if (v > 0) e -= v * std::log(v);
  }
  return static_cast<double>(e);
}

}  // namespace oracle
