#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace iseg {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Error hierarchy. Every failure the library reports derives from Error so
// callers (the CLI in particular) can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
  using Error::Error;
};
class DomainError : public Error {
  using Error::Error;
};
class ParameterError : public Error {
  using Error::Error;
};
class ConfigError : public Error {
  using Error::Error;
};
class ValidationError : public Error {
  using Error::Error;
};
class TruncationError : public Error {
  using Error::Error;
};
class IoError : public Error {
  using Error::Error;
};

/// Spatial extent of a working grid, in cells. Pixels are flattened row-major.
struct Grid {
  int rows = 0;
  int cols = 0;

  constexpr std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  constexpr Eigen::Index index(int r, int c) const { return static_cast<Eigen::Index>(r) * cols + c; }
  constexpr bool contains(int r, int c) const { return r >= 0 && c >= 0 && r < rows && c < cols; }
  friend constexpr bool operator==(const Grid&, const Grid&) = default;
};

inline std::string to_string(const Grid& g) { return std::to_string(g.rows) + "x" + std::to_string(g.cols); }

/// HW x HW spatial affinity matrix. Row-stochastic as produced by softmax;
/// after entropy reduction rows no longer sum to one and `reduced` is set.
struct SelfAttentionMap {
  Grid grid;
  Matrix data;
  bool reduced = false;

  Eigen::Index pixels() const { return data.rows(); }
};

/// A target category: display name plus the prompt positions naming it.
/// Multi-token names own several positions; their columns are averaged.
struct Category {
  std::string name;
  std::vector<int> positions;

  friend bool operator==(const Category&, const Category&) = default;
};

struct TokenMeta {
  std::vector<std::string> tokens;
  std::vector<Category> categories;
  std::vector<int> background_indices;
  double gamma = 1.6;

  int token_count() const { return static_cast<int>(tokens.size()); }

  /// Union of all category positions (the enhanced set).
  std::vector<int> category_indices() const {
    std::vector<int> out;
    for (const auto& c : categories) out.insert(out.end(), c.positions.begin(), c.positions.end());
    return out;
  }

  friend bool operator==(const TokenMeta&, const TokenMeta&) = default;
};

/// Throws ParameterError unless indices are in range and disjoint and gamma >= 1.
inline void validate(const TokenMeta& meta) {
  const int t = meta.token_count();
  std::vector<char> seen(static_cast<std::size_t>(t), 0);
  auto mark = [&](int idx, char tag, const char* what) {
    if (idx < 0 || idx >= t)
      throw ParameterError(std::string(what) + " index " + std::to_string(idx) + " outside [0, " + std::to_string(t) + ")");
    if (seen[static_cast<std::size_t>(idx)] != 0 && seen[static_cast<std::size_t>(idx)] != tag)
      throw ParameterError("token " + std::to_string(idx) + " is both a category and a background token");
    seen[static_cast<std::size_t>(idx)] = tag;
  };
  for (const auto& c : meta.categories) {
    if (c.positions.empty()) throw ParameterError("category '" + c.name + "' has no token positions");
    for (int p : c.positions) mark(p, 'c', "category");
  }
  for (int p : meta.background_indices) mark(p, 'b', "background");
  if (!(meta.gamma >= 1.0)) throw ParameterError("gamma must be >= 1");
}

struct CrossAttentionLayer {
  Grid grid;
  Matrix map;  // HW_l x T
};

struct CrossAttentionStack {
  std::vector<CrossAttentionLayer> layers;
  Grid grid;     // working resolution of `fused`
  Matrix fused;  // HW x T
  int token_count = 0;
};

/// One column per selected category, each of length HW. An optional column
/// may be flagged as the background channel for argmax assembly.
struct CategoryMaps {
  Grid grid;
  Matrix maps;  // HW x C
  int iteration = 0;
  std::optional<Eigen::Index> background_channel;

  Eigen::Index channels() const { return maps.cols(); }
};

enum class NormalizeMode { min_max, none };

struct RefineConfig {
  int iterations = 10;
  double lambda = 0.01;
  double gamma = 1.6;
  double tau = 0.5;
  double epsilon_log = 1e-8;
  NormalizeMode normalize = NormalizeMode::min_max;
};

inline void validate(const RefineConfig& cfg) {
  if (cfg.iterations < 1) throw ParameterError("iteration count must be >= 1");
  if (!(cfg.lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
  if (!(cfg.gamma >= 1.0)) throw ParameterError("gamma must be >= 1");
  if (!(cfg.tau > 0.0 && cfg.tau < 1.0)) throw ParameterError("tau must lie in (0, 1)");
  if (!(cfg.epsilon_log > 0.0)) throw ParameterError("epsilon_log must be positive");
}

/// H x W label map, 0 = background, k >= 1 = category k.
struct SegMask {
  Grid grid;
  std::vector<std::uint8_t> labels;
  std::vector<std::string> palette;  // palette[k] names label k

  SegMask() = default;
  explicit SegMask(Grid g, std::uint8_t fill = 0) : grid(g), labels(g.size(), fill) {}

  std::uint8_t& at(int r, int c) { return labels[static_cast<std::size_t>(grid.index(r, c))]; }
  std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(grid.index(r, c))]; }
  int max_label() const {
    int m = 0;
    for (auto v : labels) m = v > m ? v : m;
    return m;
  }
};

}  // namespace iseg
