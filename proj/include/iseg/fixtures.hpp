#pragma once

// Synthetic scenes and attention fixtures for desk-scale verification.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "iseg/attention.hpp"
#include "iseg/eval.hpp"
#include "iseg/types.hpp"

namespace iseg {

/// Seeded generator. Uniform doubles are built from the top 53 bits so the
/// stream is identical on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Integer in [lo, hi).
  int uniform_int(int lo, int hi) {
    if (hi <= lo) return lo;
    return lo + static_cast<int>(eng_() % static_cast<std::uint64_t>(hi - lo));
  }

 private:
  std::mt19937_64 eng_;
};

/// splitmix64 finalizer; derives independent child seeds.
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// --- scenes ---------------------------------------------------------------

struct SceneOptions {
  Grid grid{64, 64};
  int min_segments = 1;
  int max_segments = 3;
  double min_area_fraction = 0.04;
};

struct SyntheticScene {
  SegMask mask;
  int segments = 0;
  std::uint64_t seed = 0;
};

/// Axis-aligned rectangles and discs, non-overlapping, each covering at least
/// `min_area_fraction` of the grid; the background keeps the same minimum.
inline SyntheticScene generate_scene(const SceneOptions& opt, std::uint64_t seed) {
  if (opt.grid.rows < 4 || opt.grid.cols < 4) throw ParameterError("scene grid must be at least 4x4");
  if (opt.min_segments < 1 || opt.max_segments < opt.min_segments || opt.max_segments > 254)
    throw ParameterError("invalid segment count range");
  const int h = opt.grid.rows;
  const int w = opt.grid.cols;
  const auto min_area = static_cast<std::size_t>(std::ceil(opt.min_area_fraction * static_cast<double>(opt.grid.size())));
  Rng rng(seed);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const int count = rng.uniform_int(opt.min_segments, opt.max_segments + 1);
    SegMask mask(opt.grid);
    bool ok = true;
    for (int k = 1; k <= count && ok; ++k) {
      ok = false;
      for (int tries = 0; tries < 100 && !ok; ++tries) {
        std::vector<std::size_t> region;
        if (rng.uniform() < 0.5) {
          const int rh = rng.uniform_int(std::max(2, static_cast<int>(0.2 * h)), std::max(3, static_cast<int>(0.5 * h)));
          const int rw = rng.uniform_int(std::max(2, static_cast<int>(0.2 * w)), std::max(3, static_cast<int>(0.5 * w)));
          const int y0 = rng.uniform_int(0, h - rh + 1);
          const int x0 = rng.uniform_int(0, w - rw + 1);
          for (int y = y0; y < y0 + rh; ++y)
            for (int x = x0; x < x0 + rw; ++x) region.push_back(static_cast<std::size_t>(opt.grid.index(y, x)));
        } else {
          const double lim = std::min(h, w);
          const double r = rng.uniform(0.12 * lim, 0.25 * lim);
          const double cy = rng.uniform(r, h - r);
          const double cx = rng.uniform(r, w - r);
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
              if (dy * dy + dx * dx <= r * r) region.push_back(static_cast<std::size_t>(opt.grid.index(y, x)));
            }
        }
        if (region.size() < min_area) continue;
        if (std::any_of(region.begin(), region.end(), [&](std::size_t i) { return mask.labels[i] != 0; })) continue;
        for (auto i : region) mask.labels[i] = static_cast<std::uint8_t>(k);
        ok = true;
      }
    }
    if (!ok) continue;
    const auto background = static_cast<std::size_t>(std::count(mask.labels.begin(), mask.labels.end(), 0));
    if (background < min_area) continue;
    mask.palette.push_back("background");
    for (int k = 1; k <= count; ++k) mask.palette.push_back("segment" + std::to_string(k));
    return {std::move(mask), count, seed};
  }
  throw ParameterError("could not place non-overlapping segments on a " + to_string(opt.grid) + " grid");
}

// --- ground truth and noise -----------------------------------------------

/// Row-normalized self-correlation of a label map: A[i,j] = 1/|S(i)| when i
/// and j share a label, else 0.
inline SelfAttentionMap gt_self_attention(const SegMask& mask) {
  const auto n = static_cast<Eigen::Index>(mask.labels.size());
  if (n == 0) throw ParameterError("mask is empty");
  std::map<std::uint8_t, double> size;
  for (auto l : mask.labels) size[l] += 1.0;
  SelfAttentionMap out{mask.grid, Matrix::Zero(n, n), false};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto li = mask.labels[static_cast<std::size_t>(i)];
    const double v = 1.0 / size[li];
    for (Eigen::Index j = 0; j < n; ++j)
      if (mask.labels[static_cast<std::size_t>(j)] == li) out.data(i, j) = v;
  }
  return out;
}

/// Noise model for synthetic self-attention.
///   offdiag_leak     fraction of each row's mass spread uniformly over pixels
///                    outside the row's segment (whole row if there are none)
///   jitter           entries are multiplied by 1 + jitter * U(-1, 1)
///   locality         sigma (cells) of a local peak inside the segment; 0 keeps
///                    the flat ground-truth block
///   locality_weight  share of in-segment mass carried by the local peak
struct NoiseSpec {
  double offdiag_leak = 0.3;
  double jitter = 0.2;
  double locality = 0.0;
  double locality_weight = 1.0;
  std::uint64_t seed = 0;
};

inline void validate(const NoiseSpec& s) {
  if (!(s.offdiag_leak >= 0.0 && s.offdiag_leak < 1.0)) throw ParameterError("offdiag_leak must lie in [0, 1)");
  if (!(s.jitter >= 0.0 && s.jitter <= 1.0)) throw ParameterError("jitter must lie in [0, 1]");
  if (!(s.locality >= 0.0)) throw ParameterError("locality must be >= 0");
  if (!(s.locality_weight >= 0.0 && s.locality_weight <= 1.0)) throw ParameterError("locality_weight must lie in [0, 1]");
}

namespace detail {

struct Offset {
  int dy, dx;
};

/// All offsets of the grid ordered by (squared distance, dy, dx).
inline std::vector<Offset> offsets_by_distance(Grid g) {
  std::vector<Offset> out;
  out.reserve(static_cast<std::size_t>((2 * g.rows - 1) * (2 * g.cols - 1)));
  for (int dy = -(g.rows - 1); dy < g.rows; ++dy)
    for (int dx = -(g.cols - 1); dx < g.cols; ++dx) out.push_back({dy, dx});
  std::sort(out.begin(), out.end(), [](const Offset& a, const Offset& b) {
    return std::tuple(a.dy * a.dy + a.dx * a.dx, a.dy, a.dx) < std::tuple(b.dy * b.dy + b.dx * b.dx, b.dy, b.dx);
  });
  return out;
}

/// Gaussian weights by distance rank, truncated below 1e-4 of the peak, summing to 1.
inline std::vector<double> rank_profile(const std::vector<Offset>& offsets, double sigma) {
  std::vector<double> w;
  for (const auto& o : offsets) {
    const double v = std::exp(-(o.dy * o.dy + o.dx * o.dx) / (2.0 * sigma * sigma));
    if (v < 1e-4) break;
    w.push_back(v);
  }
  double s = 0.0;
  for (double v : w) s += v;
  for (double& v : w) v /= s;
  return w;
}

}  // namespace detail

/// Blends the ground truth with out-of-segment leak, applies multiplicative
/// jitter and renormalizes rows. With locality > 0 the in-segment mass is a
/// local peak: each pixel's k nearest same-segment pixels receive the same
/// rank profile, so boundary and interior rows look alike.
inline SelfAttentionMap noisy_self_attention(const SelfAttentionMap& gt, const NoiseSpec& spec) {
  validate(spec);
  const Matrix& g = gt.data;
  const Eigen::Index n = g.rows();
  if (g.cols() != n || static_cast<std::size_t>(n) != gt.grid.size()) throw ShapeError("ground truth is not HW x HW");
  const double beta = spec.offdiag_leak;

  Matrix a(n, n);
  std::vector<detail::Offset> offsets;
  std::vector<double> profile;
  if (spec.locality > 0.0) {
    offsets = detail::offsets_by_distance(gt.grid);
    profile = detail::rank_profile(offsets, spec.locality);
  }
  Eigen::RowVectorXd local(n);
  std::vector<Eigen::Index> picked;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index outside = 0;
    for (Eigen::Index j = 0; j < n; ++j) outside += g(i, j) > 0.0 ? 0 : 1;
    const double leak = outside > 0 ? beta / static_cast<double>(outside) : beta / static_cast<double>(n);

    if (profile.empty()) {
      a.row(i) = (1.0 - beta) * g.row(i);
    } else {
      local.setZero();
      picked.clear();
      const int r = static_cast<int>(i / gt.grid.cols);
      const int c = static_cast<int>(i % gt.grid.cols);
      for (const auto& o : offsets) {
        if (picked.size() == profile.size()) break;
        if (!gt.grid.contains(r + o.dy, c + o.dx)) continue;
        const auto j = gt.grid.index(r + o.dy, c + o.dx);
        if (g(i, j) > 0.0) picked.push_back(j);
      }
      double mass = 0.0;
      for (std::size_t k = 0; k < picked.size(); ++k) mass += profile[k];
      for (std::size_t k = 0; k < picked.size(); ++k) local(picked[k]) = profile[k] / mass;
      a.row(i) = (1.0 - beta) * (spec.locality_weight * local + (1.0 - spec.locality_weight) * g.row(i));
    }
    for (Eigen::Index j = 0; j < n; ++j)
      if (outside == 0 || g(i, j) <= 0.0) a(i, j) += leak;
  }

  if (spec.jitter > 0.0) {
    Rng rng(spec.seed);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) a(i, j) *= 1.0 + spec.jitter * (2.0 * rng.uniform() - 1.0);
  }
  for (Eigen::Index i = 0; i < n; ++i) a.row(i) /= a.row(i).sum();
  return {gt.grid, std::move(a), false};
}

// --- interaction seeds ----------------------------------------------------

enum class InteractionKind { point, line, box };

inline InteractionKind parse_interaction_kind(const std::string& s) {
  if (s == "point") return InteractionKind::point;
  if (s == "line") return InteractionKind::line;
  if (s == "box") return InteractionKind::box;
  throw ParameterError("unknown interaction kind '" + s + "' (expected point, line or box)");
}

struct Pixel {
  int row = 0;
  int col = 0;
};

/// Integer midpoint (Bresenham) rasterization, endpoints included.
inline std::vector<Pixel> rasterize_line(Pixel a, Pixel b) {
  std::vector<Pixel> out;
  int x0 = a.col, y0 = a.row;
  const int dx = std::abs(b.col - x0), sx = x0 < b.col ? 1 : -1;
  const int dy = -std::abs(b.row - y0), sy = y0 < b.row ? 1 : -1;
  int err = dx + dy;
  while (true) {
    out.push_back({y0, x0});
    if (x0 == b.col && y0 == b.row) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
  return out;
}

/// Single-channel binary map marking the interaction: each point, the
/// polyline through consecutive points, or the box spanned by two corners.
inline CategoryMaps seed_from_interaction(InteractionKind kind, const std::vector<Pixel>& geometry, Grid grid) {
  if (geometry.empty()) throw ParameterError("interaction geometry is empty");
  for (const auto& p : geometry)
    if (!grid.contains(p.row, p.col))
      throw ParameterError("interaction pixel (" + std::to_string(p.row) + "," + std::to_string(p.col) +
                           ") outside " + to_string(grid));
  CategoryMaps out{grid, Matrix::Zero(static_cast<Eigen::Index>(grid.size()), 1), 0, std::nullopt};
  auto mark = [&](int r, int c) { out.maps(grid.index(r, c), 0) = 1.0; };
  switch (kind) {
    case InteractionKind::point:
      for (const auto& p : geometry) mark(p.row, p.col);
      break;
    case InteractionKind::line:
      if (geometry.size() < 2) throw ParameterError("a line needs at least two points");
      for (std::size_t k = 0; k + 1 < geometry.size(); ++k)
        for (const auto& p : rasterize_line(geometry[k], geometry[k + 1])) mark(p.row, p.col);
      break;
    case InteractionKind::box: {
      if (geometry.size() != 2) throw ParameterError("a box needs exactly two corners");
      const auto [r0, r1] = std::minmax(geometry[0].row, geometry[1].row);
      const auto [c0, c1] = std::minmax(geometry[0].col, geometry[1].col);
      for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) mark(r, c);
      break;
    }
  }
  return out;
}

// --- degraded cross-attention ---------------------------------------------

/// Coarse stand-in for a category's cross-attention: the indicator of `label`
/// box-filtered (3x3, edge-replicated) plus leak * U(0,1) noise, min-max normalized.
inline Vector degraded_initial_map(const SegMask& mask, int label, double leak, Rng& rng) {
  const Grid g = mask.grid;
  Vector out(static_cast<Eigen::Index>(g.size()));
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c) {
      double s = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int rr = std::clamp(r + dy, 0, g.rows - 1);
          const int cc = std::clamp(c + dx, 0, g.cols - 1);
          s += mask.at(rr, cc) == label ? 1.0 : 0.0;
        }
      out(g.index(r, c)) = s / 9.0;
    }
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) += leak * rng.uniform();
  Matrix m = out;
  normalize_channels(m);
  return m.col(0);
}

/// One degraded channel per foreground segment of the scene.
inline CategoryMaps degraded_initial_maps(const SyntheticScene& scene, double leak, std::uint64_t seed) {
  Rng rng(seed);
  CategoryMaps out{scene.mask.grid, Matrix(static_cast<Eigen::Index>(scene.mask.grid.size()), scene.segments), 0,
                   std::nullopt};
  for (int k = 1; k <= scene.segments; ++k) out.maps.col(k - 1) = degraded_initial_map(scene.mask, k, leak, rng);
  return out;
}

// --- degradation study ----------------------------------------------------

struct StudyGrid {
  std::vector<double> lambdas{0.0, 0.001, 0.005, 0.01, 0.05, 0.1};
  std::vector<int> iterations{1, 2, 4, 6, 8, 10, 12};
};

struct StudyOptions {
  int scenes = 100;
  std::uint64_t seed = 0;
  SceneOptions scene;
  double tau = 0.5;
  double epsilon_log = 1e-8;
};

struct StudyRow {
  int scene_id;
  double lambda;
  int iterations;
  double iou;
};

struct StudyCell {
  double lambda;
  int iterations;
  double mean_iou;
};

struct StudyTable {
  std::vector<StudyRow> rows;
  std::vector<StudyCell> cells;

  double mean(double lambda, int iterations) const {
    for (const auto& c : cells)
      if (c.lambda == lambda && c.iterations == iterations) return c.mean_iou;
    throw ParameterError("no study cell for lambda=" + std::to_string(lambda) + " N=" + std::to_string(iterations));
  }
};

inline void validate(const StudyGrid& grid) {
  if (grid.lambdas.empty() || grid.iterations.empty()) throw ParameterError("study grid must not be empty");
  for (double l : grid.lambdas)
    if (!(l >= 0.0)) throw ParameterError("study lambda must be >= 0");
  for (int n : grid.iterations)
    if (n < 1) throw ParameterError("study iteration counts must be >= 1");
}

/// For every scene: ground truth, noisy self-attention (seeded per scene) and
/// degraded initial maps; then refinement for each (lambda, N) cell, scored
/// as mIoU of the threshold-assembled mask against the scene labels. The
/// initial-map noise amplitude reuses NoiseSpec::offdiag_leak.
inline StudyTable degradation_study(const StudyOptions& opt, const NoiseSpec& noise, const StudyGrid& grid) {
  if (opt.scenes < 1) throw ParameterError("scene count must be >= 1");
  validate(noise);
  validate(grid);
  const int max_n = *std::max_element(grid.iterations.begin(), grid.iterations.end());
  StudyTable table;
  for (int s = 0; s < opt.scenes; ++s) {
    const auto scene = generate_scene(opt.scene, mix_seed(opt.seed, static_cast<std::uint64_t>(s)));
    NoiseSpec ns = noise;
    ns.seed = mix_seed(noise.seed, static_cast<std::uint64_t>(s));
    SelfAttentionMap noisy;
    {
      const auto gt = gt_self_attention(scene.mask);
      noisy = noisy_self_attention(gt, ns);
    }
    const auto initial = degraded_initial_maps(scene, noise.offdiag_leak, mix_seed(ns.seed, 1));
    for (double lambda : grid.lambdas) {
      const auto a_ent = entropy_reduce(noisy, lambda, opt.epsilon_log);
      std::map<int, double> at;
      iterative_refine(initial, a_ent, max_n, NormalizeMode::min_max, [&](int n, const Matrix& maps) {
        CategoryMaps cm{scene.mask.grid, maps, n, std::nullopt};
        at[n] = miou(assemble_multi(cm, BackgroundMode::threshold, opt.tau), scene.mask).miou;
      });
      for (int n : grid.iterations) table.rows.push_back({s, lambda, n, at.at(n)});
    }
  }
  for (double lambda : grid.lambdas)
    for (int n : grid.iterations) {
      double sum = 0.0;
      int cnt = 0;
      for (const auto& r : table.rows)
        if (r.lambda == lambda && r.iterations == n) {
          sum += r.iou;
          ++cnt;
        }
      table.cells.push_back({lambda, n, sum / cnt});
    }
  return table;
}

inline void write_csv(std::ostream& os, const StudyTable& t) {
  os << "scene_id,lambda,N,iou\n";
  char buf[128];
  for (const auto& r : t.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%d,%.17g\n", r.scene_id, r.lambda, r.iterations, r.iou);
    os << buf;
  }
}

inline nlohmann::json to_json(const StudyTable& t) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : t.cells) cells.push_back({{"lambda", c.lambda}, {"N", c.iterations}, {"mean_iou", c.mean_iou}});
  return {{"cells", cells}};
}

}  // namespace iseg
