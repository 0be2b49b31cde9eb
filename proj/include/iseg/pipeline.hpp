#pragma once

// End-to-end runs over an attention dump: the full refinement pipeline,
// interaction-seeded refinement and refined-affinity inspection.

#include <cmath>
#include <string>
#include <vector>

#include "iseg/attention.hpp"
#include "iseg/dumpio.hpp"
#include "iseg/eval.hpp"
#include "iseg/fixtures.hpp"
#include "iseg/png.hpp"
#include "iseg/resample.hpp"

namespace iseg {

struct RefineResult {
  CrossAttentionStack cross;
  CategoryMaps initial;
  CategoryMaps refined;
  SegMask mask;    // working resolution
  SegMask output;  // image resolution (nearest neighbour)
};

/// Rescales every row to sum to 1 in double precision. Dumps carry float32
/// rows that are stochastic only to about 1e-7.
inline SelfAttentionMap restore_row_sums(const SelfAttentionMap& a) {
  SelfAttentionMap out = a;
  for (Eigen::Index i = 0; i < out.data.rows(); ++i) {
    const double s = out.data.row(i).sum();
    if (!(s > 0.0)) throw ValidationError("self-attention row " + std::to_string(i) + " has no mass");
    out.data.row(i) /= s;
  }
  return out;
}

/// Initial category channels: the mean fused column of each category's
/// tokens, plus the mean background column when `with_background` is set.
inline CategoryMaps select_category_channels(const CrossAttentionStack& cross, const TokenMeta& meta, bool with_background) {
  if (meta.categories.empty()) throw ConfigError("token metadata names no categories");
  const Eigen::Index channels = static_cast<Eigen::Index>(meta.categories.size()) + (with_background ? 1 : 0);
  CategoryMaps out{cross.grid, Matrix::Zero(cross.fused.rows(), channels), 0, std::nullopt};
  for (std::size_t c = 0; c < meta.categories.size(); ++c) {
    for (int p : meta.categories[c].positions) out.maps.col(static_cast<Eigen::Index>(c)) += cross.fused.col(p);
    out.maps.col(static_cast<Eigen::Index>(c)) /= static_cast<double>(meta.categories[c].positions.size());
  }
  if (with_background) {
    if (meta.background_indices.empty()) throw ConfigError("bg_channel mode needs background tokens in the prompt");
    const Eigen::Index bg = channels - 1;
    for (int p : meta.background_indices) out.maps.col(bg) += cross.fused.col(p);
    out.maps.col(bg) /= static_cast<double>(meta.background_indices.size());
    out.background_channel = bg;
  }
  return out;
}

/// Fuse -> select category channels -> entropy-reduce self-attention (rows
/// restored to sum 1) -> iterate -> assemble mask. `cfg.gamma` replaces the dump's gamma.
inline RefineResult refine_dump(const AttnDump& dump, const RefineConfig& cfg, BackgroundMode mode,
                                const std::vector<Grid>& levels = {}) {
  validate(cfg);
  TokenMeta meta = dump.token_meta;
  meta.gamma = cfg.gamma;
  RefineResult r;
  r.cross = fuse_cross_attention(dump, meta, levels);
  r.initial = select_category_channels(r.cross, meta, mode == BackgroundMode::bg_channel);
  const auto a_ent = entropy_reduce(restore_row_sums(dump.self_attention), cfg.lambda, cfg.epsilon_log);
  r.refined = iterative_refine(r.initial, a_ent, cfg.iterations, cfg.normalize);
  r.mask = assemble_multi(r.refined, mode, cfg.tau);
  r.mask.palette.push_back("background");
  for (const auto& c : meta.categories) r.mask.palette.push_back(c.name);
  r.output = resize_nearest(r.mask, dump.image_size);
  return r;
}

struct SeedResult {
  CategoryMaps seed;
  CategoryMaps refined;
  SegMask mask;
};

/// Refines an interaction seed (points, line or box) against the dump's
/// self-attention and binarizes it.
inline SeedResult refine_seed(const SelfAttentionMap& self_attention, InteractionKind kind, const std::vector<Pixel>& geometry,
                              const RefineConfig& cfg) {
  validate(cfg);
  SeedResult r;
  r.seed = seed_from_interaction(kind, geometry, self_attention.grid);
  const auto a_ent = entropy_reduce(restore_row_sums(self_attention), cfg.lambda, cfg.epsilon_log);
  r.refined = iterative_refine(r.seed, a_ent, cfg.iterations, cfg.normalize);
  r.mask = binarize_single(r.refined, cfg.tau);
  r.mask.palette = {"background", "object"};
  return r;
}

/// Row of (A_ent)^n at `pixel`, min-max scaled to 0..255 on the working grid.
inline GrayImage render_refined_affinity(const SelfAttentionMap& self_attention, Pixel pixel, int n, double lambda,
                                         double epsilon_log = 1e-8) {
  const Grid g = self_attention.grid;
  if (!g.contains(pixel.row, pixel.col))
    throw ParameterError("pixel (" + std::to_string(pixel.row) + "," + std::to_string(pixel.col) + ") outside " + to_string(g));
  if (n < 0) throw ParameterError("power must be >= 0");
  const auto a_ent = entropy_reduce(restore_row_sums(self_attention), lambda, epsilon_log);
  Matrix row = refined_affinity_row(a_ent, g.index(pixel.row, pixel.col), n);
  normalize_channels(row);
  GrayImage img{g, std::vector<std::uint8_t>(g.size())};
  for (Eigen::Index i = 0; i < row.rows(); ++i) img.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(255.0 * row(i, 0)));
  return img;
}

}  // namespace iseg
