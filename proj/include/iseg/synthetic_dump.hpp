#pragma once

// Builds conforming attention dumps from synthetic scenes so the refinement
// pipeline can run end to end without a diffusion model.

#include <string>
#include <vector>

#include "iseg/dumpio.hpp"
#include "iseg/fixtures.hpp"

namespace iseg {

struct SyntheticDumpOptions {
  std::vector<int> level_divisors{2, 1};  // cross-attention grids = working / divisor
  int blocks_per_level = 1;
  int key_dim = 16;
  double match_gain = 2.0;  // pull of each pixel's query toward its segment token
  double start_gain = 1.0;  // pull toward the start token (present everywhere)
  double feature_noise = 1.5;
  int image_scale = 4;  // image_size = working grid * image_scale
  Pathway pathway = Pathway::offline;
  double gamma_applied = 1.0;
  std::uint64_t seed = 0;
};

/// Prompt "<start> a photograph of segment1 and ... and other objects and background <end>".
inline TokenMeta synthetic_token_meta(int segments, double gamma = 1.6) {
  TokenMeta m;
  m.gamma = gamma;
  m.tokens = {"<|startoftext|>", "a", "photograph", "of"};
  for (int k = 1; k <= segments; ++k) {
    if (k > 1) m.tokens.push_back("and");
    m.categories.push_back({"segment" + std::to_string(k), {static_cast<int>(m.tokens.size())}});
    m.tokens.push_back("segment" + std::to_string(k));
  }
  for (const char* w : {"and", "other", "objects", "and"}) m.tokens.push_back(w);
  m.background_indices.push_back(static_cast<int>(m.tokens.size()));
  m.tokens.push_back("background");
  m.tokens.push_back("<|endoftext|>");
  return m;
}

inline AttnDump make_synthetic_dump(const SyntheticScene& scene, const NoiseSpec& noise, const SyntheticDumpOptions& opt,
                                    const std::string& image_id = "synthetic") {
  const Grid work = scene.mask.grid;
  AttnDump d;
  d.image_id = image_id;
  d.timestep = 100;
  d.pathway = opt.pathway;
  d.gamma_applied = opt.gamma_applied;
  d.image_size = {work.rows * opt.image_scale, work.cols * opt.image_scale};
  d.token_meta = synthetic_token_meta(scene.segments);
  d.self_attention = noisy_self_attention(gt_self_attention(scene.mask), noise);

  Rng rng(opt.seed);
  const int t = d.token_meta.token_count();
  Matrix keys(t, opt.key_dim);
  for (Eigen::Index i = 0; i < keys.size(); ++i) keys.data()[i] = rng.uniform(-1.0, 1.0);
  auto token_of = [&](int label) {
    return label == 0 ? d.token_meta.background_indices.front() : d.token_meta.categories[static_cast<std::size_t>(label - 1)].positions.front();
  };
  for (int div : opt.level_divisors) {
    const Grid g{work.rows / div, work.cols / div};
    const SegMask coarse = resize_nearest(scene.mask, g);
    for (int b = 0; b < opt.blocks_per_level; ++b) {
      CrossQK c;
      c.name = "up." + std::to_string(div) + ".attn2." + std::to_string(b);
      c.grid = g;
      c.d = opt.key_dim;
      c.k = keys;
      c.q.resize(static_cast<Eigen::Index>(g.size()), opt.key_dim);
      for (Eigen::Index i = 0; i < c.q.rows(); ++i) {
        const int tok = token_of(coarse.labels[static_cast<std::size_t>(i)]);
        for (int j = 0; j < opt.key_dim; ++j)
          c.q(i, j) = opt.match_gain * keys(tok, j) + opt.start_gain * keys(0, j) + opt.feature_noise * rng.uniform(-1.0, 1.0);
      }
      d.cross.push_back(std::move(c));
    }
  }
  // Store exactly what a float32 file would hold.
  d.self_attention.data = d.self_attention.data.cast<float>().cast<double>();
  for (auto& c : d.cross) {
    c.q = c.q.cast<float>().cast<double>();
    c.k = c.k.cast<float>().cast<double>();
  }
  return d;
}

}  // namespace iseg
