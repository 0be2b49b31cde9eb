// Builds one synthetic scene, degrades its self-attention and compares
// refinement with and without the entropy step.

#include <cstdio>
#include <cstdlib>

#include "iseg/iseg.hpp"

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;

  iseg::SceneOptions so;
  so.grid = {32, 32};
  const auto scene = iseg::generate_scene(so, seed);

  iseg::NoiseSpec noise;
  noise.offdiag_leak = 0.3;
  noise.locality = 1.0;
  noise.seed = seed;
  const auto noisy = iseg::noisy_self_attention(iseg::gt_self_attention(scene.mask), noise);
  const auto initial = iseg::degraded_initial_maps(scene, 0.3, seed);

  std::printf("scene %llu: %d segments on %s\n", static_cast<unsigned long long>(seed), scene.segments,
              iseg::to_string(so.grid).c_str());
  std::printf("%4s %10s %10s\n", "N", "lambda=0", "lambda=.01");
  for (int n : {1, 2, 4, 8, 12}) {
    double iou[2];
    int k = 0;
    for (double lambda : {0.0, 0.01}) {
      const auto refined = iseg::iterative_refine(initial, iseg::entropy_reduce(noisy, lambda), n);
      iou[k++] = iseg::miou(iseg::assemble_multi(refined, iseg::BackgroundMode::threshold, 0.5), scene.mask).miou;
    }
    std::printf("%4d %10.4f %10.4f\n", n, iou[0], iou[1]);
  }
  return 0;
}
