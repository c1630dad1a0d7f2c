#pragma once

// Simulated five-worker annotation batches with label flip noise.

#include <string>
#include <vector>

#include "dfl/annotations.hpp"

namespace dfl::testing {

// Each worker reports the true level, except that with probability flip it
// reports a different level chosen uniformly.
inline std::vector<AnnotationRecord> simulate_batches(int batches, int images_per_batch,
                                                      DefectKind defect, double flip,
                                                      std::uint64_t seed) {
  std::vector<AnnotationRecord> out;
  const auto levels = annotation_levels(defect);
  const std::size_t k = levels.size();
  for (int b = 0; b < batches; ++b) {
    SeededRng rng(seed, static_cast<std::uint64_t>(b));
    for (int i = 0; i < images_per_batch; ++i) {
      const std::size_t truth = rng.below(k);
      const std::string image = "b" + std::to_string(b) + "_img" + std::to_string(i);
      for (int w = 0; w < 5; ++w) {
        std::size_t chosen = truth;
        if (rng.uniform() < flip) chosen = (truth + 1 + rng.below(k - 1)) % k;
        AnnotationRecord r;
        r.image_id = image;
        r.worker_id = "b" + std::to_string(b) + "_w" + std::to_string(w);
        r.defect = defect;
        r.level = levels[chosen];
        out.push_back(r);
      }
    }
  }
  return out;
}

}  // namespace dfl::testing
