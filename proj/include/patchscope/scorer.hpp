#pragma once

// Inference surfaces: dense patch score maps, pooled image scores, heatmap
// export and most-fake-patch extraction.

#include <string>
#include <vector>

#include "patchscope/netbuilder.hpp"

namespace patchscope {

struct PatchScoreMap {
  std::int64_t h = 0, w = 0;
  std::int64_t stride = 0;  // pixels between grid cells
  std::int64_t patch = 0;   // q
  std::string image_id;
  std::vector<double> logits;  // row-major h*w, pre-sigmoid

  std::int64_t cells() const { return h * w; }
  double at(std::int64_t i, std::int64_t j) const {
    return logits[static_cast<std::size_t>(i * w + j)];
  }
};

// Dense per-patch logits for one preprocessed [3,H,W] image (eval mode,
// no grad).
template <typename T>
PatchScoreMap score_map(const ModelConfig& cfg, ModelWeights<T>& weights,
                        const Tensor<T>& image, const std::string& image_id) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ConfigError("score_map expects a [3,H,W] image, got " +
                      shape_str(image.shape()));
  }
  const MapGeometry geo = score_map_geometry(cfg, image.dim(1), image.dim(2));
  NoGradGuard ng;
  Tensor<T> in = reshape(image, {1, 3, image.dim(1), image.dim(2)});
  Tensor<T> map = patch_logit_map(cfg, weights, in, /*train=*/false);
  PatchScoreMap out;
  out.h = map.dim(2);
  out.w = map.dim(3);
  out.stride = geo.stride;
  out.patch = geo.patch;
  out.image_id = image_id;
  out.logits.assign(map.vec().begin(), map.vec().end());
  return out;
}

// Eq.-style pooled image logit: arithmetic mean of all patch logits, or the
// maximum cell (score of the most fake patch).
double image_score(const PatchScoreMap& map, Pooling pooling);

double fake_probability(double logit);

// Min-max normalized 8-bit PGM at grid resolution plus a CSV sidecar with
// the exact logits. A constant map exports uniform mid-gray and returns
// true (degenerate-map warning).
bool export_heatmap(const PatchScoreMap& map, const std::string& pgm_path);

template <typename T>
struct TopPatch {
  std::int64_t row = 0, col = 0;
  double logit = 0.0;
  Tensor<T> crop;  // [3,q,q] window from the scored image
};

// k highest-logit cells with their q x q crops; ties resolve in row-major
// order. Requires k <= number of cells.
template <typename T>
std::vector<TopPatch<T>> top_k_patches(const PatchScoreMap& map,
                                       const Tensor<T>& image,
                                       std::int64_t k) {
  if (k < 1 || k > map.cells()) {
    throw ConfigError("top_k_patches: k=" + std::to_string(k) +
                      " out of range for " + std::to_string(map.cells()) +
                      " cells");
  }
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ConfigError("top_k_patches expects a [3,H,W] image");
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(map.cells()));
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = static_cast<std::int64_t>(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     return map.logits[static_cast<std::size_t>(a)] >
                            map.logits[static_cast<std::size_t>(b)];
                   });
  const std::int64_t H = image.dim(1), W = image.dim(2), q = map.patch;
  std::vector<TopPatch<T>> out;
  for (std::int64_t rank = 0; rank < k; ++rank) {
    const std::int64_t cell = order[static_cast<std::size_t>(rank)];
    TopPatch<T> tp;
    tp.row = cell / map.w;
    tp.col = cell % map.w;
    tp.logit = map.logits[static_cast<std::size_t>(cell)];
    const std::int64_t y0 = tp.row * map.stride;
    const std::int64_t x0 = tp.col * map.stride;
    if (y0 + q > H || x0 + q > W) {
      throw ConfigError("score map geometry exceeds image bounds");
    }
    std::vector<T> crop(static_cast<std::size_t>(3 * q * q));
    const T* src = image.data();
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t y = 0; y < q; ++y) {
        for (std::int64_t x = 0; x < q; ++x) {
          crop[static_cast<std::size_t>((c * q + y) * q + x)] =
              src[(c * H + y0 + y) * W + x0 + x];
        }
      }
    }
    tp.crop = Tensor<T>::from_vector({3, q, q}, std::move(crop));
    out.push_back(std::move(tp));
  }
  return out;
}

// ------------------------------------------------------------- score files

// CSV rows image_path,logit,probability,label (label blank when unknown);
// shared between the scorer, evaluator and the ensemble.
struct ScoreRow {
  std::string path;
  double logit = 0.0;
  double prob = 0.0;
  int label = -1;  // -1 unknown, else 0 real / 1 fake
};

void write_score_csv(const std::string& path,
                     const std::vector<ScoreRow>& rows);
std::vector<ScoreRow> read_score_csv(const std::string& path);

}  // namespace patchscope
