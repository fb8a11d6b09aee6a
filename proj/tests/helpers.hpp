#pragma once

// Shared scaffolding for the unit suites: tiny dataset/config builders and
// elementwise comparisons over encoder parameters.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dbl/cohort.hpp"
#include "dbl/config.hpp"
#include "dbl/data.hpp"
#include "dbl/encoders.hpp"
#include "dbl/eval.hpp"
#include "dbl/losses.hpp"
#include "dbl/matrix.hpp"
#include "dbl/rng.hpp"

namespace testutil {

// Random similarity batch with entries in [-1, 1] and both branches present.
inline dbl::SimilarityBatch random_batch(dbl::RngStream& rng, int n) {
  dbl::SimilarityBatch b;
  b.S_t = rng.uniform_matrix(n, n, -1.0, 1.0);
  b.S_a = rng.uniform_matrix(n, n, -1.0, 1.0);
  return b;
}

// Small dataset that keeps training-loop tests fast.
inline dbl::LatentSpec tiny_spec() {
  dbl::LatentSpec s;
  s.d_z = 4;
  s.d_img = 8;
  s.d_txt = 8;
  s.captions_per_image = 2;
  s.sigma = 0.2;
  s.image_tokens = 2;
  s.text_tokens = 2;
  s.train_images = 20;
  s.val_images = 5;
  s.test_images = 5;
  return s;
}

inline dbl::TrainConfig tiny_train_config() {
  dbl::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 10;
  cfg.lr = 3e-3;
  cfg.dims.d_img = 8;
  cfg.dims.d_txt = 8;
  cfg.dims.h = 8;
  cfg.dims.d_a = 4;
  return cfg;
}

inline double params_max_abs_diff(const dbl::EncoderParams& a, const dbl::EncoderParams& b) {
  double worst = 0.0;
  auto cmp = [&worst](const dbl::Matrix& x, const dbl::Matrix& y) {
    worst = std::max(worst, dbl::max_abs_diff(x, y));
  };
  cmp(a.w_img, b.w_img);
  cmp(a.b_img, b.b_img);
  cmp(a.w_txt, b.w_txt);
  cmp(a.b_txt, b.b_txt);
  cmp(a.head.w1, b.head.w1);
  cmp(a.head.b1, b.head.b1);
  cmp(a.head.w2, b.head.w2);
  cmp(a.head.b2, b.head.b2);
  return worst;
}

// Visit the eight parameter matrices of a pair in a fixed order.
template <typename Fn>
inline void for_each_param_pair(dbl::EncoderParams& a, const dbl::EncoderParams& b, Fn&& fn) {
  fn(a.w_img, b.w_img);
  fn(a.b_img, b.b_img);
  fn(a.w_txt, b.w_txt);
  fn(a.b_txt, b.b_txt);
  fn(a.head.w1, b.head.w1);
  fn(a.head.b1, b.head.b1);
  fn(a.head.w2, b.head.w2);
  fn(a.head.b2, b.head.b2);
}

// Brute-force hardest negatives (ties to the lowest index), kept deliberately
// separate from the library's mining so tests have an independent oracle.
inline dbl::MinedNegatives brute_force_mine(const dbl::Matrix& d) {
  const int n = d.rows();
  dbl::MinedNegatives m;
  m.hardest_caption.assign(n, -1);
  m.hardest_image.assign(n, -1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      int& row = m.hardest_caption[i];
      if (row < 0 || d(i, j) > d(i, row)) row = j;
      int& col = m.hardest_image[j];
      if (col < 0 || d(i, j) > d(col, j)) col = i;
    }
  return m;
}

}  // namespace testutil
