#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "helpers.hpp"

using namespace dbl;

namespace {

TokenBatch random_tokens(RngStream& rng, int n, int k, int l, int d_img, int d_txt) {
  TokenBatch b;
  for (int i = 0; i < n; ++i) {
    b.image_tokens.push_back(rng.uniform_matrix(k, d_img, -1.0, 1.0));
    b.text_tokens.push_back(rng.uniform_matrix(l, d_txt, -1.0, 1.0));
  }
  return b;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("cosine similarity matrix basics") {
  Matrix a{{1.0, 0.0}, {0.0, 2.0}};
  Matrix s = cosine_similarity_matrix(a, a);
  REQUIRE(s(0, 0) == Catch::Approx(1.0).margin(1e-15));
  REQUIRE(s(1, 1) == Catch::Approx(1.0).margin(1e-15));
  REQUIRE(s(0, 1) == 0.0);

  Matrix v{{1.0, 0.0}};
  Matrix w{{1.0, 1.0}};
  REQUIRE(cosine_similarity_matrix(v, w)(0, 0) ==
          Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-15));

  Matrix zero{{0.0, 0.0}};
  REQUIRE_THROWS_AS(cosine_similarity_matrix(v, zero), numeric_error);
}

TEST_CASE("cross attention with a single region copies that region") {
  RngStream rng(31);
  Matrix t = rng.uniform_matrix(3, 4, -1.0, 1.0);
  Matrix v = rng.uniform_matrix(1, 4, -1.0, 1.0);
  Matrix out = cross_attend(t, v, 9.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) REQUIRE(out(i, j) == Catch::Approx(v(0, j)).margin(1e-15));
}

TEST_CASE("cross attention falls back to the region mean when no cosine is positive") {
  // Word along +x, regions along -x and -y: every cosine is thresholded away,
  // the zero row stays zero, and the softmax over zeros is uniform.
  Matrix t{{1.0, 0.0}};
  Matrix v{{-2.0, 0.0}, {0.0, -0.5}};
  Matrix out = cross_attend(t, v, 9.0);
  REQUIRE(out(0, 0) == Catch::Approx(-1.0).margin(1e-15));
  REQUIRE(out(0, 1) == Catch::Approx(-0.25).margin(1e-15));
}

TEST_CASE("cross attention weights follow the normalized, sharpened cosines") {
  // One word, two regions with raw cosines 0.8 and 0.2 against it.
  Matrix t{{1.0, 0.0}};
  Matrix v{{0.8, 0.6}, {0.2, std::sqrt(1.0 - 0.04)}};
  const double lambda = 9.0;

  const double norm = std::sqrt(0.8 * 0.8 + 0.2 * 0.2);
  const double m0 = 0.8 / norm, m1 = 0.2 / norm;  // (0.970143, 0.242536)
  REQUIRE(m0 == Catch::Approx(0.970143).margin(1e-6));
  REQUIRE(m1 == Catch::Approx(0.242536).margin(1e-6));
  const double w0 = 1.0 / (1.0 + std::exp(lambda * (m1 - m0)));
  const double w1 = 1.0 - w0;
  REQUIRE(w0 == Catch::Approx(0.99855).margin(5e-5));
  REQUIRE(w1 == Catch::Approx(0.00145).margin(5e-5));

  Matrix out = cross_attend(t, v, lambda);
  for (int j = 0; j < 2; ++j)
    REQUIRE(out(0, j) == Catch::Approx(w0 * v(0, j) + w1 * v(1, j)).margin(1e-12));

  REQUIRE_THROWS_AS(cross_attend(t, v, 0.0), shape_error);
  REQUIRE_THROWS_AS(cross_attend(t, Matrix{{1.0}}, lambda), shape_error);
}

TEST_CASE("similarity head degenerate forms collapse to tanh of its bias") {
  RngStream rng(32);
  SimilarityHeadParams head;
  head.w1 = rng.uniform_matrix(4, 3, -1.0, 1.0);
  head.b1 = Matrix(1, 3);
  head.w2 = rng.uniform_matrix(3, 1, -1.0, 1.0);
  head.b2 = Matrix(1, 1, 0.4);

  // Zero alignment: T = V' makes |T - V'|^2 vanish, b1 = 0 keeps it at zero.
  Matrix t = rng.uniform_matrix(2, 4, -1.0, 1.0);
  REQUIRE(similarity_head(t, t, head) == Catch::Approx(std::tanh(0.4)).margin(1e-15));

  head.b1 = rng.uniform_matrix(1, 3, -1.0, 1.0);
  head.w2 = Matrix(3, 1);
  Matrix v = rng.uniform_matrix(2, 4, -1.0, 1.0);
  REQUIRE(similarity_head(t, v, head) == Catch::Approx(std::tanh(0.4)).margin(1e-15));

  REQUIRE_THROWS_AS(similarity_head(t, Matrix(3, 4), head), shape_error);
}

TEST_CASE("similarity head matches a straight-line transcription") {
  RngStream rng(7);
  const int l = 3, h = 5, d_a = 4;
  SimilarityHeadParams head;
  head.w1 = rng.uniform_matrix(h, d_a, -1.0, 1.0);
  head.b1 = rng.uniform_matrix(1, d_a, -1.0, 1.0);
  head.w2 = rng.uniform_matrix(d_a, 1, -1.0, 1.0);
  head.b2 = rng.uniform_matrix(1, 1, -1.0, 1.0);
  Matrix t = rng.uniform_matrix(l, h, -1.0, 1.0);
  Matrix v = rng.uniform_matrix(l, h, -1.0, 1.0);

  // Independent re-derivation: per-word squared difference, affine map,
  // row-wise L2 normalization, word average, affine map, tanh.
  std::vector<double> a_bar(d_a, 0.0);
  for (int i = 0; i < l; ++i) {
    std::vector<double> row(d_a, 0.0);
    for (int j = 0; j < d_a; ++j) {
      double acc = head.b1(0, j);
      for (int k = 0; k < h; ++k) {
        const double d = t(i, k) - v(i, k);
        acc += d * d * head.w1(k, j);
      }
      row[j] = acc;
    }
    double norm = 0.0;
    for (double x : row) norm += x * x;
    norm = std::sqrt(norm);
    for (int j = 0; j < d_a; ++j) a_bar[j] += (norm == 0.0 ? 0.0 : row[j] / norm) / l;
  }
  double z = head.b2(0, 0);
  for (int j = 0; j < d_a; ++j) z += a_bar[j] * head.w2(j, 0);

  REQUIRE(similarity_head(t, v, head) == Catch::Approx(std::tanh(z)).margin(1e-14));
}

TEST_CASE("batch scores: single pair and orthogonal pooled embeddings") {
  RngStream rng(33);
  EncoderDims dims{4, 4, 4, 3};
  EncoderParams p = init_encoder(EncoderMode::pooled, dims, rng);
  TokenBatch one = random_tokens(rng, 1, 2, 2, 4, 4);
  Matrix s1 = score_batch(p, one);
  REQUIRE(s1.rows() == 1);
  REQUIRE(s1.cols() == 1);

  // Identity projections and one-hot tokens keep the embeddings orthogonal:
  // the score matrix is exactly the identity.
  p.w_img = Matrix::identity(4);
  p.w_txt = Matrix::identity(4);
  p.b_img = Matrix(1, 4);
  p.b_txt = Matrix(1, 4);
  TokenBatch onehot;
  for (int i = 0; i < 4; ++i) {
    Matrix e(1, 4);
    e(0, i) = 1.0;
    onehot.image_tokens.push_back(e);
    onehot.text_tokens.push_back(e);
  }
  REQUIRE(max_abs_diff(score_batch(p, onehot), Matrix::identity(4)) == 0.0);
}

TEST_CASE("interaction scores equal independent per-pair evaluations") {
  RngStream rng(3);
  EncoderDims dims{5, 6, 4, 3};
  EncoderParams p = init_encoder(EncoderMode::interaction, dims, rng);
  TokenBatch batch = random_tokens(rng, 4, 3, 2, 5, 6);
  Matrix s = score_batch(p, batch);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      REQUIRE(s(i, j) ==
              Catch::Approx(score_pair(p, batch.image_tokens[i], batch.text_tokens[j]))
                  .margin(1e-14));
}

TEST_CASE("graph score builders reproduce the plain forward paths") {
  RngStream rng(34);
  EncoderDims dims{5, 6, 4, 3};
  TokenBatch batch = random_tokens(rng, 3, 2, 2, 5, 6);

  for (EncoderMode mode : {EncoderMode::pooled, EncoderMode::interaction}) {
    EncoderParams p = init_encoder(mode, dims, rng);
    Graph g;
    NodeId s = append_score_batch(g, p, batch);
    Matrix via_graph = forward(g, to_bindings(p)).values[s];
    REQUIRE(max_abs_diff(via_graph, score_batch(p, batch)) < 1e-12);
  }
}

TEST_CASE("all scores stay within the similarity bounds") {
  RngStream rng(35);
  EncoderDims dims{6, 6, 5, 3};
  for (EncoderMode mode : {EncoderMode::pooled, EncoderMode::interaction}) {
    EncoderParams p = init_encoder(mode, dims, rng);
    TokenBatch batch = random_tokens(rng, 5, 3, 3, 6, 6);
    Matrix s = score_batch(p, batch);
    for (double v : s.raw()) {
      REQUIRE(v >= -1.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("encoder parameter gradients pass finite differences") {
  RngStream rng(36);
  EncoderDims dims{4, 4, 4, 3};
  TokenBatch batch = random_tokens(rng, 3, 2, 2, 4, 4);

  // Pooled path: smooth everywhere at generic points.
  EncoderParams pooled = init_encoder(EncoderMode::pooled, dims, rng);
  Graph gp;
  NodeId sp = append_score_batch(gp, pooled, batch);
  REQUIRE(finite_diff_check(gp, gp.sum_all(sp), to_bindings(pooled),
                            parameter_names(EncoderMode::pooled), 1e-6) < 1e-5);

  // Interaction path: certify the probe away from the attention threshold.
  EncoderParams inter = init_encoder(EncoderMode::interaction, dims, rng);
  Graph gi;
  NodeId si = append_score_batch(gi, inter, batch);
  const Bindings binds = to_bindings(inter);
  REQUIRE(min_hinge_gap(gi, forward(gi, binds)) > 1e-4);
  REQUIRE(finite_diff_check(gi, gi.sum_all(si), binds,
                            parameter_names(EncoderMode::interaction), 1e-6) < 1e-5);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  RngStream rng(42);
  EncoderDims dims{7, 5, 6, 3};
  EncoderParams p = init_encoder(EncoderMode::interaction, dims, rng, 4.5);
  const std::string path = temp_path("dbl_test_roundtrip.ckpt");
  save_checkpoint(path, p, 42);
  Checkpoint c = load_checkpoint(path);

  REQUIRE(c.seed == 42);
  REQUIRE(c.params.mode == EncoderMode::interaction);
  REQUIRE(c.params.lambda == 4.5);
  REQUIRE(testutil::params_max_abs_diff(c.params, p) == 0.0);

  // Identical parameters serialize to identical bytes.
  const std::string again = temp_path("dbl_test_roundtrip2.ckpt");
  save_checkpoint(again, c.params, 42);
  std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);

  std::filesystem::remove(path);
  std::filesystem::remove(again);
  REQUIRE_THROWS_AS(load_checkpoint(path), shape_error);
}

TEST_CASE("corrupt checkpoints are rejected") {
  RngStream rng(43);
  EncoderParams p = init_encoder(EncoderMode::pooled, {4, 4, 4, 2}, rng);
  const std::string path = temp_path("dbl_test_corrupt.ckpt");
  save_checkpoint(path, p, 1);

  std::string bytes;
  {
    std::ifstream f(path, std::ios::binary);
    bytes.assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  }
  bytes[0] = 'X';  // break the magic
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << bytes;
  }
  REQUIRE_THROWS_AS(load_checkpoint(path), shape_error);

  bytes[0] = 'D';
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << bytes.substr(0, bytes.size() / 2);  // truncate mid-matrix
  }
  REQUIRE_THROWS_AS(load_checkpoint(path), shape_error);
  std::filesystem::remove(path);
}
