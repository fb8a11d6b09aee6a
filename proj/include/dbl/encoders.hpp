#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dbl/graph.hpp"
#include "dbl/matrix.hpp"
#include "dbl/rng.hpp"

namespace dbl {

// Two forward paths over the same projected features: `pooled` scores a pair
// by the cosine of mean-pooled embeddings; `interaction` attends every word
// to the regions and squashes the aggregated alignment through tanh. Both
// paths keep scores inside [-1, 1], which is what licenses the soft-margin
// extremes downstream.
enum class EncoderMode { pooled, interaction };

inline const char* to_string(EncoderMode m) {
  return m == EncoderMode::pooled ? "pooled" : "interaction";
}

inline EncoderMode encoder_mode_from_string(const std::string& s) {
  if (s == "pooled") return EncoderMode::pooled;
  if (s == "interaction") return EncoderMode::interaction;
  throw shape_error("unknown encoder mode '" + s + "'");
}

struct EncoderDims {
  int d_img = 16;  // raw image token width
  int d_txt = 16;  // raw text token width
  int h = 16;      // shared projection width
  int d_a = 8;     // alignment width of the similarity head
};

// tanh(W2 · mean(rows of L2-normalized (W1 |T-V'|^2 + b1)) + b2)
struct SimilarityHeadParams {
  Matrix w1, b1;  // h x d_a, 1 x d_a
  Matrix w2, b2;  // d_a x 1, 1 x 1
};

struct EncoderParams {
  EncoderMode mode = EncoderMode::pooled;
  double lambda = 9.0;  // attention inverse temperature
  Matrix w_img, b_img;  // d_img x h, 1 x h
  Matrix w_txt, b_txt;  // d_txt x h, 1 x h
  SimilarityHeadParams head;

  EncoderDims dims() const {
    EncoderDims d;
    d.d_img = w_img.rows();
    d.d_txt = w_txt.rows();
    d.h = w_img.cols();
    d.d_a = head.w1.cols();
    return d;
  }
};

// Tokens for one batch of paired samples: image i and caption i are the
// ground-truth match. Token counts may differ between modalities but must
// agree within one.
struct TokenBatch {
  std::vector<Matrix> image_tokens;  // each k x d_img
  std::vector<Matrix> text_tokens;   // each l x d_txt

  int pairs() const { return static_cast<int>(image_tokens.size()); }
  void validate() const {
    if (image_tokens.size() != text_tokens.size())
      throw shape_error("TokenBatch: image/text counts differ");
    if (image_tokens.empty()) throw shape_error("TokenBatch: empty batch");
  }
};

// All eight matrices are always materialized (pooled mode simply never reads
// the head) so one init consumes the same RNG draws regardless of mode and a
// checkpoint round-trips either mode identically. Draw order is fixed:
// w_img, b_img, w_txt, b_txt, w1, b1, w2, b2; every matrix is uniform in
// [-1/sqrt(fan_in), +1/sqrt(fan_in)] with the bias sharing its weight's fan-in.
inline EncoderParams init_encoder(EncoderMode mode, const EncoderDims& d, RngStream& rng,
                                  double lambda = 9.0) {
  auto bound = [](int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  EncoderParams p;
  p.mode = mode;
  p.lambda = lambda;
  const double bi = bound(d.d_img), bt = bound(d.d_txt);
  const double bh = bound(d.h), ba = bound(d.d_a);
  p.w_img = rng.uniform_matrix(d.d_img, d.h, -bi, bi);
  p.b_img = rng.uniform_matrix(1, d.h, -bi, bi);
  p.w_txt = rng.uniform_matrix(d.d_txt, d.h, -bt, bt);
  p.b_txt = rng.uniform_matrix(1, d.h, -bt, bt);
  p.head.w1 = rng.uniform_matrix(d.h, d.d_a, -bh, bh);
  p.head.b1 = rng.uniform_matrix(1, d.d_a, -bh, bh);
  p.head.w2 = rng.uniform_matrix(d.d_a, 1, -ba, ba);
  p.head.b2 = rng.uniform_matrix(1, 1, -ba, ba);
  return p;
}

inline std::vector<std::string> parameter_names(EncoderMode mode) {
  std::vector<std::string> names = {"w_img", "b_img", "w_txt", "b_txt"};
  if (mode == EncoderMode::interaction)
    for (const char* n : {"w1", "b1", "w2", "b2"}) names.push_back(n);
  return names;
}

inline Bindings to_bindings(const EncoderParams& p) {
  return {{"w_img", p.w_img}, {"b_img", p.b_img}, {"w_txt", p.w_txt}, {"b_txt", p.b_txt},
          {"w1", p.head.w1}, {"b1", p.head.b1},   {"w2", p.head.w2}, {"b2", p.head.b2}};
}

inline Matrix& named_param(EncoderParams& p, const std::string& name) {
  if (name == "w_img") return p.w_img;
  if (name == "b_img") return p.b_img;
  if (name == "w_txt") return p.w_txt;
  if (name == "b_txt") return p.b_txt;
  if (name == "w1") return p.head.w1;
  if (name == "b1") return p.head.b1;
  if (name == "w2") return p.head.w2;
  if (name == "b2") return p.head.b2;
  throw shape_error("unknown encoder parameter '" + name + "'");
}

// ---------------------------------------------------------------------------
// Plain (value-level) forward path. Used wherever gradients are not needed:
// evaluation galleries, mining inputs, oracles.
// ---------------------------------------------------------------------------

inline Matrix pool_tokens(const Matrix& tokens) {
  Matrix out(1, tokens.cols());
  for (int i = 0; i < tokens.rows(); ++i)
    for (int j = 0; j < tokens.cols(); ++j) out(0, j) += tokens(i, j);
  for (int j = 0; j < tokens.cols(); ++j) out(0, j) /= tokens.rows();
  return out;
}

// rows(x) * w + b, bias applied to every row.
inline Matrix project(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out = matmul(x, w);
  if (b.rows() != 1 || b.cols() != out.cols()) throw shape_error("project: bias shape");
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) += b(0, j);
  return out;
}

// Cosine of every row of `img` against every row of `txt`. Inputs need not
// be pre-normalized; zero-norm rows have no direction and are an error here
// (the graph path's normalize-to-zero convention never feeds this function).
inline Matrix cosine_similarity_matrix(const Matrix& img, const Matrix& txt) {
  if (img.cols() != txt.cols()) throw shape_error("cosine_similarity_matrix: width mismatch");
  std::vector<double> ni(img.rows()), nt(txt.rows());
  for (int i = 0; i < img.rows(); ++i) {
    ni[i] = row_norm(img, i);
    if (ni[i] == 0.0) throw numeric_error("cosine_similarity_matrix: zero-norm embedding");
  }
  for (int j = 0; j < txt.rows(); ++j) {
    nt[j] = row_norm(txt, j);
    if (nt[j] == 0.0) throw numeric_error("cosine_similarity_matrix: zero-norm embedding");
  }
  Matrix s(img.rows(), txt.rows());
  for (int i = 0; i < img.rows(); ++i)
    for (int j = 0; j < txt.rows(); ++j) {
      double dot = 0.0;
      for (int k = 0; k < img.cols(); ++k) dot += img(i, k) * txt(j, k);
      double v = dot / (ni[i] * nt[j]);
      s(i, j) = std::min(1.0, std::max(-1.0, v));  // guard float drift only
    }
  return s;
}

// Attend each word row of T over the region rows of V: cosine scores are
// zero-thresholded, word-wise L2-normalized, sharpened by lambda through a
// region-wise softmax, and used to mix the raw region rows.
inline Matrix cross_attend(const Matrix& t, const Matrix& v, double lambda) {
  if (t.cols() != v.cols()) throw shape_error("cross_attend: width mismatch");
  if (lambda <= 0.0) throw shape_error("cross_attend: lambda must be positive");
  Matrix m = matmul(normalize_rows(t), normalize_rows(v), false, true);  // l x k
  for (auto& x : m.raw()) x = x > 0.0 ? x : 0.0;
  m = normalize_rows(m);
  Matrix out(t.rows(), v.cols());
  std::vector<double> w(v.rows());
  for (int i = 0; i < m.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m.cols(); ++j) mx = std::max(mx, lambda * m(i, j));
    double sum = 0.0;
    for (int j = 0; j < m.cols(); ++j) {
      w[j] = std::exp(lambda * m(i, j) - mx);
      sum += w[j];
    }
    for (int j = 0; j < m.cols(); ++j) w[j] /= sum;
    for (int j = 0; j < v.rows(); ++j)
      for (int k = 0; k < v.cols(); ++k) out(i, k) += w[j] * v(j, k);
  }
  return out;
}

// Word-level alignment scores vectorized into one bounded scalar.
inline double similarity_head(const Matrix& t, const Matrix& v_att,
                              const SimilarityHeadParams& head) {
  if (!t.same_shape(v_att)) throw shape_error("similarity_head: shape mismatch");
  Matrix diff = t;
  for (size_t i = 0; i < diff.size(); ++i) {
    const double d = diff.raw()[i] - v_att.raw()[i];
    diff.raw()[i] = d * d;
  }
  Matrix a = normalize_rows(project(diff, head.w1, head.b1));  // l x d_a
  Matrix a_bar(1, a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) a_bar(0, j) += a(i, j) / a.rows();
  Matrix z = project(a_bar, head.w2, head.b2);  // 1 x 1
  return std::tanh(z(0, 0));
}

// One interaction-path score for a single (image, caption) pair.
inline double score_pair(const EncoderParams& p, const Matrix& image_tokens,
                         const Matrix& text_tokens) {
  Matrix v = project(image_tokens, p.w_img, p.b_img);
  Matrix t = project(text_tokens, p.w_txt, p.b_txt);
  return similarity_head(t, cross_attend(t, v, p.lambda), p.head);
}

// Rectangular score matrix of every image against every caption; this is the
// evaluation workhorse (galleries are rectangular: C captions per image).
inline Matrix score_gallery(const EncoderParams& p, const std::vector<Matrix>& image_tokens,
                            const std::vector<Matrix>& text_tokens) {
  if (image_tokens.empty() || text_tokens.empty())
    throw shape_error("score_gallery: empty side");
  if (p.mode == EncoderMode::pooled) {
    Matrix pi(static_cast<int>(image_tokens.size()), p.w_img.rows());
    for (size_t i = 0; i < image_tokens.size(); ++i) {
      Matrix pooled = pool_tokens(image_tokens[i]);
      for (int j = 0; j < pooled.cols(); ++j) pi(static_cast<int>(i), j) = pooled(0, j);
    }
    Matrix pt(static_cast<int>(text_tokens.size()), p.w_txt.rows());
    for (size_t i = 0; i < text_tokens.size(); ++i) {
      Matrix pooled = pool_tokens(text_tokens[i]);
      for (int j = 0; j < pooled.cols(); ++j) pt(static_cast<int>(i), j) = pooled(0, j);
    }
    Matrix ei = normalize_rows(project(pi, p.w_img, p.b_img));
    Matrix et = normalize_rows(project(pt, p.w_txt, p.b_txt));
    return cosine_similarity_matrix(ei, et);
  }
  // Interaction mode: project each sample once, then score all pairs.
  std::vector<Matrix> vs, ts;
  vs.reserve(image_tokens.size());
  ts.reserve(text_tokens.size());
  for (const auto& tok : image_tokens) vs.push_back(project(tok, p.w_img, p.b_img));
  for (const auto& tok : text_tokens) ts.push_back(project(tok, p.w_txt, p.b_txt));
  Matrix s(static_cast<int>(image_tokens.size()), static_cast<int>(text_tokens.size()));
  for (size_t i = 0; i < vs.size(); ++i)
    for (size_t j = 0; j < ts.size(); ++j)
      s(static_cast<int>(i), static_cast<int>(j)) =
          similarity_head(ts[j], cross_attend(ts[j], vs[i], p.lambda), p.head);
  return s;
}

// Square in-batch score matrix (diagonal = matched pairs).
inline Matrix score_batch(const EncoderParams& p, const TokenBatch& batch) {
  batch.validate();
  return score_gallery(p, batch.image_tokens, batch.text_tokens);
}

// ---------------------------------------------------------------------------
// Graph builders mirroring the plain path operation for operation, with the
// eight weight matrices as named graph parameters. Tokens enter as constants;
// only parameter gradients are ever requested.
// ---------------------------------------------------------------------------

namespace detail {

struct EncoderNodes {
  NodeId w_img, b_img, w_txt, b_txt;
  NodeId w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};

inline EncoderNodes register_encoder_params(Graph& g, const EncoderDims& d, bool with_head) {
  EncoderNodes n;
  n.w_img = g.parameter("w_img", d.d_img, d.h);
  n.b_img = g.parameter("b_img", 1, d.h);
  n.w_txt = g.parameter("w_txt", d.d_txt, d.h);
  n.b_txt = g.parameter("b_txt", 1, d.h);
  if (with_head) {
    n.w1 = g.parameter("w1", d.h, d.d_a);
    n.b1 = g.parameter("b1", 1, d.d_a);
    n.w2 = g.parameter("w2", d.d_a, 1);
    n.b2 = g.parameter("b2", 1, 1);
  }
  return n;
}

inline NodeId broadcast_bias(Graph& g, NodeId bias, int rows) {
  return g.matmul(g.constant(Matrix::full(rows, 1, 1.0)), bias);
}

inline NodeId project_node(Graph& g, NodeId x, NodeId w, NodeId b) {
  NodeId y = g.matmul(x, w);
  return g.add(y, broadcast_bias(g, b, g.node(y).rows));
}

}  // namespace detail

// Pooled-path batch scores: pooling is parameter-free, so the pooled token
// rows are baked in as one constant per modality.
inline NodeId append_pooled_scores(Graph& g, const EncoderDims& d, const TokenBatch& batch) {
  batch.validate();
  const int n = batch.pairs();
  auto nodes = detail::register_encoder_params(g, d, false);
  Matrix pi(n, d.d_img), pt(n, d.d_txt);
  for (int i = 0; i < n; ++i) {
    Matrix pooled_img = pool_tokens(batch.image_tokens[i]);
    Matrix pooled_txt = pool_tokens(batch.text_tokens[i]);
    for (int j = 0; j < d.d_img; ++j) pi(i, j) = pooled_img(0, j);
    for (int j = 0; j < d.d_txt; ++j) pt(i, j) = pooled_txt(0, j);
  }
  NodeId ei = g.row_l2norm(detail::project_node(g, g.constant(pi), nodes.w_img, nodes.b_img));
  NodeId et = g.row_l2norm(detail::project_node(g, g.constant(pt), nodes.w_txt, nodes.b_txt));
  return g.matmul(ei, et, false, true);
}

// Interaction-path batch scores: every (image, caption) cell is scored by the
// attention + head pipeline, then the scalars are placed into an N x N matrix
// through one-hot outer products.
inline NodeId append_interaction_scores(Graph& g, const EncoderDims& d, double lambda,
                                        const TokenBatch& batch) {
  batch.validate();
  const int n = batch.pairs();
  auto nodes = detail::register_encoder_params(g, d, true);

  std::vector<NodeId> v_proj(n), v_hat(n), t_proj(n), t_hat(n);
  for (int i = 0; i < n; ++i) {
    v_proj[i] = detail::project_node(g, g.constant(batch.image_tokens[i]), nodes.w_img,
                                     nodes.b_img);
    v_hat[i] = g.row_l2norm(v_proj[i]);
    t_proj[i] = detail::project_node(g, g.constant(batch.text_tokens[i]), nodes.w_txt,
                                     nodes.b_txt);
    t_hat[i] = g.row_l2norm(t_proj[i]);
  }

  NodeId s = g.constant(Matrix(n, n));
  for (int i = 0; i < n; ++i) {
    Matrix e_i(n, 1);
    e_i(i, 0) = 1.0;
    NodeId e_i_node = g.constant(e_i);
    for (int j = 0; j < n; ++j) {
      NodeId m = g.row_l2norm(g.hinge(g.matmul(t_hat[j], v_hat[i], false, true)));
      NodeId v_att = g.matmul(g.row_softmax(m, lambda), v_proj[i]);
      NodeId diff2 = g.square(g.sub(t_proj[j], v_att));
      NodeId a = g.row_l2norm(detail::project_node(g, diff2, nodes.w1, nodes.b1));
      NodeId score = g.tanh(g.add(g.matmul(g.col_mean(a), nodes.w2), nodes.b2));
      Matrix e_j_t(1, n);
      e_j_t(0, j) = 1.0;
      s = g.add(s, g.matmul(g.matmul(e_i_node, score), g.constant(e_j_t)));
    }
  }
  return s;
}

inline NodeId append_score_batch(Graph& g, const EncoderParams& p, const TokenBatch& batch) {
  return p.mode == EncoderMode::pooled
             ? append_pooled_scores(g, p.dims(), batch)
             : append_interaction_scores(g, p.dims(), p.lambda, batch);
}

// ---------------------------------------------------------------------------
// Checkpoints: a flat little-endian binary. Layout:
//   bytes 0..7   magic "DBLCKPT1"
//   u32 version (1), u32 mode (0 pooled / 1 interaction)
//   i32 d_img, d_txt, h, d_a; f64 lambda; u64 seed
//   8 matrices in init order, each: i32 rows, i32 cols, rows*cols f64 row-major
// Identical parameters always serialize to identical bytes.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'D', 'B', 'L', 'C', 'K', 'P', 'T', '1'};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw shape_error("checkpoint: truncated file");
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
  write_pod(os, static_cast<int32_t>(m.rows()));
  write_pod(os, static_cast<int32_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.raw().data()),
           static_cast<std::streamsize>(m.size() * sizeof(double)));
}

inline Matrix read_matrix(std::istream& is) {
  int32_t rows = 0, cols = 0;
  read_pod(is, rows);
  read_pod(is, cols);
  if (rows < 1 || cols < 1) throw shape_error("checkpoint: bad matrix header");
  Matrix m(rows, cols);
  is.read(reinterpret_cast<char*>(m.raw().data()),
          static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!is) throw shape_error("checkpoint: truncated matrix");
  return m;
}

}  // namespace detail

struct Checkpoint {
  EncoderParams params;
  uint64_t seed = 0;
};

inline void save_checkpoint(const std::string& path, const EncoderParams& p, uint64_t seed) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw shape_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(os, static_cast<uint32_t>(1));
  detail::write_pod(os, static_cast<uint32_t>(p.mode == EncoderMode::pooled ? 0 : 1));
  const EncoderDims d = p.dims();
  detail::write_pod(os, static_cast<int32_t>(d.d_img));
  detail::write_pod(os, static_cast<int32_t>(d.d_txt));
  detail::write_pod(os, static_cast<int32_t>(d.h));
  detail::write_pod(os, static_cast<int32_t>(d.d_a));
  detail::write_pod(os, p.lambda);
  detail::write_pod(os, seed);
  for (const Matrix* m : {&p.w_img, &p.b_img, &p.w_txt, &p.b_txt, &p.head.w1, &p.head.b1,
                          &p.head.w2, &p.head.b2})
    detail::write_matrix(os, *m);
  if (!os) throw shape_error("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw shape_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw shape_error("checkpoint: bad magic in '" + path + "'");
  uint32_t version = 0, mode = 0;
  detail::read_pod(is, version);
  if (version != 1) throw shape_error("checkpoint: unsupported version");
  detail::read_pod(is, mode);
  if (mode > 1) throw shape_error("checkpoint: bad mode");
  int32_t dims[4];
  for (auto& v : dims) detail::read_pod(is, v);
  Checkpoint c;
  c.params.mode = mode == 0 ? EncoderMode::pooled : EncoderMode::interaction;
  detail::read_pod(is, c.params.lambda);
  detail::read_pod(is, c.seed);
  c.params.w_img = detail::read_matrix(is);
  c.params.b_img = detail::read_matrix(is);
  c.params.w_txt = detail::read_matrix(is);
  c.params.b_txt = detail::read_matrix(is);
  c.params.head.w1 = detail::read_matrix(is);
  c.params.head.b1 = detail::read_matrix(is);
  c.params.head.w2 = detail::read_matrix(is);
  c.params.head.b2 = detail::read_matrix(is);
  const EncoderDims d = c.params.dims();
  if (d.d_img != dims[0] || d.d_txt != dims[1] || d.h != dims[2] || d.d_a != dims[3])
    throw shape_error("checkpoint: dims header disagrees with matrices");
  return c;
}

}  // namespace dbl
