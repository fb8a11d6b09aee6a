#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dbl/graph.hpp"
#include "dbl/matrix.hpp"

namespace dbl {

// One batch of pairwise similarities. Row i / column j is the score of image
// i against caption j; the diagonal holds the matched pairs. S_a carries the
// anchor branch's scores when a boosting loss is in play and is always
// treated as a constant: no gradient ever flows into the anchor.
struct SimilarityBatch {
  Matrix S_t;
  std::optional<Matrix> S_a;
};

struct MarginConfig {
  double gamma = 0.2;
  double alpha = 0.5;

  double gamma1() const { return alpha * gamma; }
  double gamma2() const { return gamma - alpha * gamma; }
  void validate() const {
    if (!(gamma > 0.0)) throw shape_error("MarginConfig: gamma must be positive");
    if (!(alpha > 0.0 && alpha < 1.0)) throw shape_error("MarginConfig: alpha must be in (0,1)");
  }
};

// Extremes of the soft adaptive margins: d_x bounds the relative gap
// (difference of two scores in [-1,1]), d_y bounds an absolute score.
struct SoftMarginConfig {
  double d_x = 2.0;
  double d_y = 1.0;
};

enum class MarginKind { relative, abs_pos, abs_neg };

// Hardest negative per query: for image i the toughest caption column
// (never i itself), for caption c the toughest image row (never c).
struct MinedNegatives {
  std::vector<int> hardest_caption;  // index by image row
  std::vector<int> hardest_image;    // index by caption column
};

enum class BoostVariant { none, rs, rm, as, am, rm_soft, am_soft };
enum class RawLoss { max, sum };

inline const char* to_string(BoostVariant v) {
  switch (v) {
    case BoostVariant::none: return "none";
    case BoostVariant::rs: return "rs";
    case BoostVariant::rm: return "rm";
    case BoostVariant::as: return "as";
    case BoostVariant::am: return "am";
    case BoostVariant::rm_soft: return "rm_soft";
    case BoostVariant::am_soft: return "am_soft";
  }
  return "?";
}

inline BoostVariant boost_variant_from_string(const std::string& s) {
  for (BoostVariant v : {BoostVariant::none, BoostVariant::rs, BoostVariant::rm,
                         BoostVariant::as, BoostVariant::am, BoostVariant::rm_soft,
                         BoostVariant::am_soft})
    if (s == to_string(v)) return v;
  throw shape_error("unknown boost variant '" + s + "'");
}

namespace detail {

inline void require_square(const Matrix& S, const char* who, int min_n = 1) {
  if (S.rows() != S.cols())
    throw shape_error(std::string(who) + ": similarity matrix must be square");
  if (S.rows() < min_n)
    throw shape_error(std::string(who) + ": needs at least " + std::to_string(min_n) +
                      " pairs, got " + std::to_string(S.rows()));
}

inline void require_anchor(const SimilarityBatch& b, const char* who) {
  if (!b.S_a.has_value()) throw shape_error(std::string(who) + ": anchor scores absent");
  if (!b.S_a->same_shape(b.S_t)) throw shape_error(std::string(who) + ": anchor shape mismatch");
}

// Argmax per row and per column of D excluding the diagonal; ties break to
// the lowest index so repeated runs agree.
inline MinedNegatives mine_matrix(const Matrix& D) {
  require_square(D, "mine", 2);
  const int n = D.rows();
  MinedNegatives m;
  m.hardest_caption.resize(n);
  m.hardest_image.resize(n);
  for (int i = 0; i < n; ++i) {
    int best = -1;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      if (best < 0 || D(i, j) > D(i, best)) best = j;
    }
    m.hardest_caption[i] = best;
  }
  for (int c = 0; c < n; ++c) {
    int best = -1;
    for (int i = 0; i < n; ++i) {
      if (i == c) continue;
      if (best < 0 || D(i, c) > D(best, c)) best = i;
    }
    m.hardest_image[c] = best;
  }
  return m;
}

// Full matrices of anchor-side gaps: row gap (i,j) = A_ii - A_ij, the margin
// by which the anchor ranks its own caption above caption j; column gaps
// likewise with the diagonal of column j.
inline Matrix row_gaps(const Matrix& A) {
  Matrix g(A.rows(), A.cols());
  for (int i = 0; i < A.rows(); ++i)
    for (int j = 0; j < A.cols(); ++j) g(i, j) = A(i, i) - A(i, j);
  return g;
}

inline Matrix col_gaps(const Matrix& A) {
  Matrix g(A.rows(), A.cols());
  for (int i = 0; i < A.rows(); ++i)
    for (int j = 0; j < A.cols(); ++j) g(i, j) = A(j, j) - A(i, j);
  return g;
}

// One-hot masks selecting the mined cell per row / per column.
inline std::pair<Matrix, Matrix> mined_masks(const MinedNegatives& m, int n) {
  Matrix row(n, n), col(n, n);
  for (int i = 0; i < n; ++i) row(i, m.hardest_caption[i]) = 1.0;
  for (int c = 0; c < n; ++c) col(m.hardest_image[c], c) = 1.0;
  return {row, col};
}

}  // namespace detail

inline MinedNegatives mine_hardest_self(const Matrix& S_t) {
  return detail::mine_matrix(S_t);
}

inline MinedNegatives mine_hardest_diff(const Matrix& S_t, const Matrix& S_a) {
  if (!S_t.same_shape(S_a)) throw shape_error("mine_hardest_diff: shape mismatch");
  Matrix d = S_t;
  for (size_t i = 0; i < d.size(); ++i) d.raw()[i] -= S_a.raw()[i];
  return detail::mine_matrix(d);
}

// Soft adaptive margin: a sigmoid ramp that hands out the full margin when
// the anchor is far from its extreme and decays to exactly 0 at the extreme,
// with slope -1 (relative/abs_pos) or +1 (abs_neg) there so the transition
// matches the hinge it replaces. Out-of-domain inputs are clamped; scores
// are bounded by construction so clamping only guards float drift.
inline double gamma_sa(double x, MarginKind kind, const MarginConfig& cfg,
                       const SoftMarginConfig& soft = {}) {
  cfg.validate();
  switch (kind) {
    case MarginKind::relative: {
      const double g = cfg.gamma;
      const double d = soft.d_x;
      const double xc = std::min(std::max(x, -d), d);
      return 2.0 * g / (1.0 + std::exp((2.0 / g) * (xc - d))) - g;
    }
    case MarginKind::abs_pos: {
      const double g = cfg.gamma1();
      const double d = soft.d_y;
      const double xc = std::min(std::max(x, -d), d);
      return 2.0 * g / (1.0 + std::exp((2.0 / g) * (xc - d))) - g;
    }
    case MarginKind::abs_neg: {
      const double g = cfg.gamma2();
      const double d = soft.d_y;
      const double xc = std::min(std::max(x, -d), d);
      return 2.0 * g / (1.0 + std::exp((-2.0 / g) * (xc + d))) - g;
    }
  }
  throw shape_error("gamma_sa: bad kind");
}

// ---------------------------------------------------------------------------
// Graph builders. Each appends a loss subgraph on top of an existing target
// similarity node and returns the scalar root. Anchor scores, mined-negative
// masks and soft margins enter as constants, so the anchor receives zero
// gradient by construction. Builders that mine need the concrete value of
// the target similarities (mining is a data-dependent selection, re-done per
// batch; between ties the selection is locally constant, which keeps the
// gradient of the assembled graph exact).
// ---------------------------------------------------------------------------

namespace detail {

struct HingeParts {
  Graph* g;
  NodeId S_t;
  int n;
  NodeId diag_mask, off_mask;
  NodeId pos_row, pos_col;  // broadcast positives: (i,j) -> S_ii / S_jj
};

inline HingeParts common_parts(Graph& g, NodeId S_t) {
  const Node& node = g.node(S_t);
  if (node.rows != node.cols) throw shape_error("loss: similarity node must be square");
  const int n = node.rows;
  HingeParts p;
  p.g = &g;
  p.S_t = S_t;
  p.n = n;
  p.diag_mask = g.constant(Matrix::identity(n));
  p.off_mask = g.constant(Matrix::off_diagonal_mask(n));
  NodeId ones = g.constant(Matrix::full(n, n, 1.0));
  NodeId diag = g.mul(S_t, p.diag_mask);
  p.pos_row = g.matmul(diag, ones);
  p.pos_col = g.matmul(ones, diag);
  return p;
}

}  // namespace detail

// Hinge over every negative: sum_{i, c!=i} [gamma + S_ic - S_ii]+ plus the
// caption-side mirror. The mask is applied after the hinge (the diagonal
// cells would otherwise contribute a spurious [gamma]+).
inline NodeId append_loss_sum(Graph& g, NodeId S_t, const MarginConfig& cfg) {
  cfg.validate();
  auto p = detail::common_parts(g, S_t);
  if (p.n < 2) throw shape_error("loss_sum: needs at least 2 pairs");
  NodeId h_row = g.hinge(g.affine(g.sub(S_t, p.pos_row), 1.0, cfg.gamma));
  NodeId h_col = g.hinge(g.affine(g.sub(S_t, p.pos_col), 1.0, cfg.gamma));
  return g.add(g.sum_all(g.mul(p.off_mask, h_row)), g.sum_all(g.mul(p.off_mask, h_col)));
}

// Same hinges restricted to the hardest negative per query.
inline NodeId append_loss_max(Graph& g, NodeId S_t, const Matrix& S_t_value,
                              const MarginConfig& cfg) {
  cfg.validate();
  auto p = detail::common_parts(g, S_t);
  auto [mask_row, mask_col] = detail::mined_masks(mine_hardest_self(S_t_value), p.n);
  NodeId h_row = g.hinge(g.affine(g.sub(S_t, p.pos_row), 1.0, cfg.gamma));
  NodeId h_col = g.hinge(g.affine(g.sub(S_t, p.pos_col), 1.0, cfg.gamma));
  return g.add(g.sum_all(g.mul(g.constant(mask_row), h_row)),
               g.sum_all(g.mul(g.constant(mask_col), h_col)));
}

// Relative boosting over all negatives: the target must beat the anchor's
// ranking gap by gamma, triplet for triplet.
inline NodeId append_loss_rs(Graph& g, NodeId S_t, const Matrix& S_a,
                             const MarginConfig& cfg) {
  cfg.validate();
  auto p = detail::common_parts(g, S_t);
  NodeId gap_row = g.sub(p.pos_row, S_t);  // target gap (i,j) = S_ii - S_ij
  NodeId gap_col = g.sub(p.pos_col, S_t);
  NodeId a_row = g.constant(detail::row_gaps(S_a));
  NodeId a_col = g.constant(detail::col_gaps(S_a));
  NodeId h_row = g.hinge(g.affine(g.sub(a_row, gap_row), 1.0, cfg.gamma));
  NodeId h_col = g.hinge(g.affine(g.sub(a_col, gap_col), 1.0, cfg.gamma));
  return g.add(g.sum_all(g.mul(p.off_mask, h_row)), g.sum_all(g.mul(p.off_mask, h_col)));
}

// Relative boosting at the negatives where the target lags the anchor most.
inline NodeId append_loss_rm(Graph& g, NodeId S_t, const Matrix& S_t_value,
                             const Matrix& S_a, const MarginConfig& cfg) {
  cfg.validate();
  auto p = detail::common_parts(g, S_t);
  auto [mask_row, mask_col] = detail::mined_masks(mine_hardest_diff(S_t_value, S_a), p.n);
  NodeId gap_row = g.sub(p.pos_row, S_t);
  NodeId gap_col = g.sub(p.pos_col, S_t);
  NodeId a_row = g.constant(detail::row_gaps(S_a));
  NodeId a_col = g.constant(detail::col_gaps(S_a));
  NodeId h_row = g.hinge(g.affine(g.sub(a_row, gap_row), 1.0, cfg.gamma));
  NodeId h_col = g.hinge(g.affine(g.sub(a_col, gap_col), 1.0, cfg.gamma));
  return g.add(g.sum_all(g.mul(g.constant(mask_row), h_row)),
               g.sum_all(g.mul(g.constant(mask_col), h_col)));
}

// Absolute boosting over all negatives. The positive-pair term is written
// once per negative per direction, so it is summed with weight 2(N-1); every
// off-diagonal cell serves once as a caption-side and once as an image-side
// negative, giving the negative sum weight 2.
inline NodeId append_loss_as(Graph& g, NodeId S_t, const Matrix& S_a,
                             const MarginConfig& cfg) {
  cfg.validate();
  auto p = detail::common_parts(g, S_t);
  NodeId anchor = g.constant(S_a);
  NodeId h_pos = g.hinge(g.affine(g.sub(anchor, S_t), 1.0, cfg.gamma1()));
  NodeId h_neg = g.hinge(g.affine(g.sub(S_t, anchor), 1.0, cfg.gamma2()));
  NodeId pos = g.affine(g.sum_all(g.mul(p.diag_mask, h_pos)), 2.0 * (p.n - 1), 0.0);
  NodeId neg = g.affine(g.sum_all(g.mul(p.off_mask, h_neg)), 2.0, 0.0);
  return g.add(pos, neg);
}

// Absolute boosting at the mined negatives; the positive term appears once
// per direction (weight 2), the negative term once per mined cell.
inline NodeId append_loss_am(Graph& g, NodeId S_t, const Matrix& S_t_value,
                             const Matrix& S_a, const MarginConfig& cfg) {
  cfg.validate();
  auto p = detail::common_parts(g, S_t);
  auto [mask_row, mask_col] = detail::mined_masks(mine_hardest_diff(S_t_value, S_a), p.n);
  NodeId anchor = g.constant(S_a);
  NodeId h_pos = g.hinge(g.affine(g.sub(anchor, S_t), 1.0, cfg.gamma1()));
  NodeId h_neg = g.hinge(g.affine(g.sub(S_t, anchor), 1.0, cfg.gamma2()));
  NodeId pos = g.affine(g.sum_all(g.mul(p.diag_mask, h_pos)), 2.0, 0.0);
  return g.add(pos, g.add(g.sum_all(g.mul(g.constant(mask_row), h_neg)),
                          g.sum_all(g.mul(g.constant(mask_col), h_neg))));
}

namespace detail {

// Entrywise soft margin of an anchor-derived matrix, baked as a constant.
inline Matrix soft_margins(const Matrix& keyed_on, MarginKind kind, const MarginConfig& cfg,
                           const SoftMarginConfig& soft) {
  Matrix out(keyed_on.rows(), keyed_on.cols());
  for (size_t i = 0; i < out.size(); ++i)
    out.raw()[i] = gamma_sa(keyed_on.raw()[i], kind, cfg, soft);
  return out;
}

}  // namespace detail

// Mined relative boosting with the fixed margin replaced per-triplet by the
// soft margin of the anchor's own gap: saturated anchor triplets stop asking
// for more.
inline NodeId append_loss_rm_soft(Graph& g, NodeId S_t, const Matrix& S_t_value,
                                  const Matrix& S_a, const MarginConfig& cfg,
                                  const SoftMarginConfig& soft = {}) {
  cfg.validate();
  auto p = detail::common_parts(g, S_t);
  auto [mask_row, mask_col] = detail::mined_masks(mine_hardest_diff(S_t_value, S_a), p.n);
  Matrix a_row = detail::row_gaps(S_a);
  Matrix a_col = detail::col_gaps(S_a);
  NodeId m_row = g.constant(detail::soft_margins(a_row, MarginKind::relative, cfg, soft));
  NodeId m_col = g.constant(detail::soft_margins(a_col, MarginKind::relative, cfg, soft));
  NodeId gap_row = g.sub(p.pos_row, S_t);
  NodeId gap_col = g.sub(p.pos_col, S_t);
  NodeId h_row = g.hinge(g.add(m_row, g.sub(g.constant(a_row), gap_row)));
  NodeId h_col = g.hinge(g.add(m_col, g.sub(g.constant(a_col), gap_col)));
  return g.add(g.sum_all(g.mul(g.constant(mask_row), h_row)),
               g.sum_all(g.mul(g.constant(mask_col), h_col)));
}

// Mined absolute boosting with margins keyed on the anchor's own scores:
// gamma1 shrinks as the anchor positive nears +1, gamma2 as the anchor
// negative nears -1.
inline NodeId append_loss_am_soft(Graph& g, NodeId S_t, const Matrix& S_t_value,
                                  const Matrix& S_a, const MarginConfig& cfg,
                                  const SoftMarginConfig& soft = {}) {
  cfg.validate();
  auto p = detail::common_parts(g, S_t);
  auto [mask_row, mask_col] = detail::mined_masks(mine_hardest_diff(S_t_value, S_a), p.n);
  NodeId anchor = g.constant(S_a);
  NodeId m_pos = g.constant(detail::soft_margins(S_a, MarginKind::abs_pos, cfg, soft));
  NodeId m_neg = g.constant(detail::soft_margins(S_a, MarginKind::abs_neg, cfg, soft));
  NodeId h_pos = g.hinge(g.add(m_pos, g.sub(anchor, S_t)));
  NodeId h_neg = g.hinge(g.add(m_neg, g.sub(S_t, anchor)));
  NodeId pos = g.affine(g.sum_all(g.mul(p.diag_mask, h_pos)), 2.0, 0.0);
  return g.add(pos, g.add(g.sum_all(g.mul(g.constant(mask_row), h_neg)),
                          g.sum_all(g.mul(g.constant(mask_col), h_neg))));
}

inline NodeId append_boost_loss(Graph& g, NodeId S_t, const Matrix& S_t_value,
                                const Matrix& S_a, const MarginConfig& cfg,
                                BoostVariant variant, const SoftMarginConfig& soft = {}) {
  switch (variant) {
    case BoostVariant::rs: return append_loss_rs(g, S_t, S_a, cfg);
    case BoostVariant::rm: return append_loss_rm(g, S_t, S_t_value, S_a, cfg);
    case BoostVariant::as: return append_loss_as(g, S_t, S_a, cfg);
    case BoostVariant::am: return append_loss_am(g, S_t, S_t_value, S_a, cfg);
    case BoostVariant::rm_soft: return append_loss_rm_soft(g, S_t, S_t_value, S_a, cfg, soft);
    case BoostVariant::am_soft: return append_loss_am_soft(g, S_t, S_t_value, S_a, cfg, soft);
    case BoostVariant::none: break;
  }
  throw shape_error("append_boost_loss: no boosting variant selected");
}

inline NodeId append_raw_loss(Graph& g, NodeId S_t, const Matrix& S_t_value,
                              const MarginConfig& cfg, RawLoss raw) {
  return raw == RawLoss::max ? append_loss_max(g, S_t, S_t_value, cfg)
                             : append_loss_sum(g, S_t, cfg);
}

// The training objective: task loss plus (optionally) a boosting loss with
// fixed 1:1 weights. Raw and boost roots are kept so both can be reported.
struct LossNodes {
  NodeId total = -1;
  NodeId raw = -1;
  NodeId boost = -1;  // -1 when boosting is disabled
};

inline LossNodes append_total_loss(Graph& g, NodeId S_t, const Matrix& S_t_value,
                                   const std::optional<Matrix>& S_a, const MarginConfig& cfg,
                                   BoostVariant variant, RawLoss raw = RawLoss::max,
                                   const SoftMarginConfig& soft = {}) {
  LossNodes out;
  out.raw = append_raw_loss(g, S_t, S_t_value, cfg, raw);
  if (variant == BoostVariant::none) {
    out.total = out.raw;
    return out;
  }
  if (!S_a.has_value()) throw shape_error("total loss: boosting variant needs anchor scores");
  out.boost = append_boost_loss(g, S_t, S_t_value, *S_a, cfg, variant, soft);
  out.total = g.add(out.raw, out.boost);
  return out;
}

// ---------------------------------------------------------------------------
// Scalar front-ends: build a one-off graph with the target similarities as
// the single parameter and evaluate. The anchor is registered as a parameter
// too, deliberately left out of the computation, so callers can confirm its
// gradient is identically zero.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Builder>
double eval_target_only(const Matrix& S_t, Builder&& build) {
  Graph g;
  NodeId s = g.parameter("S_t", S_t.rows(), S_t.cols());
  NodeId root = build(g, s);
  return evaluate_scalar(g, root, {{"S_t", S_t}});
}

template <typename Builder>
double eval_with_anchor(const SimilarityBatch& b, const char* who, Builder&& build) {
  require_anchor(b, who);
  Graph g;
  NodeId s = g.parameter("S_t", b.S_t.rows(), b.S_t.cols());
  g.parameter("S_a", b.S_a->rows(), b.S_a->cols());  // unused by design
  NodeId root = build(g, s, *b.S_a);
  return evaluate_scalar(g, root, {{"S_t", b.S_t}, {"S_a", *b.S_a}});
}

}  // namespace detail

inline double loss_sum(const SimilarityBatch& b, const MarginConfig& cfg) {
  detail::require_square(b.S_t, "loss_sum", 2);
  return detail::eval_target_only(
      b.S_t, [&](Graph& g, NodeId s) { return append_loss_sum(g, s, cfg); });
}

inline double loss_max(const SimilarityBatch& b, const MarginConfig& cfg) {
  detail::require_square(b.S_t, "loss_max", 2);
  return detail::eval_target_only(
      b.S_t, [&](Graph& g, NodeId s) { return append_loss_max(g, s, b.S_t, cfg); });
}

inline double loss_rs(const SimilarityBatch& b, const MarginConfig& cfg) {
  detail::require_square(b.S_t, "loss_rs");
  return detail::eval_with_anchor(b, "loss_rs", [&](Graph& g, NodeId s, const Matrix& a) {
    return append_loss_rs(g, s, a, cfg);
  });
}

inline double loss_rm(const SimilarityBatch& b, const MarginConfig& cfg) {
  detail::require_square(b.S_t, "loss_rm", 2);
  return detail::eval_with_anchor(b, "loss_rm", [&](Graph& g, NodeId s, const Matrix& a) {
    return append_loss_rm(g, s, b.S_t, a, cfg);
  });
}

inline double loss_as(const SimilarityBatch& b, const MarginConfig& cfg) {
  detail::require_square(b.S_t, "loss_as");
  return detail::eval_with_anchor(b, "loss_as", [&](Graph& g, NodeId s, const Matrix& a) {
    return append_loss_as(g, s, a, cfg);
  });
}

inline double loss_am(const SimilarityBatch& b, const MarginConfig& cfg) {
  detail::require_square(b.S_t, "loss_am", 2);
  return detail::eval_with_anchor(b, "loss_am", [&](Graph& g, NodeId s, const Matrix& a) {
    return append_loss_am(g, s, b.S_t, a, cfg);
  });
}

inline double loss_rm_soft(const SimilarityBatch& b, const MarginConfig& cfg,
                           const SoftMarginConfig& soft = {}) {
  detail::require_square(b.S_t, "loss_rm_soft", 2);
  return detail::eval_with_anchor(b, "loss_rm_soft", [&](Graph& g, NodeId s, const Matrix& a) {
    return append_loss_rm_soft(g, s, b.S_t, a, cfg, soft);
  });
}

inline double loss_am_soft(const SimilarityBatch& b, const MarginConfig& cfg,
                           const SoftMarginConfig& soft = {}) {
  detail::require_square(b.S_t, "loss_am_soft", 2);
  return detail::eval_with_anchor(b, "loss_am_soft", [&](Graph& g, NodeId s, const Matrix& a) {
    return append_loss_am_soft(g, s, b.S_t, a, cfg, soft);
  });
}

inline double total_target_loss(const SimilarityBatch& b, const MarginConfig& cfg,
                                BoostVariant variant, RawLoss raw = RawLoss::max,
                                const SoftMarginConfig& soft = {}) {
  detail::require_square(b.S_t, "total_target_loss", 2);
  if (variant == BoostVariant::none)
    return detail::eval_target_only(b.S_t, [&](Graph& g, NodeId s) {
      return append_raw_loss(g, s, b.S_t, cfg, raw);
    });
  return detail::eval_with_anchor(b, "total_target_loss",
                                  [&](Graph& g, NodeId s, const Matrix& a) {
                                    return append_total_loss(g, s, b.S_t, a, cfg, variant, raw,
                                                             soft)
                                        .total;
                                  });
}

}  // namespace dbl
