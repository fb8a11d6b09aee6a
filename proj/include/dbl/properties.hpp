#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dbl/cohort.hpp"
#include "dbl/data.hpp"
#include "dbl/encoders.hpp"
#include "dbl/eval.hpp"
#include "dbl/graph.hpp"
#include "dbl/losses.hpp"
#include "dbl/rng.hpp"

namespace dbl {

// Self-contained invariant suite runnable from the CLI (`check`). Every
// property is named, deterministic in the master seed, and reports a short
// diagnostic on failure.

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Injection points so the suite itself can be tested: substituting a broken
// implementation must flip the corresponding property to FAIL.
struct PropertyHooks {
  std::function<double(const SimilarityBatch&, const MarginConfig&)> loss_am_fn;
  std::function<double(const SimilarityBatch&, const MarginConfig&)> loss_as_fn;
};

namespace detail {

inline Matrix random_scores(RngStream& rng, int n) { return rng.uniform_matrix(n, n, -1.0, 1.0); }

// Smallest lead of the winning candidate over the runner-up across all
// mining rows/columns of D; +inf when every row has a single candidate.
inline double mining_margin(const Matrix& d) {
  double margin = std::numeric_limits<double>::infinity();
  const int n = d.rows();
  auto consider = [&margin](double best, double second, bool has_second) {
    if (has_second) margin = std::min(margin, best - second);
  };
  for (int i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity(), second = best;
    int seen = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      ++seen;
      if (d(i, j) > best) {
        second = best;
        best = d(i, j);
      } else {
        second = std::max(second, d(i, j));
      }
    }
    consider(best, second, seen > 1);
  }
  for (int c = 0; c < n; ++c) {
    double best = -std::numeric_limits<double>::infinity(), second = best;
    int seen = 0;
    for (int i = 0; i < n; ++i) {
      if (i == c) continue;
      ++seen;
      if (d(i, c) > best) {
        second = best;
        best = d(i, c);
      } else {
        second = std::max(second, d(i, c));
      }
    }
    consider(best, second, seen > 1);
  }
  return margin;
}

}  // namespace detail

inline std::vector<PropertyResult> run_properties(uint64_t seed,
                                                  const PropertyHooks& hooks = {}) {
  std::vector<PropertyResult> results;
  auto add = [&results](const std::string& name, bool ok, const std::string& detail = "") {
    results.push_back({name, ok, ok ? "" : detail});
  };
  RngStream master(seed);
  const MarginConfig cfg;  // gamma 0.2, alpha 0.5
  const SoftMarginConfig soft;
  auto am = hooks.loss_am_fn ? hooks.loss_am_fn
                             : [](const SimilarityBatch& b, const MarginConfig& c) {
                                 return loss_am(b, c);
                               };
  auto as = hooks.loss_as_fn ? hooks.loss_as_fn
                             : [](const SimilarityBatch& b, const MarginConfig& c) {
                                 return loss_as(b, c);
                               };

  // 1-2. Mined boosting losses never exceed their all-negatives versions.
  {
    RngStream rng = master.fork("ordering");
    bool ok_rm = true, ok_rs = true;
    std::string detail_rm, detail_rs;
    for (int trial = 0; trial < 500 && (ok_rm || ok_rs); ++trial) {
      const int n = 2 + static_cast<int>(rng.index(15));
      SimilarityBatch b{detail::random_scores(rng, n), detail::random_scores(rng, n)};
      const double rm = loss_rm(b, cfg), am_v = am(b, cfg);
      const double rs = loss_rs(b, cfg), as_v = as(b, cfg);
      if (ok_rm && rm > am_v + 1e-12) {
        ok_rm = false;
        detail_rm = "trial " + std::to_string(trial) + ": rm " + std::to_string(rm) +
                    " > am " + std::to_string(am_v);
      }
      if (ok_rs && rs > as_v + 1e-12) {
        ok_rs = false;
        detail_rs = "trial " + std::to_string(trial) + ": rs " + std::to_string(rs) +
                    " > as " + std::to_string(as_v);
      }
    }
    add("loss_ordering_rm_le_am", ok_rm, detail_rm);
    add("loss_ordering_rs_le_as", ok_rs, detail_rs);
  }

  // 3. Identity anchor pins the mined boosting losses at 2*gamma*N.
  {
    RngStream rng = master.fork("identity-anchor");
    bool ok = true;
    std::string detail;
    for (int trial = 0; trial < 200 && ok; ++trial) {
      const int n = 2 + static_cast<int>(rng.index(15));
      Matrix s = detail::random_scores(rng, n);
      SimilarityBatch b{s, s};
      const double want = 2.0 * cfg.gamma * n;
      const double rm = loss_rm(b, cfg), am_v = am(b, cfg);
      if (std::abs(rm - want) > 1e-12 || std::abs(am_v - want) > 1e-12) {
        ok = false;
        detail = "n=" + std::to_string(n) + " rm=" + std::to_string(rm) +
                 " am=" + std::to_string(am_v) + " want=" + std::to_string(want);
      }
    }
    add("identity_anchor_exactness", ok, detail);
  }

  // 4. A zero anchor turns mined relative boosting into the plain hardest-
  //    negative ranking loss.
  {
    RngStream rng = master.fork("zero-anchor");
    bool ok = true;
    std::string detail;
    for (int trial = 0; trial < 200 && ok; ++trial) {
      const int n = 2 + static_cast<int>(rng.index(7));
      Matrix s = detail::random_scores(rng, n);
      SimilarityBatch boosted{s, Matrix(n, n)};
      SimilarityBatch plain{s, std::nullopt};
      const double rm = loss_rm(boosted, cfg), mx = loss_max(plain, cfg);
      if (std::abs(rm - mx) > 1e-15) {
        ok = false;
        detail = "rm=" + std::to_string(rm) + " max=" + std::to_string(mx);
      }
    }
    add("zero_anchor_reduction", ok, detail);
  }

  // 5. With one negative per direction, sum and max variants coincide.
  {
    RngStream rng = master.fork("n2");
    bool ok = true;
    std::string detail;
    for (int trial = 0; trial < 200 && ok; ++trial) {
      SimilarityBatch b{detail::random_scores(rng, 2), detail::random_scores(rng, 2)};
      const double d1 = std::abs(loss_sum(b, cfg) - loss_max(b, cfg));
      const double d2 = std::abs(loss_rs(b, cfg) - loss_rm(b, cfg));
      const double d3 = std::abs(as(b, cfg) - am(b, cfg));
      if (d1 > 1e-15 || d2 > 1e-15 || d3 > 1e-15) {
        ok = false;
        detail = "deltas " + std::to_string(d1) + " " + std::to_string(d2) + " " +
                 std::to_string(d3);
      }
    }
    add("n2_sum_max_coincide", ok, detail);
  }

  // 6-8. Soft adaptive margin: exact zeros at the extremes, unit slope
  //      there, monotone and bounded by the hard margin over the domain.
  {
    const double at_dx = gamma_sa(soft.d_x, MarginKind::relative, cfg, soft);
    const double at_dy = gamma_sa(-soft.d_y, MarginKind::abs_neg, cfg, soft);
    add("soft_margin_zero_at_extremes",
        std::abs(at_dx) <= 1e-12 && std::abs(at_dy) <= 1e-12,
        "gamma_sa(d_x)=" + std::to_string(at_dx) + " gamma2_sa(-d_y)=" + std::to_string(at_dy));

    const double h = 1e-6;
    // One-sided differences from inside the domain: the clamp makes the
    // outside flat, so a central difference would straddle the boundary.
    const double slope_rel =
        (gamma_sa(soft.d_x, MarginKind::relative, cfg, soft) -
         gamma_sa(soft.d_x - h, MarginKind::relative, cfg, soft)) / h;
    const double slope_neg =
        (gamma_sa(-soft.d_y + h, MarginKind::abs_neg, cfg, soft) -
         gamma_sa(-soft.d_y, MarginKind::abs_neg, cfg, soft)) / h;
    add("soft_margin_unit_slope",
        std::abs(slope_rel + 1.0) <= 1e-3 && std::abs(slope_neg - 1.0) <= 1e-3,
        "slopes " + std::to_string(slope_rel) + " / " + std::to_string(slope_neg));

    bool ok = true;
    std::string detail;
    double prev_rel = std::numeric_limits<double>::infinity();
    double prev_neg = -std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 1000 && ok; ++i) {
      const double x = -soft.d_x + 2.0 * soft.d_x * i / 1000.0;
      // The sigmoid tail saturates below double epsilon near the clamped
      // boundary, so the supremum gamma is attained exactly there: the range
      // check must be closed, not open.
      const double g = gamma_sa(x, MarginKind::relative, cfg, soft);
      if (g > prev_rel + 1e-15 || g < 0.0 || g > cfg.gamma) {
        ok = false;
        detail = "relative kind broke at x=" + std::to_string(x);
      }
      prev_rel = g;
      const double y = -soft.d_y + 2.0 * soft.d_y * i / 1000.0;
      const double g2 = gamma_sa(y, MarginKind::abs_neg, cfg, soft);
      if (g2 < prev_neg - 1e-15 || g2 < 0.0 || g2 > cfg.gamma2()) {
        ok = false;
        detail = "abs_neg kind broke at y=" + std::to_string(y);
      }
      prev_neg = g2;
    }
    add("soft_margin_monotone_in_range", ok, detail);
  }

  // 9. Row softmax rows are nonnegative and sum to one.
  {
    RngStream rng = master.fork("softmax");
    bool ok = true;
    std::string detail;
    for (int trial = 0; trial < 50 && ok; ++trial) {
      Graph g;
      NodeId x = g.parameter("x", 5, 7);
      NodeId y = g.row_softmax(x, 9.0);
      Matrix out = evaluate(g, y, {{"x", rng.uniform_matrix(5, 7, -3.0, 3.0)}});
      for (int i = 0; i < out.rows() && ok; ++i) {
        double sum = 0.0;
        for (int j = 0; j < out.cols(); ++j) {
          if (out(i, j) < 0.0) ok = false;
          sum += out(i, j);
        }
        if (std::abs(sum - 1.0) > 1e-12) ok = false;
        if (!ok) detail = "row " + std::to_string(i) + " sum " + std::to_string(sum);
      }
    }
    add("softmax_rows_normalized", ok, detail);
  }

  // 10. Row L2 normalization yields unit rows and keeps zero rows at zero.
  {
    RngStream rng = master.fork("l2norm");
    bool ok = true;
    std::string detail;
    for (int trial = 0; trial < 50 && ok; ++trial) {
      Matrix x = rng.uniform_matrix(6, 4, -2.0, 2.0);
      for (int j = 0; j < x.cols(); ++j) x(2, j) = 0.0;  // plant a zero row
      Matrix y = normalize_rows(x);
      for (int i = 0; i < y.rows() && ok; ++i) {
        const double norm = row_norm(y, i);
        const double want = i == 2 ? 0.0 : 1.0;
        if (std::abs(norm - want) > 1e-12) {
          ok = false;
          detail = "row " + std::to_string(i) + " norm " + std::to_string(norm);
        }
      }
    }
    add("l2norm_rows_unit", ok, detail);
  }

  // 11. Loss gradients agree with central finite differences away from
  //     hinge kinks and mining ties.
  {
    RngStream rng = master.fork("fd");
    bool ok = true;
    std::string detail;
    const double step = 1e-6;
    for (BoostVariant v : {BoostVariant::rs, BoostVariant::rm, BoostVariant::as,
                           BoostVariant::am, BoostVariant::rm_soft, BoostVariant::am_soft}) {
      int done = 0, guard = 0;
      while (done < 5 && guard < 200 && ok) {
        ++guard;
        const int n = 3 + static_cast<int>(rng.index(4));
        Matrix s_t = detail::random_scores(rng, n);
        Matrix s_a = detail::random_scores(rng, n);
        Matrix diff = s_t;
        for (size_t i = 0; i < diff.size(); ++i) diff.raw()[i] -= s_a.raw()[i];
        if (detail::mining_margin(diff) < 1e-3) continue;
        Graph g;
        NodeId s = g.parameter("S_t", n, n);
        NodeId root = append_boost_loss(g, s, s_t, s_a, cfg, v, soft);
        Bindings binds = {{"S_t", s_t}};
        if (min_hinge_gap(g, forward(g, binds)) < 10 * step) continue;
        const double err = finite_diff_check(g, root, binds, {"S_t"}, step);
        if (err > 1e-5) {
          ok = false;
          detail = std::string("variant ") + to_string(v) + " err " + std::to_string(err);
        }
        ++done;
      }
    }
    add("gradient_matches_finite_diff", ok, detail);
  }

  // 12. Boosting losses push no gradient into the anchor.
  {
    RngStream rng = master.fork("anchor-grad");
    bool ok = true;
    std::string detail;
    for (BoostVariant v : {BoostVariant::rs, BoostVariant::rm, BoostVariant::as,
                           BoostVariant::am, BoostVariant::rm_soft, BoostVariant::am_soft}) {
      const int n = 4;
      Matrix s_t = detail::random_scores(rng, n);
      Matrix s_a = detail::random_scores(rng, n);
      Graph g;
      NodeId s = g.parameter("S_t", n, n);
      g.parameter("S_a", n, n);
      NodeId root = append_boost_loss(g, s, s_t, s_a, cfg, v, soft);
      GradMap grads = gradient(g, root, {{"S_t", s_t}, {"S_a", s_a}}, {"S_a"});
      for (double x : grads.at("S_a").raw())
        if (x != 0.0) {
          ok = false;
          detail = std::string("variant ") + to_string(v);
        }
    }
    add("anchor_gradient_exactly_zero", ok, detail);
  }

  // 13. EMA outputs interpolate: every entry between prior anchor and target.
  {
    RngStream rng = master.fork("ema");
    bool ok = true;
    std::string detail;
    EncoderDims dims{6, 5, 4, 3};
    RngStream r1 = rng.fork("a"), r2 = rng.fork("b");
    EncoderParams anchor = init_encoder(EncoderMode::interaction, dims, r1);
    const EncoderParams target = init_encoder(EncoderMode::interaction, dims, r2);
    for (double beta : {0.0, 0.3, 0.99995, 1.0}) {
      EncoderParams blended = anchor;
      ema_update(blended, target, beta);
      auto check = [&](const Matrix& a, const Matrix& t, const Matrix& out) {
        for (size_t i = 0; i < out.size(); ++i) {
          const double lo = std::min(a.raw()[i], t.raw()[i]);
          const double hi = std::max(a.raw()[i], t.raw()[i]);
          if (out.raw()[i] < lo - 1e-15 || out.raw()[i] > hi + 1e-15) {
            ok = false;
            detail = "beta " + std::to_string(beta);
          }
        }
      };
      check(anchor.w_img, target.w_img, blended.w_img);
      check(anchor.head.w1, target.head.w1, blended.head.w1);
    }
    add("ema_convex_interpolation", ok, detail);
  }

  // 14. Momentum schedule: exact endpoints, nondecreasing in between.
  {
    BetaSchedule sched{0.99995, 1000};
    bool ok = sched.at(0) == 0.99995 && sched.at(1000) == 1.0;
    std::string detail = ok ? "" : "endpoints off";
    double prev = 0.0;
    for (long long s = 0; s <= 1000 && ok; ++s) {
      const double b = sched.at(s);
      if (b < prev) {
        ok = false;
        detail = "decreased at step " + std::to_string(s);
      }
      prev = b;
    }
    add("beta_schedule_endpoints_monotone", ok, detail);
  }

  // 15. Batches never pair two captions of one image, so off-diagonal batch
  //     cells are honest negatives.
  {
    LatentSpec spec;
    spec.train_images = 37;
    spec.val_images = 5;
    spec.test_images = 5;
    PairDataset ds = generate(spec, master.fork("batch-data").seed());
    RngStream rng = master.fork("batch-rng");
    bool ok = true;
    std::string detail;
    for (int epoch = 0; epoch < 3; ++epoch) {
      for (const Batch& b : epoch_batches(ds, Split::train, 8, rng)) {
        std::vector<int> owners;
        for (size_t i = 0; i < b.captions.size(); ++i) {
          const int owner = ds.image_of_caption(b.captions[i]);
          if (owner != b.images[i]) {
            ok = false;
            detail = "caption paired with wrong image";
          }
          owners.push_back(owner);
        }
        std::sort(owners.begin(), owners.end());
        if (std::adjacent_find(owners.begin(), owners.end()) != owners.end()) {
          ok = false;
          detail = "two captions of one image in a batch";
        }
      }
    }
    add("batch_negative_purity", ok, detail);
  }

  // 16-18. Retrieval metrics: recall monotone in k, RSUM additivity,
  //        histogram conservation.
  {
    RngStream rng = master.fork("metrics");
    bool mono = true, additive = true, conserve = true;
    std::string d1, d2, d3;
    for (int trial = 0; trial < 20; ++trial) {
      const int images = 3 + static_cast<int>(rng.index(8));
      const int c = 1 + static_cast<int>(rng.index(5));
      Matrix s = rng.uniform_matrix(images, images * c, -1.0, 1.0);
      double prev_i2t = 0.0, prev_t2i = 0.0;
      for (int k = 1; k <= images * c; ++k) {
        const double ri = recall_at_k(s, c, k, Direction::image_to_text);
        const double rt = k <= images ? recall_at_k(s, c, k, Direction::text_to_image)
                                      : prev_t2i;
        if (ri < prev_i2t - 1e-12 || rt < prev_t2i - 1e-12) {
          mono = false;
          d1 = "k=" + std::to_string(k);
        }
        prev_i2t = ri;
        prev_t2i = rt;
      }
      RetrievalReport r = report(s, c);
      const double sum = r.r1_i2t + r.r5_i2t + r.r10_i2t + r.r1_t2i + r.r5_t2i + r.r10_t2i;
      if (r.rsum != sum) {
        additive = false;
        d2 = "rsum " + std::to_string(r.rsum) + " vs " + std::to_string(sum);
      }
      Histogram h = histogram(s, c);
      long long pos = 0, neg = 0;
      for (int b = 0; b < Histogram::bins; ++b) {
        pos += h.pos[b];
        neg += h.neg[b];
      }
      if (pos != static_cast<long long>(images) * c ||
          pos + neg != static_cast<long long>(s.rows()) * s.cols()) {
        conserve = false;
        d3 = "counts " + std::to_string(pos) + "/" + std::to_string(neg);
      }
    }
    add("recall_monotone_in_k", mono, d1);
    add("rsum_is_recall_sum", additive, d2);
    add("histogram_conserves_population", conserve, d3);
  }

  // 19. The training objective is exactly task loss plus boosting loss.
  {
    RngStream rng = master.fork("total");
    bool ok = true;
    std::string detail;
    for (int trial = 0; trial < 100 && ok; ++trial) {
      const int n = 2 + static_cast<int>(rng.index(8));
      SimilarityBatch b{detail::random_scores(rng, n), detail::random_scores(rng, n)};
      const double total = total_target_loss(b, cfg, BoostVariant::rm);
      const double parts = loss_max(b, cfg) + loss_rm(b, cfg);
      if (std::abs(total - parts) > 1e-15) {
        ok = false;
        detail = "total " + std::to_string(total) + " vs parts " + std::to_string(parts);
      }
    }
    add("total_loss_is_raw_plus_boost", ok, detail);
  }

  // 20. Same seed, same draws: the RNG and a seeded pipeline repeat bitwise.
  {
    RngStream a(seed), b(seed);
    bool ok = true;
    for (int i = 0; i < 1000; ++i)
      if (a.next_u64() != b.next_u64()) ok = false;
    RngStream fa = a.fork("x"), fb = b.fork("x");
    for (int i = 0; i < 100; ++i)
      if (fa.normal() != fb.normal()) ok = false;
    add("seeded_streams_repeat_bitwise", ok, "diverging draws");
  }

  return results;
}

}  // namespace dbl
