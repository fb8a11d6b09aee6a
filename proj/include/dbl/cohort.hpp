#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbl/data.hpp"
#include "dbl/encoders.hpp"
#include "dbl/eval.hpp"
#include "dbl/losses.hpp"

namespace dbl {

// ---------------------------------------------------------------------------
// Optimizer: adaptive moment estimation with fixed, documented constants.
// Deterministic given the gradient sequence; parameters without gradients in
// a step keep their accumulators untouched.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, Matrix> m, v;
  long long t = 0;  // completed steps, shared across parameters
};

inline void optimizer_step(EncoderParams& p, AdamState& st, const GradMap& grads, double lr,
                           const AdamConfig& cfg = {}) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (const auto& [name, g] : grads) {
    if (!g.all_finite())
      throw numeric_error("optimizer_step: non-finite gradient for '" + name + "'");
    Matrix& param = named_param(p, name);
    if (!param.same_shape(g))
      throw shape_error("optimizer_step: gradient shape mismatch for '" + name + "'");
    Matrix& m = st.m.try_emplace(name, param.rows(), param.cols()).first->second;
    Matrix& v = st.v.try_emplace(name, param.rows(), param.cols()).first->second;
    for (size_t i = 0; i < param.size(); ++i) {
      const double gi = g.raw()[i];
      m.raw()[i] = cfg.beta1 * m.raw()[i] + (1.0 - cfg.beta1) * gi;
      v.raw()[i] = cfg.beta2 * v.raw()[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mh = m.raw()[i] / bc1;
      const double vh = v.raw()[i] / bc2;
      param.raw()[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

// theta_a <- beta * theta_a + (1 - beta) * theta_t, over all eight matrices.
inline void ema_update(EncoderParams& anchor, const EncoderParams& target, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw shape_error("ema_update: beta must be in [0,1]");
  auto blend = [beta](Matrix& a, const Matrix& t) {
    if (!a.same_shape(t)) throw shape_error("ema_update: shape mismatch");
    for (size_t i = 0; i < a.size(); ++i)
      a.raw()[i] = beta * a.raw()[i] + (1.0 - beta) * t.raw()[i];
  };
  blend(anchor.w_img, target.w_img);
  blend(anchor.b_img, target.b_img);
  blend(anchor.w_txt, target.w_txt);
  blend(anchor.b_txt, target.b_txt);
  blend(anchor.head.w1, target.head.w1);
  blend(anchor.head.b1, target.head.b1);
  blend(anchor.head.w2, target.head.w2);
  blend(anchor.head.b2, target.head.b2);
}

// Half-cosine ramp of the momentum coefficient from beta0 at step 0 to
// exactly 1 at step S: beta(s) = 1 - (1 - beta0) * (cos(pi*s/S) + 1) / 2.
// Both endpoints are exact in double arithmetic. Steps past S clamp to 1.
struct BetaSchedule {
  double beta0 = 0.99995;
  long long total_steps = 1;

  double at(long long step) const {
    if (total_steps < 1) throw shape_error("BetaSchedule: total_steps must be >= 1");
    if (step < 0) throw shape_error("BetaSchedule: negative step");
    if (step >= total_steps) return 1.0;  // cos(pi) = -1 kills the ramp term exactly
    const double phase = std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps);
    return 1.0 - (1.0 - beta0) * (std::cos(phase) + 1.0) / 2.0;
  }
};

// ---------------------------------------------------------------------------
// Training scenarios.
// ---------------------------------------------------------------------------

enum class Scenario { single, oas, oss, mss };

inline const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::single: return "single";
    case Scenario::oas: return "oas";
    case Scenario::oss: return "oss";
    case Scenario::mss: return "mss";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  for (Scenario v : {Scenario::single, Scenario::oas, Scenario::oss, Scenario::mss})
    if (s == to_string(v)) return v;
  throw shape_error("unknown scenario '" + s + "'");
}

struct TrainConfig {
  Scenario scenario = Scenario::single;
  BoostVariant variant = BoostVariant::none;
  RawLoss raw = RawLoss::max;
  int branches = 2;  // cohort size, oss only
  int epochs = 40;
  int batch_size = 32;
  double lr = 2e-4;
  int lr_decay_epoch = 30;  // epochs at the base rate before the decay kicks in
  double lr_decay_factor = 0.1;
  uint64_t seed = 1;
  MarginConfig margins{};
  SoftMarginConfig soft{};
  EncoderMode mode = EncoderMode::pooled;
  EncoderDims dims{};
  double lambda = 9.0;
  double beta0 = 0.99995;  // mss momentum start
  MdMode md_mode = MdMode::mean_difference;

  void validate() const {
    if (epochs < 0) throw shape_error("TrainConfig: epochs must be >= 0");
    if (batch_size < 2) throw shape_error("TrainConfig: batch_size must be >= 2");
    if (!(lr > 0.0)) throw shape_error("TrainConfig: lr must be positive");
    if (scenario == Scenario::oss && branches < 2)
      throw shape_error("TrainConfig: oss needs at least 2 branches");
    if (scenario != Scenario::single && scenario != Scenario::oas &&
        scenario != Scenario::oss && scenario != Scenario::mss)
      throw shape_error("TrainConfig: bad scenario");
    margins.validate();
  }

  double lr_at_epoch(int epoch_1based) const {
    return epoch_1based <= lr_decay_epoch ? lr : lr * lr_decay_factor;
  }
};

// One validation row per epoch; losses are the epoch's per-batch means.
struct HistoryRow {
  int epoch = 0;
  std::string split = "val";
  RetrievalReport report{};
  double loss_raw = 0.0;
  double loss_boo = 0.0;
};

inline std::string history_json_line(const HistoryRow& h) {
  nlohmann::ordered_json j;
  j["epoch"] = h.epoch;
  j["split"] = h.split;
  j["r1_i2t"] = h.report.r1_i2t;
  j["r5_i2t"] = h.report.r5_i2t;
  j["r10_i2t"] = h.report.r10_i2t;
  j["r1_t2i"] = h.report.r1_t2i;
  j["r5_t2i"] = h.report.r5_t2i;
  j["r10_t2i"] = h.report.r10_t2i;
  j["rsum"] = h.report.rsum;
  j["md"] = h.report.md;
  j["loss_raw"] = h.loss_raw;
  j["loss_boo"] = h.loss_boo;
  return j.dump();
}

struct TrainResult {
  EncoderParams best;   // checkpoint with the best validation RSUM (ties: earliest)
  EncoderParams last;   // parameters after the final step
  int best_epoch = 0;   // 0 means "never validated" (epochs == 0)
  double best_rsum = -1.0;
  std::vector<HistoryRow> history;
};

// Test hook: observes target and anchor parameters after every optimizer
// step (anchor already EMA-updated where the scenario has one).
struct TrainHooks {
  std::function<void(long long step, const EncoderParams& target, const EncoderParams& anchor)>
      after_step;
};

inline RetrievalReport evaluate_split(const EncoderParams& p, const PairDataset& ds,
                                      Split split, MdMode md = MdMode::mean_difference) {
  SplitView v = split_view(ds, split);
  Matrix s = score_gallery(p, v.image_tokens, v.text_tokens);
  return report(s, v.captions_per_image, md);
}

namespace detail {

struct BranchState {
  EncoderParams params;
  AdamState opt;
};

struct StepLoss {
  double raw = 0.0;
  double boost = 0.0;
};

// One gradient step of a branch on one batch. Anchor score matrices arrive
// as plain values (already detached); several anchors means their boosting
// losses are averaged.
inline StepLoss branch_step(BranchState& b, const TokenBatch& batch,
                            const std::vector<Matrix>& anchor_scores, const TrainConfig& cfg,
                            double lr) {
  Graph g;
  NodeId s = append_score_batch(g, b.params, batch);
  const Bindings binds = to_bindings(b.params);
  Matrix s_val = forward(g, binds).values[s];

  LossNodes nodes;
  if (anchor_scores.empty() || cfg.variant == BoostVariant::none) {
    nodes = append_total_loss(g, s, s_val, std::nullopt, cfg.margins, BoostVariant::none,
                              cfg.raw, cfg.soft);
  } else if (anchor_scores.size() == 1) {
    nodes = append_total_loss(g, s, s_val, anchor_scores[0], cfg.margins, cfg.variant,
                              cfg.raw, cfg.soft);
  } else {
    nodes.raw = append_raw_loss(g, s, s_val, cfg.margins, cfg.raw);
    NodeId acc = -1;
    for (const Matrix& a : anchor_scores) {
      NodeId bl = append_boost_loss(g, s, s_val, a, cfg.margins, cfg.variant, cfg.soft);
      acc = acc < 0 ? bl : g.add(acc, bl);
    }
    nodes.boost = g.affine(acc, 1.0 / static_cast<double>(anchor_scores.size()), 0.0);
    nodes.total = g.add(nodes.raw, nodes.boost);
  }

  Tape tape = forward(g, binds);
  GradMap grads = gradient(g, nodes.total, tape, parameter_names(b.params.mode));
  StepLoss out;
  out.raw = tape.values[nodes.raw](0, 0);
  out.boost = nodes.boost >= 0 ? tape.values[nodes.boost](0, 0) : 0.0;
  optimizer_step(b.params, b.opt, grads, lr);
  return out;
}

// Batches per epoch is a pure function of the split size, so the momentum
// schedule can know its total step count up front.
inline long long batches_per_epoch(const PairDataset& ds, Split split, int n) {
  const int count = ds.split_size(split);
  long long full = count / n;
  return (count % n >= 2) ? full + 1 : full;
}

inline void record_epoch(TrainResult& res, BranchState& b, const PairDataset& ds,
                         const TrainConfig& cfg, int epoch, double mean_raw,
                         double mean_boost) {
  HistoryRow row;
  row.epoch = epoch;
  row.report = evaluate_split(b.params, ds, Split::val, cfg.md_mode);
  row.loss_raw = mean_raw;
  row.loss_boo = mean_boost;
  res.history.push_back(row);
  if (row.report.rsum > res.best_rsum) {
    res.best_rsum = row.report.rsum;
    res.best_epoch = epoch;
    res.best = b.params;
  }
}

}  // namespace detail

// Baseline: one branch, task loss only.
inline TrainResult train_single(const TrainConfig& cfg, const PairDataset& ds,
                                const TrainHooks& hooks = {}) {
  cfg.validate();
  RngStream master(cfg.seed);
  RngStream init_rng = master.fork("init", 0);
  detail::BranchState b{init_encoder(cfg.mode, cfg.dims, init_rng, cfg.lambda), {}};
  RngStream batch_rng = master.fork("batches");

  TrainResult res;
  res.best = b.params;
  long long step = 0;
  for (int e = 1; e <= cfg.epochs; ++e) {
    const double lr = cfg.lr_at_epoch(e);
    double raw_sum = 0.0;
    const auto batches = epoch_batches(ds, Split::train, cfg.batch_size, batch_rng);
    for (const Batch& batch : batches) {
      raw_sum += detail::branch_step(b, token_batch(ds, batch), {}, cfg, lr).raw;
      if (hooks.after_step) hooks.after_step(step, b.params, b.params);
      ++step;
    }
    detail::record_epoch(res, b, ds, cfg, e, raw_sum / batches.size(), 0.0);
  }
  res.last = b.params;
  return res;
}

// Offline-asynchronous: a frozen, pre-trained anchor guides a fresh target.
inline TrainResult train_oas(const TrainConfig& cfg, const PairDataset& ds,
                             const EncoderParams& anchor, const TrainHooks& hooks = {}) {
  cfg.validate();
  RngStream master(cfg.seed);
  RngStream init_rng = master.fork("init", 0);
  detail::BranchState b{init_encoder(cfg.mode, cfg.dims, init_rng, cfg.lambda), {}};
  RngStream batch_rng = master.fork("batches");

  TrainResult res;
  res.best = b.params;
  long long step = 0;
  for (int e = 1; e <= cfg.epochs; ++e) {
    const double lr = cfg.lr_at_epoch(e);
    double raw_sum = 0.0, boost_sum = 0.0;
    const auto batches = epoch_batches(ds, Split::train, cfg.batch_size, batch_rng);
    for (const Batch& batch : batches) {
      const TokenBatch tb = token_batch(ds, batch);
      std::vector<Matrix> anchors;
      if (cfg.variant != BoostVariant::none) anchors.push_back(score_batch(anchor, tb));
      const auto loss = detail::branch_step(b, tb, anchors, cfg, lr);
      raw_sum += loss.raw;
      boost_sum += loss.boost;
      if (hooks.after_step) hooks.after_step(step, b.params, anchor);
      ++step;
    }
    detail::record_epoch(res, b, ds, cfg, e, raw_sum / batches.size(),
                         boost_sum / batches.size());
  }
  res.last = b.params;
  return res;
}

// Online-synchronous: a cohort of M branches trained jointly on shared
// batches. Branch 0 sees only the task loss; branch m boosts against the
// snapshot scores of branches 0..m-1 (averaged). The last branch is the
// evaluated target; all histories are returned.
inline std::vector<TrainResult> train_oss(const TrainConfig& cfg, const PairDataset& ds,
                                          const TrainHooks& hooks = {}) {
  cfg.validate();
  if (cfg.branches < 2) throw shape_error("train_oss: needs at least 2 branches");
  const int m_count = cfg.branches;
  RngStream master(cfg.seed);
  std::vector<detail::BranchState> branches;
  for (int m = 0; m < m_count; ++m) {
    RngStream init_rng = master.fork("init", static_cast<uint64_t>(m));
    branches.push_back({init_encoder(cfg.mode, cfg.dims, init_rng, cfg.lambda), {}});
  }
  RngStream batch_rng = master.fork("batches");

  std::vector<TrainResult> results(m_count);
  for (int m = 0; m < m_count; ++m) results[m].best = branches[m].params;

  long long step = 0;
  for (int e = 1; e <= cfg.epochs; ++e) {
    const double lr = cfg.lr_at_epoch(e);
    std::vector<double> raw_sum(m_count, 0.0), boost_sum(m_count, 0.0);
    const auto batches = epoch_batches(ds, Split::train, cfg.batch_size, batch_rng);
    for (const Batch& batch : batches) {
      const TokenBatch tb = token_batch(ds, batch);
      // Scores snapshot before any branch moves, so every boosting loss in
      // this step reads pre-update anchors regardless of update order.
      std::vector<Matrix> scores;
      scores.reserve(m_count);
      for (const auto& br : branches) scores.push_back(score_batch(br.params, tb));
      for (int m = 0; m < m_count; ++m) {
        std::vector<Matrix> anchors;
        if (m > 0 && cfg.variant != BoostVariant::none)
          anchors.assign(scores.begin(), scores.begin() + m);
        const auto loss = detail::branch_step(branches[m], tb, anchors, cfg, lr);
        raw_sum[m] += loss.raw;
        boost_sum[m] += loss.boost;
      }
      if (hooks.after_step)
        hooks.after_step(step, branches.back().params, branches.front().params);
      ++step;
    }
    for (int m = 0; m < m_count; ++m)
      detail::record_epoch(results[m], branches[m], ds, cfg, e, raw_sum[m] / batches.size(),
                           boost_sum[m] / batches.size());
  }
  for (int m = 0; m < m_count; ++m) results[m].last = branches[m].params;
  return results;
}

// Momentum-synchronous: the anchor starts as a copy of the target and trails
// it as an EMA; it is never touched by the optimizer. Update k uses
// beta(k) from the half-cosine schedule over all planned steps.
inline TrainResult train_mss(const TrainConfig& cfg, const PairDataset& ds,
                             const TrainHooks& hooks = {}) {
  cfg.validate();
  RngStream master(cfg.seed);
  RngStream init_rng = master.fork("init", 0);
  detail::BranchState target{init_encoder(cfg.mode, cfg.dims, init_rng, cfg.lambda), {}};
  EncoderParams anchor = target.params;
  RngStream batch_rng = master.fork("batches");

  BetaSchedule schedule;
  schedule.beta0 = cfg.beta0;
  schedule.total_steps =
      std::max<long long>(1, cfg.epochs * detail::batches_per_epoch(ds, Split::train,
                                                                    cfg.batch_size));

  TrainResult res;
  res.best = target.params;
  long long step = 0;
  for (int e = 1; e <= cfg.epochs; ++e) {
    const double lr = cfg.lr_at_epoch(e);
    double raw_sum = 0.0, boost_sum = 0.0;
    const auto batches = epoch_batches(ds, Split::train, cfg.batch_size, batch_rng);
    for (const Batch& batch : batches) {
      const TokenBatch tb = token_batch(ds, batch);
      std::vector<Matrix> anchors;
      if (cfg.variant != BoostVariant::none) anchors.push_back(score_batch(anchor, tb));
      const auto loss = detail::branch_step(target, tb, anchors, cfg, lr);
      raw_sum += loss.raw;
      boost_sum += loss.boost;
      ema_update(anchor, target.params, schedule.at(step));
      if (hooks.after_step) hooks.after_step(step, target.params, anchor);
      ++step;
    }
    detail::record_epoch(res, target, ds, cfg, e, raw_sum / batches.size(),
                         boost_sum / batches.size());
  }
  res.last = target.params;
  return res;
}

}  // namespace dbl
