#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "helpers.hpp"

using namespace dbl;
using testutil::params_max_abs_diff;
using testutil::tiny_spec;
using testutil::tiny_train_config;

namespace {

EncoderParams small_params(uint64_t seed) {
  RngStream rng(seed);
  return init_encoder(EncoderMode::pooled, {8, 8, 8, 4}, rng);
}

}  // namespace

TEST_CASE("optimizer leaves parameters alone under zero gradients") {
  EncoderParams p = small_params(61);
  EncoderParams before = p;
  AdamState st;
  GradMap grads;
  for (const std::string& name : parameter_names(EncoderMode::pooled))
    grads[name] = Matrix(named_param(p, name).rows(), named_param(p, name).cols());
  optimizer_step(p, st, grads, 1e-3);
  REQUIRE(params_max_abs_diff(p, before) == 0.0);
}

TEST_CASE("optimizer descends a quadratic") {
  // Gradient of sum of squares is 2 * param; one step must shrink every
  // entry (the adaptive step size is far below the smallest magnitude).
  EncoderParams p = small_params(62);
  for (auto& v : p.w_img.raw()) v = v < 0 ? std::min(v, -0.05) : std::max(v, 0.05);
  EncoderParams before = p;
  AdamState st;
  GradMap grads;
  Matrix g = p.w_img;
  for (auto& v : g.raw()) v *= 2.0;
  grads["w_img"] = g;
  optimizer_step(p, st, grads, 1e-3);
  for (size_t i = 0; i < p.w_img.size(); ++i)
    REQUIRE(std::abs(p.w_img.raw()[i]) < std::abs(before.w_img.raw()[i]));
  REQUIRE(max_abs_diff(p.w_txt, before.w_txt) == 0.0);  // untouched parameter

  Matrix bad = g;
  bad.raw()[0] = std::nan("");
  REQUIRE_THROWS_AS(optimizer_step(p, st, {{"w_img", bad}}, 1e-3), numeric_error);
  REQUIRE_THROWS_AS(optimizer_step(p, st, {{"w_img", Matrix(1, 1, 0.5)}}, 1e-3),
                    shape_error);
}

TEST_CASE("ema update blends, respects endpoints, and stays between the inputs") {
  EncoderParams anchor = small_params(63);
  EncoderParams target = small_params(64);

  EncoderParams frozen = anchor;
  ema_update(frozen, target, 1.0);
  REQUIRE(params_max_abs_diff(frozen, anchor) == 0.0);

  EncoderParams jumped = anchor;
  ema_update(jumped, target, 0.0);
  REQUIRE(params_max_abs_diff(jumped, target) == 0.0);

  EncoderParams one = anchor;
  one.w_img = Matrix::full(8, 8, 1.0);
  EncoderParams zero = target;
  zero.w_img = Matrix(8, 8);
  ema_update(one, zero, 0.99995);
  REQUIRE(one.w_img(3, 3) == 0.99995);

  EncoderParams mixed = anchor;
  ema_update(mixed, target, 0.3);
  auto check_between = [](const Matrix& out, const Matrix& a, const Matrix& t) {
    for (size_t i = 0; i < out.size(); ++i) {
      REQUIRE(out.raw()[i] >= std::min(a.raw()[i], t.raw()[i]) - 1e-15);
      REQUIRE(out.raw()[i] <= std::max(a.raw()[i], t.raw()[i]) + 1e-15);
    }
  };
  check_between(mixed.w_img, anchor.w_img, target.w_img);
  check_between(mixed.head.w1, anchor.head.w1, target.head.w1);

  REQUIRE_THROWS_AS(ema_update(mixed, target, 1.5), shape_error);
}

TEST_CASE("momentum schedule is endpoint-exact, monotone, and clamped") {
  BetaSchedule s;
  s.beta0 = 0.99995;
  s.total_steps = 880;
  REQUIRE(s.at(0) == 0.99995);
  REQUIRE(s.at(880) == 1.0);
  REQUIRE(s.at(5000) == 1.0);
  REQUIRE(s.at(440) == Catch::Approx(0.999975).margin(1e-12));

  double prev = 0.0;
  for (long long k = 0; k <= 880; ++k) {
    const double b = s.at(k);
    REQUIRE(b >= prev);
    prev = b;
  }
  REQUIRE_THROWS_AS(s.at(-1), shape_error);
  BetaSchedule bad;
  bad.total_steps = 0;
  REQUIRE_THROWS_AS(bad.at(0), shape_error);
}

TEST_CASE("zero-epoch training returns the seeded initialization") {
  PairDataset ds = generate(tiny_spec(), 70);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 0;
  TrainResult res = train_single(cfg, ds);
  REQUIRE(res.history.empty());
  REQUIRE(res.best_epoch == 0);
  REQUIRE(params_max_abs_diff(res.best, res.last) == 0.0);

  // The initialization is a pure function of the seed, not of the epoch
  // budget, so a real run starts from this exact point.
  RngStream init_rng = RngStream(cfg.seed).fork("init", 0);
  EncoderParams expect = init_encoder(cfg.mode, cfg.dims, init_rng, cfg.lambda);
  REQUIRE(params_max_abs_diff(res.best, expect) == 0.0);
}

TEST_CASE("training improves validation retrieval over the initialization") {
  PairDataset ds = generate(tiny_spec(), 70);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 0;
  const double rsum_init =
      evaluate_split(train_single(cfg, ds).best, ds, Split::val).rsum;

  cfg.epochs = 5;
  TrainResult res = train_single(cfg, ds);
  REQUIRE(static_cast<int>(res.history.size()) == 5);
  REQUIRE(res.best_rsum > rsum_init);
  REQUIRE(res.best_epoch >= 1);
  REQUIRE(res.best_rsum ==
          Catch::Approx(evaluate_split(res.best, ds, Split::val).rsum).margin(1e-12));
}

TEST_CASE("identical seeds give bit-identical histories and parameters") {
  PairDataset ds = generate(tiny_spec(), 71);
  TrainConfig cfg = tiny_train_config();
  TrainResult a = train_single(cfg, ds);
  TrainResult b = train_single(cfg, ds);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    REQUIRE(a.history[i].report.rsum == b.history[i].report.rsum);
    REQUIRE(a.history[i].loss_raw == b.history[i].loss_raw);
  }
  REQUIRE(params_max_abs_diff(a.last, b.last) == 0.0);

  cfg.seed = 99;
  TrainResult c = train_single(cfg, ds);
  REQUIRE(params_max_abs_diff(a.last, c.last) > 0.0);
}

TEST_CASE("best checkpoint attains the maximum recorded validation rsum") {
  PairDataset ds = generate(tiny_spec(), 72);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 6;
  TrainResult res = train_single(cfg, ds);
  double best = -1.0;
  int best_epoch = 0;
  for (const HistoryRow& row : res.history)
    if (row.report.rsum > best) {  // strict: ties keep the earliest epoch
      best = row.report.rsum;
      best_epoch = row.epoch;
    }
  REQUIRE(res.best_rsum == best);
  REQUIRE(res.best_epoch == best_epoch);
}

TEST_CASE("history rows serialize with the documented fields") {
  HistoryRow row;
  row.epoch = 3;
  row.report.r1_i2t = 12.5;
  row.report.rsum = 300.0;
  row.report.md = 0.5;
  row.loss_raw = 1.25;
  row.loss_boo = 0.75;
  const std::string line = history_json_line(row);
  auto j = nlohmann::json::parse(line);
  REQUIRE(j["epoch"] == 3);
  REQUIRE(j["split"] == "val");
  REQUIRE(j["r1_i2t"] == 12.5);
  REQUIRE(j["rsum"] == 300.0);
  REQUIRE(j["md"] == 0.5);
  REQUIRE(j["loss_raw"] == 1.25);
  REQUIRE(j["loss_boo"] == 0.75);
  REQUIRE(line.rfind("{\"epoch\":3,\"split\":\"val\",\"r1_i2t\":12.5,", 0) == 0);
}

TEST_CASE("frozen-anchor training with boosting disabled equals the baseline") {
  PairDataset ds = generate(tiny_spec(), 73);
  TrainConfig cfg = tiny_train_config();
  cfg.scenario = Scenario::oas;
  cfg.variant = BoostVariant::none;
  EncoderParams anchor = small_params(99);
  TrainResult oas = train_oas(cfg, ds, anchor);

  TrainConfig single = cfg;
  single.scenario = Scenario::single;
  TrainResult base = train_single(single, ds);
  REQUIRE(params_max_abs_diff(oas.last, base.last) == 0.0);
  REQUIRE(oas.history.back().report.rsum == base.history.back().report.rsum);
  REQUIRE(oas.history.back().loss_boo == 0.0);
}

TEST_CASE("a trained frozen anchor produces positive boosting pressure from step one") {
  PairDataset ds = generate(tiny_spec(), 74);
  TrainConfig cfg = tiny_train_config();
  EncoderParams anchor = train_single(cfg, ds).best;

  cfg.scenario = Scenario::oas;
  cfg.variant = BoostVariant::rm;
  cfg.seed = 5;  // fresh target initialization
  cfg.epochs = 1;
  TrainResult res = train_oas(cfg, ds, anchor);
  REQUIRE(res.history.front().loss_boo > 0.0);

  TrainResult res2 = train_oas(cfg, ds, anchor);
  REQUIRE(res.history.front().loss_boo == res2.history.front().loss_boo);
  REQUIRE(params_max_abs_diff(res.last, res2.last) == 0.0);
}

TEST_CASE("joint cohort training detaches anchors and averages boosting terms") {
  PairDataset ds = generate(tiny_spec(), 75);
  TrainConfig cfg = tiny_train_config();
  cfg.scenario = Scenario::oss;
  cfg.variant = BoostVariant::rm;
  cfg.branches = 3;
  cfg.epochs = 1;
  cfg.batch_size = 20;  // the whole train split: exactly one step

  std::vector<TrainResult> results = train_oss(cfg, ds);
  REQUIRE(results.size() == 3);
  REQUIRE(results[0].history.front().loss_boo == 0.0);  // pure task loss

  // Replay the single step from the outside: branch initializations and the
  // batch order are pure functions of the master seed, and every branch is
  // scored before any branch moves.
  std::vector<EncoderParams> inits;
  for (int m = 0; m < 3; ++m) {
    RngStream init_rng = RngStream(cfg.seed).fork("init", static_cast<uint64_t>(m));
    inits.push_back(init_encoder(cfg.mode, cfg.dims, init_rng, cfg.lambda));
  }
  RngStream batch_rng = RngStream(cfg.seed).fork("batches");
  auto batches = epoch_batches(ds, Split::train, cfg.batch_size, batch_rng);
  REQUIRE(batches.size() == 1);
  TokenBatch tb = token_batch(ds, batches[0]);

  std::vector<Matrix> scores;
  for (int m = 0; m < 3; ++m) scores.push_back(score_batch(inits[m], tb));
  auto boost_against = [&](int target, int anchor) {
    SimilarityBatch b;
    b.S_t = scores[target];
    b.S_a = scores[anchor];
    return loss_rm(b, cfg.margins);
  };
  REQUIRE(results[1].history.front().loss_boo ==
          Catch::Approx(boost_against(1, 0)).margin(1e-9));
  REQUIRE(results[2].history.front().loss_boo ==
          Catch::Approx(0.5 * (boost_against(2, 0) + boost_against(2, 1))).margin(1e-9));

  TrainConfig bad = cfg;
  bad.branches = 1;
  REQUIRE_THROWS_AS(train_oss(bad, ds), shape_error);
}

TEST_CASE("momentum training starts from an identity anchor") {
  PairDataset ds = generate(tiny_spec(), 76);
  TrainConfig cfg = tiny_train_config();
  cfg.scenario = Scenario::mss;
  cfg.epochs = 1;
  cfg.batch_size = 20;  // one step, so the epoch mean is that step's loss

  // With anchor == target the mined boosting losses pay exactly 2 * gamma * N.
  for (BoostVariant v : {BoostVariant::rm, BoostVariant::am}) {
    cfg.variant = v;
    TrainResult res = train_mss(cfg, ds);
    REQUIRE(res.history.front().loss_boo ==
            Catch::Approx(2.0 * cfg.margins.gamma * 20).margin(1e-9));
  }
}

TEST_CASE("momentum anchor follows the exact blend of the target trajectory") {
  PairDataset ds = generate(tiny_spec(), 77);
  TrainConfig cfg = tiny_train_config();
  cfg.scenario = Scenario::mss;
  cfg.variant = BoostVariant::rm;
  cfg.epochs = 2;
  cfg.batch_size = 10;
  cfg.beta0 = 0.99;

  std::vector<EncoderParams> targets, anchors;
  TrainHooks hooks;
  hooks.after_step = [&](long long, const EncoderParams& t, const EncoderParams& a) {
    targets.push_back(t);
    anchors.push_back(a);
  };
  train_mss(cfg, ds, hooks);
  REQUIRE(targets.size() == 4);  // 2 epochs x 2 batches

  TrainConfig init_cfg = cfg;
  init_cfg.epochs = 0;
  EncoderParams folded = train_mss(init_cfg, ds).best;  // anchor starts at the init

  BetaSchedule schedule;
  schedule.beta0 = cfg.beta0;
  schedule.total_steps = 4;
  for (size_t k = 0; k < targets.size(); ++k) {
    const double beta = schedule.at(static_cast<long long>(k));
    testutil::for_each_param_pair(folded, targets[k], [&](Matrix& a, const Matrix& t) {
      for (size_t i = 0; i < a.size(); ++i)
        a.raw()[i] = beta * a.raw()[i] + (1.0 - beta) * t.raw()[i];
    });
    REQUIRE(params_max_abs_diff(folded, anchors[k]) <= 1e-15);
  }
}

TEST_CASE("momentum coefficient one freezes the anchor at initialization") {
  PairDataset ds = generate(tiny_spec(), 78);
  TrainConfig cfg = tiny_train_config();
  cfg.scenario = Scenario::mss;
  cfg.variant = BoostVariant::rm;
  cfg.epochs = 2;
  cfg.beta0 = 1.0;

  TrainConfig init_cfg = cfg;
  init_cfg.epochs = 0;
  const EncoderParams init = train_mss(init_cfg, ds).best;

  bool anchors_frozen = true;
  bool target_moved = false;
  TrainHooks hooks;
  hooks.after_step = [&](long long, const EncoderParams& t, const EncoderParams& a) {
    anchors_frozen = anchors_frozen && params_max_abs_diff(a, init) == 0.0;
    target_moved = target_moved || params_max_abs_diff(t, init) > 0.0;
  };
  train_mss(cfg, ds, hooks);
  REQUIRE(anchors_frozen);
  REQUIRE(target_moved);
}

TEST_CASE("batch counting keeps fragments only when they hold a negative") {
  PairDataset ds20 = generate(tiny_spec(), 79);
  REQUIRE(detail::batches_per_epoch(ds20, Split::train, 8) == 3);   // 8 + 8 + 4
  REQUIRE(detail::batches_per_epoch(ds20, Split::train, 10) == 2);  // exact fit

  LatentSpec spec = tiny_spec();
  spec.train_images = 21;
  PairDataset ds21 = generate(spec, 79);
  REQUIRE(detail::batches_per_epoch(ds21, Split::train, 10) == 2);  // fragment of 1 dropped
}

TEST_CASE("train config validation rejects inconsistent settings") {
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 1;
  REQUIRE_THROWS_AS(cfg.validate(), shape_error);
  cfg = tiny_train_config();
  cfg.lr = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), shape_error);
  cfg = tiny_train_config();
  cfg.scenario = Scenario::oss;
  cfg.branches = 1;
  REQUIRE_THROWS_AS(cfg.validate(), shape_error);
  cfg = tiny_train_config();
  cfg.margins.alpha = 1.0;
  REQUIRE_THROWS_AS(cfg.validate(), shape_error);

  REQUIRE(cfg.lr_at_epoch(1) == tiny_train_config().lr);
  TrainConfig decay = tiny_train_config();
  decay.lr_decay_epoch = 2;
  REQUIRE(decay.lr_at_epoch(2) == decay.lr);
  REQUIRE(decay.lr_at_epoch(3) == Catch::Approx(decay.lr * 0.1).margin(1e-18));
}

TEST_CASE("scenario and variant names round-trip") {
  for (Scenario s : {Scenario::single, Scenario::oas, Scenario::oss, Scenario::mss})
    REQUIRE(scenario_from_string(to_string(s)) == s);
  for (BoostVariant v : {BoostVariant::none, BoostVariant::rs, BoostVariant::rm,
                         BoostVariant::as, BoostVariant::am, BoostVariant::rm_soft,
                         BoostVariant::am_soft})
    REQUIRE(boost_variant_from_string(to_string(v)) == v);
  REQUIRE_THROWS_AS(scenario_from_string("offline"), shape_error);
  REQUIRE_THROWS_AS(boost_variant_from_string("alpha"), shape_error);
}
