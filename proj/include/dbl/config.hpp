#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbl/cohort.hpp"
#include "dbl/data.hpp"
#include "dbl/encoders.hpp"
#include "dbl/losses.hpp"

namespace dbl {

// Configuration problems get their own type so the CLI can map them to a
// dedicated exit code.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// One JSON document drives every command. Unknown keys are rejected (typos
// must not silently fall back to defaults); the only required fields are the
// data recipe's degrees of freedom. Split sizes derive from `images` as
// 70% / 10% / 20% (train / val / test).
struct RunConfig {
  uint64_t seed = 1;
  std::string out_dir = "out";
  LatentSpec data;
  TrainConfig train;
  std::string anchor_path;  // oas only: checkpoint of the frozen anchor
  Split eval_split = Split::test;
  std::vector<uint64_t> seeds;  // optional sweep; empty means one run with `seed`
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::string& section,
                           const std::set<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw config_error("unknown key '" + it.key() + "' in " + section);
}

template <typename T>
T require(const nlohmann::json& obj, const std::string& section, const std::string& key) {
  if (!obj.contains(key)) throw config_error("missing required key '" + key + "' in " + section);
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw config_error("bad value for '" + key + "' in " + section);
  }
}

template <typename T>
T optional(const nlohmann::json& obj, const std::string& section, const std::string& key,
           T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw config_error("bad value for '" + key + "' in " + section);
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw config_error("config root must be a JSON object");
  detail::reject_unknown(j, "config root",
                         {"seed", "seeds", "out_dir", "data", "train", "margins", "soft",
                          "encoder", "eval"});
  RunConfig cfg;
  cfg.seed = detail::optional<uint64_t>(j, "config root", "seed", 1);
  cfg.out_dir = detail::optional<std::string>(j, "config root", "out_dir", "out");
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    if (!s.is_array() || s.empty())
      throw config_error("'seeds' must be a non-empty array of integers");
    try {
      cfg.seeds = s.get<std::vector<uint64_t>>();
    } catch (const nlohmann::json::exception&) {
      throw config_error("'seeds' must be a non-empty array of integers");
    }
  }

  if (!j.contains("data") || !j.at("data").is_object())
    throw config_error("missing required section 'data'");
  const auto& d = j.at("data");
  detail::reject_unknown(d, "'data'",
                         {"latent_dim", "images", "sigma", "captions_per_image", "image_dim",
                          "text_dim", "image_tokens", "text_tokens"});
  cfg.data.d_z = detail::require<int>(d, "'data'", "latent_dim");
  const int images = detail::require<int>(d, "'data'", "images");
  cfg.data.sigma = detail::require<double>(d, "'data'", "sigma");
  if (images < 10) throw config_error("'images' must be at least 10");
  cfg.data.train_images = images * 7 / 10;
  cfg.data.val_images = images / 10;
  cfg.data.test_images = images - cfg.data.train_images - cfg.data.val_images;
  cfg.data.captions_per_image = detail::optional<int>(d, "'data'", "captions_per_image", 5);
  cfg.data.d_img = detail::optional<int>(d, "'data'", "image_dim", 16);
  cfg.data.d_txt = detail::optional<int>(d, "'data'", "text_dim", 16);
  cfg.data.image_tokens = detail::optional<int>(d, "'data'", "image_tokens", 4);
  cfg.data.text_tokens = detail::optional<int>(d, "'data'", "text_tokens", 4);
  try {
    cfg.data.validate();
  } catch (const shape_error& e) {
    throw config_error(std::string("bad 'data' section: ") + e.what());
  }

  cfg.train.seed = cfg.seed;
  cfg.train.dims.d_img = cfg.data.d_img;
  cfg.train.dims.d_txt = cfg.data.d_txt;

  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (!t.is_object()) throw config_error("'train' must be an object");
    detail::reject_unknown(t, "'train'",
                           {"scenario", "variant", "raw_loss", "branches", "epochs",
                            "batch_size", "lr", "lr_decay_epoch", "lr_decay_factor", "beta0",
                            "anchor"});
    try {
      cfg.train.scenario = scenario_from_string(
          detail::optional<std::string>(t, "'train'", "scenario", "single"));
      cfg.train.variant = boost_variant_from_string(
          detail::optional<std::string>(t, "'train'", "variant", "none"));
      const std::string raw = detail::optional<std::string>(t, "'train'", "raw_loss", "max");
      if (raw != "max" && raw != "sum") throw config_error("'raw_loss' must be max or sum");
      cfg.train.raw = raw == "max" ? RawLoss::max : RawLoss::sum;
    } catch (const shape_error& e) {
      throw config_error(std::string("bad 'train' section: ") + e.what());
    }
    cfg.train.branches = detail::optional<int>(t, "'train'", "branches", 2);
    cfg.train.epochs = detail::optional<int>(t, "'train'", "epochs", 40);
    cfg.train.batch_size = detail::optional<int>(t, "'train'", "batch_size", 32);
    cfg.train.lr = detail::optional<double>(t, "'train'", "lr", 2e-4);
    cfg.train.lr_decay_epoch = detail::optional<int>(t, "'train'", "lr_decay_epoch", 30);
    cfg.train.lr_decay_factor = detail::optional<double>(t, "'train'", "lr_decay_factor", 0.1);
    cfg.train.beta0 = detail::optional<double>(t, "'train'", "beta0", 0.99995);
    cfg.anchor_path = detail::optional<std::string>(t, "'train'", "anchor", "");
  }

  if (j.contains("margins")) {
    const auto& m = j.at("margins");
    if (!m.is_object()) throw config_error("'margins' must be an object");
    detail::reject_unknown(m, "'margins'", {"gamma", "alpha"});
    cfg.train.margins.gamma = detail::optional<double>(m, "'margins'", "gamma", 0.2);
    cfg.train.margins.alpha = detail::optional<double>(m, "'margins'", "alpha", 0.5);
  }

  if (j.contains("soft")) {
    const auto& s = j.at("soft");
    if (!s.is_object()) throw config_error("'soft' must be an object");
    detail::reject_unknown(s, "'soft'", {"d_x", "d_y"});
    cfg.train.soft.d_x = detail::optional<double>(s, "'soft'", "d_x", 2.0);
    cfg.train.soft.d_y = detail::optional<double>(s, "'soft'", "d_y", 1.0);
  }

  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    if (!e.is_object()) throw config_error("'encoder' must be an object");
    detail::reject_unknown(e, "'encoder'", {"mode", "hidden_dim", "align_dim", "lambda"});
    try {
      cfg.train.mode = encoder_mode_from_string(
          detail::optional<std::string>(e, "'encoder'", "mode", "pooled"));
    } catch (const shape_error& ex) {
      throw config_error(std::string("bad 'encoder' section: ") + ex.what());
    }
    cfg.train.dims.h = detail::optional<int>(e, "'encoder'", "hidden_dim", 16);
    cfg.train.dims.d_a = detail::optional<int>(e, "'encoder'", "align_dim", 8);
    cfg.train.lambda = detail::optional<double>(e, "'encoder'", "lambda", 9.0);
    if (cfg.train.lambda <= 0.0) throw config_error("'lambda' must be positive");
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    if (!e.is_object()) throw config_error("'eval' must be an object");
    detail::reject_unknown(e, "'eval'", {"split", "md_mode"});
    try {
      cfg.eval_split =
          split_from_string(detail::optional<std::string>(e, "'eval'", "split", "test"));
    } catch (const shape_error& ex) {
      throw config_error(std::string("bad 'eval' section: ") + ex.what());
    }
    const std::string md = detail::optional<std::string>(e, "'eval'", "md_mode", "mean");
    if (md == "mean")
      cfg.train.md_mode = MdMode::mean_difference;
    else if (md == "hardest")
      cfg.train.md_mode = MdMode::hardest_negative;
    else
      throw config_error("'md_mode' must be mean or hardest");
  }

  try {
    cfg.train.margins.validate();
    cfg.train.validate();
  } catch (const shape_error& e) {
    throw config_error(std::string("bad training configuration: ") + e.what());
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("bad JSON in '" + path + "': " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace dbl
