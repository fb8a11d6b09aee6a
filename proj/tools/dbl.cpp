// Command-line front end: dataset generation, training scenarios, retrieval
// evaluation, invariant checks, and histogram export, all driven by one JSON
// config and one master seed.
//
// Exit codes: 0 success, 1 property failure, 2 config error, 3 missing
// dependency artifact, 4 shape mismatch.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "dbl/cohort.hpp"
#include "dbl/config.hpp"
#include "dbl/data.hpp"
#include "dbl/encoders.hpp"
#include "dbl/eval.hpp"
#include "dbl/properties.hpp"

namespace fs = std::filesystem;

namespace {

// A required input file is absent: distinct from config and shape problems.
struct artifact_error : std::runtime_error {
  explicit artifact_error(const std::string& what) : std::runtime_error(what) {}
};

struct CliOptions {
  std::string config_path;
  std::string out_override;
  uint64_t seed_override = 0;
  bool seed_set = false;
  int jobs = 1;
};

dbl::RunConfig load_config(const CliOptions& opt) {
  if (opt.config_path.empty()) throw dbl::config_error("--config is required");
  dbl::RunConfig cfg = dbl::load_run_config(opt.config_path);
  if (!opt.out_override.empty()) cfg.out_dir = opt.out_override;
  if (opt.seed_set) {
    cfg.seed = opt.seed_override;
    cfg.train.seed = opt.seed_override;
  }
  return cfg;
}

std::string dataset_path(const dbl::RunConfig& cfg) { return cfg.out_dir + "/dataset.json"; }
std::string checkpoint_path(const std::string& dir) { return dir + "/checkpoint.ckpt"; }

dbl::PairDataset load_required_dataset(const dbl::RunConfig& cfg) {
  const std::string path = dataset_path(cfg);
  if (!fs::exists(path))
    throw artifact_error("dataset '" + path + "' not found (run `gen` first)");
  dbl::PairDataset ds = dbl::load_dataset(path);
  const dbl::LatentSpec& a = ds.spec;
  const dbl::LatentSpec& b = cfg.data;
  if (a.d_z != b.d_z || a.d_img != b.d_img || a.d_txt != b.d_txt ||
      a.captions_per_image != b.captions_per_image || a.sigma != b.sigma ||
      a.image_tokens != b.image_tokens || a.text_tokens != b.text_tokens ||
      a.train_images != b.train_images || a.val_images != b.val_images ||
      a.test_images != b.test_images)
    throw dbl::shape_error("dataset '" + path + "' disagrees with the config's data section");
  return ds;
}

dbl::EncoderParams load_required_checkpoint(const std::string& path,
                                            const dbl::PairDataset& ds) {
  if (!fs::exists(path)) throw artifact_error("checkpoint '" + path + "' not found");
  dbl::Checkpoint ckpt = dbl::load_checkpoint(path);
  const dbl::EncoderDims d = ckpt.params.dims();
  if (d.d_img != ds.spec.d_img || d.d_txt != ds.spec.d_txt)
    throw dbl::shape_error("checkpoint '" + path + "' token widths do not fit the dataset");
  return ckpt.params;
}

int cmd_gen(const CliOptions& opt) {
  dbl::RunConfig cfg = load_config(opt);
  fs::create_directories(cfg.out_dir);
  dbl::PairDataset ds = dbl::generate(cfg.data, cfg.seed);
  dbl::save_dataset(dataset_path(cfg), ds);
  std::cout << "dataset " << dataset_path(cfg) << " checksum " << dbl::dataset_checksum(ds)
            << "\n";
  return 0;
}

void write_history(const std::string& path, const std::vector<dbl::HistoryRow>& rows) {
  std::string out;
  for (const auto& row : rows) out += dbl::history_json_line(row) + "\n";
  dbl::write_text_file(path, out);
}

// One full training run into `dir`; everything it writes is a pure function
// of (config, dataset, seed).
void run_training(const dbl::RunConfig& cfg, const dbl::PairDataset& ds,
                  const std::string& dir, uint64_t seed, std::string& summary) {
  fs::create_directories(dir);
  dbl::TrainConfig tc = cfg.train;
  tc.seed = seed;
  dbl::TrainResult res;
  switch (tc.scenario) {
    case dbl::Scenario::single:
      res = dbl::train_single(tc, ds);
      break;
    case dbl::Scenario::oas: {
      if (cfg.anchor_path.empty())
        throw artifact_error("scenario oas needs train.anchor (a checkpoint path)");
      res = dbl::train_oas(tc, ds, load_required_checkpoint(cfg.anchor_path, ds));
      break;
    }
    case dbl::Scenario::oss: {
      std::vector<dbl::TrainResult> branches = dbl::train_oss(tc, ds);
      for (size_t m = 0; m + 1 < branches.size(); ++m)
        write_history(dir + "/history_branch" + std::to_string(m) + ".jsonl",
                      branches[m].history);
      res = std::move(branches.back());
      break;
    }
    case dbl::Scenario::mss:
      res = dbl::train_mss(tc, ds);
      break;
  }
  dbl::save_checkpoint(checkpoint_path(dir), res.best, seed);
  write_history(dir + "/history.jsonl", res.history);
  summary = "seed " + std::to_string(seed) + ": best epoch " + std::to_string(res.best_epoch) +
            " val rsum " + nlohmann::json(res.best_rsum).dump();
}

int cmd_train(const CliOptions& opt) {
  dbl::RunConfig cfg = load_config(opt);
  dbl::PairDataset ds = load_required_dataset(cfg);
  if (cfg.seeds.empty()) {
    std::string summary;
    run_training(cfg, ds, cfg.out_dir, cfg.train.seed, summary);
    std::cout << summary << "\n";
    return 0;
  }
  // Seed sweep: independent runs in per-seed directories. --jobs only adds
  // parallelism; each run's outputs depend on its own seed alone.
  std::vector<std::string> summaries(cfg.seeds.size());
  std::vector<std::exception_ptr> errors(cfg.seeds.size());
  std::mutex next_mutex;
  size_t next = 0;
  auto worker = [&]() {
    for (;;) {
      size_t i;
      {
        std::lock_guard<std::mutex> lock(next_mutex);
        if (next >= cfg.seeds.size()) return;
        i = next++;
      }
      try {
        run_training(cfg, ds, cfg.out_dir + "/seed" + std::to_string(cfg.seeds[i]),
                     cfg.seeds[i], summaries[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(opt.jobs, static_cast<int>(cfg.seeds.size())));
  std::vector<std::thread> pool;
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (size_t i = 0; i < cfg.seeds.size(); ++i)
    if (errors[i]) std::rethrow_exception(errors[i]);
  for (const auto& s : summaries) std::cout << s << "\n";
  return 0;
}

int cmd_eval(const CliOptions& opt, bool histogram_only) {
  dbl::RunConfig cfg = load_config(opt);
  dbl::PairDataset ds = load_required_dataset(cfg);
  dbl::EncoderParams params = load_required_checkpoint(checkpoint_path(cfg.out_dir), ds);
  dbl::SplitView view = dbl::split_view(ds, cfg.eval_split);
  dbl::Matrix s = dbl::score_gallery(params, view.image_tokens, view.text_tokens);
  dbl::write_text_file(cfg.out_dir + "/hist.csv",
                       dbl::histogram_csv(dbl::histogram(s, view.captions_per_image)));
  if (histogram_only) {
    std::cout << "hist " << cfg.out_dir << "/hist.csv\n";
    return 0;
  }
  dbl::RetrievalReport r = dbl::report(s, view.captions_per_image, cfg.train.md_mode);
  dbl::write_text_file(cfg.out_dir + "/report.json", dbl::report_json(r).dump(2) + "\n");
  std::cout << "rsum " << nlohmann::json(r.rsum).dump() << "\n";
  return 0;
}

int cmd_check(const CliOptions& opt) {
  const uint64_t seed = opt.seed_set ? opt.seed_override : 1;
  const auto results = dbl::run_properties(seed);
  int failures = 0;
  for (const auto& r : results) {
    if (r.passed) {
      std::cout << "PASS " << r.name << "\n";
    } else {
      ++failures;
      std::cout << "FAIL " << r.name << ": " << r.detail << "\n";
    }
  }
  std::cout << (failures == 0 ? "all properties passed" : "property failures: ")
            << (failures == 0 ? "" : std::to_string(failures)) << "\n";
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"paired-retrieval training workbench"};
  app.require_subcommand(1);
  CliOptions opt;

  auto add_common = [&opt](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", opt.config_path, "JSON config path");
    if (config_required) c->required();
    sub->add_option("--out", opt.out_override, "output directory (overrides config)");
    sub->add_option("--seed", opt.seed_override, "master seed (overrides config)")
        ->each([&opt](const std::string&) { opt.seed_set = true; });
    sub->add_option("--jobs", opt.jobs, "parallel workers for seed sweeps")
        ->check(CLI::PositiveNumber);
  };

  add_common(app.add_subcommand("gen", "generate the synthetic dataset"), true);
  add_common(app.add_subcommand("train", "train per the config's scenario"), true);
  add_common(app.add_subcommand("eval", "score a checkpoint on a split"), true);
  add_common(app.add_subcommand("check", "run the property suite"), false);
  add_common(app.add_subcommand("hist", "export the similarity histogram"), true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand("gen")) return cmd_gen(opt);
    if (app.got_subcommand("train")) return cmd_train(opt);
    if (app.got_subcommand("eval")) return cmd_eval(opt, false);
    if (app.got_subcommand("hist")) return cmd_eval(opt, true);
    if (app.got_subcommand("check")) return cmd_check(opt);
  } catch (const dbl::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const artifact_error& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const dbl::shape_error& e) {
    std::cerr << "shape mismatch: " << e.what() << "\n";
    return 4;
  } catch (const dbl::numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
