// mfpam: synthesize data, train, run and evaluate the pitch estimator.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mfpam/io.hpp"
#include "mfpam/yin.hpp"

namespace fs = std::filesystem;
using namespace mfpam;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Flags shared by every command. Values start at the built-in defaults so
// --help shows them; they only override the config file when given.
struct Shared {
  std::string config;
  std::uint64_t seed = 0;
  std::string variant = "mfpam";
  std::vector<std::string> ablate;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* variant_opt = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "Config file (key = value with sections)");
    seed_opt = cmd->add_option("--seed", seed, "Seed override");
    variant_opt = cmd->add_option("--variant", variant, "Model variant")
                      ->check(CLI::IsMember({"mfpam", "mfpam-s"}));
    cmd->add_option("--ablate", ablate, "Ablation, repeatable")
        ->check(CLI::IsMember({"no_pnp", "no_snake", "no_multi_level", "no_bifpn"}))
        ->take_all()
        ->allow_extra_args(false);
  }
};

struct PathCheck {
  static void readable_file(const std::string& p, const char* what) {
    if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " not found: " + p);
  }
  static void readable_dir(const std::string& p, const char* what) {
    if (!fs::is_directory(p)) throw UsageError(std::string(what) + " is not a directory: " + p);
  }
  static void writable_dir(const std::string& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) throw UsageError("cannot create directory " + p);
    const auto probe = fs::path(p) / ".mfpam_write_probe";
    {
      std::ofstream f(probe);
      if (!f) throw UsageError("directory not writable: " + p);
    }
    fs::remove(probe, ec);
  }
  static void writable_file(const std::string& p) {
    auto parent = fs::path(p).parent_path();
    if (parent.empty()) parent = ".";
    if (!fs::is_directory(parent)) throw UsageError("output directory does not exist: " + parent.string());
  }
};

// Config file problems are usage errors, not runtime failures.
RunConfig load_config(const Shared& sh) {
  if (sh.config.empty()) return RunConfig{};
  PathCheck::readable_file(sh.config, "config");
  try {
    return RunConfig::load(sh.config);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
}

void apply_model_flags(const Shared& sh, ModelConfig& m) {
  if (sh.variant_opt->count()) m.lstm_enabled = sh.variant != "mfpam-s";
  for (const auto& a : sh.ablate) m.apply_ablation(a);
  m.validate();
}

std::vector<DatasetItem> regroup_by_snr(std::vector<DatasetItem> items) {
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    // clean sorts last
    if (a.snr_db.has_value() != b.snr_db.has_value()) return a.snr_db.has_value();
    return a.snr_db.value_or(0) < b.snr_db.value_or(0);
  });
  for (auto& it : items) it.condition = snr_tag(it.snr_db);
  return items;
}

// Test sets for --per-snr when no directory is given: the [data] section once
// per SNR plus once clean, sharing clip content.
std::vector<DatasetItem> per_snr_sets(const DatasetSpec& base) {
  std::vector<DatasetItem> all;
  for (double snr : {-5.0, 0.0, 5.0, 10.0, 15.0}) {
    auto s = base;
    s.snr_choices = {snr};
    for (auto& it : make_dataset(s)) all.push_back(std::move(it));
  }
  auto s = base;
  s.snr_choices.clear();
  for (auto& it : make_dataset(s)) all.push_back(std::move(it));
  return regroup_by_snr(std::move(all));
}

void print_report(const eval::EvalReport& rep, const std::string& csv_path) {
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << rep.table();
  if (!csv_path.empty()) write_file(csv_path, rep.csv());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MF-PAM pitch estimation: synthesize, train, infer, evaluate"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  const RunConfig defaults;

  // synth
  Shared synth_sh;
  std::string synth_out;
  std::size_t n_clips = defaults.data.n_clips;
  auto* synth = app.add_subcommand("synth", "Write a synthetic labelled dataset");
  synth_sh.attach(synth);
  synth->add_option("--out", synth_out, "Output directory")->required();
  auto* n_clips_opt = synth->add_option("--n-clips", n_clips, "Number of clips");

  // train
  Shared train_sh;
  std::string train_data, train_out, train_eval;
  auto tc = defaults.train;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset directory");
  train_sh.attach(train_cmd);
  train_cmd->add_option("--data", train_data, "Dataset directory with manifest.csv")->required();
  train_cmd->add_option("--out", train_out, "Output directory for checkpoints and log")->required();
  train_cmd->add_option("--eval-data", train_eval, "Held-out dataset directory for eval records");
  auto* steps_opt = train_cmd->add_option("--max-steps", tc.max_steps, "Optimizer steps");
  auto* lr_opt = train_cmd->add_option("--lr", tc.learning_rate, "Adam learning rate");
  auto* bs_opt = train_cmd->add_option("--batch-size", tc.batch_size, "Chunks per step");
  auto* ee_opt = train_cmd->add_option("--eval-every", tc.eval_every, "Steps between eval records, 0 off");
  auto* ce_opt =
      train_cmd->add_option("--checkpoint-every", tc.checkpoint_every, "Steps between checkpoints, 0 final only");

  // infer
  Shared infer_sh;
  std::string infer_ckpt, infer_wav, infer_out, infer_post;
  double infer_thr = pitch::kDefaultVoicingThreshold;
  auto* infer = app.add_subcommand("infer", "Estimate a pitch trajectory for a WAV file");
  infer_sh.attach(infer);
  infer->add_option("--checkpoint", infer_ckpt, "Model checkpoint")->required();
  infer->add_option("--wav", infer_wav, "16 kHz mono PCM16 input")->required();
  infer->add_option("--out", infer_out, "Trajectory CSV output")->required();
  infer->add_option("--posterior", infer_post, "Also write the posteriorgram CSV here");
  infer->add_option("--threshold", infer_thr, "Voicing threshold on the peak activation");

  // eval
  Shared eval_sh;
  std::string ev_est, ev_ref, ev_ckpt, ev_baseline, ev_data, ev_csv;
  double ev_thr = pitch::kDefaultVoicingThreshold;
  bool per_snr = false;
  auto* ev = app.add_subcommand("eval", "Score estimates against references");
  eval_sh.attach(ev);
  ev->add_option("--est", ev_est, "Estimated trajectory CSV");
  ev->add_option("--ref", ev_ref, "Reference trajectory CSV");
  ev->add_option("--checkpoint", ev_ckpt, "Evaluate this model");
  ev->add_option("--baseline", ev_baseline, "Evaluate a classical tracker instead")
      ->check(CLI::IsMember({"yin"}));
  ev->add_option("--data", ev_data, "Dataset directory to evaluate on");
  ev->add_flag("--per-snr", per_snr,
               "Group rows by SNR; without --data, synthesize sets at -5,0,5,10,15 dB and clean");
  ev->add_option("--threshold", ev_thr, "Voicing threshold on the peak activation");
  ev->add_option("--csv", ev_csv, "Write the report as CSV");

  // params
  Shared params_sh;
  auto* params = app.add_subcommand("params", "Print parameter counts");
  params_sh.attach(params);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) {
      auto rc = load_config(synth_sh);
      apply_model_flags(synth_sh, rc.model);
      if (synth_sh.seed_opt->count()) rc.data.seed = synth_sh.seed;
      if (n_clips_opt->count()) rc.data.n_clips = n_clips;
      auto spec = rc.dataset();
      spec.validate();
      PathCheck::writable_dir(synth_out);
      write_dataset(synth_out, make_dataset(spec));
      std::cout << "wrote " << spec.n_clips << " clips to " << synth_out << '\n';
      return 0;
    }

    if (*train_cmd) {
      auto rc = load_config(train_sh);
      apply_model_flags(train_sh, rc.model);
      auto& t = rc.train;
      if (train_sh.seed_opt->count()) t.seed = train_sh.seed;
      if (steps_opt->count()) t.max_steps = tc.max_steps;
      if (lr_opt->count()) t.learning_rate = tc.learning_rate;
      if (bs_opt->count()) t.batch_size = tc.batch_size;
      if (ee_opt->count()) t.eval_every = tc.eval_every;
      if (ce_opt->count()) t.checkpoint_every = tc.checkpoint_every;
      t.validate();
      PathCheck::readable_dir(train_data, "--data");
      PathCheck::readable_file((fs::path(train_data) / "manifest.csv").string(), "manifest");
      if (!train_eval.empty()) PathCheck::readable_dir(train_eval, "--eval-data");
      PathCheck::writable_dir(train_out);

      MfPam<float> model(rc.model, t.seed);
      auto examples = prepare_examples(model, read_dataset(train_data));
      std::optional<std::vector<TrainExample<float>>> held;
      if (!train_eval.empty()) held = prepare_examples(model, read_dataset(train_eval));
      write_file((fs::path(train_out) / "model.ini").string(), rc.model.to_text());
      auto res = train(model, t, examples,
                       {.out_dir = train_out,
                        .on_log = [](const std::string& line) { std::cerr << line << '\n'; }},
                       held ? &*held : nullptr);
      std::printf("steps %zu  final loss %.6f\n", t.max_steps, res.final_loss);
      if (res.final_metrics)
        std::printf("%s RPA %.2f  RCA %.2f  MAE %.2f Hz\n", held ? "held-out" : "train",
                    res.final_metrics->rpa(), res.final_metrics->rca(), res.final_metrics->mae());
      std::printf("checkpoint %s\n", (fs::path(train_out) / "final.ckpt").c_str());
      return 0;
    }

    if (*infer) {
      PathCheck::readable_file(infer_ckpt, "--checkpoint");
      PathCheck::readable_file(infer_wav, "--wav");
      PathCheck::writable_file(infer_out);
      if (!infer_post.empty()) PathCheck::writable_file(infer_post);
      auto model = load_checkpoint<float>(infer_ckpt);
      auto r = infer_clip(model, load_wav(infer_wav), infer_thr);
      write_trajectory(infer_out, r.trajectory);
      if (!infer_post.empty())
        write_file(infer_post, posteriorgram_csv(r.posteriorgram, r.trajectory.hop_sec,
                                                 r.trajectory.offset_sec));
      return 0;
    }

    if (*ev) {
      const bool traj_mode = !ev_est.empty() || !ev_ref.empty();
      const bool model_mode = !ev_ckpt.empty() || !ev_baseline.empty();
      if (traj_mode == model_mode)
        throw UsageError("eval: give either --est/--ref or one of --checkpoint/--baseline");
      if (!ev_csv.empty()) PathCheck::writable_file(ev_csv);

      if (traj_mode) {
        if (ev_est.empty() || ev_ref.empty()) throw UsageError("eval: --est and --ref go together");
        PathCheck::readable_file(ev_est, "--est");
        PathCheck::readable_file(ev_ref, "--ref");
        const auto ref = read_trajectory(ev_ref);
        const auto est = eval::align_to(read_trajectory(ev_est), ref);
        print_report(eval::aggregate({{"all", est, ref}}), ev_csv);
        return 0;
      }

      if (!ev_ckpt.empty() && !ev_baseline.empty())
        throw UsageError("eval: --checkpoint and --baseline are exclusive");
      auto rc = load_config(eval_sh);
      if (eval_sh.seed_opt->count()) rc.data.seed = eval_sh.seed;
      if (!ev_ckpt.empty()) PathCheck::readable_file(ev_ckpt, "--checkpoint");
      if (!ev_data.empty()) PathCheck::readable_dir(ev_data, "--data");
      if (ev_data.empty() && !per_snr) throw UsageError("eval: --data is required without --per-snr");

      std::optional<MfPam<float>> model;
      if (!ev_ckpt.empty()) {
        model = load_checkpoint<float>(ev_ckpt);
        rc.model = model->config();
      }
      std::vector<DatasetItem> items;
      if (!ev_data.empty()) {
        items = read_dataset(ev_data);
        if (per_snr) items = regroup_by_snr(std::move(items));
      } else {
        items = per_snr_sets(rc.dataset());
      }

      std::vector<eval::LabelledPair> pairs;
      std::vector<std::string> labels;
      for (const auto& it : items) {
        PitchTrajectory est = model ? infer_clip(*model, it.clip, ev_thr).trajectory
                                    : eval::align_to(yin::track(it.clip), it.labels);
        if (est.size() != it.labels.size()) est = eval::align_to(est, it.labels);
        pairs.push_back({it.condition, est, it.labels});
        if (std::find(labels.begin(), labels.end(), it.condition) == labels.end())
          labels.push_back(it.condition);
      }
      if (labels.size() > 1) {
        const auto n = pairs.size();
        for (std::size_t i = 0; i < n; ++i) pairs.push_back({"all", pairs[i].est, pairs[i].ref});
      }
      print_report(eval::aggregate(pairs), ev_csv);
      return 0;
    }

    if (*params) {
      auto rc = load_config(params_sh);
      apply_model_flags(params_sh, rc.model);
      MfPam<float> model(rc.model);
      for (const auto& [name, n] : model.parameter_breakdown())
        std::printf("%-24s %10zu\n", name.c_str(), n);
      std::printf("%-24s %10zu\n", "total", model.parameter_count());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
