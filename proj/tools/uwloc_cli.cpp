// Command-line frontend: synth | featurize | train | eval | finetune | ablate | report.

#include "uwloc/error.hpp"
#include "uwloc/experiments.hpp"
#include "uwloc/report.hpp"
#include "uwloc/run_config.hpp"
#include "uwloc/signal_io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace uwloc;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Start from a saved config.txt");
  cmd->add_option("--set", c.sets, "Override a config key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "Seed for scenario, init and shuffling");
  cmd->add_flag("--deterministic", c.deterministic, "Serialize all reductions");
  cmd->add_option("--out", c.out, "Output directory")->required();
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
  if (c.seed) {
    cfg.scenario.seed = *c.seed;
    cfg.net.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  apply_overrides(cfg, c.sets);
  validate(cfg);
  return cfg;
}

fs::path prepare_out(const Common& c, const RunConfig& cfg) {
  const fs::path dir(c.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw data_error("cannot create " + dir.string() + ": " + ec.message());
  save_run_config(dir / "config.txt", cfg);
  return dir;
}

std::vector<FeaturePair> load_features(const std::string& path) {
  auto data = read_feature_cache(path);
  if (data.empty()) throw data_error("feature cache " + path + " holds no segments");
  return data;
}

void write_checked(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path.string());
  out << text;
}

std::string single_line(std::string s) {
  for (char& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

int fail(const char* kind, int code, const std::string& message) {
  std::cerr << "error kind=" << kind << " message=\"" << single_line(message) << "\"\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acoustic range estimation: synthesis, features, training and evaluation"};
  app.require_subcommand(1);

  Common common;

  int minutes = 0;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic tow-path recording");
  add_common(synth, common);
  synth->add_option("--minutes", minutes, "Duration in minutes (overrides scenario.duration_min)");

  std::string audio, labels;
  auto* featurize = app.add_subcommand("featurize", "Segment, label and featurize a recording");
  add_common(featurize, common);
  featurize->add_option("--audio", audio, "clip.f32 (with .meta) or .wav")->required();
  featurize->add_option("--labels", labels, "Per-minute label CSV")->required();
  std::string cache_out;
  featurize->add_option("--cache", cache_out, "Feature cache path (default <out>/cache.acaf)");

  std::string features, checkpoint;
  auto* train_cmd = app.add_subcommand("train", "Train on folds 0-3, validate on 4, test on 5");
  add_common(train_cmd, common);
  train_cmd->add_option("--features,--cache", features, "Feature cache")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on every cached segment");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--features,--cache", features, "Feature cache")->required();

  double fraction = 0.0;
  bool any_fraction = false, scratch = false;
  auto* ft_cmd = app.add_subcommand("finetune", "Adapt a checkpoint with a fraction of target segments");
  add_common(ft_cmd, common);
  ft_cmd->add_option("--checkpoint", checkpoint, "Pretrained checkpoint")->required();
  ft_cmd->add_option("--features,--cache", features, "Target-domain feature cache")->required();
  ft_cmd->add_option("--fraction", fraction, "Share of target segments to train on (0, 0.15, 0.30)");
  ft_cmd->add_flag("--any-fraction", any_fraction, "Accept any fraction in [0, 1]");
  ft_cmd->add_flag("--scratch", scratch, "Start from a fresh initialization of the same network");

  auto* ablate = app.add_subcommand("ablate", "Run the four-way component ablation");
  add_common(ablate, common);
  ablate->add_option("--features,--cache", features, "Feature cache")->required();

  std::string metrics_path;
  auto* report = app.add_subcommand("report", "Rewrite report files from a metrics.json");
  add_common(report, common);
  report->add_option("--metrics", metrics_path, "metrics.json to re-emit")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 2, e.what());
  }

  try {
    if (common.deterministic) Eigen::setNbThreads(1);

    if (synth->parsed()) {
      RunConfig cfg = resolve(common);
      if (minutes > 0) cfg.scenario.duration_min = minutes;
      validate(cfg);
      const fs::path dir = prepare_out(common, cfg);
      const SynthOutput out = synth_towpath(resolved_scenario(cfg));
      write_raw(dir / "clip.f32", out.clip);
      write_label_csv(dir / "labels.csv", out.labels);
    } else if (featurize->parsed()) {
      const RunConfig cfg = resolve(common);
      const fs::path dir = prepare_out(common, cfg);
      const MultiChannelClip clip = load_multichannel_audio(audio);
      auto segments = attach_labels(segment_clip(clip), read_label_csv(labels));
      if (cfg.agc.mode == AgcMode::waveform) {
        for (auto& seg : segments) apply_agc(seg, cfg.agc.params);
      }
      const auto data = featurize_all(segments, cfg.features, clip.sample_rate_hz);
      write_feature_cache(cache_out.empty() ? dir / "cache.acaf" : fs::path(cache_out), data);
    } else if (train_cmd->parsed()) {
      const RunConfig cfg = resolve(common);
      const fs::path dir = prepare_out(common, cfg);
      const auto data = load_features(features);
      const InDomainResult r = run_in_domain(data, cfg.net, cfg.train, cfg.agc);
      write_checkpoint(dir / "checkpoint.acan", r.trained.best);
      write_history_csv(dir / "history.csv", r.trained.history);
      emit_report(r.test, dir);
    } else if (eval_cmd->parsed()) {
      const RunConfig cfg = resolve(common);
      const fs::path dir = prepare_out(common, cfg);
      const NetParams<float> p = read_checkpoint(checkpoint);
      const auto data = load_features(features);
      if (!(input_shape_of(data.front()) == p.config.input)) {
        throw data_error("feature shape does not match the checkpoint input shape");
      }
      emit_report(evaluate(p, data, cfg.agc), dir);
    } else if (ft_cmd->parsed()) {
      const RunConfig cfg = resolve(common);
      const fs::path dir = prepare_out(common, cfg);
      NetParams<float> start = read_checkpoint(checkpoint);
      if (scratch) start = build_model<float>(start.config);
      const auto target = load_features(features);
      FinetuneOptions opt;
      opt.fraction = fraction;
      opt.any_fraction = any_fraction;
      opt.epochs = cfg.finetune_epochs;
      opt.seed = cfg.train.seed;
      const FinetuneResult r = finetune(start, target, cfg.train, cfg.agc, opt);
      if (r.remainder.empty()) throw data_error("no target segments left for evaluation");
      write_checkpoint(dir / "checkpoint.acan", r.params);
      std::string sampled = "index\n";
      for (std::size_t i : r.sampled) sampled += std::to_string(target[i].index) + "\n";
      write_checked(dir / "sampled.csv", sampled);
      emit_report(evaluate(r.params, gather(target, r.remainder), cfg.agc), dir);
    } else if (ablate->parsed()) {
      const RunConfig cfg = resolve(common);
      const fs::path dir = prepare_out(common, cfg);
      const auto data = load_features(features);
      write_ablation_csv(dir / "ablation.csv", run_ablation(data, cfg.net, cfg.train, cfg.agc));
    } else if (report->parsed()) {
      const RunConfig cfg = resolve(common);
      const fs::path dir = prepare_out(common, cfg);
      const MetricsReport in = read_metrics_json(metrics_path);
      emit_report(MetricsReport::from_predictions(in.predictions), dir);
    }
  } catch (const Error& e) {
    switch (e.kind()) {
      case ErrorKind::usage: return fail("usage", 2, e.what());
      case ErrorKind::data: return fail("data", 3, e.what());
      case ErrorKind::numeric: return fail("numeric", 4, e.what());
    }
  } catch (const std::exception& e) {
    return fail("data", 3, e.what());
  }
  return 0;
}
