#include "uwloc/experiments.hpp"

#include "uwloc/error.hpp"
#include "uwloc/signal_io.hpp"

#include <cmath>
#include <fstream>

namespace uwloc {

std::vector<FeaturePair> synth_features(const Scenario& s, const FeatureConfig& features, const AgcSetting& agc) {
  const SynthOutput out = synth_towpath(s);
  auto segments = attach_labels(segment_clip(out.clip), out.labels);
  if (agc.mode == AgcMode::waveform) {
    for (auto& seg : segments) apply_agc(seg, agc.params);
  }
  return featurize_all(segments, features, s.sample_rate_hz);
}

double mean_baseline_mae(std::span<const FeaturePair> train_set, std::span<const FeaturePair> test_set) {
  if (train_set.empty() || test_set.empty()) throw data_error("baseline needs non-empty train and test sets");
  double mean = 0.0;
  for (const auto& f : train_set) mean += f.range_km;
  mean /= static_cast<double>(train_set.size());
  double sum = 0.0;
  for (const auto& f : test_set) sum += std::abs(f.range_km - mean);
  return sum / static_cast<double>(test_set.size());
}

NetConfig net_for(const NetConfig& base, std::span<const FeaturePair> data) {
  if (data.empty()) throw data_error("no segments");
  NetConfig cfg = base;
  cfg.input = input_shape_of(data.front());
  return cfg;
}

InDomainResult run_in_domain(std::span<const FeaturePair> data, const NetConfig& net, const Hyper& h,
                             const AgcSetting& agc) {
  const SplitIndices s = split(static_cast<Index>(data.size()));
  const auto train_set = gather(data, s.train);
  const auto val_set = gather(data, s.val);
  const auto test_set = gather(data, s.test);
  InDomainResult r;
  r.trained = train(build_model<float>(net_for(net, data)), train_set, val_set, h, agc);
  r.test = evaluate(r.trained.best, test_set, agc);
  r.baseline_mae_km = mean_baseline_mae(train_set, test_set);
  return r;
}

DomainSplit synth_doppler_split(const Scenario& base, int approach_min, const FeatureConfig& features,
                                const AgcSetting& agc) {
  if (approach_min <= 0 || approach_min >= base.duration_min) {
    throw usage_error("the approach leg must be shorter than the scenario");
  }
  const double speed = std::abs(base.source_speed_mps);
  const double turn_km = base.range_start_km - speed * 60.0 * approach_min / 1000.0;
  if (!(turn_km > 0.0)) throw usage_error("the approach leg passes through the receiver");

  Scenario approach = base;
  approach.duration_min = approach_min;
  approach.source_speed_mps = speed;
  approach.range_end_km = turn_km;

  Scenario recede = base;
  recede.duration_min = base.duration_min - approach_min;
  recede.source_speed_mps = -speed;
  recede.range_start_km = turn_km;
  recede.range_end_km = turn_km + speed * 60.0 * recede.duration_min / 1000.0;
  recede.seed = base.seed + 1;

  DomainSplit out;
  out.source = synth_features(approach, features, agc);
  out.target = synth_features(recede, features, agc);
  const auto offset = static_cast<std::uint32_t>(out.source.size());
  for (auto& f : out.target) f.index += offset;
  return out;
}

AdaptationResult run_domain_adaptation(const DomainSplit& split_data, const NetConfig& net, const Hyper& h,
                                       const AgcSetting& agc, int finetune_epochs, std::uint64_t seed) {
  const SplitScheme scheme{{0, 1, 2, 3, 4}, {5}, {}};
  const SplitIndices s = split(static_cast<Index>(split_data.source.size()), scheme);
  const NetConfig cfg = net_for(net, split_data.source);
  const NetParams<float> pretrained =
      train(build_model<float>(cfg), gather(split_data.source, s.train), gather(split_data.source, s.val), h, agc)
          .best;

  const std::span<const FeaturePair> target(split_data.target);
  auto mae_on_remainder = [&](const NetParams<float>& p, const std::vector<std::size_t>& remainder) {
    return evaluate(p, gather(target, remainder), agc).mae_km;
  };

  AdaptationResult r;
  FinetuneOptions opt;
  opt.epochs = finetune_epochs;
  opt.seed = seed;

  opt.fraction = 0.0;
  const auto zero = finetune(pretrained, target, h, agc, opt);
  r.zero_shot_mae = mae_on_remainder(zero.params, zero.remainder);

  opt.fraction = 0.15;
  const auto ft15 = finetune(pretrained, target, h, agc, opt);
  r.finetune15_mae = mae_on_remainder(ft15.params, ft15.remainder);

  const auto scratch15 = finetune(build_model<float>(cfg), target, h, agc, opt);
  r.scratch15_mae = mae_on_remainder(scratch15.params, scratch15.remainder);

  opt.fraction = 0.30;
  const auto ft30 = finetune(pretrained, target, h, agc, opt);
  r.finetune30_mae = mae_on_remainder(ft30.params, ft30.remainder);
  return r;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::no_gcc: return "no_gcc";
    case Variant::no_conformer: return "no_conformer";
    case Variant::no_agc: return "no_agc";
    case Variant::full: return "full";
  }
  return "full";
}

AblationRow run_ablation_variant(std::span<const FeaturePair> data, const NetConfig& net, const Hyper& h,
                                 const AgcSetting& agc, Variant v) {
  if (agc.mode == AgcMode::waveform) {
    throw usage_error("ablation runs on cached features and needs agc.mode features or off");
  }
  NetConfig cfg = net_for(net, data);
  AgcSetting variant_agc = agc;
  AblationRow row;
  row.variant = v;
  switch (v) {
    case Variant::no_gcc: cfg.use_gcc_branch = false; break;
    case Variant::no_conformer: cfg.conformer_blocks = 0; break;
    case Variant::no_agc: variant_agc.mode = AgcMode::off; break;
    case Variant::full: break;
  }
  row.gcc_branch = cfg.use_gcc_branch;
  row.conformer = cfg.conformer_blocks > 0;
  row.agc = variant_agc.mode != AgcMode::off;
  row.params = param_count(cfg);
  const InDomainResult r = run_in_domain(data, cfg, h, variant_agc);
  row.mae_km = r.test.mae_km;
  row.mse_km2 = r.test.mse_km2;
  row.pcl5_percent = r.test.pcl5_percent;
  return row;
}

std::vector<AblationRow> run_ablation(std::span<const FeaturePair> data, const NetConfig& net, const Hyper& h,
                                      const AgcSetting& agc) {
  std::vector<AblationRow> rows;
  for (Variant v : kAblationVariants) rows.push_back(run_ablation_variant(data, net, h, agc, v));
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path.string());
  out.precision(9);
  out << "variant,gcc_branch,conformer,agc,params,mae_km,mse_km2,pcl5_percent\n";
  for (const auto& r : rows) {
    out << to_string(r.variant) << ',' << r.gcc_branch << ',' << r.conformer << ',' << r.agc << ',' << r.params
        << ',' << r.mae_km << ',' << r.mse_km2 << ',' << r.pcl5_percent << '\n';
  }
}

}  // namespace uwloc
