#pragma once

// Experiment protocols on synthetic or cached data: in-domain 6-fold runs,
// approach/recede domain transfer with fine-tuning, and the four-way ablation.

#include "uwloc/learn.hpp"
#include "uwloc/run_config.hpp"

#include <string>
#include <vector>

namespace uwloc {

/// Synthesizes `s`, segments, labels and featurizes it. Waveform-mode AGC is
/// applied to the segments here; feature-mode AGC is left to training.
std::vector<FeaturePair> synth_features(const Scenario& s, const FeatureConfig& features, const AgcSetting& agc);

/// MAE of predicting the training-set mean range for every test segment.
double mean_baseline_mae(std::span<const FeaturePair> train_set, std::span<const FeaturePair> test_set);

NetConfig net_for(const NetConfig& base, std::span<const FeaturePair> data);

struct InDomainResult {
  TrainResult trained;
  MetricsReport test;
  double baseline_mae_km = 0.0;
};

/// Default fold split: train on folds 0-3, keep the best fold-4 checkpoint,
/// report on fold 5.
InDomainResult run_in_domain(std::span<const FeaturePair> data, const NetConfig& net, const Hyper& h,
                             const AgcSetting& agc);

struct DomainSplit {
  std::vector<FeaturePair> source;  // approaching leg
  std::vector<FeaturePair> target;  // receding leg
};

/// One continuous track: the source approaches for `approach_min` minutes,
/// then turns and recedes for the rest of `base.duration_min`. Segment
/// indices run on across the turn.
DomainSplit synth_doppler_split(const Scenario& base, int approach_min, const FeatureConfig& features,
                                const AgcSetting& agc);

struct AdaptationResult {
  double zero_shot_mae = 0.0;
  double finetune15_mae = 0.0;
  double finetune30_mae = 0.0;
  double scratch15_mae = 0.0;
};

/// Pretrains on the source leg (folds 0-4 train, fold 5 validation), then
/// evaluates zero-shot, pretrained+15 %, pretrained+30 % and scratch+15 % on
/// the target leg remainders.
AdaptationResult run_domain_adaptation(const DomainSplit& split, const NetConfig& net, const Hyper& h,
                                       const AgcSetting& agc, int finetune_epochs, std::uint64_t seed);

enum class Variant { no_gcc, no_conformer, no_agc, full };

std::string to_string(Variant v);
inline constexpr Variant kAblationVariants[] = {Variant::no_gcc, Variant::no_conformer, Variant::no_agc,
                                                Variant::full};

struct AblationRow {
  Variant variant = Variant::full;
  bool gcc_branch = true;
  bool conformer = true;
  bool agc = true;
  std::int64_t params = 0;
  double mae_km = 0.0;
  double mse_km2 = 0.0;
  double pcl5_percent = 0.0;
};

/// Rebuilds the network without the dropped component and runs the in-domain
/// protocol under the same seeds and budget. Needs feature-level or no AGC.
AblationRow run_ablation_variant(std::span<const FeaturePair> data, const NetConfig& net, const Hyper& h,
                                 const AgcSetting& agc, Variant v);

std::vector<AblationRow> run_ablation(std::span<const FeaturePair> data, const NetConfig& net, const Hyper& h,
                                      const AgcSetting& agc);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace uwloc
