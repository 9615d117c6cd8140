#pragma once

// Fold assignment, metrics, Adam training and fine-tuning.

#include "uwloc/agc.hpp"
#include "uwloc/features.hpp"
#include "uwloc/net.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace uwloc {

struct Hyper {
  int batch_size = 32;
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 20;
  std::uint64_t seed = 0;
  bool shuffle = true;
};

void validate(const Hyper& h);

/// Where and how the gain layer is applied during training and evaluation.
struct AgcSetting {
  AgcMode mode = AgcMode::features;
  AgcParams params;
};

inline constexpr int kFolds = 6;

/// fold(i) = i mod 6. Throws usage_error for n < 6.
std::vector<int> assign_folds(Index n);

struct SplitScheme {
  std::vector<int> train{0, 1, 2, 3};
  std::vector<int> val{4};
  std::vector<int> test{5};
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Partitions positions 0..n-1 by fold. Throws usage_error if a fold appears
/// in more than one role or lies outside 0..5.
SplitIndices split(Index n, const SplitScheme& scheme = {});

std::vector<FeaturePair> gather(std::span<const FeaturePair> data, const std::vector<std::size_t>& positions);

double mse(std::span<const double> y, std::span<const double> yhat);
double mae(std::span<const double> y, std::span<const double> yhat);
/// Percentage of predictions whose relative error is at most 5 %.
double pcl5(std::span<const double> y, std::span<const double> yhat);

struct Prediction {
  std::uint32_t index = 0;
  double y_km = 0.0;
  double yhat_km = 0.0;
};

struct MetricsReport {
  double mae_km = 0.0;
  double mse_km2 = 0.0;
  double pcl5_percent = 0.0;
  std::vector<Prediction> predictions;

  static MetricsReport from_predictions(std::vector<Prediction> predictions);
};

struct HistoryRow {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  NetParams<float> best;
  std::vector<HistoryRow> history;
  int best_epoch = 0;
};

/// Adam with bias-corrected moments, one state slot per parameter tensor.
class Adam {
 public:
  explicit Adam(const Hyper& h) : h_(h) {}
  void step(ParamMap<float>& params, const ParamMap<float>& grads);
  std::int64_t steps() const { return t_; }

 private:
  Hyper h_;
  std::int64_t t_ = 0;
  std::map<std::string, VectorX<double>> m_, v_;
};

/// Copies `data` and applies the feature-level gain when the mode asks for it.
std::vector<FeaturePair> prepare_inputs(std::span<const FeaturePair> data, const AgcSetting& agc);

/// Mini-batch MSE training. Returns the parameters with the lowest
/// validation MSE, or those after the final epoch when `val` is empty.
TrainResult train(NetParams<float> params, std::span<const FeaturePair> train_set,
                  std::span<const FeaturePair> val_set, const Hyper& h, const AgcSetting& agc);

struct FinetuneOptions {
  double fraction = 0.0;
  int epochs = 0;  // 0 = max(1, h.epochs / 4)
  std::uint64_t seed = 0;
  bool any_fraction = false;
};

struct FinetuneResult {
  NetParams<float> params;
  std::vector<std::size_t> sampled;    // positions into the target set, ascending
  std::vector<std::size_t> remainder;  // evaluation positions, ascending
};

/// Positions of floor(fraction * n) segments drawn without replacement.
std::vector<std::size_t> sample_fraction(std::size_t n, double fraction, std::uint64_t seed);

FinetuneResult finetune(const NetParams<float>& pretrained, std::span<const FeaturePair> target, const Hyper& h,
                        const AgcSetting& agc, const FinetuneOptions& opt);

VectorX<float> predict_all(const NetParams<float>& params, std::span<const FeaturePair> data,
                           const AgcSetting& agc);

MetricsReport evaluate(const NetParams<float>& params, std::span<const FeaturePair> test_set,
                       const AgcSetting& agc);

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& history);

}  // namespace uwloc
