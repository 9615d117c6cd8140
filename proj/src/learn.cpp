#include "uwloc/learn.hpp"

#include "uwloc/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace uwloc {

namespace {

constexpr std::size_t kEvalBatch = 64;

void check_pair(std::span<const double> y, std::span<const double> yhat) {
  if (y.empty()) throw data_error("metric of an empty vector");
  if (y.size() != yhat.size()) throw data_error("metric inputs differ in length");
}

}  // namespace

void validate(const Hyper& h) {
  if (h.batch_size <= 0) throw usage_error("train.batch_size must be positive");
  if (!(h.lr >= 0.0) || !std::isfinite(h.lr)) throw usage_error("train.lr must be non-negative");
  if (h.epochs <= 0) throw usage_error("train.epochs must be positive");
  if (!(h.adam_beta1 >= 0.0 && h.adam_beta1 < 1.0) || !(h.adam_beta2 >= 0.0 && h.adam_beta2 < 1.0)) {
    throw usage_error("adam betas must lie in [0, 1)");
  }
  if (!(h.adam_eps > 0.0)) throw usage_error("train.adam_eps must be positive");
}

std::vector<int> assign_folds(Index n) {
  if (n < kFolds) throw usage_error("at least 6 segments are needed for 6 folds");
  std::vector<int> folds(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) folds[static_cast<std::size_t>(i)] = static_cast<int>(i % kFolds);
  return folds;
}

SplitIndices split(Index n, const SplitScheme& scheme) {
  std::vector<int> role(kFolds, -1);
  const std::vector<int>* groups[3] = {&scheme.train, &scheme.val, &scheme.test};
  for (int r = 0; r < 3; ++r) {
    for (int fold : *groups[r]) {
      if (fold < 0 || fold >= kFolds) throw usage_error("fold id " + std::to_string(fold) + " outside 0..5");
      if (role[static_cast<std::size_t>(fold)] != -1) {
        throw usage_error("fold " + std::to_string(fold) + " assigned to more than one role");
      }
      role[static_cast<std::size_t>(fold)] = r;
    }
  }
  const auto folds = assign_folds(n);
  SplitIndices out;
  std::vector<std::size_t>* targets[3] = {&out.train, &out.val, &out.test};
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const int r = role[static_cast<std::size_t>(folds[i])];
    if (r >= 0) targets[r]->push_back(i);
  }
  return out;
}

std::vector<FeaturePair> gather(std::span<const FeaturePair> data, const std::vector<std::size_t>& positions) {
  std::vector<FeaturePair> out;
  out.reserve(positions.size());
  for (std::size_t i : positions) {
    if (i >= data.size()) throw data_error("gather position out of range");
    out.push_back(data[i]);
  }
  return out;
}

double mse(std::span<const double> y, std::span<const double> yhat) {
  check_pair(y, yhat);
  const Eigen::Map<const VectorX<double>> a(y.data(), static_cast<Index>(y.size()));
  const Eigen::Map<const VectorX<double>> b(yhat.data(), static_cast<Index>(yhat.size()));
  return (a - b).squaredNorm() / static_cast<double>(y.size());
}

double mae(std::span<const double> y, std::span<const double> yhat) {
  check_pair(y, yhat);
  const Eigen::Map<const VectorX<double>> a(y.data(), static_cast<Index>(y.size()));
  const Eigen::Map<const VectorX<double>> b(yhat.data(), static_cast<Index>(yhat.size()));
  return (a - b).cwiseAbs().sum() / static_cast<double>(y.size());
}

double pcl5(std::span<const double> y, std::span<const double> yhat) {
  check_pair(y, yhat);
  std::size_t credible = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] > 0.0)) throw data_error("pcl5 needs positive ground-truth ranges");
    if (std::abs(y[i] - yhat[i]) / y[i] * 100.0 <= 5.0) ++credible;
  }
  return 100.0 * static_cast<double>(credible) / static_cast<double>(y.size());
}

MetricsReport MetricsReport::from_predictions(std::vector<Prediction> predictions) {
  if (predictions.empty()) throw data_error("report needs at least one prediction");
  std::vector<double> y, yhat;
  for (const auto& p : predictions) {
    y.push_back(p.y_km);
    yhat.push_back(p.yhat_km);
  }
  MetricsReport r;
  r.mae_km = mae(y, yhat);
  r.mse_km2 = mse(y, yhat);
  r.pcl5_percent = pcl5(y, yhat);
  r.predictions = std::move(predictions);
  return r;
}

void Adam::step(ParamMap<float>& params, const ParamMap<float>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(h_.adam_beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(h_.adam_beta2, static_cast<double>(t_));
  for (auto& [key, t] : params) {
    const auto git = grads.find(key);
    if (git == grads.end()) continue;
    const VectorX<double> g = git->second.values.cast<double>();
    auto& m = m_[key];
    auto& v = v_[key];
    if (m.size() == 0) {
      m = VectorX<double>::Zero(g.size());
      v = VectorX<double>::Zero(g.size());
    }
    m = h_.adam_beta1 * m + (1.0 - h_.adam_beta1) * g;
    v = h_.adam_beta2 * v + (1.0 - h_.adam_beta2) * g.cwiseAbs2();
    const VectorX<double> update =
        (h_.lr * (m / c1).array() / ((v / c2).array().sqrt() + h_.adam_eps)).matrix();
    t.values = (t.values.cast<double>() - update).cast<float>();
  }
}

std::vector<FeaturePair> prepare_inputs(std::span<const FeaturePair> data, const AgcSetting& agc) {
  std::vector<FeaturePair> out(data.begin(), data.end());
  if (agc.mode == AgcMode::features) {
    validate(agc.params);
    for (auto& f : out) apply_agc(f, agc.params);
  }
  return out;
}

namespace {

VectorX<float> predict_prepared(const NetParams<float>& params, std::span<const FeaturePair> data) {
  VectorX<float> out(static_cast<Index>(data.size()));
  for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, data.size() - start);
    out.segment(static_cast<Index>(start), static_cast<Index>(n)) = predict<float>(params, data.subspan(start, n));
  }
  return out;
}

double set_mse(const NetParams<float>& params, std::span<const FeaturePair> data) {
  const VectorX<float> yhat = predict_prepared(params, data);
  double sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double e = static_cast<double>(yhat(static_cast<Index>(i))) - data[i].range_km;
    sum += e * e;
  }
  return sum / static_cast<double>(data.size());
}

}  // namespace

TrainResult train(NetParams<float> params, std::span<const FeaturePair> train_set,
                  std::span<const FeaturePair> val_set, const Hyper& h, const AgcSetting& agc) {
  validate(h);
  if (train_set.empty()) throw data_error("training set is empty");
  const auto inputs = prepare_inputs(train_set, agc);
  const auto val_inputs = prepare_inputs(val_set, agc);

  std::mt19937_64 rng(h.seed);
  Adam adam(h);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<FeaturePair> batch;

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= h.epochs; ++epoch) {
    if (h.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double sum_sq = 0.0;
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(h.batch_size)) {
      ++batch_no;
      const std::size_t n = std::min(static_cast<std::size_t>(h.batch_size), order.size() - start);
      batch.clear();
      for (std::size_t i = 0; i < n; ++i) batch.push_back(inputs[order[start + i]]);

      Tape<float> tape;
      VectorX<float> yhat;
      try {
        yhat = forward<float>(params, batch, true, rng, &tape);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        throw numeric_error(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_no) + ")");
      }
      VectorX<float> grad(static_cast<Index>(n));
      double batch_sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = static_cast<double>(yhat(static_cast<Index>(i))) - batch[i].range_km;
        batch_sq += e * e;
        grad(static_cast<Index>(i)) = static_cast<float>(2.0 * e / static_cast<double>(n));
      }
      if (!std::isfinite(batch_sq)) {
        throw numeric_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_no));
      }
      sum_sq += batch_sq;
      adam.step(params.params, backward<float>(params, tape, grad));
    }

    HistoryRow row;
    row.epoch = epoch;
    row.train_mse = sum_sq / static_cast<double>(inputs.size());
    row.val_mse = val_inputs.empty() ? std::nan("") : set_mse(params, val_inputs);
    result.history.push_back(row);
    if (val_inputs.empty() || row.val_mse < best_val) {
      best_val = row.val_mse;
      result.best = params;
      result.best_epoch = epoch;
    }
  }
  return result;
}

std::vector<std::size_t> sample_fraction(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw usage_error("fine-tune fraction must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

FinetuneResult finetune(const NetParams<float>& pretrained, std::span<const FeaturePair> target, const Hyper& h,
                        const AgcSetting& agc, const FinetuneOptions& opt) {
  if (!opt.any_fraction && opt.fraction != 0.0 && opt.fraction != 0.15 && opt.fraction != 0.30) {
    throw usage_error("fine-tune fraction must be 0, 0.15 or 0.30 (pass --any-fraction to override)");
  }
  if (target.empty()) throw data_error("fine-tune target set is empty");
  if (!(input_shape_of(target.front()) == pretrained.config.input)) {
    throw data_error("target features do not match the pretrained network input shape");
  }
  FinetuneResult out;
  out.sampled = sample_fraction(target.size(), opt.fraction, opt.seed);
  const std::set<std::size_t> chosen(out.sampled.begin(), out.sampled.end());
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!chosen.count(i)) out.remainder.push_back(i);
  }
  if (out.sampled.empty()) {
    out.params = pretrained;
    return out;
  }
  Hyper ft = h;
  ft.epochs = opt.epochs > 0 ? opt.epochs : std::max(1, h.epochs / 4);
  ft.seed = opt.seed;
  const auto subset = gather(target, out.sampled);
  out.params = train(pretrained, subset, {}, ft, agc).best;
  return out;
}

VectorX<float> predict_all(const NetParams<float>& params, std::span<const FeaturePair> data,
                           const AgcSetting& agc) {
  return predict_prepared(params, prepare_inputs(data, agc));
}

MetricsReport evaluate(const NetParams<float>& params, std::span<const FeaturePair> test_set,
                       const AgcSetting& agc) {
  if (test_set.empty()) throw data_error("evaluation set is empty");
  const VectorX<float> yhat = predict_all(params, test_set, agc);
  std::vector<Prediction> preds;
  preds.reserve(test_set.size());
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    preds.push_back({test_set[i].index, static_cast<double>(test_set[i].range_km),
                     static_cast<double>(yhat(static_cast<Index>(i)))});
  }
  return MetricsReport::from_predictions(std::move(preds));
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& history) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path.string());
  out.precision(9);
  out << "epoch,train_mse,val_mse\n";
  for (const auto& r : history) out << r.epoch << ',' << r.train_mse << ',' << r.val_mse << '\n';
}

}  // namespace uwloc
