// Acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   uwloc_acceptance [--strict] [--log FILE] [criterion ...]
//
// With no criteria all eleven run. --strict exits 1 when any selected
// criterion fails; otherwise the exit code only reports crashes. --log also
// appends each line to FILE.

#include "uwloc/agc.hpp"
#include "uwloc/error.hpp"
#include "uwloc/experiments.hpp"
#include "uwloc/features.hpp"
#include "uwloc/learn.hpp"
#include "uwloc/net.hpp"
#include "uwloc/signal_io.hpp"
#include "uwloc/synthgen.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace uwloc;
namespace fs = std::filesystem;

namespace {

constexpr int kSeeds = 5;
constexpr int kBenchEpochs = 1;
constexpr int kFinetuneEpochs = 10;
constexpr double kBenchLr = 1e-3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> white_noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> x(n);
  for (auto& v : x) v = nd(rng);
  return x;
}

LabeledSegment segment_from(const std::vector<std::vector<double>>& channels) {
  LabeledSegment seg;
  seg.range_km = 2.0;
  seg.samples.resize(static_cast<Index>(channels.size()), static_cast<Index>(channels.front().size()));
  for (std::size_t c = 0; c < channels.size(); ++c) {
    for (std::size_t n = 0; n < channels[c].size(); ++n) {
      seg.samples(static_cast<Index>(c), static_cast<Index>(n)) = static_cast<float>(channels[c][n]);
    }
  }
  return seg;
}

// Lag of the maximum of the pair-0 lag map summed over all frames.
Index segment_lag(const FeaturePair& f) {
  VectorX<double> total = VectorX<double>::Zero(f.lags);
  for (Index t = 0; t < f.frames; ++t) total += f.gcc.row(0).segment(t * f.lags, f.lags).transpose().cast<double>();
  Index j = 0;
  total.maxCoeff(&j);
  return j - f.lags / 2;
}

Hyper bench_hyper(std::uint64_t seed) {
  Hyper h;
  h.lr = kBenchLr;
  h.epochs = kBenchEpochs;
  h.seed = seed;
  return h;
}

std::vector<FeaturePair> bench_data(std::uint64_t seed) {
  Scenario s;
  s.seed = seed;
  return synth_features(s, FeatureConfig{}, AgcSetting{});
}

NetConfig bench_net(std::uint64_t seed) {
  NetConfig n;
  n.seed = seed;
  return n;
}

Outcome agc_suite() {
  const AgcParams p;
  Eigen::VectorXd x(4);
  x << 3, 0, 0, 0;
  const double g0 = agc_forward(x, p).second;
  bool hand = std::abs(g0 - 0.888889) < 1e-6;

  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> decade(-2.0, 2.0), alpha(0.01, 1.0), target(0.1, 10.0);
  std::uniform_int_distribution<int> size(1, 64);
  bool sign = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const AgcParams q{target(rng), alpha(rng)};
    Eigen::VectorXd v(size(rng));
    for (Index i = 0; i < v.size(); ++i) v(i) = nd(rng);
    v *= std::pow(10.0, decade(rng));
    const double e = energy(v) + AgcParams::epsilon;
    const double g = agc_forward(v, q).second;
    if (e < q.e_target) sign &= g > 1.0;
    if (e > q.e_target) sign &= g < 1.0;
    sign &= g > 1.0 - q.alpha;
  }

  double worst = 0.0;
  const double h = 1e-4;
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd v(2 + trial % 15), gy(2 + trial % 15);
    for (Index i = 0; i < v.size(); ++i) v(i) = nd(rng) * (0.3 + trial * 0.02);
    for (Index i = 0; i < gy.size(); ++i) gy(i) = nd(rng);
    const Eigen::VectorXd analytic = agc_backward(v, p, gy);
    for (Index i = 0; i < v.size(); ++i) {
      Eigen::VectorXd up = v, down = v;
      up(i) += h;
      down(i) -= h;
      const double numeric = (gy.dot(agc_forward(up, p).first) - gy.dot(agc_forward(down, p).first)) / (2.0 * h);
      worst = std::max(worst,
                       std::abs(analytic(i) - numeric) / std::max({std::abs(analytic(i)), std::abs(numeric), 1e-6}));
    }
  }
  return {hand && sign && worst < 1e-5,
          "g([3,0,0,0])=" + fmt(g0) + " sign_rule=" + (sign ? "ok" : "violated") + " fd_rel=" + fmt(worst)};
}

Outcome gcc_recovery() {
  bool ok = true;
  int wrong = 0;
  for (std::uint64_t seed : {7, 8, 9}) {
    const auto s = white_noise(1530, seed);
    for (int d = -15; d <= 15; ++d) {
      std::vector<double> a(1500), b(1500);
      for (std::size_t n = 0; n < 1500; ++n) {
        a[n] = s[n + 15];
        b[n] = s[n + 15 - d];
      }
      const auto f = featurize_segment(segment_from({a, b}), FeatureConfig{}, 1500.0);
      if (f.lags != 64 || segment_lag(f) != d) ++wrong;
    }
  }
  ok &= wrong == 0;

  const auto s = white_noise(1520, 8);
  std::vector<double> a(s.begin() + 10, s.begin() + 1510), b(s.begin() + 4, s.begin() + 1504);
  const auto ref = featurize_segment(segment_from({a, b}), FeatureConfig{}, 1500.0);
  double drift = 0.0;
  for (double scale : {1e-3, 1.0, 1e3}) {
    auto a2 = a;
    for (auto& v : a2) v *= scale;
    const auto f = featurize_segment(segment_from({a2, b}), FeatureConfig{}, 1500.0);
    drift = std::max<double>(drift, (f.gcc - ref.gcc).cwiseAbs().maxCoeff());
    ok &= segment_lag(f) == 6;
  }
  ok &= drift < 1e-4;
  return {ok, "delays |d|<=15 wrong=" + std::to_string(wrong) + " scale_drift=" + fmt(drift)};
}

Outcome shapes_counts() {
  std::size_t n75 = 0, n65 = 0;
  for (int minutes : {75, 65}) {
    Scenario s;
    s.duration_min = minutes;
    s.channels = 2;
    const auto out = synth_towpath(s);
    (minutes == 75 ? n75 : n65) = segment_clip(out.clip).size();
  }
  const auto sp = split(static_cast<Index>(n75));
  bool folds = sp.val.size() == 750 && sp.test.size() == 750 && sp.train.size() == 3000;
  const Index frames = stft(std::vector<double>(1500, 0.0), StftConfig{}).rows();
  std::vector<std::vector<double>> chans;
  for (int c = 0; c < 21; ++c) chans.push_back(white_noise(1500, 100 + static_cast<std::uint64_t>(c)));
  const auto f = featurize_segment(segment_from(chans), FeatureConfig{}, 1500.0);
  const bool ok = n75 == 4500 && n65 == 3900 && folds && frames == 74 && f.frames == 74 && f.pairs == 210;
  return {ok, "75min=" + std::to_string(n75) + " 65min=" + std::to_string(n65) + " folds=" +
                  std::to_string(sp.train.size()) + "/" + std::to_string(sp.val.size()) + "/" +
                  std::to_string(sp.test.size()) + " T=" + std::to_string(frames) +
                  " pairs(21)=" + std::to_string(f.pairs)};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> range(0.5, 12.0), noise(-1.0, 1.0);
  std::uniform_int_distribution<int> size(1, 50);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> y(static_cast<std::size_t>(size(rng))), yhat(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = range(rng);
      yhat[i] = y[i] + noise(rng) * (trial % 3 == 0 ? 0.1 : 2.0);
    }
    double se = 0.0, ae = 0.0, hits = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      se += (y[i] - yhat[i]) * (y[i] - yhat[i]);
      ae += std::abs(y[i] - yhat[i]);
      if (std::abs(y[i] - yhat[i]) / y[i] <= 0.05) hits += 1.0;
    }
    const double n = static_cast<double>(y.size());
    worst = std::max({worst, std::abs(mse(y, yhat) - se / n), std::abs(mae(y, yhat) - ae / n),
                      std::abs(pcl5(y, yhat) - 100.0 * hits / n)});
  }
  const std::vector<double> y{100.0, 100.0, 100.0}, yhat{105.0, 95.0, 105.5};
  const double boundary = pcl5(y, yhat);
  const bool ok = worst <= 1e-12 && std::abs(boundary - 200.0 / 3.0) < 1e-12;
  return {ok, "max_abs_diff=" + fmt(worst) + " pcl5(5%,5%,5.5%)=" + fmt(boundary)};
}

NetConfig micro_config() {
  NetConfig c;
  c.input = {2, 1, 9, 8, 6};
  c.conv_blocks = 1;
  c.base_filters = 2;
  c.conformer_blocks = 1;
  c.model_dim = 8;
  c.attn_heads = 2;
  c.ff_expansion = 2;
  c.conv_kernel_temporal = 3;
  c.head_hidden = 8;
  c.dropout_p = 0.0;
  c.seed = 3;
  return c;
}

std::vector<FeaturePair> random_batch(const NetConfig& c, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  std::vector<FeaturePair> out;
  for (int i = 0; i < n; ++i) {
    FeaturePair f;
    f.index = static_cast<std::uint32_t>(i);
    f.range_km = 1.0f + 0.5f * static_cast<float>(i);
    f.channels = c.input.mel_channels;
    f.pairs = c.input.gcc_pairs;
    f.frames = c.input.frames;
    f.mel_bins = c.input.mel_bins;
    f.lags = c.input.lags;
    f.logmel.resize(f.channels, f.frames * f.mel_bins);
    f.gcc.resize(f.pairs, f.frames * f.lags);
    for (Index k = 0; k < f.logmel.size(); ++k) f.logmel.data()[k] = nd(rng);
    for (Index k = 0; k < f.gcc.size(); ++k) f.gcc.data()[k] = nd(rng);
    out.push_back(std::move(f));
  }
  return out;
}

Outcome gradient_check() {
  const NetConfig c = micro_config();
  const std::int64_t count = param_count(c);
  auto p = build_model<double>(c);
  const auto batch = random_batch(c, 3, 5);
  VectorX<double> go(3);
  go << 0.7, -1.3, 0.4;
  std::mt19937_64 rng(1);
  Tape<double> tape;
  forward<double>(p, batch, true, rng, &tape);
  const auto grads = backward<double>(p, tape, go);
  const double h = 1e-5;
  double worst = 0.0;
  for (auto& [key, t] : p.params) {
    for (Index i = 0; i < t.size(); ++i) {
      const double old = t.values(i);
      t.values(i) = old + h;
      const double up = forward<double>(p, batch, true, rng).dot(go);
      t.values(i) = old - h;
      const double down = forward<double>(p, batch, true, rng).dot(go);
      t.values(i) = old;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads.at(key).values(i);
      worst = std::max(worst,
                       std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6}));
    }
  }

  auto q = build_model<float>(c);
  const auto train_batch = random_batch(c, 4, 12);
  Hyper hy;
  hy.lr = 1e-2;
  Adam adam(hy);
  for (int step = 0; step < 100; ++step) {
    Tape<float> tp;
    const VectorX<float> y = forward(q, std::span<const FeaturePair>(train_batch), true, rng, &tp);
    VectorX<float> g(y.size());
    for (Index i = 0; i < y.size(); ++i) {
      g(i) = 2.0f * (y(i) - train_batch[static_cast<std::size_t>(i)].range_km) / static_cast<float>(y.size());
    }
    adam.step(q.params, backward(q, tp, g));
  }
  bool tied = true;
  for (int j = 1; j <= 2; ++j) {
    const MatrixR<float> km = effective_kernel(q, "mel", 0, j);
    const MatrixR<float> kg = effective_kernel(q, "gcc", 0, j);
    for (Index r = 0; r < km.rows(); ++r) {
      for (Index s = 0; s < km.cols() / 9; ++s) {
        for (Index k : {4, 5, 7, 8}) tied &= std::memcmp(&km(r, s * 9 + k), &kg(r, s * 9 + k), sizeof(float)) == 0;
      }
    }
  }
  return {count <= 5000 && worst < 1e-4 && tied, "params=" + std::to_string(count) + " fd_rel=" + fmt(worst) +
                                                    " centres_after_100_steps=" + (tied ? "identical" : "differ")};
}

Outcome overfit() {
  Scenario s;
  s.duration_min = 2;
  s.channels = 2;
  s.seed = 6;
  FeatureConfig fc;
  auto all = synth_features(s, fc, AgcSetting{});
  all.resize(32);
  NetConfig c = micro_config();
  c.input = input_shape_of(all.front());
  Hyper h;
  h.epochs = 500;
  h.batch_size = 32;
  h.lr = 1e-2;
  h.seed = 6;
  const TrainResult r = train(build_model<float>(c), all, {}, h, AgcSetting{});
  const MetricsReport m = evaluate(r.best, all, AgcSetting{});
  double mean = 0.0;
  for (const auto& f : all) mean += f.range_km;
  mean /= static_cast<double>(all.size());
  double var = 0.0;
  for (const auto& f : all) var += (f.range_km - mean) * (f.range_km - mean);
  var /= static_cast<double>(all.size());
  return {m.mse_km2 < 1e-3 * var, "train_mse=" + fmt(m.mse_km2) + " bound=" + fmt(1e-3 * var) +
                                      " params=" + std::to_string(param_count(c))};
}

Outcome end_to_end() {
  int wins = 0;
  std::string detail;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const auto data = bench_data(static_cast<std::uint64_t>(seed));
    const auto r = run_in_domain(data, bench_net(static_cast<std::uint64_t>(seed)),
                                 bench_hyper(static_cast<std::uint64_t>(seed)), AgcSetting{});
    const double ratio = r.test.mae_km / r.baseline_mae_km;
    if (ratio < 0.5) ++wins;
    detail += " s" + std::to_string(seed) + "=" + fmt(r.test.mae_km) + "/" + fmt(r.baseline_mae_km);
    std::cerr << "  seed " << seed << " mae " << r.test.mae_km << " baseline " << r.baseline_mae_km << '\n';
  }
  return {wins >= 4, std::to_string(wins) + "/5 seeds below half the mean-baseline MAE;" + detail};
}

Outcome domain_adaptation() {
  std::vector<double> zero, ft15, ft30, scratch;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Scenario s;
    s.range_start_km = 10.0;
    s.seed = static_cast<std::uint64_t>(seed);
    const auto split = synth_doppler_split(s, 60, FeatureConfig{}, AgcSetting{});
    const auto r = run_domain_adaptation(split, bench_net(s.seed), bench_hyper(s.seed), AgcSetting{},
                                         kFinetuneEpochs, s.seed);
    zero.push_back(r.zero_shot_mae);
    ft15.push_back(r.finetune15_mae);
    ft30.push_back(r.finetune30_mae);
    scratch.push_back(r.scratch15_mae);
    std::cerr << "  seed " << seed << " zero " << r.zero_shot_mae << " ft15 " << r.finetune15_mae << " ft30 "
              << r.finetune30_mae << " scratch15 " << r.scratch15_mae << '\n';
  }
  const double z = median(zero), a = median(ft15), b = median(ft30), c = median(scratch);
  return {z > a && a > b && a < c, "median zero=" + fmt(z) + " ft15=" + fmt(a) + " ft30=" + fmt(b) +
                                       " scratch15=" + fmt(c)};
}

Outcome doppler() {
  const double low = doppler_shift(49.0, 2.51);
  const double high = doppler_shift(400.0, 2.51);
  return {std::abs(low - 0.0820) <= 1e-4 && std::abs(high - 0.67) <= 5e-3,
          "df(49Hz)=" + fmt(low) + " df(400Hz)=" + fmt(high)};
}

Outcome ablation() {
  std::map<Variant, int> beaten;
  std::string detail;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const auto data = bench_data(static_cast<std::uint64_t>(seed));
    std::map<Variant, double> mae;
    for (Variant v : kAblationVariants) {
      mae[v] = run_ablation_variant(data, bench_net(static_cast<std::uint64_t>(seed)),
                                    bench_hyper(static_cast<std::uint64_t>(seed)), AgcSetting{}, v)
                   .mae_km;
      std::cerr << "  seed " << seed << ' ' << to_string(v) << " mae " << mae[v] << '\n';
    }
    for (Variant v : {Variant::no_gcc, Variant::no_conformer, Variant::no_agc}) {
      if (mae[Variant::full] < mae[v]) ++beaten[v];
    }
  }
  bool ok = true;
  for (Variant v : {Variant::no_gcc, Variant::no_conformer, Variant::no_agc}) {
    ok &= beaten[v] >= 3;
    detail += " vs_" + to_string(v) + "=" + std::to_string(beaten[v]) + "/5";
  }
  return {ok, "full wins" + detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

bool run_cli(const std::string& args) {
  const std::string cmd = std::string(UWLOC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  return std::system(cmd.c_str()) == 0;
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "uwloc_acceptance_determinism";
  fs::remove_all(dir);
  const std::string set =
      " --set scenario.channels=2 --set net.conv_blocks=1 --set net.base_filters=4 --set net.conformer_blocks=1"
      " --set net.model_dim=16 --set net.attn_heads=2 --set net.head_hidden=8 --set train.epochs=2"
      " --set train.lr=0.001";
  bool ok = run_cli("synth --minutes 2 --seed 11 --out " + (dir / "synth").string() + set) &&
            run_cli("featurize --audio " + (dir / "synth/clip.f32").string() + " --labels " +
                    (dir / "synth/labels.csv").string() + " --out " + (dir / "feat").string() + set);
  for (const char* run : {"a", "b"}) {
    ok = ok && run_cli("train --deterministic --features " + (dir / "feat/cache.acaf").string() + " --out " +
                       (dir / run).string() + set);
  }
  if (!ok) return {false, "a CLI step failed"};
  const bool ckpt = slurp(dir / "a/checkpoint.acan") == slurp(dir / "b/checkpoint.acan");
  const bool metrics = slurp(dir / "a/metrics.json") == slurp(dir / "b/metrics.json");
  return {ckpt && metrics && !slurp(dir / "a/checkpoint.acan").empty(),
          std::string("checkpoint ") + (ckpt ? "identical" : "differs") + ", metrics.json " +
              (metrics ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"AGC unit suite", agc_suite},
      {"GCC-PHAT lag recovery", gcc_recovery},
      {"shape and count suite", shapes_counts},
      {"metric oracles", metric_oracles},
      {"network gradient check", gradient_check},
      {"overfit sanity", overfit},
      {"end-to-end synthetic benchmark", end_to_end},
      {"domain-adaptation direction", domain_adaptation},
      {"Doppler numeric", doppler},
      {"ablation direction", ablation},
      {"determinism", determinism},
  };
  bool strict = false;
  std::ofstream log;
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--strict") {
      strict = true;
      continue;
    }
    if (arg == "--log" && i + 1 < argc) {
      log.open(argv[++i], std::ios::app);
      continue;
    }
    const int k = std::atoi(arg.c_str());
    if (k < 1 || k > static_cast<int>(criteria.size())) {
      std::cerr << "usage: uwloc_acceptance [--strict] [--log FILE] [1-" << criteria.size() << " ...]\n";
      return 2;
    }
    selected.insert(k);
  }
  if (selected.empty()) {
    for (int k = 1; k <= static_cast<int>(criteria.size()); ++k) selected.insert(k);
  }

  int failed = 0;
  for (int k : selected) {
    const auto& [name, check] = criteria[static_cast<std::size_t>(k - 1)];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream line;
    line << "criterion " << k << ' ' << (o.pass ? "PASS" : "FAIL") << " [" << name << "] " << o.detail << " ("
         << fmt(secs) << " s)";
    std::cout << line.str() << std::endl;
    if (log.is_open()) log << line.str() << std::endl;
    if (!o.pass) ++failed;
  }
  return strict && failed > 0 ? 1 : 0;
}
