#include "support.hpp"
#include "uwloc/error.hpp"
#include "uwloc/features.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

using namespace uwloc;

namespace {

constexpr double kPi = std::numbers::pi;

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

// Column of the maximum in row t of a frames x lags map, converted to a lag.
Index argmax_lag(const MatrixR<double>& g, Index t) {
  Index j = 0;
  g.row(t).maxCoeff(&j);
  return j - g.cols() / 2;
}

Index argmax_lag(const FeaturePair& f, Index pair, Index t) {
  Index j = 0;
  f.gcc.row(pair).segment(t * f.lags, f.lags).maxCoeff(&j);
  return j - f.lags / 2;
}

}  // namespace

TEST_CASE("STFT frame count and bins") {
  StftConfig cfg;
  CHECK(cfg.frames(1500) == 74);
  CHECK(cfg.bins() == 21);
  const auto x = white_noise(1500, 1);
  const auto spec = stft(x, cfg);
  CHECK(spec.rows() == 74);
  CHECK(spec.cols() == 21);
  CHECK(StftConfig{40, 20, 0}.frames(40) == 1);
  const std::vector<double> short_x(39, 0.0);
  CHECK_THROWS_AS(stft(short_x, cfg), Error);
  CHECK_THROWS_AS(validate(StftConfig{40, 41, 0}), Error);
  CHECK_THROWS_AS(validate(StftConfig{40, 0, 0}), Error);
}

TEST_CASE("STFT matches a naive DFT of periodic-Hann-windowed frames") {
  StftConfig cfg;
  const auto x = white_noise(400, 2);
  const auto spec = stft(x, cfg);
  const Index n = cfg.window_len;
  for (Index t = 0; t < spec.rows(); ++t) {
    for (Index k = 0; k < spec.cols(); ++k) {
      std::complex<double> acc = 0.0;
      for (Index m = 0; m < n; ++m) {
        const double w = 0.5 - 0.5 * std::cos(2.0 * kPi * m / n);
        acc += w * x[static_cast<std::size_t>(t * cfg.hop + m)] * std::polar(1.0, -2.0 * kPi * k * m / n);
      }
      CHECK(std::abs(spec(t, k) - acc) < 1e-10);
    }
  }
}

TEST_CASE("STFT of zeros is zero") {
  const std::vector<double> x(1500, 0.0);
  CHECK(stft(x, StftConfig{}).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("bin-centre cosine gives one dominant bin per frame") {
  const StftConfig cfg;
  const double fs = 1500.0;
  for (Index bin : {1, 5, 13}) {
    std::vector<double> x(1500);
    const double f = bin * fs / cfg.window_len;
    for (std::size_t n = 0; n < x.size(); ++n) x[n] = std::cos(2.0 * kPi * f * n / fs + 0.3);
    const auto spec = stft(x, cfg);
    for (Index t = 0; t < spec.rows(); ++t) {
      Index k = 0;
      spec.row(t).cwiseAbs().maxCoeff(&k);
      CHECK(k == bin);
    }
  }
}

TEST_CASE("mel scale round trip") {
  for (double f : {0.0, 100.0, 700.0, 750.0}) CHECK(mel_to_hz(hz_to_mel(f)) == doctest::Approx(f));
  CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
}

TEST_CASE("mel filterbank rows are unit-peak triangles and sum to one") {
  const MelFilterbank bank(MelConfig{}, 1500.0, 40);
  CHECK(bank.n_mels() == 64);
  CHECK(bank.bins() == 21);
  for (Index m = 0; m < bank.n_mels(); ++m) {
    CHECK(bank.weights().row(m).sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(bank.weights().row(m).minCoeff() >= 0.0);
    CHECK(bank.triangle(m, bank.centre(m)) == doctest::Approx(1.0));
    CHECK(bank.triangle(m, bank.lower_edge(m)) == 0.0);
    CHECK(bank.triangle(m, bank.upper_edge(m)) == 0.0);
    const double mid = 0.5 * (bank.lower_edge(m) + bank.centre(m));
    CHECK(bank.triangle(m, mid) == doctest::Approx(0.5));
  }
  CHECK(bank.upper_edge(bank.n_mels() - 1) == doctest::Approx(750.0));
  CHECK_THROWS_AS(MelFilterbank(MelConfig{64, 800.0, 700.0, 1e-10}, 1500.0, 40), Error);
}

TEST_CASE("log-mel of zeros is the log floor") {
  const ComplexMatrix spec = ComplexMatrix::Zero(5, 21);
  const auto lm = logmel(spec, MelConfig{}, 1500.0);
  CHECK(lm.rows() == 5);
  CHECK(lm.cols() == 64);
  CHECK((lm.array() == std::log(1e-10)).all());
}

TEST_CASE("log-mel equals a brute-force filterbank product") {
  const auto spec = stft(white_noise(1500, 3), StftConfig{});
  const MelFilterbank bank(MelConfig{}, 1500.0, 40);
  const auto lm = logmel(spec, bank, 1e-10);
  for (Index t = 0; t < spec.rows(); ++t) {
    for (Index m = 0; m < bank.n_mels(); ++m) {
      double e = 0.0;
      for (Index k = 0; k < spec.cols(); ++k) e += bank.weights()(m, k) * std::norm(spec(t, k));
      CHECK(lm(t, m) == doctest::Approx(std::log(std::max(e, 1e-10))).epsilon(1e-12));
    }
  }
}

TEST_CASE("white noise gives a flat mel spectrum within 20 percent") {
  const auto spec = stft(white_noise(1500 * 40, 4), StftConfig{});
  const auto lm = logmel(spec, MelConfig{}, 1500.0);
  const VectorX<double> mean_power = lm.array().exp().colwise().mean().transpose();
  const double level = mean_power.mean();
  for (Index m = 0; m < mean_power.size(); ++m) CHECK(std::abs(mean_power(m) / level - 1.0) < 0.2);
}

TEST_CASE("scaling the waveform by c adds 2 ln c to every log-mel value") {
  auto x = white_noise(1500, 5);
  const StftConfig cfg;
  const auto base = logmel(stft(x, cfg), MelConfig{}, 1500.0);
  for (double c : {1.5, 3.0, 10.0}) {
    std::vector<double> y(x.size());
    for (std::size_t n = 0; n < x.size(); ++n) y[n] = c * x[n];
    const auto scaled = logmel(stft(y, cfg), MelConfig{}, 1500.0);
    CHECK(((scaled - base).array() - 2.0 * std::log(c)).abs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("GCC-PHAT of identical channels peaks at lag zero") {
  const auto x = white_noise(1500, 6);
  const auto f = featurize_segment(segment_from({x, x}), FeatureConfig{}, 1500.0);
  for (Index t = 0; t < f.frames; ++t) CHECK(argmax_lag(f, 0, t) == 0);
}

TEST_CASE("GCC-PHAT recovers every integer delay up to 15 samples") {
  const StftConfig cfg;
  const VectorX<double> w = hann_window(cfg.window_len);
  for (std::uint64_t seed : {7, 8, 9}) {
    const auto s = white_noise(1500 + 30, seed);
    for (int d = -15; d <= 15; ++d) {
      std::vector<double> a(1500), b(1500);
      for (std::size_t n = 0; n < 1500; ++n) {
        a[n] = s[n + 15];
        b[n] = s[n + 15 - d];  // b[n] = a[n - d]
      }
      const auto f = featurize_segment(segment_from({a, b}), FeatureConfig{}, 1500.0);
      REQUIRE(f.lags == 64);
      // Segment level: the lag map summed over all frames.
      VectorX<double> total = VectorX<double>::Zero(f.lags);
      for (Index t = 0; t < f.frames; ++t) total += f.gcc.row(0).segment(t * f.lags, f.lags).transpose().cast<double>();
      Index j = 0;
      total.maxCoeff(&j);
      CHECK(j - f.lags / 2 == d);
      // Frame level: a 40-sample window keeps enough overlap up to 6 samples.
      if (std::abs(d) > 6) continue;
      for (Index t = 0; t < f.frames; ++t) {
        CHECK(argmax_lag(f, 0, t) == d);
        // Oracle: plain time-domain cross-correlation of the windowed frames.
        double best = -1e300;
        int best_lag = 0;
        for (int lag = -32; lag < 32; ++lag) {
          double r = 0.0;
          for (Index n = 0; n < cfg.window_len; ++n) {
            const Index m = n + lag;
            if (m < 0 || m >= cfg.window_len) continue;
            r += w(n) * a[static_cast<std::size_t>(t * cfg.hop + n)] * w(m) * b[static_cast<std::size_t>(t * cfg.hop + m)];
          }
          if (r > best) {
            best = r;
            best_lag = lag;
          }
        }
        CHECK(best_lag == d);
      }
    }
  }
}

TEST_CASE("GCC-PHAT is invariant to channel amplitude") {
  const auto s = white_noise(1520, 8);
  std::vector<double> a(s.begin() + 10, s.begin() + 1510), b(s.begin() + 4, s.begin() + 1504);
  const auto ref = featurize_segment(segment_from({a, b}), FeatureConfig{}, 1500.0);
  for (double scale : {1e-3, 1.0, 1e3}) {
    for (int which = 0; which < 2; ++which) {
      auto a2 = a, b2 = b;
      auto& target = which == 0 ? a2 : b2;
      for (auto& v : target) v *= scale;
      const auto f = featurize_segment(segment_from({a2, b2}), FeatureConfig{}, 1500.0);
      for (Index t = 0; t < f.frames; ++t) CHECK(argmax_lag(f, 0, t) == argmax_lag(ref, 0, t));
      CHECK((f.gcc - ref.gcc).cwiseAbs().maxCoeff() < 1e-4);
    }
  }
}

TEST_CASE("GCC-PHAT with a silent channel stays finite") {
  const auto x = white_noise(1500, 9);
  const std::vector<double> zero(1500, 0.0);
  const auto f = featurize_segment(segment_from({x, zero}), FeatureConfig{}, 1500.0);
  CHECK(f.gcc.allFinite());
  CHECK(f.logmel.allFinite());
  const auto spec = stft(x, StftConfig{40, 20, 128});
  const ComplexMatrix silent = ComplexMatrix::Zero(spec.rows(), spec.cols());
  CHECK(gcc_phat(spec, silent, 64).allFinite());
  CHECK(gcc_phat(silent, silent, 64).allFinite());
  CHECK_THROWS_AS(gcc_phat(spec, ComplexMatrix::Zero(3, spec.cols()), 64), Error);
}

TEST_CASE("gcc_phat on padded spectra agrees with the featurizer") {
  const auto s = white_noise(1510, 10);
  std::vector<double> a(s.begin() + 5, s.begin() + 1505), b(s.begin() + 2, s.begin() + 1502);
  const StftConfig padded{40, 20, 128};
  const auto g = gcc_phat(stft(a, padded), stft(b, padded), 64);
  const auto f = featurize_segment(segment_from({a, b}), FeatureConfig{}, 1500.0);
  for (Index t = 0; t < g.rows(); ++t) {
    CHECK(argmax_lag(g, t) == 3);
    for (Index j = 0; j < 64; ++j) CHECK(f.gcc(0, t * 64 + j) == doctest::Approx(g(t, j)).epsilon(1e-5));
  }
}

TEST_CASE("pairs follow lexicographic channel order") {
  const auto s = white_noise(1520, 11);
  std::vector<double> c0(s.begin() + 10, s.begin() + 1510);
  const auto c1 = c0;
  std::vector<double> c2(s.begin() + 3, s.begin() + 1503);  // c0 delayed by 7
  const auto f = featurize_segment(segment_from({c0, c1, c2}), FeatureConfig{}, 1500.0);
  REQUIRE(f.pairs == 3);
  for (Index t = 0; t < f.frames; ++t) {
    CHECK(argmax_lag(f, 0, t) == 0);  // (0,1)
    CHECK(argmax_lag(f, 1, t) == 7);  // (0,2)
    CHECK(argmax_lag(f, 2, t) == 7);  // (1,2)
  }
}

TEST_CASE("feature shapes for 2 and 21 channels at defaults") {
  std::vector<std::vector<double>> chans;
  for (int c = 0; c < 21; ++c) chans.push_back(white_noise(1500, 100 + c));
  const auto f21 = featurize_segment(segment_from(chans), FeatureConfig{}, 1500.0);
  CHECK(f21.pairs == 210);
  CHECK(f21.gcc.rows() == 210);
  CHECK(f21.frames == 74);
  CHECK(f21.logmel.rows() == 21);
  CHECK(f21.logmel.cols() == 74 * 64);
  CHECK(f21.gcc.cols() == 74 * 64);

  chans.resize(2);
  const auto f2 = featurize_segment(segment_from(chans), FeatureConfig{}, 1500.0);
  CHECK(f2.pairs == 1);
  CHECK(f2.range_km == 2.0f);
}

TEST_CASE("featurization is bit-stable") {
  const auto seg = segment_from({white_noise(1500, 12), white_noise(1500, 13), white_noise(1500, 14)});
  const auto a = featurize_segment(seg, FeatureConfig{}, 1500.0);
  const auto b = featurize_segment(seg, FeatureConfig{}, 1500.0);
  CHECK(std::memcmp(a.logmel.data(), b.logmel.data(), sizeof(float) * a.logmel.size()) == 0);
  CHECK(std::memcmp(a.gcc.data(), b.gcc.data(), sizeof(float) * a.gcc.size()) == 0);
}

TEST_CASE("featurizer rejects a GCC transform too short for linear correlation") {
  FeatureConfig cfg;
  cfg.gcc.n_fft = 64;
  CHECK_THROWS_AS(Featurizer(cfg, 1500.0), Error);
  cfg = FeatureConfig{};
  cfg.gcc.lags = 200;
  CHECK_THROWS_AS(Featurizer(cfg, 1500.0), Error);
}

TEST_CASE("feature cache round-trips bit-exactly") {
  const auto dir = testing::scratch_dir("cache");
  std::mt19937_64 rng(15);
  std::vector<FeaturePair> data;
  for (std::uint32_t i = 0; i < 5; ++i) data.push_back(testing::random_pair(rng, 3, 7, 6, 5, i, 1.25f * i + 0.5f));
  write_feature_cache(dir / "c.acaf", data);
  const auto back = read_feature_cache(dir / "c.acaf");
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].index == data[i].index);
    CHECK(back[i].range_km == data[i].range_km);
    CHECK(back[i].pairs == 3);
    CHECK(back[i].logmel == data[i].logmel);
    CHECK(back[i].gcc == data[i].gcc);
  }
  std::ofstream(dir / "bad.acaf", std::ios::binary) << "NOPE1234";
  CHECK_THROWS_AS(read_feature_cache(dir / "bad.acaf"), Error);
  CHECK_THROWS_AS(read_feature_cache(dir / "missing.acaf"), Error);
}

TEST_CASE("feature validation catches inconsistent shapes and non-finite values") {
  std::mt19937_64 rng(16);
  auto f = testing::random_pair(rng, 3, 4, 5, 6);
  CHECK_NOTHROW(validate(f));
  f.pairs = 2;
  CHECK_THROWS_AS(validate(f), Error);
  f = testing::random_pair(rng, 3, 4, 5, 6);
  f.logmel(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(validate(f), Error);
}
