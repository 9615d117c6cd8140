#include "uwloc/features.hpp"

#include "uwloc/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace uwloc {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kPhatFloor = 1e-12;

// Real and imaginary DFT kernels restricted to the first `rows` input samples.
void dft_kernels(Index rows, Index n_fft, MatrixR<double>& re, MatrixR<double>& im) {
  const Index bins = n_fft / 2 + 1;
  re.resize(rows, bins);
  im.resize(rows, bins);
  for (Index n = 0; n < rows; ++n) {
    for (Index k = 0; k < bins; ++k) {
      // Reduce n*k modulo n_fft before scaling to keep the angle exact-ish.
      const double angle = kTwoPi * static_cast<double>((n * k) % n_fft) / static_cast<double>(n_fft);
      re(n, k) = std::cos(angle);
      im(n, k) = -std::sin(angle);
    }
  }
}

MatrixR<double> frame_signal(std::span<const double> x, const StftConfig& cfg,
                             const VectorX<double>& window) {
  const auto len = static_cast<Index>(x.size());
  if (len < cfg.window_len) throw data_error("signal shorter than one STFT window");
  const Index frames = cfg.frames(len);
  MatrixR<double> out(frames, cfg.window_len);
  for (Index t = 0; t < frames; ++t) {
    for (Index n = 0; n < cfg.window_len; ++n) {
      out(t, n) = x[static_cast<std::size_t>(t * cfg.hop + n)] * window(n);
    }
  }
  return out;
}

ComplexMatrix to_complex(const MatrixR<double>& re, const MatrixR<double>& im) {
  ComplexMatrix out(re.rows(), re.cols());
  out.real() = re;
  out.imag() = im;
  return out;
}

// Integral of the product of two piecewise-linear functions over [a, b],
// given breakpoints; Simpson is exact for the quadratic pieces.
template <typename F>
double integrate_piecewise(F&& f, std::vector<double> breaks) {
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    const double lo = breaks[i], hi = breaks[i + 1];
    total += (hi - lo) / 6.0 * (f(lo) + 4.0 * f(0.5 * (lo + hi)) + f(hi));
  }
  return total;
}

}  // namespace

void validate(const StftConfig& cfg) {
  if (cfg.window_len <= 0) throw usage_error("stft.window_len must be positive");
  if (cfg.hop <= 0 || cfg.hop > cfg.window_len) throw usage_error("stft.hop must lie in (0, window_len]");
  if (cfg.fft_size() < cfg.window_len) throw usage_error("stft.n_fft must be >= window_len");
}

VectorX<double> hann_window(Index n) {
  VectorX<double> w(n);
  for (Index i = 0; i < n; ++i) {
    w(i) = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

ComplexMatrix stft(std::span<const double> x, const StftConfig& cfg) {
  validate(cfg);
  const MatrixR<double> frames = frame_signal(x, cfg, hann_window(cfg.window_len));
  MatrixR<double> re, im;
  dft_kernels(cfg.window_len, cfg.fft_size(), re, im);
  return to_complex(frames * re, frames * im);
}

// ---------------------------------------------------------------------------
// Mel

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(const MelConfig& cfg, double sample_rate_hz, Index n_fft) {
  const double nyquist = sample_rate_hz / 2.0;
  const double f_max = cfg.f_max > 0.0 ? cfg.f_max : nyquist;
  if (cfg.n_mels <= 0) throw usage_error("mel.n_mels must be positive");
  if (!(cfg.f_min >= 0.0) || !(cfg.f_min < f_max) || f_max > nyquist + 1e-9) {
    throw usage_error("mel band must satisfy 0 <= f_min < f_max <= fs/2");
  }
  if (!(cfg.log_floor > 0.0)) throw usage_error("mel.log_floor must be positive");
  if (n_fft < 2 || n_fft % 2 != 0) throw usage_error("mel filterbank needs an even DFT length");

  const double mel_lo = hz_to_mel(cfg.f_min);
  const double mel_hi = hz_to_mel(f_max);
  const Index points = cfg.n_mels + 2;
  edges_.resize(static_cast<std::size_t>(points));
  for (Index i = 0; i < points; ++i) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    edges_[static_cast<std::size_t>(i)] = mel_to_hz(mel);
  }
  edges_.front() = cfg.f_min;
  edges_.back() = f_max;
  centres_.assign(edges_.begin() + 1, edges_.end() - 1);

  const Index bins = n_fft / 2 + 1;
  const double spacing = sample_rate_hz / static_cast<double>(n_fft);
  auto hat = [&](Index k, double f) {
    const double centre = spacing * static_cast<double>(k);
    return std::max(0.0, 1.0 - std::abs(f - centre) / spacing);
  };

  weights_ = MatrixR<double>::Zero(cfg.n_mels, bins);
  for (Index m = 0; m < cfg.n_mels; ++m) {
    const double lo = lower_edge(m), c = centre(m), hi = upper_edge(m);
    const double area = 0.5 * (hi - lo);
    for (Index k = 0; k < bins; ++k) {
      const double fk = spacing * static_cast<double>(k);
      const double a = std::max(lo, fk - spacing);
      const double b = std::min(hi, fk + spacing);
      if (a >= b) continue;
      std::vector<double> breaks = {a, b};
      for (double p : {lo, c, hi, fk}) {
        if (p > a && p < b) breaks.push_back(p);
      }
      const double overlap = integrate_piecewise(
          [&](double f) { return triangle(m, f) * hat(k, f); }, std::move(breaks));
      weights_(m, k) = overlap / area;
    }
  }
}

double MelFilterbank::triangle(Index m, double f_hz) const {
  const double lo = lower_edge(m), c = centre(m), hi = upper_edge(m);
  if (f_hz <= lo || f_hz >= hi) return 0.0;
  if (f_hz <= c) return (f_hz - lo) / (c - lo);
  return (hi - f_hz) / (hi - c);
}

MatrixR<double> logmel(const ComplexMatrix& spec, const MelFilterbank& bank, double log_floor) {
  if (spec.cols() != bank.bins()) throw data_error("spectrogram bins do not match filterbank");
  const MatrixR<double> power = spec.cwiseAbs2();
  MatrixR<double> mel = power * bank.weights().transpose();
  return mel.array().max(log_floor).log().matrix();
}

MatrixR<double> logmel(const ComplexMatrix& spec, const MelConfig& mel, double sample_rate_hz) {
  const Index n_fft = 2 * (spec.cols() - 1);
  return logmel(spec, MelFilterbank(mel, sample_rate_hz, n_fft), mel.log_floor);
}

// ---------------------------------------------------------------------------
// GCC-PHAT

MatrixR<double> gcc_phat(const ComplexMatrix& spec_a, const ComplexMatrix& spec_b, Index lags) {
  if (spec_a.rows() != spec_b.rows() || spec_a.cols() != spec_b.cols()) {
    throw data_error("gcc_phat: spectrogram shape mismatch");
  }
  const Index bins = spec_a.cols();
  const Index n_fft = 2 * (bins - 1);
  if (lags <= 0 || lags > n_fft) throw usage_error("gcc lag count must lie in [1, n_fft]");

  const ComplexMatrix cross = spec_a.cwiseProduct(spec_b.conjugate());
  const MatrixR<double> magnitude = cross.cwiseAbs().array() + kPhatFloor;
  const MatrixR<double> re = cross.real().cwiseQuotient(magnitude);
  const MatrixR<double> im = cross.imag().cwiseQuotient(magnitude);

  // out[l] = (1/N) sum_k w_k Re(G_k exp(-2 pi i k l / N)) with the one-sided weights.
  MatrixR<double> cos_k(bins, lags), sin_k(bins, lags);
  const Index half = lags / 2;
  for (Index k = 0; k < bins; ++k) {
    const double weight = (k == 0 || k == bins - 1) ? 1.0 : 2.0;
    for (Index j = 0; j < lags; ++j) {
      const Index lag = j - half;
      const Index phase = ((k * lag) % n_fft + n_fft) % n_fft;
      const double angle = kTwoPi * static_cast<double>(phase) / static_cast<double>(n_fft);
      cos_k(k, j) = weight * std::cos(angle) / static_cast<double>(n_fft);
      sin_k(k, j) = weight * std::sin(angle) / static_cast<double>(n_fft);
    }
  }
  return re * cos_k + im * sin_k;
}

// ---------------------------------------------------------------------------
// Segment featurization

void validate(const FeaturePair& f) {
  if (f.channels < 1 || f.frames < 1 || f.mel_bins < 1 || f.lags < 1) {
    throw data_error("feature pair has empty dimensions");
  }
  if (f.pairs != f.channels * (f.channels - 1) / 2) throw data_error("gcc pair count inconsistent");
  if (f.logmel.rows() != f.channels || f.logmel.cols() != f.frames * f.mel_bins) {
    throw data_error("log-mel tensor shape mismatch");
  }
  if (f.gcc.rows() != f.pairs || f.gcc.cols() != f.frames * f.lags) {
    throw data_error("gcc tensor shape mismatch");
  }
  if (!f.logmel.allFinite() || !f.gcc.allFinite()) throw data_error("non-finite feature values");
}

Featurizer::Featurizer(const FeatureConfig& cfg, double sample_rate_hz)
    : cfg_(cfg),
      rate_(sample_rate_hz),
      window_(hann_window(cfg.stft.window_len)),
      bank_(cfg.mel, sample_rate_hz, cfg.stft.fft_size()) {
  validate(cfg_.stft);
  if (cfg_.stft.fft_size() % 2 != 0) throw usage_error("stft DFT length must be even");
  const Index gcc_fft = cfg_.gcc.n_fft;
  if (gcc_fft % 2 != 0 || gcc_fft < 2 * cfg_.stft.window_len - 1) {
    throw usage_error("gcc.n_fft must be even and >= 2*window_len-1");
  }
  if (cfg_.gcc.lags <= 0 || cfg_.gcc.lags > gcc_fft) throw usage_error("gcc.lags must lie in [1, gcc.n_fft]");
  dft_kernels(cfg_.stft.window_len, cfg_.stft.fft_size(), mel_dft_re_, mel_dft_im_);
  dft_kernels(cfg_.stft.window_len, gcc_fft, gcc_dft_re_, gcc_dft_im_);
}

ComplexMatrix Featurizer::spectrum(std::span<const double> x, const MatrixR<double>& dft_re,
                                   const MatrixR<double>& dft_im, Index) const {
  const MatrixR<double> frames = frame_signal(x, cfg_.stft, window_);
  return to_complex(frames * dft_re, frames * dft_im);
}

FeaturePair Featurizer::operator()(const LabeledSegment& segment) const {
  const Index channels = segment.samples.rows();
  if (channels < 2) throw data_error("insufficient channels: need at least 2");
  const Index len = segment.samples.cols();
  if (len < cfg_.stft.window_len) throw data_error("segment shorter than one STFT window");

  FeaturePair out;
  out.index = segment.index;
  out.range_km = static_cast<float>(segment.range_km);
  out.channels = channels;
  out.frames = cfg_.stft.frames(len);
  out.mel_bins = bank_.n_mels();
  out.pairs = channels * (channels - 1) / 2;
  out.lags = cfg_.gcc.lags;
  out.logmel.resize(channels, out.frames * out.mel_bins);
  out.gcc.resize(out.pairs, out.frames * out.lags);

  std::vector<ComplexMatrix> padded;
  padded.reserve(static_cast<std::size_t>(channels));
  std::vector<double> x(static_cast<std::size_t>(len));
  for (Index c = 0; c < channels; ++c) {
    for (Index n = 0; n < len; ++n) x[static_cast<std::size_t>(n)] = segment.samples(c, n);
    const ComplexMatrix spec = spectrum(x, mel_dft_re_, mel_dft_im_, cfg_.stft.fft_size());
    const MatrixR<double> mel = logmel(spec, bank_, cfg_.mel.log_floor);
    out.logmel.row(c) = Eigen::Map<const VectorX<double>>(mel.data(), mel.size()).cast<float>().transpose();
    padded.push_back(spectrum(x, gcc_dft_re_, gcc_dft_im_, cfg_.gcc.n_fft));
  }
  Index pair = 0;
  for (Index i = 0; i < channels; ++i) {
    for (Index j = i + 1; j < channels; ++j, ++pair) {
      const MatrixR<double> g = gcc_phat(padded[static_cast<std::size_t>(i)],
                                         padded[static_cast<std::size_t>(j)], cfg_.gcc.lags);
      out.gcc.row(pair) = Eigen::Map<const VectorX<double>>(g.data(), g.size()).cast<float>().transpose();
    }
  }
  validate(out);
  return out;
}

FeaturePair featurize_segment(const LabeledSegment& segment, const FeatureConfig& cfg,
                              double sample_rate_hz) {
  return Featurizer(cfg, sample_rate_hz)(segment);
}

std::vector<FeaturePair> featurize_all(const std::vector<LabeledSegment>& segments,
                                       const FeatureConfig& cfg, double sample_rate_hz) {
  const Featurizer featurize(cfg, sample_rate_hz);
  std::vector<FeaturePair> out;
  out.reserve(segments.size());
  for (const auto& s : segments) out.push_back(featurize(s));
  return out;
}

}  // namespace uwloc
