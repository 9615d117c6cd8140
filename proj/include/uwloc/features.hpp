#pragma once

// Branch inputs: per-channel log-mel spectrograms and per-pair GCC-PHAT lag
// maps, both on the same STFT frame grid.

#include "uwloc/signal_io.hpp"
#include "uwloc/types.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace uwloc {

struct StftConfig {
  Index window_len = 40;
  Index hop = 20;
  Index n_fft = 0;  // 0 means window_len (no zero padding)

  Index fft_size() const { return n_fft > 0 ? n_fft : window_len; }
  Index bins() const { return fft_size() / 2 + 1; }
  Index frames(Index signal_len) const { return (signal_len - window_len) / hop + 1; }
};

void validate(const StftConfig& cfg);

struct MelConfig {
  Index n_mels = 64;
  double f_min = 0.0;
  double f_max = 0.0;  // 0 means fs/2
  double log_floor = 1e-10;
};

struct GccConfig {
  Index lags = 64;
  // Zero-padded DFT length for the cross-spectrum; must hold 2*window_len-1
  // (linear, not circular, correlation) and at least `lags` samples.
  Index n_fft = 128;
};

struct FeatureConfig {
  StftConfig stft;
  MelConfig mel;
  GccConfig gcc;
};

/// Periodic Hann window of length n.
VectorX<double> hann_window(Index n);

/// Frames x bins complex spectrogram of a real signal.
ComplexMatrix stft(std::span<const double> x, const StftConfig& cfg);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular filters on the HTK mel scale. Each filter is a unit-peak
/// triangle in continuous frequency; the weight matrix applies it to the
/// piecewise-linear interpolation of the power spectrum and divides by the
/// filter area, so a flat spectrum maps to a flat mel spectrum and no row is
/// empty even when filters are narrower than the bin spacing.
class MelFilterbank {
 public:
  MelFilterbank(const MelConfig& cfg, double sample_rate_hz, Index n_fft);

  Index n_mels() const { return static_cast<Index>(centres_.size()); }
  Index bins() const { return weights_.cols(); }

  /// Unit-peak triangle of filter m evaluated at frequency f.
  double triangle(Index m, double f_hz) const;
  double lower_edge(Index m) const { return edges_[static_cast<std::size_t>(m)]; }
  double centre(Index m) const { return centres_[static_cast<std::size_t>(m)]; }
  double upper_edge(Index m) const { return edges_[static_cast<std::size_t>(m) + 2]; }

  /// [n_mels x bins], rows sum to one.
  const MatrixR<double>& weights() const { return weights_; }

 private:
  std::vector<double> edges_;    // n_mels + 2 edge frequencies
  std::vector<double> centres_;
  MatrixR<double> weights_;
};

/// ln(max(filterbank * |spec|^2, floor)), frames x n_mels.
MatrixR<double> logmel(const ComplexMatrix& spec, const MelFilterbank& bank, double log_floor);
MatrixR<double> logmel(const ComplexMatrix& spec, const MelConfig& mel, double sample_rate_hz);

/// PHAT-weighted cross-correlation per frame, frames x lags. Column j holds
/// lag (j - lags/2): the delay of channel b relative to channel a. Spectra
/// must share a shape and come from an even-length DFT.
MatrixR<double> gcc_phat(const ComplexMatrix& spec_a, const ComplexMatrix& spec_b, Index lags);

struct FeaturePair {
  std::uint32_t index = 0;
  float range_km = 0.0f;
  Index channels = 0;
  Index frames = 0;
  Index mel_bins = 0;
  Index pairs = 0;
  Index lags = 0;
  MatrixR<float> logmel;  // [channels x frames*mel_bins]
  MatrixR<float> gcc;     // [pairs x frames*lags]
};

/// Throws data_error if shapes disagree with the stored dims or values are non-finite.
void validate(const FeaturePair& f);

/// Reusable plans (windows, DFT matrices, filterbank) for one sample rate.
class Featurizer {
 public:
  Featurizer(const FeatureConfig& cfg, double sample_rate_hz);

  FeaturePair operator()(const LabeledSegment& segment) const;

  const FeatureConfig& config() const { return cfg_; }
  double sample_rate_hz() const { return rate_; }

 private:
  ComplexMatrix spectrum(std::span<const double> x, const MatrixR<double>& dft_re,
                         const MatrixR<double>& dft_im, Index n_fft) const;

  FeatureConfig cfg_;
  double rate_;
  VectorX<double> window_;
  MatrixR<double> mel_dft_re_, mel_dft_im_;
  MatrixR<double> gcc_dft_re_, gcc_dft_im_;
  MelFilterbank bank_;
};

FeaturePair featurize_segment(const LabeledSegment& segment, const FeatureConfig& cfg,
                              double sample_rate_hz);

std::vector<FeaturePair> featurize_all(const std::vector<LabeledSegment>& segments,
                                       const FeatureConfig& cfg, double sample_rate_hz);

// Feature cache: "ACAF", u32 version, then per-segment records.
void write_feature_cache(const std::filesystem::path& path, std::span<const FeaturePair> features);
std::vector<FeaturePair> read_feature_cache(const std::filesystem::path& path);

}  // namespace uwloc
