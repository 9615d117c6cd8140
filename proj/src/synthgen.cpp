#include "uwloc/synthgen.hpp"

#include "uwloc/error.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace uwloc {

double doppler_shift(double f_hz, double v_mps, double c_mps) {
  return v_mps / c_mps * f_hz;
}

std::vector<double> default_pilot_tones() {
  return {49.0, 64.0, 79.0, 94.0, 112.0, 130.0, 148.0, 166.0, 201.0, 235.0, 283.0, 338.0, 388.0};
}

double Scenario::range_at(double t_seconds) const {
  const double total = 60.0 * duration_min;
  return range_start_km + (range_end_km - range_start_km) * (t_seconds / total);
}

void validate_scenario(const Scenario& s) {
  if (s.duration_min <= 0) throw usage_error("scenario.duration_min must be positive");
  if (s.channels < 2) throw usage_error("scenario.channels must be at least 2");
  if (!(s.sample_rate_hz > 0.0)) throw usage_error("scenario.sample_rate_hz must be positive");
  if (!(s.sound_speed_mps > 0.0)) throw usage_error("scenario.sound_speed_mps must be positive");
  if (!(s.range_start_km > 0.0) || !(s.range_end_km > 0.0)) {
    throw usage_error("scenario ranges must stay positive");
  }
  const double nyquist = s.sample_rate_hz / 2.0;
  auto check_tones = [&](const std::vector<double>& tones) {
    for (double f : tones) {
      const double shifted = f + std::abs(doppler_shift(f, s.source_speed_mps, s.sound_speed_mps));
      if (!(f > 0.0) || shifted >= nyquist) {
        throw usage_error("tone frequencies must lie in (0, fs/2)");
      }
    }
  };
  if (s.tones_hz.empty()) throw usage_error("scenario needs at least one tone");
  check_tones(s.tones_hz);
  if (s.interferer) {
    check_tones(s.interferer->tones_hz);
    if (!(s.interferer->range_km > 0.0)) throw usage_error("interferer range must be positive");
  }
}

double channel_delay_samples(const Scenario& s, int channel, double range_km) {
  const double position = static_cast<double>(channel) / static_cast<double>(s.channels - 1);
  const double scale = s.delay_range_scale_km;
  return position * s.max_delay_samples * scale / (range_km + scale);
}

SynthOutput synth_towpath(const Scenario& s) {
  validate_scenario(s);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double fs = s.sample_rate_hz;
  const auto frames = static_cast<Index>(std::llround(60.0 * s.duration_min * fs));
  const int channels = s.channels;

  std::mt19937_64 rng(s.seed);
  std::uniform_real_distribution<double> uniform_phase(0.0, two_pi);

  struct Tone {
    double freq;
    double amplitude;
    std::vector<double> phase;  // per channel
  };
  auto make_tones = [&](const std::vector<double>& freqs, double doppler_speed, double level) {
    std::vector<Tone> tones;
    const double amp = level * std::sqrt(2.0 / static_cast<double>(freqs.size()));
    for (double f : freqs) {
      Tone t{f + doppler_shift(f, doppler_speed, s.sound_speed_mps), amp, {}};
      for (int c = 0; c < channels; ++c) t.phase.push_back(uniform_phase(rng));
      tones.push_back(std::move(t));
    }
    return tones;
  };
  const auto source = make_tones(s.tones_hz, s.source_speed_mps, 1.0);
  std::vector<Tone> interferer;
  std::vector<double> interferer_delay(static_cast<std::size_t>(channels), 0.0);
  if (s.interferer) {
    interferer = make_tones(s.interferer->tones_hz, 0.0, std::pow(10.0, s.interferer->level_db / 20.0));
    for (int c = 0; c < channels; ++c) {
      interferer_delay[static_cast<std::size_t>(c)] =
          channel_delay_samples(s, c, s.interferer->range_km) / fs;
    }
  }

  const bool noisy = std::isfinite(s.snr_db);
  const double noise_sigma = noisy ? std::pow(10.0, -s.snr_db / 20.0) : 0.0;
  std::normal_distribution<double> gauss(0.0, 1.0);

  MultiChannelClip clip;
  clip.sample_rate_hz = fs;
  clip.array_tag = ArrayTag::SYNTH;
  clip.samples.resize(channels, frames);
  for (Index n = 0; n < frames; ++n) {
    const double t = static_cast<double>(n) / fs;
    const double range = s.range_at(t);
    const double gain = 1.0 / range;
    for (int c = 0; c < channels; ++c) {
      const double tc = t - channel_delay_samples(s, c, range) / fs;
      double v = 0.0;
      for (const auto& tone : source) {
        v += tone.amplitude * gain * std::cos(two_pi * tone.freq * tc + tone.phase[c]);
      }
      const double ti = t - interferer_delay[static_cast<std::size_t>(c)];
      for (const auto& tone : interferer) {
        v += tone.amplitude * std::cos(two_pi * tone.freq * ti + tone.phase[c]);
      }
      if (noisy) v += noise_sigma * gauss(rng);
      clip.samples(c, n) = static_cast<float>(v);
    }
  }

  std::vector<LabelRow> rows;
  for (int m = 0; m <= s.duration_min; ++m) rows.push_back({m, s.range_at(60.0 * m)});
  return {std::move(clip), LabelTable(std::move(rows))};
}

}  // namespace uwloc
