#pragma once

// Synthetic tow-path scenarios: a tonal source moving along a straight range
// trajectory past a multi-channel array, with exact per-minute range labels.

#include "uwloc/signal_io.hpp"

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace uwloc {

/// Doppler displacement v f / c of a tone at `f_hz` for radial closing speed
/// `v_mps` (positive = approaching).
double doppler_shift(double f_hz, double v_mps, double c_mps = 1500.0);

std::vector<double> default_pilot_tones();

/// A stationary loud tone set, e.g. a moored vessel near the array.
struct Interferer {
  std::vector<double> tones_hz;
  double level_db = 10.0;  // relative to the source at 1 km
  double range_km = 1.5;   // fixes its inter-channel delays
};

struct Scenario {
  int duration_min = 75;
  std::vector<double> tones_hz = default_pilot_tones();
  double source_speed_mps = 2.51;  // radial closing speed, sign selects approach/recede
  double range_start_km = 12.0;
  double range_end_km = 0.7;
  std::optional<Interferer> interferer;
  double snr_db = 20.0;  // tone power at 1 km over white-noise power; +inf disables noise
  int channels = 4;
  std::uint64_t seed = 1;
  double sample_rate_hz = 1500.0;
  double sound_speed_mps = 1500.0;
  double max_delay_samples = 12.0;   // end-to-end array delay scale
  double delay_range_scale_km = 2.0; // delay ~ scale / (range + scale)

  double range_at(double t_seconds) const;
};

/// Throws usage_error when a scenario field violates its invariants.
void validate_scenario(const Scenario& s);

/// Per-channel inter-element delay (samples) at a given range; channel 0 is
/// the reference and delays grow linearly with channel index.
double channel_delay_samples(const Scenario& s, int channel, double range_km);

struct SynthOutput {
  MultiChannelClip clip;
  LabelTable labels;
};

SynthOutput synth_towpath(const Scenario& s);

}  // namespace uwloc
