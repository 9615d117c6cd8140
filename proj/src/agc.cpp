#include "uwloc/agc.hpp"

#include "uwloc/features.hpp"
#include "uwloc/signal_io.hpp"

namespace uwloc {

AgcMode parse_agc_mode(const std::string& text) {
  if (text == "features") return AgcMode::features;
  if (text == "waveform") return AgcMode::waveform;
  if (text == "off") return AgcMode::off;
  throw usage_error("agc.mode must be one of features|waveform|off");
}

std::string to_string(AgcMode mode) {
  switch (mode) {
    case AgcMode::features: return "features";
    case AgcMode::waveform: return "waveform";
    case AgcMode::off: return "off";
  }
  return "features";
}

void apply_agc(FeaturePair& features, const AgcParams& p) {
  features.logmel = agc_forward(features.logmel, p).first;
  features.gcc = agc_forward(features.gcc, p).first;
}

void apply_agc(LabeledSegment& segment, const AgcParams& p) {
  segment.samples = agc_forward(segment.samples, p).first;
}

}  // namespace uwloc
