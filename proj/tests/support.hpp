#pragma once

#include "uwloc/features.hpp"
#include "uwloc/net.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace uwloc::testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("uwloc_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline FeaturePair random_pair(std::mt19937_64& rng, Index channels, Index frames, Index mels, Index lags,
                               std::uint32_t index = 0, float range_km = 1.0f) {
  std::normal_distribution<float> nd;
  FeaturePair f;
  f.index = index;
  f.range_km = range_km;
  f.channels = channels;
  f.frames = frames;
  f.mel_bins = mels;
  f.pairs = channels * (channels - 1) / 2;
  f.lags = lags;
  f.logmel.resize(channels, frames * mels);
  f.gcc.resize(f.pairs, frames * lags);
  for (Index i = 0; i < f.logmel.size(); ++i) f.logmel.data()[i] = nd(rng);
  for (Index i = 0; i < f.gcc.size(); ++i) f.gcc.data()[i] = nd(rng);
  return f;
}

/// Small network for gradient checks: 2 mel channels, 1 pair, 9 x 8 maps.
inline NetConfig micro_config() {
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

}  // namespace uwloc::testing
