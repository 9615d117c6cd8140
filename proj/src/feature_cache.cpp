#include "binary_io.hpp"
#include "uwloc/error.hpp"
#include "uwloc/features.hpp"

#include <fstream>
#include <limits>

namespace uwloc {

namespace {
constexpr char kMagic[4] = {'A', 'C', 'A', 'F'};
constexpr std::uint32_t kVersion = 1;

std::uint16_t narrow_dim(Index v) {
  if (v < 0 || v > std::numeric_limits<std::uint16_t>::max()) {
    throw data_error("feature dimension does not fit the cache format");
  }
  return static_cast<std::uint16_t>(v);
}
}  // namespace

void write_feature_cache(const std::filesystem::path& path, std::span<const FeaturePair> features) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path.string());
  out.write(kMagic, 4);
  detail::put_le(out, kVersion);
  for (const auto& f : features) {
    validate(f);
    detail::put_le<std::uint32_t>(out, f.index);
    detail::put_le<float>(out, f.range_km);
    for (Index d : {f.channels, f.frames, f.mel_bins, f.pairs, f.lags}) {
      detail::put_le<std::uint16_t>(out, narrow_dim(d));
    }
    detail::put_floats(out, f.logmel.data(), static_cast<std::size_t>(f.logmel.size()));
    detail::put_floats(out, f.gcc.data(), static_cast<std::size_t>(f.gcc.size()));
  }
  if (!out) throw data_error("write failed for " + path.string());
}

std::vector<FeaturePair> read_feature_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open feature cache " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || !std::equal(magic, magic + 4, kMagic)) {
    throw data_error("not a feature cache (bad magic): " + path.string());
  }
  if (detail::get_le<std::uint32_t>(in) != kVersion) throw data_error("unsupported feature cache version");

  std::vector<FeaturePair> out;
  std::uint32_t index = 0;
  while (detail::try_get_le(in, index)) {
    FeaturePair f;
    f.index = index;
    f.range_km = detail::get_le<float>(in);
    f.channels = detail::get_le<std::uint16_t>(in);
    f.frames = detail::get_le<std::uint16_t>(in);
    f.mel_bins = detail::get_le<std::uint16_t>(in);
    f.pairs = detail::get_le<std::uint16_t>(in);
    f.lags = detail::get_le<std::uint16_t>(in);
    f.logmel.resize(f.channels, f.frames * f.mel_bins);
    f.gcc.resize(f.pairs, f.frames * f.lags);
    detail::get_floats(in, f.logmel.data(), static_cast<std::size_t>(f.logmel.size()));
    detail::get_floats(in, f.gcc.data(), static_cast<std::size_t>(f.gcc.size()));
    validate(f);
    out.push_back(std::move(f));
  }
  if (out.empty()) throw data_error("feature cache holds no segments: " + path.string());
  return out;
}

}  // namespace uwloc
