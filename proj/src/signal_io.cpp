#include "uwloc/signal_io.hpp"

#include "binary_io.hpp"
#include "uwloc/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace uwloc {

namespace fs = std::filesystem;
using detail::get_le;
using detail::put_le;

std::string to_string(ArrayTag tag) {
  switch (tag) {
    case ArrayTag::VLA: return "VLA";
    case ArrayTag::TLA: return "TLA";
    case ArrayTag::HLA_N: return "HLA_N";
    case ArrayTag::HLA_S: return "HLA_S";
    case ArrayTag::SYNTH: return "SYNTH";
  }
  return "SYNTH";
}

ArrayTag parse_array_tag(const std::string& text) {
  static const std::map<std::string, ArrayTag> tags = {
      {"VLA", ArrayTag::VLA}, {"TLA", ArrayTag::TLA}, {"HLA_N", ArrayTag::HLA_N},
      {"HLA_S", ArrayTag::HLA_S}, {"SYNTH", ArrayTag::SYNTH}};
  auto it = tags.find(text);
  if (it == tags.end()) throw data_error("unknown array tag '" + text + "'");
  return it->second;
}

void validate_clip(const MultiChannelClip& clip) {
  if (!(clip.sample_rate_hz > 0.0) || !std::isfinite(clip.sample_rate_hz)) {
    throw data_error("sample rate must be positive");
  }
  if (clip.channels() < 2) throw data_error("insufficient channels: need at least 2");
}

// ---------------------------------------------------------------------------
// Labels

LabelTable::LabelTable(std::vector<LabelRow> rows) : rows_(std::move(rows)) {
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (rows_[i].minute < 0) throw data_error("label minute must be non-negative");
    if (!(rows_[i].range_km > 0.0)) throw data_error("label range_km must be positive");
    if (i > 0 && rows_[i].minute <= rows_[i - 1].minute) {
      throw data_error("label minutes must be strictly increasing");
    }
  }
}

double LabelTable::range_at(double t_seconds) const {
  if (rows_.empty()) throw data_error("empty label table");
  const double first = 60.0 * static_cast<double>(rows_.front().minute) - 30.0;
  const double last = 60.0 * static_cast<double>(rows_.back().minute) + 30.0;
  if (t_seconds < first || t_seconds > last) {
    std::ostringstream msg;
    msg << "time " << t_seconds << " s outside label coverage [" << first << ", " << last << "]";
    throw data_error(msg.str());
  }
  // First row whose distance is minimal; scanning forward with strict '<'
  // keeps the earlier minute on ties.
  std::size_t best = 0;
  double best_dist = std::abs(t_seconds - 60.0 * static_cast<double>(rows_[0].minute));
  for (std::size_t i = 1; i < rows_.size(); ++i) {
    const double d = std::abs(t_seconds - 60.0 * static_cast<double>(rows_[i].minute));
    if (d < best_dist) {
      best = i;
      best_dist = d;
    } else if (60.0 * static_cast<double>(rows_[i].minute) > t_seconds) {
      break;
    }
  }
  return rows_[best].range_km;
}

LabelTable read_label_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open label table " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw data_error("empty label table " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "minute,range_km") throw data_error("label CSV header must be 'minute,range_km'");
  std::vector<LabelRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw data_error("malformed label row at line " + std::to_string(lineno));
    }
    LabelRow row;
    try {
      std::size_t used = 0;
      row.minute = std::stoll(line.substr(0, comma), &used);
      row.range_km = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw data_error("malformed label row at line " + std::to_string(lineno));
    }
    rows.push_back(row);
  }
  if (rows.empty()) throw data_error("label table has no rows");
  return LabelTable(std::move(rows));
}

void write_label_csv(const fs::path& path, const LabelTable& table) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path.string());
  out << "minute,range_km\n";
  out.precision(17);
  for (const auto& row : table.rows()) out << row.minute << ',' << row.range_km << '\n';
}

// ---------------------------------------------------------------------------
// WAV

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::string read_tag(std::istream& in) {
  char tag[4];
  in.read(tag, 4);
  if (in.gcount() != 4) return {};
  return std::string(tag, 4);
}

}  // namespace

MultiChannelClip load_wav(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  if (read_tag(in) != "RIFF") throw data_error("not a RIFF file: " + path.string());
  get_le<std::uint32_t>(in);
  if (read_tag(in) != "WAVE") throw data_error("not a WAVE file: " + path.string());

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::vector<char> payload;
  bool have_data = false;

  while (in && !have_data) {
    const std::string tag = read_tag(in);
    if (tag.empty()) break;
    const auto size = get_le<std::uint32_t>(in);
    if (tag == "fmt ") {
      if (size < 16) throw data_error("fmt chunk too small");
      format = get_le<std::uint16_t>(in);
      channels = get_le<std::uint16_t>(in);
      rate = get_le<std::uint32_t>(in);
      get_le<std::uint32_t>(in);  // byte rate
      get_le<std::uint16_t>(in);  // block align
      bits = get_le<std::uint16_t>(in);
      std::uint32_t consumed = 16;
      if (format == kFormatExtensible && size >= 26) {
        get_le<std::uint16_t>(in);  // cbSize
        get_le<std::uint16_t>(in);  // valid bits
        get_le<std::uint32_t>(in);  // channel mask
        format = get_le<std::uint16_t>(in);  // leading bytes of the subformat GUID
        consumed = 26;
      }
      in.seekg(size - consumed + (size & 1u), std::ios::cur);
      have_fmt = true;
    } else if (tag == "data") {
      payload.resize(size);
      in.read(payload.data(), size);
      if (in.gcount() != static_cast<std::streamsize>(size)) throw data_error("truncated data chunk");
      have_data = true;
    } else {
      in.seekg(size + (size & 1u), std::ios::cur);
    }
  }
  if (!have_fmt || !have_data) throw data_error("missing fmt or data chunk in " + path.string());
  if (channels < 2) throw data_error("insufficient channels: need at least 2");

  const bool is_float = format == kFormatFloat;
  if (!(format == kFormatPcm || is_float)) throw data_error("unsupported WAV format tag");
  if (is_float && bits != 32) throw data_error("only 32-bit float WAV is supported");
  if (!is_float && bits != 16 && bits != 24 && bits != 32) {
    throw data_error("unsupported PCM bit depth " + std::to_string(bits));
  }

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frames = payload.size() / (bytes_per_sample * channels);
  MultiChannelClip clip;
  clip.sample_rate_hz = rate;
  clip.array_tag = ArrayTag::SYNTH;
  clip.samples.resize(channels, static_cast<Index>(frames));
  const double scale = is_float ? 1.0 : std::ldexp(1.0, -(static_cast<int>(bits) - 1));
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t c = 0; c < channels; ++c) {
      float v = 0.0f;
      if (is_float) {
        std::uint32_t u = p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24);
        std::memcpy(&v, &u, 4);
      } else if (bits == 16) {
        const auto s = static_cast<std::int16_t>(p[0] | (p[1] << 8));
        v = static_cast<float>(s * scale);
      } else if (bits == 24) {
        std::int32_t s = p[0] | (p[1] << 8) | (p[2] << 16);
        if (s & 0x800000) s |= ~0xFFFFFF;
        v = static_cast<float>(s * scale);
      } else {
        const auto s = static_cast<std::int32_t>(
            p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24));
        v = static_cast<float>(s * scale);
      }
      clip.samples(static_cast<Index>(c), static_cast<Index>(f)) = v;
      p += bytes_per_sample;
    }
  }
  validate_clip(clip);
  return clip;
}

void write_wav(const fs::path& path, const MultiChannelClip& clip, WavEncoding encoding) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path.string());
  const std::uint16_t bits = encoding == WavEncoding::pcm16   ? 16
                             : encoding == WavEncoding::pcm24 ? 24
                                                              : 32;
  const auto channels = static_cast<std::uint16_t>(clip.channels());
  const auto rate = static_cast<std::uint32_t>(std::lround(clip.sample_rate_hz));
  const std::uint32_t block = channels * (bits / 8);
  const std::uint32_t data_size = block * static_cast<std::uint32_t>(clip.frames());
  out.write("RIFF", 4);
  put_le<std::uint32_t>(out, 36 + data_size);
  out.write("WAVEfmt ", 8);
  put_le<std::uint32_t>(out, 16);
  put_le<std::uint16_t>(out, encoding == WavEncoding::float32 ? kFormatFloat : kFormatPcm);
  put_le<std::uint16_t>(out, channels);
  put_le<std::uint32_t>(out, rate);
  put_le<std::uint32_t>(out, rate * block);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(block));
  put_le<std::uint16_t>(out, bits);
  out.write("data", 4);
  put_le<std::uint32_t>(out, data_size);
  const double full = std::ldexp(1.0, bits - 1);
  for (Index f = 0; f < clip.frames(); ++f) {
    for (Index c = 0; c < clip.channels(); ++c) {
      const float v = clip.samples(c, f);
      if (encoding == WavEncoding::float32) {
        put_le(out, v);
        continue;
      }
      const double q = std::clamp(std::round(v * full), -full, full - 1.0);
      const auto s = static_cast<std::int32_t>(q);
      if (bits == 16) {
        put_le(out, static_cast<std::int16_t>(s));
      } else if (bits == 24) {
        const char b[3] = {static_cast<char>(s & 0xFF), static_cast<char>((s >> 8) & 0xFF),
                           static_cast<char>((s >> 16) & 0xFF)};
        out.write(b, 3);
      } else {
        put_le(out, s);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Raw float32 + sidecar

namespace {

fs::path with_ext(fs::path p, const char* ext) {
  const auto e = p.extension();
  if (e == ".f32" || e == ".meta") p.replace_extension();
  p += ext;
  return p;
}

}  // namespace

MultiChannelClip load_raw(const fs::path& path) {
  const fs::path meta_path = with_ext(path, ".meta");
  const fs::path data_path = with_ext(path, ".f32");
  std::ifstream meta(meta_path);
  if (!meta) throw data_error("cannot open sidecar " + meta_path.string());

  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(meta, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw data_error("malformed sidecar line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"rate", "channels"}) {
    if (!kv.count(key)) throw data_error(std::string("sidecar missing '") + key + "'");
  }
  MultiChannelClip clip;
  Index channels = 0;
  try {
    clip.sample_rate_hz = std::stod(kv["rate"]);
    channels = std::stoll(kv["channels"]);
  } catch (const std::exception&) {
    throw data_error("malformed sidecar values in " + meta_path.string());
  }
  clip.array_tag = kv.count("array") ? parse_array_tag(kv["array"]) : ArrayTag::SYNTH;
  if (channels < 2) throw data_error("insufficient channels: need at least 2");

  std::ifstream in(data_path, std::ios::binary | std::ios::ate);
  if (!in) throw data_error("cannot open " + data_path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  const std::size_t per_frame = sizeof(float) * static_cast<std::size_t>(channels);
  if (bytes % per_frame != 0) throw data_error("raw file size is not a whole number of frames");
  const auto frames = static_cast<Index>(bytes / per_frame);
  // Interleaved on disk == column-major [channels x frames].
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor> interleaved(channels, frames);
  detail::get_floats(in, interleaved.data(), static_cast<std::size_t>(interleaved.size()));
  clip.samples = interleaved;
  validate_clip(clip);
  return clip;
}

void write_raw(const fs::path& path, const MultiChannelClip& clip) {
  validate_clip(clip);
  const fs::path meta_path = with_ext(path, ".meta");
  const fs::path data_path = with_ext(path, ".f32");
  {
    std::ofstream meta(meta_path);
    if (!meta) throw data_error("cannot write " + meta_path.string());
    meta.precision(17);
    meta << "rate=" << clip.sample_rate_hz << '\n'
         << "channels=" << clip.channels() << '\n'
         << "array=" << to_string(clip.array_tag) << '\n';
  }
  std::ofstream out(data_path, std::ios::binary);
  if (!out) throw data_error("cannot write " + data_path.string());
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor> interleaved = clip.samples;
  detail::put_floats(out, interleaved.data(), static_cast<std::size_t>(interleaved.size()));
  if (!out) throw data_error("write failed for " + data_path.string());
}

MultiChannelClip load_multichannel_audio(const fs::path& path, std::optional<double> expected_rate) {
  const auto ext = path.extension();
  MultiChannelClip clip = (ext == ".f32" || ext == ".meta") ? load_raw(path) : load_wav(path);
  if (expected_rate && std::abs(*expected_rate - clip.sample_rate_hz) > 1e-9 * *expected_rate) {
    std::ostringstream msg;
    msg << "sample rate mismatch: file has " << clip.sample_rate_hz << " Hz, expected "
        << *expected_rate;
    throw data_error(msg.str());
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Segmentation

std::vector<Segment> segment_clip(const MultiChannelClip& clip) {
  validate_clip(clip);
  const double rate = clip.sample_rate_hz;
  const auto per_segment = static_cast<Index>(std::llround(rate));
  if (std::abs(rate - static_cast<double>(per_segment)) > 1e-9) {
    throw data_error("one-second segmentation needs an integer sample rate");
  }
  const Index count = clip.frames() / per_segment;
  if (count < 1) throw data_error("clip shorter than one second");
  std::vector<Segment> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index k = 0; k < count; ++k) {
    out.push_back({clip.samples.middleCols(k * per_segment, per_segment),
                   static_cast<std::uint32_t>(k)});
  }
  return out;
}

std::vector<LabeledSegment> attach_labels(std::vector<Segment> segments, const LabelTable& table) {
  if (table.empty()) throw data_error("empty label table");
  std::vector<LabeledSegment> out;
  out.reserve(segments.size());
  for (auto& s : segments) {
    const double centre = static_cast<double>(s.index) + 0.5;
    out.push_back({std::move(s.samples), s.index, table.range_at(centre)});
  }
  return out;
}

}  // namespace uwloc
