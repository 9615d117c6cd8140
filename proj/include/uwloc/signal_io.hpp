#pragma once

// Multi-channel audio ingestion, one-second segmentation and per-minute
// range labelling.

#include "uwloc/types.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace uwloc {

enum class ArrayTag { VLA, TLA, HLA_N, HLA_S, SYNTH };

std::string to_string(ArrayTag tag);
ArrayTag parse_array_tag(const std::string& text);

/// Synchronized multi-channel recording, samples laid out [channels x frames].
struct MultiChannelClip {
  MatrixR<float> samples;
  double sample_rate_hz = 0.0;
  ArrayTag array_tag = ArrayTag::SYNTH;

  Index channels() const { return samples.rows(); }
  Index frames() const { return samples.cols(); }
  double duration_s() const { return static_cast<double>(frames()) / sample_rate_hz; }
};

/// Throws data_error unless the clip has >= 2 channels and a positive rate.
void validate_clip(const MultiChannelClip& clip);

struct LabelRow {
  std::int64_t minute = 0;
  double range_km = 0.0;
};

/// Ground-truth ranges sampled once per minute.
class LabelTable {
 public:
  LabelTable() = default;
  explicit LabelTable(std::vector<LabelRow> rows);

  const std::vector<LabelRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }
  std::size_t size() const { return rows_.size(); }

  /// Range of the row whose minute is nearest to `t_seconds`; exact half-minute
  /// ties go to the earlier minute. Throws data_error outside
  /// [first minute - 30 s, last minute + 30 s].
  double range_at(double t_seconds) const;

 private:
  std::vector<LabelRow> rows_;
};

struct Segment {
  MatrixR<float> samples;  // [channels x sample_rate]
  std::uint32_t index = 0;
};

struct LabeledSegment {
  MatrixR<float> samples;
  std::uint32_t index = 0;
  double range_km = 0.0;
};

/// Decodes RIFF WAV (16/24/32-bit PCM, 32-bit float) or raw `.f32` with its
/// `.meta` sidecar. Integer PCM is scaled by 2^(bits-1).
MultiChannelClip load_multichannel_audio(const std::filesystem::path& path,
                                         std::optional<double> expected_rate = std::nullopt);

MultiChannelClip load_wav(const std::filesystem::path& path);
MultiChannelClip load_raw(const std::filesystem::path& path);

enum class WavEncoding { pcm16, pcm24, pcm32, float32 };
void write_wav(const std::filesystem::path& path, const MultiChannelClip& clip,
               WavEncoding encoding);

/// Writes `<stem>.f32` (interleaved little-endian float32) and `<stem>.meta`.
/// `path` may name either file or the bare stem.
void write_raw(const std::filesystem::path& path, const MultiChannelClip& clip);

/// Non-overlapping one-second segments; the trailing partial second is dropped.
std::vector<Segment> segment_clip(const MultiChannelClip& clip);

/// Labels each segment by its centre time, (index + 0.5) seconds.
std::vector<LabeledSegment> attach_labels(std::vector<Segment> segments,
                                          const LabelTable& table);

LabelTable read_label_csv(const std::filesystem::path& path);
void write_label_csv(const std::filesystem::path& path, const LabelTable& table);

}  // namespace uwloc
