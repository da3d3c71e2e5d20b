#pragma once

// On-disk formats for recordings and extracted features.
//
// Raw recording binary ("CRAW"), 16-byte header:
//   magic "CRAW", u32 version (=1), u32 channel count, f32 sample rate,
//   then f32 samples little-endian, channel-major.
//
// Feature file ("FTZ\0"):
//   magic, u32 version (=1), u32 L (windows per segment), u32 F,
//   u64 segment count, u32 label kind (0 = class, 1 = scalar),
//   then per segment L*F f32 values (row-major) followed by the label
//   (i32 class id or f32 scalar). Round-trips are bit-exact.
//
// CSV recordings: header row with channel names, one row per sample.

#include <string>
#include <vector>

#include "capskd/signal.hpp"

namespace capskd {

enum class LabelKind : std::uint32_t { Class = 0, Scalar = 1 };

struct Label {
  LabelKind kind = LabelKind::Class;
  std::int32_t cls = -1;
  float scalar = 0.0f;

  static Label of_class(std::int32_t c) { return {LabelKind::Class, c, 0.0f}; }
  static Label of_scalar(float s) { return {LabelKind::Scalar, -1, s}; }
};

struct FtzFile {
  std::uint32_t windows = 0;   // L
  std::uint32_t features = 0;  // F
  LabelKind label_kind = LabelKind::Class;
  std::vector<FeatureTensor> segments;  // f64 in memory, f32 on disk
  std::vector<Label> labels;
};

std::string encode_ftz(const FtzFile& f);
FtzFile decode_ftz(const std::string& bytes);
void save_ftz(const std::string& path, const FtzFile& f);
FtzFile load_ftz(const std::string& path);

std::string encode_raw_recording(const RawRecording& rec);
RawRecording decode_raw_recording(const std::string& bytes);
void save_raw_recording(const std::string& path, const RawRecording& rec);
RawRecording load_raw_recording(const std::string& path);

RawRecording load_csv_recording(const std::string& path, double sample_rate);
void save_csv_recording(const std::string& path, const RawRecording& rec);

}  // namespace capskd
