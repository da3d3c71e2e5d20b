#include "capskd/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "capskd/binio.hpp"

namespace capskd {

namespace {
constexpr char kFtzMagic[4] = {'F', 'T', 'Z', '\0'};
constexpr char kRawMagic[4] = {'C', 'R', 'A', 'W'};
constexpr std::uint32_t kFtzVersion = 1;
constexpr std::uint32_t kRawVersion = 1;

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}
}  // namespace

std::string encode_ftz(const FtzFile& f) {
  if (f.segments.size() != f.labels.size()) {
    fail("ftz: " + std::to_string(f.segments.size()) + " segments vs " +
         std::to_string(f.labels.size()) + " labels");
  }
  std::string out;
  out.append(kFtzMagic, 4);
  put_u32(out, kFtzVersion);
  put_u32(out, f.windows);
  put_u32(out, f.features);
  put_u64(out, f.segments.size());
  put_u32(out, static_cast<std::uint32_t>(f.label_kind));
  for (std::size_t s = 0; s < f.segments.size(); ++s) {
    const FeatureTensor& seg = f.segments[s];
    if (seg.windows != f.windows || seg.features != f.features) {
      fail("ftz: segment " + std::to_string(s) + " is " +
           std::to_string(seg.windows) + "x" + std::to_string(seg.features) +
           ", expected " + std::to_string(f.windows) + "x" +
           std::to_string(f.features));
    }
    for (double v : seg.values) put_f32(out, static_cast<float>(v));
    const Label& lb = f.labels[s];
    if (lb.kind != f.label_kind) fail("ftz: mixed label kinds");
    if (f.label_kind == LabelKind::Class) {
      put_i32(out, lb.cls);
    } else {
      put_f32(out, lb.scalar);
    }
  }
  return out;
}

FtzFile decode_ftz(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != std::string(kFtzMagic, 4)) {
    fail("not a feature file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kFtzVersion) {
    fail("unsupported feature file version " + std::to_string(version));
  }
  FtzFile f;
  f.windows = r.u32();
  f.features = r.u32();
  const std::uint64_t count = r.u64();
  const std::uint32_t kind = r.u32();
  if (kind > 1) fail("feature file: unknown label kind " + std::to_string(kind));
  f.label_kind = static_cast<LabelKind>(kind);
  const std::size_t per_seg = static_cast<std::size_t>(f.windows) * f.features;
  f.segments.reserve(count);
  f.labels.reserve(count);
  for (std::uint64_t s = 0; s < count; ++s) {
    FeatureTensor seg;
    seg.windows = f.windows;
    seg.features = f.features;
    seg.values.resize(per_seg);
    for (std::size_t i = 0; i < per_seg; ++i)
      seg.values[i] = static_cast<double>(r.f32());
    f.segments.push_back(std::move(seg));
    if (f.label_kind == LabelKind::Class) {
      f.labels.push_back(Label::of_class(r.i32()));
    } else {
      f.labels.push_back(Label::of_scalar(r.f32()));
    }
  }
  return f;
}

void save_ftz(const std::string& path, const FtzFile& f) {
  write_file_bytes(path, encode_ftz(f));
}

FtzFile load_ftz(const std::string& path) {
  return decode_ftz(read_file_bytes(path));
}

std::string encode_raw_recording(const RawRecording& rec) {
  std::string out;
  out.append(kRawMagic, 4);
  put_u32(out, kRawVersion);
  put_u32(out, static_cast<std::uint32_t>(rec.channels));
  put_f32(out, static_cast<float>(rec.sample_rate));
  for (double v : rec.samples) put_f32(out, static_cast<float>(v));
  return out;
}

RawRecording decode_raw_recording(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != std::string(kRawMagic, 4)) {
    fail("not a raw recording file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kRawVersion) {
    fail("unsupported raw recording version " + std::to_string(version));
  }
  RawRecording rec;
  rec.channels = r.u32();
  rec.sample_rate = static_cast<double>(r.f32());
  if (rec.channels == 0) fail("raw recording: zero channels");
  const std::size_t n_values = r.remaining() / 4;
  if (n_values % rec.channels != 0) {
    fail("raw recording: sample count " + std::to_string(n_values) +
         " not divisible by " + std::to_string(rec.channels) + " channels");
  }
  rec.samples.resize(n_values);
  for (std::size_t i = 0; i < n_values; ++i)
    rec.samples[i] = static_cast<double>(r.f32());
  return rec;
}

void save_raw_recording(const std::string& path, const RawRecording& rec) {
  write_file_bytes(path, encode_raw_recording(rec));
}

RawRecording load_raw_recording(const std::string& path) {
  return decode_raw_recording(read_file_bytes(path));
}

RawRecording load_csv_recording(const std::string& path, double sample_rate) {
  std::ifstream in(path);
  if (!in) fail("cannot open CSV: " + path);
  std::string line;
  if (!std::getline(in, line)) fail("empty CSV: " + path);
  RawRecording rec;
  rec.sample_rate = sample_rate;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) rec.channel_names.push_back(cell);
  }
  rec.channels = rec.channel_names.size();
  if (rec.channels == 0) fail("CSV has no columns: " + path);
  std::vector<std::vector<double>> columns(rec.channels);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::size_t col = 0, start = 0;
    while (start <= line.size()) {
      std::size_t end = line.find(',', start);
      if (end == std::string::npos) end = line.size();
      if (col >= rec.channels) {
        fail(path + ":" + std::to_string(line_no) + ": too many columns");
      }
      double v = 0.0;
      const char* first = line.data() + start;
      const char* last = line.data() + end;
      auto [ptr, ec] = std::from_chars(first, last, v);
      if (ec != std::errc() || ptr != last) {
        fail(path + ":" + std::to_string(line_no) + ": bad number '" +
             line.substr(start, end - start) + "'");
      }
      columns[col++].push_back(v);
      if (end == line.size()) break;
      start = end + 1;
    }
    if (col != rec.channels) {
      fail(path + ":" + std::to_string(line_no) + ": expected " +
           std::to_string(rec.channels) + " columns, got " +
           std::to_string(col));
    }
  }
  const std::size_t n = columns[0].size();
  rec.samples.resize(rec.channels * n);
  for (std::size_t ch = 0; ch < rec.channels; ++ch) {
    std::copy(columns[ch].begin(), columns[ch].end(),
              rec.samples.begin() + static_cast<std::ptrdiff_t>(ch * n));
  }
  return rec;
}

void save_csv_recording(const std::string& path, const RawRecording& rec) {
  std::ofstream out(path);
  if (!out) fail("cannot open for writing: " + path);
  const std::size_t n = rec.samples_per_channel();
  for (std::size_t ch = 0; ch < rec.channels; ++ch) {
    if (ch) out << ',';
    out << (ch < rec.channel_names.size() ? rec.channel_names[ch]
                                          : "ch" + std::to_string(ch));
  }
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t ch = 0; ch < rec.channels; ++ch) {
      if (ch) out << ',';
      std::snprintf(buf, sizeof buf, "%.9g", rec.samples[ch * n + t]);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace capskd
