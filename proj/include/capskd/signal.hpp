#pragma once

// Spectral feature extraction for multichannel recordings: band-power from
// Hanning-window periodograms (log scale) and per-band differential entropy,
// plus the preprocessing chain (resample, band-pass, notch, normalize).

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace capskd {

struct RawRecording {
  std::size_t channels = 0;
  double sample_rate = 0.0;
  std::vector<double> samples;  // channel-major: samples[ch * n + t]
  std::vector<std::string> channel_names;

  std::size_t samples_per_channel() const {
    return channels == 0 ? 0 : samples.size() / channels;
  }
  double* channel(std::size_t ch) { return samples.data() + ch * samples_per_channel(); }
  const double* channel(std::size_t ch) const {
    return samples.data() + ch * samples_per_channel();
  }
  void validate() const;  // throws on non-finite samples / bad fields
};

struct BandSpec {
  std::vector<std::pair<double, double>> bands;  // [low, high) in Hz

  // Canonical delta/theta/alpha/beta/gamma split.
  static BandSpec canonical_five();
  // n contiguous bands of `width` Hz starting at `start`.
  static BandSpec uniform(double start, double width, std::size_t n);
  void validate(double sample_rate) const;
  std::size_t size() const { return bands.size(); }
};

// Per-segment feature matrix, `windows` rows by `features` columns.
struct FeatureTensor {
  std::size_t windows = 0;
  std::size_t features = 0;
  std::vector<double> values;  // row-major [window][feature]

  double at(std::size_t w, std::size_t f) const { return values[w * features + f]; }
};

// ---- preprocessing ----

struct PreprocessConfig {
  double target_rate = 0.0;  // 0: keep input rate; else integer decimation
  double bandpass_low = 0.0;   // 0: skip band-pass
  double bandpass_high = 0.0;
  double notch_hz = 0.0;  // 0: skip notch
  double notch_q = 30.0;
  bool normalize = true;  // per-channel min-max to [-1, 1]
};

// Resample -> zero-phase Butterworth band-pass -> notch -> normalize.
RawRecording preprocess(const RawRecording& rec, const PreprocessConfig& cfg);

// ---- feature extraction ----

struct PsdOptions {
  double power_floor = 1e-12;  // applied before the log
};

struct DeOptions {
  double variance_floor = 1e-12;
  // false: sigma^2 is the per-window time-domain variance of the ideal
  // (FFT brick-wall) band-filtered signal. true: sigma^2 from the window's
  // raw periodogram power inside the band (Parseval-equivalent reading).
  bool sigma_from_psd = false;
};

// Values over all consecutive non-overlapping 1-second windows of a
// recording, laid out [window][channel][band].
struct WindowedBandValues {
  std::size_t n_windows = 0;
  std::size_t channels = 0;
  std::size_t bands = 0;
  std::vector<double> values;

  double at(std::size_t w, std::size_t ch, std::size_t b) const {
    return values[(w * channels + ch) * bands + b];
  }
};

WindowedBandValues extract_log_psd(const RawRecording& rec, const BandSpec& bands,
                                   const PsdOptions& opt = {});
WindowedBandValues extract_de(const RawRecording& rec, const BandSpec& bands,
                              const DeOptions& opt = {});

// Concatenate the two feature families into one row per window. Feature
// order is fixed: PSD block then DE block, each channel-major band-minor,
// i.e. column = family*(channels*bands) + channel*bands + band.
FeatureTensor build_feature_tensor(const WindowedBandValues& psd,
                                   const WindowedBandValues& de);

// Chop an all-windows tensor into consecutive L-window segments (exact
// partition; trailing windows that do not fill a segment are dropped).
std::vector<FeatureTensor> segment_features(const FeatureTensor& all,
                                            std::size_t segment_seconds);

// ---- filters (exposed for tests) ----

struct Biquad {
  double b0, b1, b2, a1, a2;  // normalized so a0 == 1
};

std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double fs);
std::vector<Biquad> butterworth_highpass(int order, double cutoff_hz, double fs);
Biquad notch_biquad(double f0_hz, double q, double fs);

// Forward-backward (zero-phase) application with odd-extension padding.
void filtfilt(const std::vector<Biquad>& sos, std::vector<double>& x);

// ---- FFT helpers (FFTW-backed; exposed for the DE brick-wall and tests) ----

// Real-to-complex transform, returns n/2+1 bins.
std::vector<std::complex<double>> rfft(const std::vector<double>& x);
// Inverse of rfft; `n` is the original real length.
std::vector<double> irfft(const std::vector<std::complex<double>>& spec,
                          std::size_t n);

}  // namespace capskd
