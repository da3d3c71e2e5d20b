#include "capskd/signal.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <stdexcept>
#include <unordered_map>

#include "capskd/diagnostics.hpp"

namespace capskd {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

// FFTW plan creation is not thread-safe and not free; keep one plan pair per
// transform size behind a lock. Buffers belong to the cache entry, callers
// copy in and out.
class FftPlans {
 public:
  static FftPlans& instance() {
    static FftPlans p;
    return p;
  }

  void forward(const std::vector<double>& x, std::vector<std::complex<double>>& out) {
    std::lock_guard<std::mutex> lock(mu_);
    Entry& e = entry(x.size());
    std::copy(x.begin(), x.end(), e.real);
    fftw_execute(e.fwd);
    out.resize(x.size() / 2 + 1);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = {e.cplx[i][0], e.cplx[i][1]};
  }

  void inverse(const std::vector<std::complex<double>>& spec, std::size_t n,
               std::vector<double>& out) {
    std::lock_guard<std::mutex> lock(mu_);
    Entry& e = entry(n);
    for (std::size_t i = 0; i < spec.size(); ++i) {
      e.cplx[i][0] = spec[i].real();
      e.cplx[i][1] = spec[i].imag();
    }
    fftw_execute(e.inv);
    out.resize(n);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = e.real[i] * scale;
  }

 private:
  struct Entry {
    double* real = nullptr;
    fftw_complex* cplx = nullptr;
    fftw_plan fwd{}, inv{};
  };

  Entry& entry(std::size_t n) {
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    Entry e;
    e.real = fftw_alloc_real(n);
    e.cplx = fftw_alloc_complex(n / 2 + 1);
    e.fwd = fftw_plan_dft_r2c_1d(static_cast<int>(n), e.real, e.cplx,
                                 FFTW_ESTIMATE);
    e.inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), e.cplx, e.real,
                                 FFTW_ESTIMATE);
    return plans_.emplace(n, e).first->second;
  }

  std::mutex mu_;
  std::unordered_map<std::size_t, Entry> plans_;
};

std::size_t window_samples(const RawRecording& rec) {
  const double w = rec.sample_rate;
  const auto n = static_cast<std::size_t>(std::llround(w));
  if (w <= 0.0 || std::abs(w - static_cast<double>(n)) > 1e-9) {
    fail("sample rate must be a positive integer number of Hz, got " +
         std::to_string(w));
  }
  return n;
}

// Periodogram bin indices covering [low, high) for an n-point window at fs.
std::vector<std::size_t> band_bins(double low, double high, std::size_t n,
                                   double fs) {
  std::vector<std::size_t> bins;
  for (std::size_t k = 0; k <= n / 2; ++k) {
    const double f = static_cast<double>(k) * fs / static_cast<double>(n);
    if (f >= low && f < high) bins.push_back(k);
  }
  return bins;
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> h(n);
  for (std::size_t i = 0; i < n; ++i)
    h[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(i) /
                                 static_cast<double>(n)));
  return h;
}

void apply_biquad(const Biquad& s, std::vector<double>& x) {
  // Direct form II transposed.
  double z1 = 0.0, z2 = 0.0;
  for (double& v : x) {
    const double in = v;
    const double out = s.b0 * in + z1;
    z1 = s.b1 * in - s.a1 * out + z2;
    z2 = s.b2 * in - s.a2 * out;
    v = out;
  }
}

void sos_forward(const std::vector<Biquad>& sos, std::vector<double>& x) {
  for (const Biquad& s : sos) apply_biquad(s, x);
}

}  // namespace

// ---------------------------------------------------------------------------
// types
// ---------------------------------------------------------------------------

void RawRecording::validate() const {
  if (sample_rate <= 0.0) fail("recording sample_rate must be > 0");
  if (channels < 1) fail("recording must have at least one channel");
  if (samples.size() % channels != 0) {
    fail("sample buffer size " + std::to_string(samples.size()) +
         " not divisible by channel count " + std::to_string(channels));
  }
  for (double v : samples) {
    if (!std::isfinite(v)) {
      fail("recording contains non-finite samples; rejecting input");
    }
  }
}

BandSpec BandSpec::canonical_five() {
  return BandSpec{{{0.5, 4.0}, {4.0, 8.0}, {8.0, 13.0}, {13.0, 30.0}, {30.0, 50.0}}};
}

BandSpec BandSpec::uniform(double start, double width, std::size_t n) {
  BandSpec spec;
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = start + width * static_cast<double>(i);
    spec.bands.emplace_back(lo, lo + width);
  }
  return spec;
}

void BandSpec::validate(double sample_rate) const {
  if (bands.empty()) fail("band spec must be non-empty");
  for (const auto& [lo, hi] : bands) {
    if (!(0.0 <= lo && lo < hi && hi <= sample_rate / 2.0)) {
      fail("band [" + std::to_string(lo) + "," + std::to_string(hi) +
           ") outside [0, Nyquist=" + std::to_string(sample_rate / 2.0) + "]");
    }
  }
}

// ---------------------------------------------------------------------------
// filters
// ---------------------------------------------------------------------------

namespace {

// Butterworth prototype poles mapped through the bilinear transform, paired
// into biquads. `highpass` selects the LP->HP transform (zeros move from
// z=-1 to z=+1) with gain pinned at Nyquist instead of DC.
std::vector<Biquad> butterworth_sos(int order, double cutoff_hz, double fs,
                                    bool highpass) {
  if (order < 2 || order % 2 != 0) {
    fail("butterworth: order must be even and >= 2, got " +
         std::to_string(order));
  }
  if (!(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0)) {
    fail("butterworth: cutoff " + std::to_string(cutoff_hz) +
         " Hz outside (0, Nyquist) at fs=" + std::to_string(fs));
  }
  const double warped = 2.0 * fs * std::tan(M_PI * cutoff_hz / fs);
  std::vector<Biquad> sos;
  for (int k = 1; k <= order / 2; ++k) {
    const double theta =
        M_PI * (2.0 * k + order - 1.0) / (2.0 * order);  // upper half-plane
    std::complex<double> p(std::cos(theta), std::sin(theta));
    if (highpass) p = 1.0 / p;  // |p| == 1, stays in the left half-plane
    p *= warped;
    const std::complex<double> zp = (2.0 * fs + p) / (2.0 * fs - p);
    Biquad s{};
    s.a1 = -2.0 * zp.real();
    s.a2 = std::norm(zp);
    if (highpass) {
      // zeros at z=+1, unity gain at z=-1
      const double g = (1.0 - s.a1 + s.a2) / 4.0;
      s.b0 = g;
      s.b1 = -2.0 * g;
      s.b2 = g;
    } else {
      // zeros at z=-1, unity gain at z=+1
      const double g = (1.0 + s.a1 + s.a2) / 4.0;
      s.b0 = g;
      s.b1 = 2.0 * g;
      s.b2 = g;
    }
    sos.push_back(s);
  }
  return sos;
}

}  // namespace

std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double fs) {
  return butterworth_sos(order, cutoff_hz, fs, false);
}

std::vector<Biquad> butterworth_highpass(int order, double cutoff_hz, double fs) {
  return butterworth_sos(order, cutoff_hz, fs, true);
}

Biquad notch_biquad(double f0_hz, double q, double fs) {
  if (!(f0_hz > 0.0 && f0_hz < fs / 2.0)) {
    fail("notch: frequency " + std::to_string(f0_hz) +
         " Hz outside (0, Nyquist) at fs=" + std::to_string(fs));
  }
  if (q <= 0.0) fail("notch: Q must be > 0");
  const double w0 = 2.0 * M_PI * f0_hz / fs;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  Biquad s{};
  s.b0 = 1.0 / a0;
  s.b1 = -2.0 * std::cos(w0) / a0;
  s.b2 = 1.0 / a0;
  s.a1 = -2.0 * std::cos(w0) / a0;
  s.a2 = (1.0 - alpha) / a0;
  return s;
}

void filtfilt(const std::vector<Biquad>& sos, std::vector<double>& x) {
  if (sos.empty() || x.empty()) return;
  const std::size_t n = x.size();
  const std::size_t pad = std::min(n - 1, 3 * (2 * sos.size() + 1));
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  // Odd extension about the end points damps edge transients.
  for (std::size_t i = 0; i < pad; ++i) ext.push_back(2.0 * x[0] - x[pad - i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 0; i < pad; ++i)
    ext.push_back(2.0 * x[n - 1] - x[n - 2 - i]);
  sos_forward(sos, ext);
  std::reverse(ext.begin(), ext.end());
  sos_forward(sos, ext);
  std::reverse(ext.begin(), ext.end());
  std::copy(ext.begin() + static_cast<std::ptrdiff_t>(pad),
            ext.begin() + static_cast<std::ptrdiff_t>(pad + n), x.begin());
}

// ---------------------------------------------------------------------------
// FFT wrappers
// ---------------------------------------------------------------------------

std::vector<std::complex<double>> rfft(const std::vector<double>& x) {
  std::vector<std::complex<double>> out;
  FftPlans::instance().forward(x, out);
  return out;
}

std::vector<double> irfft(const std::vector<std::complex<double>>& spec,
                          std::size_t n) {
  if (spec.size() != n / 2 + 1) {
    fail("irfft: spectrum size " + std::to_string(spec.size()) +
         " does not match length " + std::to_string(n));
  }
  std::vector<double> out;
  FftPlans::instance().inverse(spec, n, out);
  return out;
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

RawRecording preprocess(const RawRecording& rec, const PreprocessConfig& cfg) {
  rec.validate();
  RawRecording out = rec;
  const std::size_t n_in = rec.samples_per_channel();

  // 1) decimate to the target rate (integer factor, after an anti-alias LP)
  if (cfg.target_rate > 0.0 && cfg.target_rate != rec.sample_rate) {
    if (cfg.target_rate > rec.sample_rate) {
      fail("preprocess: target rate " + std::to_string(cfg.target_rate) +
           " exceeds input rate " + std::to_string(rec.sample_rate));
    }
    const double ratio = rec.sample_rate / cfg.target_rate;
    const auto k = static_cast<std::size_t>(std::llround(ratio));
    if (std::abs(ratio - static_cast<double>(k)) > 1e-9) {
      fail("preprocess: rate ratio " + std::to_string(ratio) +
           " is not an integer decimation factor");
    }
    const auto aa =
        butterworth_lowpass(4, 0.45 * cfg.target_rate, rec.sample_rate);
    const std::size_t n_out = (n_in + k - 1) / k;
    RawRecording dec;
    dec.channels = rec.channels;
    dec.sample_rate = cfg.target_rate;
    dec.channel_names = rec.channel_names;
    dec.samples.resize(dec.channels * n_out);
    for (std::size_t ch = 0; ch < rec.channels; ++ch) {
      std::vector<double> buf(rec.channel(ch), rec.channel(ch) + n_in);
      filtfilt(aa, buf);
      for (std::size_t i = 0; i < n_out; ++i)
        dec.samples[ch * n_out + i] = buf[i * k];
    }
    out = std::move(dec);
  }

  const double fs = out.sample_rate;
  const std::size_t n = out.samples_per_channel();

  // 2) band-pass (zero-phase HP4 then LP4 cascade)
  if (cfg.bandpass_low > 0.0 || cfg.bandpass_high > 0.0) {
    if (!(cfg.bandpass_low > 0.0 && cfg.bandpass_low < cfg.bandpass_high &&
          cfg.bandpass_high <= fs / 2.0)) {
      fail("preprocess: band-pass [" + std::to_string(cfg.bandpass_low) + "," +
           std::to_string(cfg.bandpass_high) + "] outside (0, Nyquist=" +
           std::to_string(fs / 2.0) + "]");
    }
    auto hp = butterworth_highpass(4, cfg.bandpass_low, fs);
    // A band edge exactly at Nyquist has nothing to remove.
    std::vector<Biquad> lp;
    if (cfg.bandpass_high < fs / 2.0)
      lp = butterworth_lowpass(4, cfg.bandpass_high, fs);
    for (std::size_t ch = 0; ch < out.channels; ++ch) {
      std::vector<double> buf(out.channel(ch), out.channel(ch) + n);
      filtfilt(hp, buf);
      if (!lp.empty()) filtfilt(lp, buf);
      std::copy(buf.begin(), buf.end(), out.channel(ch));
    }
  }

  // 3) notch
  if (cfg.notch_hz > 0.0) {
    if (cfg.notch_hz >= fs / 2.0) {
      fail("preprocess: notch " + std::to_string(cfg.notch_hz) +
           " Hz at or above Nyquist " + std::to_string(fs / 2.0));
    }
    const std::vector<Biquad> nb{notch_biquad(cfg.notch_hz, cfg.notch_q, fs)};
    for (std::size_t ch = 0; ch < out.channels; ++ch) {
      std::vector<double> buf(out.channel(ch), out.channel(ch) + n);
      filtfilt(nb, buf);
      std::copy(buf.begin(), buf.end(), out.channel(ch));
    }
  }

  // 4) per-channel min-max to [-1, 1]; flat channels collapse to zero
  if (cfg.normalize) {
    for (std::size_t ch = 0; ch < out.channels; ++ch) {
      double* x = out.channel(ch);
      double lo = x[0], hi = x[0];
      for (std::size_t i = 1; i < n; ++i) {
        lo = std::min(lo, x[i]);
        hi = std::max(hi, x[i]);
      }
      const double span = hi - lo;
      if (span <= 0.0) {
        std::fill(x, x + n, 0.0);
      } else {
        for (std::size_t i = 0; i < n; ++i)
          x[i] = 2.0 * (x[i] - lo) / span - 1.0;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// feature extraction
// ---------------------------------------------------------------------------

WindowedBandValues extract_log_psd(const RawRecording& rec, const BandSpec& bands,
                                   const PsdOptions& opt) {
  rec.validate();
  bands.validate(rec.sample_rate);
  const std::size_t w = window_samples(rec);
  const std::size_t n_windows = rec.samples_per_channel() / w;
  if (n_windows == 0) {
    fail("extract_log_psd: recording shorter than one window");
  }
  std::vector<std::vector<std::size_t>> bins(bands.size());
  for (std::size_t b = 0; b < bands.size(); ++b) {
    bins[b] = band_bins(bands.bands[b].first, bands.bands[b].second, w,
                        rec.sample_rate);
    if (bins[b].empty()) {
      fail("extract_log_psd: band [" + std::to_string(bands.bands[b].first) +
           "," + std::to_string(bands.bands[b].second) +
           ") covers no FFT bins at this rate/window");
    }
  }
  const std::vector<double> hann = hann_window(w);
  double hann_energy = 0.0;
  for (double h : hann) hann_energy += h * h;
  // One-sided PSD density normalization; absolute scale only shifts the log.
  const double psd_scale = 1.0 / (rec.sample_rate * hann_energy);

  WindowedBandValues out;
  out.n_windows = n_windows;
  out.channels = rec.channels;
  out.bands = bands.size();
  out.values.assign(n_windows * rec.channels * bands.size(), 0.0);
  std::vector<double> buf(w);
  for (std::size_t ch = 0; ch < rec.channels; ++ch) {
    const double* x = rec.channel(ch);
    for (std::size_t win = 0; win < n_windows; ++win) {
      for (std::size_t i = 0; i < w; ++i) buf[i] = x[win * w + i] * hann[i];
      const auto spec = rfft(buf);
      for (std::size_t b = 0; b < bands.size(); ++b) {
        double power = 0.0;
        for (std::size_t k : bins[b]) {
          const double mag2 = std::norm(spec[k]);
          const bool interior = k != 0 && k != w / 2;
          power += (interior ? 2.0 : 1.0) * mag2 * psd_scale;
        }
        power /= static_cast<double>(bins[b].size());
        if (power < opt.power_floor) {
          power = opt.power_floor;
          Diagnostics::floored_power_values.fetch_add(1,
                                                      std::memory_order_relaxed);
        }
        out.values[(win * rec.channels + ch) * bands.size() + b] =
            std::log(power);
      }
    }
  }
  return out;
}

WindowedBandValues extract_de(const RawRecording& rec, const BandSpec& bands,
                              const DeOptions& opt) {
  rec.validate();
  bands.validate(rec.sample_rate);
  const std::size_t w = window_samples(rec);
  const std::size_t n_total = rec.samples_per_channel();
  const std::size_t n_windows = n_total / w;
  if (n_windows == 0) fail("extract_de: recording shorter than one window");

  WindowedBandValues out;
  out.n_windows = n_windows;
  out.channels = rec.channels;
  out.bands = bands.size();
  out.values.assign(n_windows * rec.channels * bands.size(), 0.0);

  auto store = [&](std::size_t win, std::size_t ch, std::size_t b, double var) {
    if (var < opt.variance_floor) {
      var = opt.variance_floor;
      Diagnostics::floored_variance_windows.fetch_add(
          1, std::memory_order_relaxed);
    }
    out.values[(win * rec.channels + ch) * bands.size() + b] =
        0.5 * std::log(2.0 * M_PI * M_E * var);
  };

  if (opt.sigma_from_psd) {
    // Variance from the raw (rectangular) periodogram inside the band.
    for (std::size_t b = 0; b < bands.size(); ++b) {
      if (band_bins(bands.bands[b].first, bands.bands[b].second, w,
                    rec.sample_rate)
              .empty()) {
        fail("extract_de: band covers no FFT bins");
      }
    }
    std::vector<double> buf(w);
    for (std::size_t ch = 0; ch < rec.channels; ++ch) {
      const double* x = rec.channel(ch);
      for (std::size_t win = 0; win < n_windows; ++win) {
        std::copy(x + win * w, x + (win + 1) * w, buf.begin());
        const auto spec = rfft(buf);
        for (std::size_t b = 0; b < bands.size(); ++b) {
          double var = 0.0;
          for (std::size_t k :
               band_bins(bands.bands[b].first, bands.bands[b].second, w,
                         rec.sample_rate)) {
            if (k == 0) continue;  // DC carries no variance
            const bool interior = k != w / 2;
            var += (interior ? 2.0 : 1.0) * std::norm(spec[k]);
          }
          var /= static_cast<double>(w) * static_cast<double>(w);
          store(win, ch, b, var);
        }
      }
    }
    return out;
  }

  // Default: ideal band selection over the whole channel, then per-window
  // time-domain variance.
  for (std::size_t ch = 0; ch < rec.channels; ++ch) {
    std::vector<double> x(rec.channel(ch), rec.channel(ch) + n_total);
    auto spec = rfft(x);
    for (std::size_t b = 0; b < bands.size(); ++b) {
      const auto [lo, hi] = bands.bands[b];
      auto banded = spec;
      for (std::size_t k = 0; k < banded.size(); ++k) {
        const double f = static_cast<double>(k) * rec.sample_rate /
                         static_cast<double>(n_total);
        if (!(f >= lo && f < hi)) banded[k] = 0.0;
      }
      const std::vector<double> y = irfft(banded, n_total);
      for (std::size_t win = 0; win < n_windows; ++win) {
        double mu = 0.0;
        for (std::size_t i = 0; i < w; ++i) mu += y[win * w + i];
        mu /= static_cast<double>(w);
        double var = 0.0;
        for (std::size_t i = 0; i < w; ++i) {
          const double d = y[win * w + i] - mu;
          var += d * d;
        }
        var /= static_cast<double>(w);
        store(win, ch, b, var);
      }
    }
  }
  return out;
}

FeatureTensor build_feature_tensor(const WindowedBandValues& psd,
                                   const WindowedBandValues& de) {
  if (psd.n_windows != de.n_windows || psd.channels != de.channels ||
      psd.bands != de.bands) {
    fail("build_feature_tensor: PSD grid (" + std::to_string(psd.n_windows) +
         "w x " + std::to_string(psd.channels) + "ch x " +
         std::to_string(psd.bands) + "b) does not match DE grid (" +
         std::to_string(de.n_windows) + "w x " + std::to_string(de.channels) +
         "ch x " + std::to_string(de.bands) + "b)");
  }
  const std::size_t half = psd.channels * psd.bands;
  FeatureTensor out;
  out.windows = psd.n_windows;
  out.features = 2 * half;
  out.values.assign(out.windows * out.features, 0.0);
  for (std::size_t w = 0; w < out.windows; ++w) {
    for (std::size_t ch = 0; ch < psd.channels; ++ch) {
      for (std::size_t b = 0; b < psd.bands; ++b) {
        out.values[w * out.features + ch * psd.bands + b] = psd.at(w, ch, b);
        out.values[w * out.features + half + ch * psd.bands + b] =
            de.at(w, ch, b);
      }
    }
  }
  return out;
}

std::vector<FeatureTensor> segment_features(const FeatureTensor& all,
                                            std::size_t segment_seconds) {
  if (segment_seconds == 0) fail("segment_features: segment length is zero");
  const std::size_t n_segments = all.windows / segment_seconds;
  std::vector<FeatureTensor> out;
  out.reserve(n_segments);
  for (std::size_t s = 0; s < n_segments; ++s) {
    FeatureTensor seg;
    seg.windows = segment_seconds;
    seg.features = all.features;
    const auto begin =
        all.values.begin() +
        static_cast<std::ptrdiff_t>(s * segment_seconds * all.features);
    seg.values.assign(begin,
                      begin + static_cast<std::ptrdiff_t>(segment_seconds *
                                                          all.features));
    out.push_back(std::move(seg));
  }
  return out;
}

}  // namespace capskd
