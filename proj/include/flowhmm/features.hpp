#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowhmm/matrix.hpp"
#include "flowhmm/rng.hpp"

namespace flowhmm {

// ---------------------------------------------------------------------------
// Acoustic front end: framed MFCCs with delta and double-delta appending,
// per-utterance mean/variance normalization, and additive-noise mixing at a
// requested SNR for robustness runs.
// ---------------------------------------------------------------------------

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  double sample_rate = 16000.0;
};

inline void validate_waveform(const Waveform& w) {
  if (w.samples.empty()) throw std::invalid_argument("Waveform: empty");
  if (!(w.sample_rate > 0.0)) throw std::invalid_argument("Waveform: sample_rate must be > 0");
}

struct MfccConfig {
  std::size_t num_ceps = 13;
  double window_ms = 25.0;
  double shift_ms = 10.0;
  std::size_t num_mel_filters = 26;
  std::size_t fft_size = 512;
  double preemphasis = 0.97;
  double low_freq_hz = 0.0;
  double high_freq_hz = 0.0;  // 0 means Nyquist
};

inline void validate_mfcc_config(const MfccConfig& cfg, double sample_rate) {
  if (!(cfg.window_ms > cfg.shift_ms && cfg.shift_ms > 0.0))
    throw std::invalid_argument("MfccConfig: need window_ms > shift_ms > 0");
  if (cfg.num_ceps > cfg.num_mel_filters)
    throw std::invalid_argument("MfccConfig: num_ceps must not exceed num_mel_filters");
  if (cfg.num_ceps == 0) throw std::invalid_argument("MfccConfig: num_ceps must be >= 1");
  if (cfg.fft_size == 0 || (cfg.fft_size & (cfg.fft_size - 1)) != 0)
    throw std::invalid_argument("MfccConfig: fft_size must be a power of two");
  const auto window = static_cast<std::size_t>(std::lround(sample_rate * cfg.window_ms / 1000.0));
  if (cfg.fft_size < window)
    throw std::invalid_argument("MfccConfig: fft_size shorter than the analysis window");
  if (cfg.preemphasis < 0.0 || cfg.preemphasis >= 1.0)
    throw std::invalid_argument("MfccConfig: preemphasis must be in [0, 1)");
  const double nyquist = sample_rate / 2.0;
  const double high = cfg.high_freq_hz == 0.0 ? nyquist : cfg.high_freq_hz;
  if (!(cfg.low_freq_hz >= 0.0 && cfg.low_freq_hz < high && high <= nyquist))
    throw std::invalid_argument("MfccConfig: need 0 <= low < high <= Nyquist");
}

namespace detail {

constexpr double kLogEnergyFloor = 1e-10;

/// In-place iterative radix-2 FFT (size must be a power of two).
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const double pi = 3.14159265358979323846;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filterbank over the power-spectrum bins [0, fft/2].
inline Matrix mel_filterbank(const MfccConfig& cfg, double sample_rate) {
  const std::size_t bins = cfg.fft_size / 2 + 1;
  const double nyquist = sample_rate / 2.0;
  const double high = cfg.high_freq_hz == 0.0 ? nyquist : cfg.high_freq_hz;
  const double mel_lo = hz_to_mel(cfg.low_freq_hz);
  const double mel_hi = hz_to_mel(high);
  std::vector<double> edges(cfg.num_mel_filters + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                    static_cast<double>(cfg.num_mel_filters + 1);
    edges[i] = mel_to_hz(mel);
  }
  Matrix bank(cfg.num_mel_filters, bins);
  for (std::size_t f = 0; f < cfg.num_mel_filters; ++f) {
    const double lo = edges[f], mid = edges[f + 1], hi = edges[f + 2];
    for (std::size_t b = 0; b < bins; ++b) {
      const double hz = static_cast<double>(b) * sample_rate / static_cast<double>(cfg.fft_size);
      if (hz > lo && hz < mid)
        bank(f, b) = (hz - lo) / (mid - lo);
      else if (hz >= mid && hz < hi)
        bank(f, b) = (hi - hz) / (hi - mid);
    }
  }
  return bank;
}

/// Orthonormal DCT-II rows (num_ceps x num_mel_filters).
inline Matrix dct_matrix(std::size_t num_ceps, std::size_t num_filters) {
  const double pi = 3.14159265358979323846;
  Matrix dct(num_ceps, num_filters);
  const double n = static_cast<double>(num_filters);
  for (std::size_t k = 0; k < num_ceps; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (std::size_t m = 0; m < num_filters; ++m)
      dct(k, m) = scale * std::cos(pi * static_cast<double>(k) *
                                   (static_cast<double>(m) + 0.5) / n);
  }
  return dct;
}

}  // namespace detail

/// Frame count for a waveform of n samples under the config's window/shift.
inline std::size_t frame_count(std::size_t n_samples, std::size_t window, std::size_t shift) {
  if (n_samples < window) throw std::invalid_argument("frame_count: waveform shorter than window");
  return 1 + (n_samples - window) / shift;
}

/// Framed MFCCs: preemphasis, Hamming window, power spectrum, mel filterbank,
/// log (floored), orthonormal DCT-II, first num_ceps coefficients (c0 kept).
inline Matrix extract_mfcc(const Waveform& w, const MfccConfig& cfg) {
  validate_waveform(w);
  validate_mfcc_config(cfg, w.sample_rate);
  const auto window = static_cast<std::size_t>(std::lround(w.sample_rate * cfg.window_ms / 1000.0));
  const auto shift = static_cast<std::size_t>(std::lround(w.sample_rate * cfg.shift_ms / 1000.0));
  const std::size_t T = frame_count(w.samples.size(), window, shift);

  std::vector<double> pre(w.samples.size());
  pre[0] = w.samples[0];
  for (std::size_t n = 1; n < pre.size(); ++n)
    pre[n] = w.samples[n] - cfg.preemphasis * w.samples[n - 1];

  std::vector<double> hamming(window);
  const double pi = 3.14159265358979323846;
  for (std::size_t n = 0; n < window; ++n)
    hamming[n] = 0.54 - 0.46 * std::cos(2.0 * pi * static_cast<double>(n) /
                                        static_cast<double>(window - 1));

  const Matrix bank = detail::mel_filterbank(cfg, w.sample_rate);
  const Matrix dct = detail::dct_matrix(cfg.num_ceps, cfg.num_mel_filters);
  const std::size_t bins = cfg.fft_size / 2 + 1;

  Matrix feats(T, cfg.num_ceps);
  std::vector<std::complex<double>> buf(cfg.fft_size);
  std::vector<double> power(bins), mel_log(cfg.num_mel_filters);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t start = t * shift;
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    for (std::size_t n = 0; n < window; ++n) buf[n] = pre[start + n] * hamming[n];
    detail::fft_radix2(buf);
    for (std::size_t b = 0; b < bins; ++b) power[b] = std::norm(buf[b]);
    for (std::size_t f = 0; f < cfg.num_mel_filters; ++f) {
      double acc = 0.0;
      for (std::size_t b = 0; b < bins; ++b) acc += bank(f, b) * power[b];
      mel_log[f] = std::log(std::max(acc, detail::kLogEnergyFloor));
    }
    for (std::size_t k = 0; k < cfg.num_ceps; ++k) {
      double acc = 0.0;
      for (std::size_t f = 0; f < cfg.num_mel_filters; ++f) acc += dct(k, f) * mel_log[f];
      feats(t, k) = acc;
    }
  }
  return feats;
}

/// Regression deltas over a +/-2 frame window with replicated edges, then
/// the same operator again for double-deltas; columns are [static, d, dd].
inline Matrix append_deltas(const Matrix& feat) {
  if (feat.rows == 0) throw std::invalid_argument("append_deltas: empty sequence");
  const std::size_t T = feat.rows, D = feat.cols;
  const auto clamp = [&](long t) {
    return static_cast<std::size_t>(std::clamp<long>(t, 0, static_cast<long>(T) - 1));
  };
  const auto regress = [&](const Matrix& src) {
    Matrix out(T, D);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (long n = 1; n <= 2; ++n)
          acc += static_cast<double>(n) *
                 (src(clamp(static_cast<long>(t) + n), d) -
                  src(clamp(static_cast<long>(t) - n), d));
        out(t, d) = acc / 10.0;  // 2 * (1^2 + 2^2)
      }
    return out;
  };
  const Matrix d1 = regress(feat);
  const Matrix d2 = regress(d1);
  Matrix out(T, 3 * D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      out(t, d) = feat(t, d);
      out(t, D + d) = d1(t, d);
      out(t, 2 * D + d) = d2(t, d);
    }
  return out;
}

struct CmvnResult {
  Matrix features;
  std::vector<std::size_t> constant_dims;  // centered but left unscaled
};

/// Per-utterance, per-dimension standardization to zero mean and unit
/// (population) variance. Dimensions with no variance are only centered.
inline CmvnResult cmvn(const Matrix& feat) {
  if (feat.rows < 2) throw std::invalid_argument("cmvn: need at least two frames");
  const std::size_t T = feat.rows, D = feat.cols;
  CmvnResult res{Matrix(T, D), {}};
  for (std::size_t d = 0; d < D; ++d) {
    double mean = 0.0;
    for (std::size_t t = 0; t < T; ++t) mean += feat(t, d);
    mean /= static_cast<double>(T);
    double var = 0.0;
    for (std::size_t t = 0; t < T; ++t) var += (feat(t, d) - mean) * (feat(t, d) - mean);
    var /= static_cast<double>(T);
    if (var < 1e-12) {
      res.constant_dims.push_back(d);
      for (std::size_t t = 0; t < T; ++t) res.features(t, d) = feat(t, d) - mean;
    } else {
      const double inv_std = 1.0 / std::sqrt(var);
      for (std::size_t t = 0; t < T; ++t) res.features(t, d) = (feat(t, d) - mean) * inv_std;
    }
  }
  return res;
}

struct MixResult {
  Waveform wave;
  std::size_t clipped = 0;
};

/// speech + noise scaled to the requested SNR in dB; the noise is read from
/// a random offset and tiled if shorter than the speech. Peaks are clipped
/// to [-1, 1] and counted.
inline MixResult mix_noise(const Waveform& speech, const Waveform& noise, double snr_db,
                           RngStream& rng) {
  validate_waveform(speech);
  validate_waveform(noise);
  if (speech.sample_rate != noise.sample_rate)
    throw std::invalid_argument("mix_noise: sample rates differ");

  const std::size_t n = speech.samples.size();
  const std::size_t offset = rng.uniform_index(noise.samples.size());
  std::vector<double> seg(n);
  for (std::size_t i = 0; i < n; ++i) seg[i] = noise.samples[(offset + i) % noise.samples.size()];

  double p_speech = 0.0, p_noise = 0.0;
  for (double v : speech.samples) p_speech += v * v;
  for (double v : seg) p_noise += v * v;
  p_speech /= static_cast<double>(n);
  p_noise /= static_cast<double>(n);
  if (p_speech <= 0.0) throw std::invalid_argument("mix_noise: speech has zero power");
  if (p_noise <= 0.0) throw std::invalid_argument("mix_noise: noise segment has zero power");

  const double scale = std::sqrt(p_speech / (p_noise * std::pow(10.0, snr_db / 10.0)));
  MixResult res;
  res.wave.sample_rate = speech.sample_rate;
  res.wave.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = speech.samples[i] + scale * seg[i];
    if (v > 1.0) {
      v = 1.0;
      ++res.clipped;
    } else if (v < -1.0) {
      v = -1.0;
      ++res.clipped;
    }
    res.wave.samples[i] = v;
  }
  return res;
}

enum class NoiseKind { white, pink };

/// Synthetic noise at a comfortable RMS of 0.05: white is i.i.d. Gaussian;
/// pink sums held white values refreshed at octave-spaced rates, giving the
/// -3 dB/octave slope.
inline Waveform gen_noise(NoiseKind kind, std::size_t length, double sample_rate, RngStream& rng) {
  if (length == 0) throw std::invalid_argument("gen_noise: length must be > 0");
  if (!(sample_rate > 0.0)) throw std::invalid_argument("gen_noise: sample_rate must be > 0");
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(length);
  if (kind == NoiseKind::white) {
    for (auto& v : w.samples) v = 0.05 * rng.normal();
  } else {
    constexpr std::size_t kRows = 16;
    std::vector<double> rows(kRows);
    for (auto& r : rows) r = rng.normal();
    double acc = 0.0;
    for (double r : rows) acc += r;
    double sumsq = 0.0;
    for (std::size_t n = 0; n < length; ++n) {
      // The lowest set bit of the counter picks the row to refresh, so row
      // k updates every 2^(k+1) samples.
      const std::size_t c = n + 1;
      std::size_t k = 0;
      while (k + 1 < kRows && ((c >> k) & 1u) == 0) ++k;
      acc -= rows[k];
      rows[k] = rng.normal();
      acc += rows[k];
      const double v = acc + rng.normal();
      w.samples[n] = v;
      sumsq += v * v;
    }
    const double rms = std::sqrt(sumsq / static_cast<double>(length));
    for (auto& v : w.samples) v = 0.05 * v / rms;
  }
  for (auto& v : w.samples) v = std::clamp(v, -1.0, 1.0);
  return w;
}

}  // namespace flowhmm
