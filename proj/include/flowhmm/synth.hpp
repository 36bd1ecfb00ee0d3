#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowhmm/features.hpp"
#include "flowhmm/hmm.hpp"

namespace flowhmm {

// ---------------------------------------------------------------------------
// Synthetic corpora: sequence sampling from known models, a fixed invertible
// nonlinearity for building datasets where flow emissions pay off, and the
// desk-scale presets the experiments and acceptance checks run on.
// ---------------------------------------------------------------------------

struct SampledSequence {
  Matrix features;
  std::vector<std::size_t> states;
};

/// Draw one sequence: states follow q then A, frames follow the per-state
/// emission sampler.
template <class Emission>
SampledSequence sample_hmm(const HmmModel<Emission>& model, std::size_t length, RngStream& rng) {
  if (length == 0) throw std::invalid_argument("sample_hmm: length must be >= 1");
  SampledSequence out;
  out.features = Matrix(length, model.dim());
  out.states.resize(length);
  std::vector<double> w(model.states());
  std::size_t s = 0;
  for (std::size_t t = 0; t < length; ++t) {
    if (t == 0)
      for (std::size_t j = 0; j < w.size(); ++j) w[j] = std::exp(model.chain.log_q[j]);
    else
      for (std::size_t j = 0; j < w.size(); ++j) w[j] = std::exp(model.chain.log_A(s, j));
    s = rng.categorical(w);
    out.states[t] = s;
    const auto x = model.emission.sample(s, rng);
    for (std::size_t d = 0; d < x.size(); ++d) out.features(t, d) = x[d];
  }
  return out;
}

/// Coordinate-wise cubic-plus-linear map followed by a fixed rotation:
/// y = R (x + a x^3). Strictly monotone per coordinate for a >= 0, so the
/// inverse is exact: solve the cubic by Cardano, then undo the rotation.
struct CubicWarp {
  Matrix rotation;  // orthogonal
  double strength = 0.5;

  std::size_t dim() const { return rotation.rows; }

  std::vector<double> apply(const std::vector<double>& x) const {
    if (x.size() != dim()) throw std::invalid_argument("CubicWarp: dim mismatch");
    std::vector<double> bent(dim());
    for (std::size_t d = 0; d < dim(); ++d) bent[d] = x[d] + strength * x[d] * x[d] * x[d];
    return matvec(rotation, bent);
  }

  std::vector<double> invert(const std::vector<double>& y) const {
    if (y.size() != dim()) throw std::invalid_argument("CubicWarp: dim mismatch");
    const std::vector<double> bent = matvec_t(rotation, y);  // rotation transpose
    std::vector<double> x(dim());
    for (std::size_t d = 0; d < dim(); ++d) {
      if (strength == 0.0) {
        x[d] = bent[d];
        continue;
      }
      // Unique real root of a t^3 + t - z = 0 (depressed cubic, p = 1/a > 0).
      const double p = 1.0 / strength;
      const double q = -bent[d] / strength;
      const double disc = std::sqrt(q * q / 4.0 + p * p * p / 27.0);
      double t = std::cbrt(-q / 2.0 + disc) + std::cbrt(-q / 2.0 - disc);
      for (int iter = 0; iter < 2; ++iter)
        t -= (t + strength * t * t * t - bent[d]) / (1.0 + 3.0 * strength * t * t);
      x[d] = t;
    }
    return x;
  }
};

inline CubicWarp make_cubic_warp(std::size_t dim, double strength, RngStream& rng) {
  if (dim == 0) throw std::invalid_argument("make_cubic_warp: dim must be >= 1");
  if (strength < 0.0) throw std::invalid_argument("make_cubic_warp: strength must be >= 0");
  CubicWarp warp;
  warp.strength = strength;
  // Gram-Schmidt on a Gaussian matrix gives a uniformly random rotation.
  Matrix m(dim, dim);
  for (double& v : m.data) v = rng.normal();
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += m(i, d) * m(j, d);
      for (std::size_t d = 0; d < dim; ++d) m(i, d) -= dot * m(j, d);
    }
    double norm = 0.0;
    for (std::size_t d = 0; d < dim; ++d) norm += m(i, d) * m(i, d);
    norm = std::sqrt(norm);
    if (norm < 1e-8) throw std::runtime_error("make_cubic_warp: degenerate rotation draw");
    for (std::size_t d = 0; d < dim; ++d) m(i, d) /= norm;
  }
  warp.rotation = m;
  return warp;
}

inline CubicWarp identity_warp(std::size_t dim) {
  CubicWarp warp;
  warp.strength = 0.0;
  warp.rotation = identity_matrix(dim);
  return warp;
}

struct Corpus {
  std::vector<Matrix> sequences;
  std::vector<std::size_t> labels;
  std::vector<std::string> label_names;
};

/// Every frame passed through the warp; labels untouched.
inline Corpus make_warped_corpus(const Corpus& base, const CubicWarp& warp) {
  Corpus out;
  out.labels = base.labels;
  out.label_names = base.label_names;
  out.sequences.reserve(base.sequences.size());
  for (const auto& seq : base.sequences) {
    Matrix warped(seq.rows, seq.cols);
    for (std::size_t t = 0; t < seq.rows; ++t) {
      const auto y = warp.apply(seq.row(t));
      for (std::size_t d = 0; d < seq.cols; ++d) warped(t, d) = y[d];
    }
    out.sequences.push_back(std::move(warped));
  }
  return out;
}

/// Per-dimension affine standardization fitted on one corpus (typically the
/// training split) and applied to any corpus of the same dimension. Flows
/// start as identity maps around the origin, so they expect inputs on a
/// unit scale, exactly as the audio pipeline's CMVN provides.
struct Standardizer {
  std::vector<double> mean, inv_std;
};

inline Standardizer fit_standardizer(const Corpus& corpus) {
  if (corpus.sequences.empty()) throw std::invalid_argument("fit_standardizer: empty corpus");
  const std::size_t D = corpus.sequences.front().cols;
  Standardizer st;
  st.mean.assign(D, 0.0);
  st.inv_std.assign(D, 0.0);
  std::size_t n = 0;
  for (const auto& seq : corpus.sequences) {
    for (std::size_t t = 0; t < seq.rows; ++t)
      for (std::size_t d = 0; d < D; ++d) st.mean[d] += seq(t, d);
    n += seq.rows;
  }
  for (auto& v : st.mean) v /= static_cast<double>(n);
  std::vector<double> var(D, 0.0);
  for (const auto& seq : corpus.sequences)
    for (std::size_t t = 0; t < seq.rows; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        const double diff = seq(t, d) - st.mean[d];
        var[d] += diff * diff;
      }
  for (std::size_t d = 0; d < D; ++d) {
    var[d] /= static_cast<double>(n);
    if (var[d] < 1e-12) throw std::runtime_error("fit_standardizer: dimension " +
                                                 std::to_string(d) + " has no variance");
    st.inv_std[d] = 1.0 / std::sqrt(var[d]);
  }
  return st;
}

inline Corpus apply_standardizer(const Standardizer& st, const Corpus& corpus) {
  Corpus out;
  out.labels = corpus.labels;
  out.label_names = corpus.label_names;
  out.sequences.reserve(corpus.sequences.size());
  for (const auto& seq : corpus.sequences) {
    if (seq.cols != st.mean.size())
      throw std::invalid_argument("apply_standardizer: dim mismatch");
    Matrix scaled(seq.rows, seq.cols);
    for (std::size_t t = 0; t < seq.rows; ++t)
      for (std::size_t d = 0; d < seq.cols; ++d)
        scaled(t, d) = (seq(t, d) - st.mean[d]) * st.inv_std[d];
    out.sequences.push_back(std::move(scaled));
  }
  return out;
}

struct DeskConfig {
  std::size_t num_classes = 5;
  std::size_t num_states = 3;
  std::size_t dim = 4;
  std::size_t num_components = 2;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t min_length = 20;
  std::size_t max_length = 60;
  double class_spread = 2.0;  // distance scale between class mean clusters
  double state_spread = 1.0;  // scale of per-state/component mean scatter
};

struct DeskBenchmark {
  Corpus train, test;
  std::vector<GmmHmm> generators;
};

/// Desk-scale benchmark: C random GMM-HMM generators with separated class
/// clusters, sampled into train and test corpora.
inline DeskBenchmark make_desk_benchmark(const DeskConfig& cfg, RngStream& rng) {
  if (cfg.num_classes == 0 || cfg.min_length == 0 || cfg.min_length > cfg.max_length)
    throw std::invalid_argument("make_desk_benchmark: bad configuration");
  DeskBenchmark bench;
  const std::size_t S = cfg.num_states, K = cfg.num_components, D = cfg.dim;

  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    std::vector<double> q(S, 0.0);
    q[0] = 1.0;
    Matrix A(S, S);
    for (std::size_t i = 0; i < S; ++i) {
      double total = 0.0;
      for (std::size_t j = i; j < S; ++j) {
        A(i, j) = (j == i ? 4.0 : 1.0) + rng.uniform(0.0, 0.5);
        total += A(i, j);
      }
      for (std::size_t j = i; j < S; ++j) A(i, j) /= total;
    }

    GmmEmission emis;
    emis.num_states = S;
    emis.num_components = K;
    emis.dim = D;
    emis.log_weights = Matrix(S, K);
    for (std::size_t s = 0; s < S; ++s) {
      std::vector<double> w(K);
      double total = 0.0;
      for (auto& v : w) {
        v = 0.5 + rng.uniform(0.0, 1.0);
        total += v;
      }
      for (std::size_t k = 0; k < K; ++k) emis.log_weights(s, k) = std::log(w[k] / total);
    }
    std::vector<double> center(D);
    for (auto& v : center) v = cfg.class_spread * rng.normal();
    for (std::size_t s = 0; s < S; ++s) {
      Matrix means(K, D), log_vars(K, D);
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t d = 0; d < D; ++d) {
          means(k, d) = center[d] + cfg.state_spread * rng.normal();
          log_vars(k, d) = std::log(0.5 + rng.uniform(0.0, 1.0));
        }
      emis.means.push_back(std::move(means));
      emis.log_vars.push_back(std::move(log_vars));
    }
    bench.generators.push_back(GmmHmm{make_chain(q, A), std::move(emis)});
  }

  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    bench.train.label_names.push_back("class" + std::to_string(c));
  bench.test.label_names = bench.train.label_names;

  const auto fill = [&](Corpus& corpus, std::size_t per_class) {
    for (std::size_t c = 0; c < cfg.num_classes; ++c)
      for (std::size_t i = 0; i < per_class; ++i) {
        const std::size_t T =
            cfg.min_length + rng.uniform_index(cfg.max_length - cfg.min_length + 1);
        corpus.sequences.push_back(sample_hmm(bench.generators[c], T, rng).features);
        corpus.labels.push_back(c);
      }
  };
  fill(bench.train, cfg.train_per_class);
  fill(bench.test, cfg.test_per_class);
  return bench;
}

struct AudioCorpus {
  std::vector<Waveform> waves;
  std::vector<std::size_t> labels;
  std::vector<std::string> label_names;
};

struct DeskAudioConfig {
  std::size_t num_classes = 3;
  std::size_t train_per_class = 60;
  std::size_t test_per_class = 30;
  double seconds = 0.5;
  double sample_rate = 16000.0;
};

struct DeskAudio {
  AudioCorpus train, test;
};

namespace detail {

/// One utterance: three tonal segments whose fundamentals follow a
/// class-specific ratio pattern, with class-specific harmonic decay, random
/// phases, mild detune, and a low noise floor.
inline Waveform desk_audio_utterance(std::size_t cls, const DeskAudioConfig& cfg, RngStream& rng) {
  static const double kFundamentals[] = {200.0, 225.0, 255.0};
  static const double kPatterns[][3] = {{1.0, 1.3, 1.0}, {1.3, 1.0, 1.15}, {1.0, 1.15, 1.3}};
  static const double kDecay[] = {0.55, 0.70, 0.62};
  const double f0 = kFundamentals[cls % 3] * (1.0 + 0.02 * rng.normal());
  const double decay = kDecay[cls % 3];

  Waveform w;
  w.sample_rate = cfg.sample_rate;
  const std::size_t n = static_cast<std::size_t>(cfg.seconds * cfg.sample_rate);
  w.samples.resize(n);
  const double pi = 3.14159265358979323846;
  double phases[4];
  for (auto& p : phases) p = rng.uniform(0.0, 2.0 * pi);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t seg = std::min<std::size_t>(3 * i / n, 2);
    const double f = f0 * kPatterns[cls % 3][seg];
    const double t = static_cast<double>(i) / cfg.sample_rate;
    double v = 0.0;
    double amp = 0.25;
    for (int h = 1; h <= 4; ++h) {
      v += amp * std::sin(2.0 * pi * f * static_cast<double>(h) * t + phases[h - 1]);
      amp *= decay;
    }
    w.samples[i] = 0.5 * v + 0.002 * rng.normal();
  }
  return w;
}

}  // namespace detail

/// Waveform-level benchmark for the noise-robustness protocol: classes are
/// tonal patterns close enough in frequency that additive noise genuinely
/// degrades their MFCCs.
inline DeskAudio make_desk_audio(const DeskAudioConfig& cfg, RngStream& rng) {
  if (cfg.num_classes == 0 || cfg.num_classes > 3)
    throw std::invalid_argument("make_desk_audio: supports 1-3 classes");
  DeskAudio out;
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    out.train.label_names.push_back("tone" + std::to_string(c));
  out.test.label_names = out.train.label_names;
  const auto fill = [&](AudioCorpus& corpus, std::size_t per_class) {
    for (std::size_t c = 0; c < cfg.num_classes; ++c)
      for (std::size_t i = 0; i < per_class; ++i) {
        corpus.waves.push_back(detail::desk_audio_utterance(c, cfg, rng));
        corpus.labels.push_back(c);
      }
  };
  fill(out.train, cfg.train_per_class);
  fill(out.test, cfg.test_per_class);
  return out;
}

}  // namespace flowhmm
