#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "flowhmm/markov.hpp"
#include "flowhmm/matrix.hpp"
#include "flowhmm/numeric.hpp"
#include "flowhmm/rng.hpp"

namespace flowhmm {

/// Diagonal-covariance Gaussian mixture per state. Immutable in use; the
/// M-step builds a new instance.
struct GmmEmission {
  std::size_t num_states = 0;
  std::size_t num_components = 0;
  std::size_t dim = 0;
  Matrix log_weights;            // S x K, rows normalized
  std::vector<Matrix> means;     // per state: K x D
  std::vector<Matrix> log_vars;  // per state: K x D, variance >= floor

  std::size_t states() const { return num_states; }
  std::size_t components() const { return num_components; }

  /// log N(x; mu, diag sigma^2) for one component.
  double component_density(std::size_t s, std::size_t k, const std::vector<double>& x) const {
    const double* mu = means[s].row_ptr(k);
    const double* lv = log_vars[s].row_ptr(k);
    double acc = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = x[d] - mu[d];
      acc += lv[d] + diff * diff * std::exp(-lv[d]);
    }
    return -0.5 * (acc + static_cast<double>(dim) * 1.8378770664093453);  // ln(2*pi)
  }

  /// log(pi_{s,k}) + log N(...) for every component of one state.
  std::vector<double> component_log_pdfs(std::size_t s, const std::vector<double>& x) const {
    if (x.size() != dim) throw std::invalid_argument("GmmEmission: dimension mismatch");
    std::vector<double> out(num_components);
    for (std::size_t k = 0; k < num_components; ++k)
      out[k] = log_weights(s, k) + component_density(s, k, x);
    return out;
  }

  double log_pdf(std::size_t s, const std::vector<double>& x) const {
    return log_sum_exp(component_log_pdfs(s, x));
  }

  std::vector<double> sample(std::size_t s, RngStream& rng) const {
    std::vector<double> w(num_components);
    for (std::size_t k = 0; k < num_components; ++k) w[k] = std::exp(log_weights(s, k));
    const std::size_t k = rng.categorical(w);
    std::vector<double> x(dim);
    for (std::size_t d = 0; d < dim; ++d)
      x[d] = means[s](k, d) + std::exp(0.5 * log_vars[s](k, d)) * rng.normal();
    return x;
  }
};

/// Build from probability-domain weights and plain variances, applying the
/// variance floor and validating normalization.
inline GmmEmission make_gmm(const Matrix& weights, std::vector<Matrix> means,
                            const std::vector<Matrix>& vars) {
  GmmEmission g;
  g.num_states = weights.rows;
  g.num_components = weights.cols;
  if (means.size() != g.num_states || vars.size() != g.num_states)
    throw std::invalid_argument("make_gmm: per-state parameter count mismatch");
  g.dim = means.empty() ? 0 : means[0].cols;
  g.log_weights = Matrix(g.num_states, g.num_components);
  for (std::size_t s = 0; s < g.num_states; ++s) {
    double rsum = 0.0;
    for (std::size_t k = 0; k < g.num_components; ++k) rsum += weights(s, k);
    if (std::abs(rsum - 1.0) > 1e-12)
      throw std::invalid_argument("make_gmm: weights for state " + std::to_string(s) +
                                  " sum to " + std::to_string(rsum));
    for (std::size_t k = 0; k < g.num_components; ++k)
      g.log_weights(s, k) = weights(s, k) > 0.0 ? std::log(weights(s, k)) : kNegInf;
  }
  g.means = std::move(means);
  g.log_vars.reserve(g.num_states);
  for (const auto& v : vars) {
    Matrix lv(v.rows, v.cols);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      lv.data[i] = std::log(std::max(v.data[i], kVarianceFloor));
    g.log_vars.push_back(std::move(lv));
  }
  return g;
}

/// Initialization from data: means are randomly chosen training frames,
/// variances the global per-dimension variance, weights uniform.
inline GmmEmission make_gmm_from_data(std::size_t S, std::size_t K,
                                      const std::vector<Matrix>& sequences, RngStream& rng) {
  if (sequences.empty()) throw std::invalid_argument("make_gmm_from_data: no sequences");
  const std::size_t D = sequences.front().cols;
  std::size_t total = 0;
  std::vector<double> mean(D, 0.0), sq(D, 0.0);
  for (const auto& seq : sequences) {
    total += seq.rows;
    for (std::size_t t = 0; t < seq.rows; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        mean[d] += seq(t, d);
        sq[d] += seq(t, d) * seq(t, d);
      }
  }
  Matrix var(1, D);
  for (std::size_t d = 0; d < D; ++d) {
    mean[d] /= static_cast<double>(total);
    var(0, d) = std::max(sq[d] / static_cast<double>(total) - mean[d] * mean[d], kVarianceFloor);
  }

  Matrix weights(S, K, 1.0 / static_cast<double>(K));
  std::vector<Matrix> means(S, Matrix(K, D)), vars(S, Matrix(K, D));
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t k = 0; k < K; ++k) {
      const auto& seq = sequences[rng.uniform_index(sequences.size())];
      const std::size_t t = rng.uniform_index(seq.rows);
      for (std::size_t d = 0; d < D; ++d) {
        means[s](k, d) = seq(t, d);
        vars[s](k, d) = var(0, d);
      }
    }
  return make_gmm(weights, std::move(means), vars);
}

struct GmmUpdate {
  GmmEmission emission;
  std::vector<std::pair<std::size_t, std::size_t>> kept;  // (state, component) with too little mass
};

/// Closed-form M-step from pooled (state, component) posteriors. Components
/// whose pooled responsibility falls below the floor keep their previous
/// mean and variance and are reported; their weight still comes from the
/// (near zero) pooled mass so state weights stay normalized.
inline GmmUpdate gmm_m_step(const GmmEmission& prev, const std::vector<PosteriorStats>& stats,
                            const std::vector<Matrix>& sequences) {
  if (stats.size() != sequences.size())
    throw std::invalid_argument("gmm_m_step: stats/sequences count mismatch");
  const std::size_t S = prev.num_states, K = prev.num_components, D = prev.dim;

  std::vector<double> resp(S * K, 0.0);
  std::vector<std::vector<double>> sum_x(S * K, std::vector<double>(D, 0.0));
  std::vector<std::vector<double>> sum_xx(S * K, std::vector<double>(D, 0.0));
  for (std::size_t m = 0; m < stats.size(); ++m) {
    const auto& st = stats[m];
    const auto& seq = sequences[m];
    for (std::size_t t = 0; t < st.frames(); ++t)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t k = 0; k < K; ++k) {
          const double r = std::exp(st.comp(t, s, k));
          if (r == 0.0) continue;
          resp[s * K + k] += r;
          auto& sx = sum_x[s * K + k];
          auto& sxx = sum_xx[s * K + k];
          for (std::size_t d = 0; d < D; ++d) {
            const double x = seq(t, d);
            sx[d] += r * x;
            sxx[d] += r * x * x;
          }
        }
  }

  GmmUpdate out;
  out.emission = prev;
  for (std::size_t s = 0; s < S; ++s) {
    double state_total = 0.0;
    for (std::size_t k = 0; k < K; ++k) state_total += resp[s * K + k];
    for (std::size_t k = 0; k < K; ++k) {
      const double r = resp[s * K + k];
      if (r < kResponsibilityFloor) {
        out.kept.emplace_back(s, k);
      } else {
        for (std::size_t d = 0; d < D; ++d) {
          const double mu = sum_x[s * K + k][d] / r;
          const double var = std::max(sum_xx[s * K + k][d] / r - mu * mu, kVarianceFloor);
          out.emission.means[s](k, d) = mu;
          out.emission.log_vars[s](k, d) = std::log(var);
        }
      }
      if (state_total >= kResponsibilityFloor)
        out.emission.log_weights(s, k) = r > 0.0 ? std::log(r / state_total) : kNegInf;
    }
  }
  return out;
}

}  // namespace flowhmm
