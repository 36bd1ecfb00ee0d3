#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowhmm/markov.hpp"
#include "flowhmm/matrix.hpp"
#include "flowhmm/numeric.hpp"
#include "flowhmm/rng.hpp"

namespace flowhmm {

/// Mixture of normalizing flows as a per-state emission density. Stack is
/// NvpStack or GlowStack; all components of all states share one kind and
/// one feature dim. Weights live on the simplex per state.
template <class Stack>
struct MixtureEmission {
  std::size_t num_states = 0;
  std::size_t num_components = 0;
  std::size_t dim = 0;
  Matrix log_weights;                     // S x K
  std::vector<std::vector<Stack>> flows;  // [S][K]

  std::size_t states() const { return num_states; }
  std::size_t components() const { return num_components; }

  std::vector<double> component_log_pdfs(std::size_t s, const std::vector<double>& x) const {
    if (x.size() != dim) throw std::invalid_argument("MixtureEmission: dimension mismatch");
    std::vector<double> out(num_components);
    for (std::size_t k = 0; k < num_components; ++k)
      out[k] = log_weights(s, k) + flows[s][k].log_likelihood(x);
    return out;
  }

  double log_pdf(std::size_t s, const std::vector<double>& x) const {
    return log_sum_exp(component_log_pdfs(s, x));
  }

  /// Posterior over components given the frame; exponentials sum to 1.
  std::vector<double> component_resp(std::size_t s, const std::vector<double>& x) const {
    std::vector<double> r = component_log_pdfs(s, x);
    const double total = log_sum_exp(r);
    for (auto& v : r) v -= total;
    return r;
  }

  /// Generative draw: pick a component, then push a standard-normal latent
  /// through the generating direction.
  std::vector<double> sample(std::size_t s, RngStream& rng) const {
    std::vector<double> w(num_components);
    for (std::size_t k = 0; k < num_components; ++k) w[k] = std::exp(log_weights(s, k));
    const std::size_t k = rng.categorical(w);
    return flows[s][k].inverse(rng.normal_vector(dim));
  }
};

struct PiUpdate {
  Matrix log_weights;
  std::vector<std::size_t> kept_states;  // states with no responsibility mass
};

/// Closed-form mixture-weight update: pooled component posteriors,
/// normalized per state. Massless states keep their previous weights.
inline PiUpdate update_pi(const Matrix& prev_log_weights, const std::vector<PosteriorStats>& stats) {
  if (stats.empty()) throw std::invalid_argument("update_pi: no statistics");
  const std::size_t S = prev_log_weights.rows, K = prev_log_weights.cols;
  Matrix acc(S, K, 0.0);
  for (const auto& st : stats)
    for (std::size_t t = 0; t < st.frames(); ++t)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t k = 0; k < K; ++k) acc(s, k) += std::exp(st.comp(t, s, k));

  PiUpdate out;
  out.log_weights = Matrix(S, K);
  for (std::size_t s = 0; s < S; ++s) {
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += acc(s, k);
    if (total < kResponsibilityFloor) {
      out.kept_states.push_back(s);
      for (std::size_t k = 0; k < K; ++k) out.log_weights(s, k) = prev_log_weights(s, k);
    } else {
      for (std::size_t k = 0; k < K; ++k)
        out.log_weights(s, k) = acc(s, k) > 0.0 ? std::log(acc(s, k) / total) : kNegInf;
    }
  }
  return out;
}

}  // namespace flowhmm
