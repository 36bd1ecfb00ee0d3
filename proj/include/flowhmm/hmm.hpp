#pragma once

#include <cstddef>
#include <stdexcept>
#include <utility>
#include <variant>
#include <vector>

#include "flowhmm/glow.hpp"
#include "flowhmm/gmm.hpp"
#include "flowhmm/markov.hpp"
#include "flowhmm/nmm.hpp"
#include "flowhmm/realnvp.hpp"

namespace flowhmm {

/// One class model H_c: hidden chain plus a per-state emission model.
/// Emission provides states(), components(), dim, component_log_pdfs,
/// log_pdf, and sample.
template <class Emission>
struct HmmModel {
  MarkovChain chain;
  Emission emission;

  std::size_t states() const { return chain.num_states; }
  std::size_t dim() const { return emission.dim; }
};

using GmmHmm = HmmModel<GmmEmission>;
using NvpHmm = HmmModel<MixtureEmission<NvpStack>>;
using GlowHmm = HmmModel<MixtureEmission<GlowStack>>;

/// Any of the three model families; classification and IO dispatch on this.
using AnyHmm = std::variant<GmmHmm, NvpHmm, GlowHmm>;

/// Per-frame log densities for one sequence: the T x S mixture matrix and
/// the T x (S*K) per-component matrix feeding the posterior pass.
template <class Emission>
std::pair<Matrix, Matrix> emission_scores(const HmmModel<Emission>& model, const Matrix& seq) {
  const std::size_t T = seq.rows, S = model.states();
  const std::size_t K = model.emission.components();
  if (seq.cols != model.dim())
    throw std::invalid_argument("emission_scores: sequence dim " + std::to_string(seq.cols) +
                                " != model dim " + std::to_string(model.dim()));
  Matrix emis(T, S);
  Matrix comp(T, S * K);
  for (std::size_t t = 0; t < T; ++t) {
    const std::vector<double> x = seq.row(t);
    for (std::size_t s = 0; s < S; ++s) {
      const auto parts = model.emission.component_log_pdfs(s, x);
      for (std::size_t k = 0; k < K; ++k) comp(t, s * K + k) = parts[k];
      emis(t, s) = log_sum_exp(parts);
    }
  }
  return {std::move(emis), std::move(comp)};
}

template <class Emission>
double sequence_log_likelihood(const HmmModel<Emission>& model, const Matrix& seq) {
  const auto [emis, comp] = emission_scores(model, seq);
  return forward_log_likelihood(model.chain, emis);
}

template <class Emission>
PosteriorStats model_e_step(const HmmModel<Emission>& model, const Matrix& seq) {
  const auto [emis, comp] = emission_scores(model, seq);
  return e_step(model.chain, emis, comp);
}

inline double any_log_likelihood(const AnyHmm& model, const Matrix& seq) {
  return std::visit([&](const auto& m) { return sequence_log_likelihood(m, seq); }, model);
}

inline std::size_t any_dim(const AnyHmm& model) {
  return std::visit([](const auto& m) { return m.dim(); }, model);
}

/// Flow-mixture model with identity-initialized components: exactly a
/// unit-Gaussian HMM at epoch zero. Symmetry between components is broken
/// by per-component jitter on hidden weights, which leaves the map itself
/// untouched but differentiates the gradients.
inline NvpHmm make_nvp_hmm(std::size_t S, std::size_t K, std::size_t D, std::size_t num_layers,
                           std::size_t hidden, RngStream& rng, double jitter_std = 1e-2) {
  NvpHmm model;
  model.chain = left_to_right_chain(S);
  model.emission.num_states = S;
  model.emission.num_components = K;
  model.emission.dim = D;
  model.emission.log_weights = Matrix(S, K, -std::log(static_cast<double>(K)));
  model.emission.flows.resize(S);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t k = 0; k < K; ++k)
      model.emission.flows[s].push_back(make_nvp_stack(D, num_layers, hidden, rng, jitter_std));
  return model;
}

/// Glow counterpart; actnorms start uninitialized and must see data before
/// any evaluation (the trainer passes the first batch).
inline GlowHmm make_glow_hmm(std::size_t S, std::size_t K, std::size_t D, std::size_t num_steps,
                             std::size_t hidden, RngStream& rng, double jitter_std = 1e-2) {
  GlowHmm model;
  model.chain = left_to_right_chain(S);
  model.emission.num_states = S;
  model.emission.num_components = K;
  model.emission.dim = D;
  model.emission.log_weights = Matrix(S, K, -std::log(static_cast<double>(K)));
  model.emission.flows.resize(S);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t k = 0; k < K; ++k)
      model.emission.flows[s].push_back(make_glow_stack(D, num_steps, hidden, rng, jitter_std));
  return model;
}

/// GMM-HMM starting point: data-derived mixture, left-to-right chain.
inline GmmHmm make_gmm_hmm(std::size_t S, std::size_t K, const std::vector<Matrix>& sequences,
                           RngStream& rng) {
  GmmHmm model;
  model.chain = left_to_right_chain(S);
  model.emission = make_gmm_from_data(S, K, sequences, rng);
  return model;
}

}  // namespace flowhmm
