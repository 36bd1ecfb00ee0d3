#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowhmm/matrix.hpp"
#include "flowhmm/numeric.hpp"

namespace flowhmm {

// ---------------------------------------------------------------------------
// Hidden-chain parameters and posteriors.
//
// Everything runs in the log domain end to end; there are no scaling
// coefficients anywhere, so a sequence of any length is safe.
// ---------------------------------------------------------------------------

/// Initial distribution and transition matrix, stored as logs. Structural
/// zeros (forbidden transitions) are exactly -inf and survive reestimation.
struct MarkovChain {
  std::size_t num_states = 0;
  std::vector<double> log_q;  // S
  Matrix log_A;               // S x S, rows sum to one in probability

  std::size_t states() const { return num_states; }
};

/// Build a chain from probability-domain inputs, validating normalization.
inline MarkovChain make_chain(const std::vector<double>& q, const Matrix& A, double tol = 1e-10) {
  const std::size_t S = q.size();
  if (A.rows != S || A.cols != S) throw std::invalid_argument("make_chain: A must be SxS");
  MarkovChain c;
  c.num_states = S;
  c.log_q.resize(S);
  c.log_A = Matrix(S, S);
  double qsum = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    if (q[s] < 0.0) throw std::invalid_argument("make_chain: negative initial probability");
    qsum += q[s];
    c.log_q[s] = q[s] > 0.0 ? std::log(q[s]) : kNegInf;
  }
  if (std::abs(qsum - 1.0) > tol)
    throw std::invalid_argument("make_chain: initial distribution sums to " + std::to_string(qsum));
  for (std::size_t i = 0; i < S; ++i) {
    double rsum = 0.0;
    for (std::size_t j = 0; j < S; ++j) {
      if (A(i, j) < 0.0) throw std::invalid_argument("make_chain: negative transition probability");
      rsum += A(i, j);
      c.log_A(i, j) = A(i, j) > 0.0 ? std::log(A(i, j)) : kNegInf;
    }
    if (std::abs(rsum - 1.0) > tol)
      throw std::invalid_argument("make_chain: transition row " + std::to_string(i) +
                                  " sums to " + std::to_string(rsum));
  }
  return c;
}

/// Left-to-right chain used as the training start: mass on state 0, each
/// state feeds itself and every later state uniformly.
inline MarkovChain left_to_right_chain(std::size_t S) {
  std::vector<double> q(S, 0.0);
  q[0] = 1.0;
  Matrix A(S, S, 0.0);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = i; j < S; ++j) A(i, j) = 1.0 / static_cast<double>(S - i);
  return make_chain(q, A);
}

/// Posterior summaries for one sequence. gamma and the component posteriors
/// stay in the log domain; xi arrives pre-summed over time.
struct PosteriorStats {
  double log_likelihood = 0.0;
  Matrix log_gamma;      // T x S
  Matrix log_xi_sum;     // S x S; lse over t = 0..T-2 of log xi_t(i, j)
  std::size_t num_components = 0;
  Matrix log_comp_gamma;  // T x (S*K); joint posterior of (state, component)

  std::size_t frames() const { return log_gamma.rows; }
  double comp(std::size_t t, std::size_t s, std::size_t k) const {
    return log_comp_gamma(t, s * num_components + k);
  }
};

namespace detail {

/// alpha(t, s) = log p(x_1..t, s_t = s); emis is T x S mixture log density.
inline Matrix forward_pass(const MarkovChain& chain, const Matrix& emis) {
  const std::size_t T = emis.rows, S = chain.num_states;
  Matrix alpha(T, S);
  for (std::size_t s = 0; s < S; ++s) alpha(0, s) = chain.log_q[s] + emis(0, s);
  std::vector<double> terms(S);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t j = 0; j < S; ++j) {
      for (std::size_t i = 0; i < S; ++i) terms[i] = alpha(t - 1, i) + chain.log_A(i, j);
      alpha(t, j) = log_sum_exp(terms) + emis(t, j);
    }
  return alpha;
}

/// beta(t, s) = log p(x_{t+1..T} | s_t = s).
inline Matrix backward_pass(const MarkovChain& chain, const Matrix& emis) {
  const std::size_t T = emis.rows, S = chain.num_states;
  Matrix beta(T, S, 0.0);
  std::vector<double> terms(S);
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t i = 0; i < S; ++i) {
      for (std::size_t j = 0; j < S; ++j)
        terms[j] = chain.log_A(i, j) + emis(t + 1, j) + beta(t + 1, j);
      beta(t, i) = log_sum_exp(terms);
    }
  return beta;
}

inline void check_emission_rows(const Matrix& emis) {
  for (std::size_t t = 0; t < emis.rows; ++t) {
    bool any = false;
    for (std::size_t s = 0; s < emis.cols; ++s)
      if (emis(t, s) != kNegInf) { any = true; break; }
    if (!any)
      throw std::runtime_error("e_step: frame " + std::to_string(t) +
                               " has zero emission density under every state");
  }
}

}  // namespace detail

/// Sequence log likelihood by the forward recursion.
inline double forward_log_likelihood(const MarkovChain& chain, const Matrix& emis) {
  if (emis.rows == 0) throw std::invalid_argument("forward_log_likelihood: empty sequence");
  if (emis.cols != chain.num_states)
    throw std::invalid_argument("forward_log_likelihood: emission column count != states");
  detail::check_emission_rows(emis);
  const Matrix alpha = detail::forward_pass(chain, emis);
  return log_sum_exp(alpha.row_ptr(emis.rows - 1), chain.num_states);
}

/// Full posterior pass for one sequence.
///   emis:     T x S     log p(x_t | s) under the state's whole mixture
///   comp_log: T x (S*K) log pi_{s,k} + log p(x_t | s, k)
/// The mixture density must be the lse of its components; callers that
/// produce both from one routine satisfy this by construction.
inline PosteriorStats e_step(const MarkovChain& chain, const Matrix& emis, const Matrix& comp_log) {
  const std::size_t T = emis.rows, S = chain.num_states;
  if (T == 0) throw std::invalid_argument("e_step: empty sequence");
  if (emis.cols != S) throw std::invalid_argument("e_step: emission column count != states");
  if (comp_log.rows != T || comp_log.cols % S != 0)
    throw std::invalid_argument("e_step: component matrix shape mismatch");
  detail::check_emission_rows(emis);
  const std::size_t K = comp_log.cols / S;

  const Matrix alpha = detail::forward_pass(chain, emis);
  const Matrix beta = detail::backward_pass(chain, emis);

  PosteriorStats st;
  st.num_components = K;
  st.log_likelihood = log_sum_exp(alpha.row_ptr(T - 1), S);

  st.log_gamma = Matrix(T, S);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s)
      st.log_gamma(t, s) = alpha(t, s) + beta(t, s) - st.log_likelihood;

  st.log_xi_sum = Matrix(S, S, kNegInf);
  for (std::size_t t = 0; t + 1 < T; ++t)
    for (std::size_t i = 0; i < S; ++i) {
      if (alpha(t, i) == kNegInf) continue;
      for (std::size_t j = 0; j < S; ++j) {
        const double lx = alpha(t, i) + chain.log_A(i, j) + emis(t + 1, j) + beta(t + 1, j) -
                          st.log_likelihood;
        st.log_xi_sum(i, j) = log_add(st.log_xi_sum(i, j), lx);
      }
    }

  st.log_comp_gamma = Matrix(T, S * K);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t k = 0; k < K; ++k) {
        const double lg = st.log_gamma(t, s);
        st.log_comp_gamma(t, s * K + k) =
            lg == kNegInf ? kNegInf : lg + comp_log(t, s * K + k) - emis(t, s);
      }
  return st;
}

/// Closed-form update of the initial distribution from first-frame
/// posteriors pooled over sequences.
inline std::vector<double> update_q(const std::vector<PosteriorStats>& stats) {
  if (stats.empty()) throw std::invalid_argument("update_q: no statistics");
  const std::size_t S = stats.front().log_gamma.cols;
  std::vector<double> q(S, 0.0);
  double total = 0.0;
  for (const auto& st : stats)
    for (std::size_t s = 0; s < S; ++s) {
      const double g = std::exp(st.log_gamma(0, s));
      q[s] += g;
      total += g;
    }
  for (auto& v : q) v /= total;
  return q;
}

struct TransitionUpdate {
  Matrix log_A;
  std::vector<std::size_t> kept_rows;  // states with no transition mass; rows carried over
};

/// Closed-form update of the transition matrix from pooled xi sums. A state
/// that never transitions anywhere (e.g. only ever last in a sequence)
/// contributes no evidence; its previous row is kept and reported.
inline TransitionUpdate update_A(const std::vector<PosteriorStats>& stats, const Matrix& log_A_prev) {
  if (stats.empty()) throw std::invalid_argument("update_A: no statistics");
  const std::size_t S = log_A_prev.rows;
  bool any_pair = false;
  for (const auto& st : stats)
    if (st.frames() >= 2) any_pair = true;
  if (!any_pair)
    throw std::runtime_error("update_A: every sequence has a single frame; no transitions observed");

  Matrix acc(S, S, 0.0);
  for (const auto& st : stats)
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < S; ++j) acc(i, j) += std::exp(st.log_xi_sum(i, j));

  TransitionUpdate out;
  out.log_A = Matrix(S, S);
  for (std::size_t i = 0; i < S; ++i) {
    double rsum = 0.0;
    for (std::size_t j = 0; j < S; ++j) rsum += acc(i, j);
    if (rsum <= 0.0) {
      out.kept_rows.push_back(i);
      for (std::size_t j = 0; j < S; ++j) out.log_A(i, j) = log_A_prev(i, j);
    } else {
      for (std::size_t j = 0; j < S; ++j)
        out.log_A(i, j) = acc(i, j) > 0.0 ? std::log(acc(i, j) / rsum) : kNegInf;
    }
  }
  return out;
}

}  // namespace flowhmm
