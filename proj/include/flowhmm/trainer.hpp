#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "flowhmm/hmm.hpp"
#include "flowhmm/numeric.hpp"
#include "flowhmm/params.hpp"
#include "flowhmm/rng.hpp"

namespace flowhmm {

// ---------------------------------------------------------------------------
// Hybrid training loop: an inner minibatch Adam pass over the flow
// parameters against the expected-posterior cost, wrapped by outer
// closed-form updates of the chain and mixture weights. The GMM path skips
// the inner loop entirely and runs exact M-steps.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 4e-3;     // Glow models typically want 1e-4
  std::size_t batch_size = 8;      // sequences per minibatch
  std::size_t max_inner_iters = 50;
  double convergence_threshold = 1e-4;
  std::size_t convergence_streak = 3;
  std::size_t outer_iters = 10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double lr_decay_factor = 0.5;
  std::size_t lr_decay_every = 10;
  std::uint64_t seed = 0;
};

inline void validate_config(const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
  if (!(cfg.convergence_threshold > 0.0 && cfg.convergence_threshold < 1.0))
    throw std::invalid_argument("TrainConfig: convergence_threshold must be in (0, 1)");
  if (cfg.convergence_streak < 1) throw std::invalid_argument("TrainConfig: convergence_streak must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (cfg.adam_beta1 < 0.0 || cfg.adam_beta1 >= 1.0 || cfg.adam_beta2 < 0.0 || cfg.adam_beta2 >= 1.0)
    throw std::invalid_argument("TrainConfig: adam betas must be in [0, 1)");
}

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t step = 0;
};

/// Standard bias-corrected Adam, descending on the given gradients.
/// Non-finite gradients abort, naming the offending parameter block.
inline void adam_step(AdamState& state, std::vector<double>& params,
                      const std::vector<double>& grads, double eta, const TrainConfig& cfg,
                      const std::vector<ParamBlock>& blocks = {}) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: shape mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state shape mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i])) {
      std::string where = blocks.empty() ? "parameter " + std::to_string(i)
                                         : "block " + locate_block(blocks, i).name;
      throw std::runtime_error("adam_step: non-finite gradient in " + where);
    }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * grads[i];
    state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= eta * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
  }
}

struct ConvergenceStreak {
  std::size_t count = 0;
};

/// One evaluation of the relative-change criterion: the streak grows while
/// |cur - prev| / |prev| stays below the threshold and resets otherwise;
/// convergence is a full streak.
inline bool check_convergence(double prev, double cur, double threshold, std::size_t target,
                              ConvergenceStreak& streak) {
  if (prev == 0.0) throw std::invalid_argument("check_convergence: previous value is zero");
  if (std::abs(cur - prev) / std::abs(prev) < threshold)
    ++streak.count;
  else
    streak.count = 0;
  return streak.count >= target;
}

struct TrainLogEntry {
  std::size_t outer = 0;       // 1-based outer iteration index
  double nll = 0.0;            // full-dataset negative log-likelihood after the iteration
  std::size_t inner_iters = 0;
  double learning_rate = 0.0;  // rate in effect during the iteration
  double wall_ms = 0.0;
};

using TrainLog = std::vector<TrainLogEntry>;

/// Resumable training position. Together with the model parameters this is
/// the complete state: restoring both and continuing reproduces an
/// uninterrupted run bit for bit.
struct TrainerState {
  std::size_t next_outer = 1;
  double learning_rate = 0.0;
  AdamState adam;
  RngStream rng{0};
};

inline TrainerState fresh_trainer_state(const TrainConfig& cfg) {
  TrainerState st;
  st.learning_rate = cfg.learning_rate;
  st.rng = RngStream(cfg.seed).split(0x747261696eULL);
  return st;
}

using CheckpointSink = std::function<void(const TrainerState&, const TrainLog&)>;

namespace detail {

template <class Stack>
std::vector<double> gather_params(const MixtureEmission<Stack>& emis) {
  std::vector<double> out;
  for (const auto& row : emis.flows)
    for (const auto& stack : row) {
      const auto p = stack.get_params();
      out.insert(out.end(), p.begin(), p.end());
    }
  return out;
}

template <class Stack>
void scatter_params(MixtureEmission<Stack>& emis, const std::vector<double>& params) {
  std::size_t off = 0;
  for (auto& row : emis.flows)
    for (auto& stack : row) {
      const std::size_t n = stack.param_count();
      stack.set_params(std::vector<double>(params.begin() + off, params.begin() + off + n));
      off += n;
    }
  if (off != params.size()) throw std::invalid_argument("scatter_params: size mismatch");
}

template <class Stack>
std::vector<ParamBlock> gather_blocks(const MixtureEmission<Stack>& emis) {
  std::vector<ParamBlock> out;
  std::size_t off = 0;
  for (std::size_t s = 0; s < emis.flows.size(); ++s)
    for (std::size_t k = 0; k < emis.flows[s].size(); ++k) {
      for (const auto& b : emis.flows[s][k].blocks())
        out.push_back({"state" + std::to_string(s) + ".comp" + std::to_string(k) + "." + b.name,
                       off + b.offset, b.size});
      off += emis.flows[s][k].param_count();
    }
  return out;
}

/// Length-sorted minibatch index sets (stable on ties).
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<Matrix>& data,
                                                          std::size_t batch_size) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return data[a].rows < data[b].rows; });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(i + batch_size, order.size());
    batches.emplace_back(order.begin() + i, order.begin() + end);
  }
  return batches;
}

template <class Emission>
double total_nll(const HmmModel<Emission>& model, const std::vector<Matrix>& data) {
  double acc = 0.0;
  for (std::size_t m = 0; m < data.size(); ++m) {
    try {
      acc -= sequence_log_likelihood(model, data[m]);
    } catch (const std::exception& e) {
      throw std::runtime_error("total_nll: sequence " + std::to_string(m) + ": " + e.what());
    }
  }
  if (!std::isfinite(acc)) throw std::runtime_error("total_nll: non-finite total");
  return acc;
}

}  // namespace detail

struct InnerResult {
  std::size_t iterations = 0;       // epochs actually run
  std::vector<double> nll_trace;    // full-dataset NLL after each epoch
  double final_nll = 0.0;           // last trace entry, or the entry NLL when no epochs ran
};

/// Inner loop of the hybrid algorithm: minibatch Adam on the flow
/// parameters under responsibilities frozen from the current posteriors.
/// One iteration is one epoch over all minibatches; the full-dataset cost
/// is evaluated once per epoch and feeds the relative-change criterion.
template <class Stack>
InnerResult train_inner(HmmModel<MixtureEmission<Stack>>& model, const std::vector<Matrix>& data,
                        const std::vector<PosteriorStats>& stats, AdamState& adam,
                        double learning_rate, const TrainConfig& cfg, RngStream& rng) {
  validate_config(cfg);
  if (data.size() != stats.size()) throw std::invalid_argument("train_inner: stats/data mismatch");
  auto& emis = model.emission;
  const std::size_t S = emis.num_states, K = emis.num_components;

  InnerResult res;
  double prev_nll = 0.0;
  for (const auto& st : stats) prev_nll -= st.log_likelihood;
  res.final_nll = prev_nll;
  if (cfg.max_inner_iters == 0) return res;

  // Frame responsibilities, frozen for the whole loop.
  std::vector<Matrix> resp(data.size());
  for (std::size_t m = 0; m < data.size(); ++m) {
    resp[m] = Matrix(stats[m].frames(), S * K);
    for (std::size_t t = 0; t < stats[m].frames(); ++t)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t k = 0; k < K; ++k)
          resp[m](t, s * K + k) = std::exp(stats[m].comp(t, s, k));
  }

  std::vector<double> params = detail::gather_params(emis);
  const auto blocks = detail::gather_blocks(emis);
  std::vector<std::size_t> offsets(S * K, 0);
  {
    std::size_t off = 0;
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t k = 0; k < K; ++k) {
        offsets[s * K + k] = off;
        off += emis.flows[s][k].param_count();
      }
  }

  const auto batches = detail::make_batches(data, cfg.batch_size);
  std::vector<double> grad(params.size());
  std::vector<std::vector<double>> grad_sk(S * K);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t k = 0; k < K; ++k)
      grad_sk[s * K + k].resize(emis.flows[s][k].param_count());
  ConvergenceStreak streak;

  for (std::size_t epoch = 0; epoch < cfg.max_inner_iters; ++epoch) {
    const auto order = rng.permutation(batches.size());
    for (std::size_t bi : order) {
      for (auto& g : grad_sk) std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t m : batches[bi]) {
        const auto& seq = data[m];
        for (std::size_t t = 0; t < seq.rows; ++t) {
          const std::vector<double> x = seq.row(t);
          for (std::size_t s = 0; s < S; ++s)
            for (std::size_t k = 0; k < K; ++k) {
              const double w = resp[m](t, s * K + k);
              if (w == 0.0) continue;
              try {
                // Descent on the negative expected log-likelihood.
                emis.flows[s][k].backward(x, -w, grad_sk[s * K + k]);
              } catch (const std::exception& e) {
                throw std::runtime_error("train_inner: state " + std::to_string(s) +
                                         " component " + std::to_string(k) + " frame " +
                                         std::to_string(t) + ": " + e.what());
              }
            }
        }
      }
      for (std::size_t sk = 0; sk < S * K; ++sk)
        std::copy(grad_sk[sk].begin(), grad_sk[sk].end(), grad.begin() + offsets[sk]);
      adam_step(adam, params, grad, learning_rate, cfg, blocks);
      detail::scatter_params(emis, params);
    }

    const double cur_nll = detail::total_nll(model, data);
    res.nll_trace.push_back(cur_nll);
    res.final_nll = cur_nll;
    ++res.iterations;
    const bool converged =
        check_convergence(prev_nll, cur_nll, cfg.convergence_threshold, cfg.convergence_streak,
                          streak);
    prev_nll = cur_nll;
    if (converged) break;
  }
  return res;
}

namespace detail {

template <class Emission>
struct is_flow_mixture : std::false_type {};
template <class Stack>
struct is_flow_mixture<MixtureEmission<Stack>> : std::true_type {};

/// Glow stacks need their data-dependent init before the first evaluation;
/// other stacks take the batch and ignore it.
inline void maybe_initialize(HmmModel<MixtureEmission<GlowStack>>& model,
                             const std::vector<Matrix>& data, std::size_t batch_size) {
  bool need = false;
  for (auto& row : model.emission.flows)
    for (auto& st : row)
      if (!st.initialized()) need = true;
  if (!need) return;
  std::vector<std::vector<double>> frames;
  const auto batches = make_batches(data, batch_size);
  for (std::size_t m : batches.front())
    for (std::size_t t = 0; t < data[m].rows; ++t) frames.push_back(data[m].row(t));
  for (auto& row : model.emission.flows)
    for (auto& st : row)
      if (!st.initialized()) glow_initialize(st, frames);
}
template <class Emission>
void maybe_initialize(HmmModel<Emission>&, const std::vector<Matrix>&, std::size_t) {}

}  // namespace detail

/// Full hybrid loop. Passing a TrainerState resumes mid-run (the state and
/// the model must come from the same checkpoint); the sink fires after
/// every completed outer iteration with the state needed to resume.
template <class Emission>
TrainLog train_outer(HmmModel<Emission>& model, const std::vector<Matrix>& data,
                     const TrainConfig& cfg, TrainerState* state = nullptr,
                     const CheckpointSink& sink = {}) {
  validate_config(cfg);
  if (data.empty()) throw std::invalid_argument("train_outer: no training sequences");
  for (const auto& seq : data)
    if (seq.cols != model.dim())
      throw std::invalid_argument("train_outer: sequence dim does not match model");

  TrainerState local = state ? *state : fresh_trainer_state(cfg);
  detail::maybe_initialize(model, data, cfg.batch_size);

  TrainLog log;
  while (local.next_outer <= cfg.outer_iters) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t outer = local.next_outer;

    std::vector<PosteriorStats> stats;
    stats.reserve(data.size());
    for (std::size_t m = 0; m < data.size(); ++m) {
      try {
        stats.push_back(model_e_step(model, data[m]));
      } catch (const std::exception& e) {
        throw std::runtime_error("train_outer: e-step on sequence " + std::to_string(m) + ": " +
                                 e.what());
      }
    }

    TrainLogEntry entry;
    entry.outer = outer;
    entry.learning_rate = local.learning_rate;

    if constexpr (detail::is_flow_mixture<Emission>::value) {
      const InnerResult inner =
          train_inner(model, data, stats, local.adam, local.learning_rate, cfg, local.rng);
      entry.inner_iters = inner.iterations;
      const auto pi = update_pi(model.emission.log_weights, stats);
      model.emission.log_weights = pi.log_weights;
    } else {
      const auto upd = gmm_m_step(model.emission, stats, data);
      model.emission = upd.emission;
    }
    model.chain.log_q = [&] {
      const auto q = update_q(stats);
      std::vector<double> lq(q.size());
      for (std::size_t s = 0; s < q.size(); ++s) lq[s] = q[s] > 0.0 ? std::log(q[s]) : kNegInf;
      return lq;
    }();
    model.chain.log_A = update_A(stats, model.chain.log_A).log_A;

    entry.nll = detail::total_nll(model, data);
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                        .count();
    log.push_back(entry);

    ++local.next_outer;
    if (cfg.lr_decay_every > 0 && outer % cfg.lr_decay_every == 0)
      local.learning_rate *= cfg.lr_decay_factor;
    if (sink) sink(local, log);
  }
  if (state) *state = local;
  return log;
}

/// One model per class, trained independently. Each class gets a private
/// stream seeded identically from the config, so results do not depend on
/// scheduling and identical class data yields identical models.
template <class Model, class Factory>
std::vector<Model> train_class_set(const std::vector<std::vector<Matrix>>& class_data,
                                   const TrainConfig& cfg, Factory&& make_model,
                                   std::size_t jobs = 1,
                                   std::vector<TrainLog>* logs_out = nullptr) {
  validate_config(cfg);
  const std::size_t C = class_data.size();
  for (std::size_t c = 0; c < C; ++c)
    if (class_data[c].empty())
      throw std::invalid_argument("train_class_set: class " + std::to_string(c) + " is empty");

  std::vector<Model> models(C);
  std::vector<TrainLog> logs(C);
  std::vector<std::exception_ptr> errors(C);

  const auto run_one = [&](std::size_t c) {
    try {
      RngStream rng(cfg.seed);
      models[c] = make_model(rng, class_data[c]);
      logs[c] = train_outer(models[c], class_data[c], cfg);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };

  if (jobs <= 1) {
    for (std::size_t c = 0; c < C; ++c) run_one(c);
  } else {
    std::vector<std::thread> pool;
    std::size_t next = 0;
    const std::size_t n_threads = std::min(jobs, C);
    std::mutex mu;
    for (std::size_t i = 0; i < n_threads; ++i)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t c;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= C) return;
            c = next++;
          }
          run_one(c);
        }
      });
    for (auto& th : pool) th.join();
  }
  for (std::size_t c = 0; c < C; ++c)
    if (errors[c]) std::rethrow_exception(errors[c]);
  if (logs_out) *logs_out = std::move(logs);
  return models;
}

}  // namespace flowhmm
