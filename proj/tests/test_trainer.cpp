#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "flowhmm/hmm.hpp"
#include "flowhmm/trainer.hpp"
#include "oracles.hpp"

using namespace flowhmm;

namespace {

// Independent single-parameter Adam for cross-checking the library stepper.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  std::uint64_t t = 0;
  double step(double p, double g, double eta, double b1, double b2, double eps) {
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(b2, static_cast<double>(t)));
    return p - eta * mhat / (std::sqrt(vhat) + eps);
  }
};

std::vector<Matrix> gaussian_sequences(std::size_t n, std::size_t len, std::size_t dim,
                                       RngStream& rng) {
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix seq(len, dim);
    for (double& v : seq.data) v = rng.normal();
    out.push_back(std::move(seq));
  }
  return out;
}

// Noisy arc in the plane: a density no affine map reaches from a Gaussian.
std::vector<Matrix> moon_frames(std::size_t n, RngStream& rng) {
  std::vector<Matrix> out;
  const double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < n; ++i) {
    const double theta = rng.uniform(0.0, pi);
    Matrix seq(1, 2);
    seq(0, 0) = std::cos(theta) + 0.1 * rng.normal();
    seq(0, 1) = std::sin(theta) + 0.1 * rng.normal();
    out.push_back(std::move(seq));
  }
  return out;
}

template <class Emission>
Matrix sample_sequence(const HmmModel<Emission>& model, std::size_t len, RngStream& rng) {
  Matrix seq(len, model.dim());
  std::size_t s = 0;
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<double> w(model.states());
    if (t == 0)
      for (std::size_t j = 0; j < w.size(); ++j) w[j] = std::exp(model.chain.log_q[j]);
    else
      for (std::size_t j = 0; j < w.size(); ++j) w[j] = std::exp(model.chain.log_A(s, j));
    s = rng.categorical(w);
    const auto x = model.emission.sample(s, rng);
    for (std::size_t d = 0; d < x.size(); ++d) seq(t, d) = x[d];
  }
  return seq;
}

template <class Emission>
std::vector<double> model_fingerprint(const HmmModel<Emission>& model) {
  std::vector<double> fp = model.chain.log_q;
  fp.insert(fp.end(), model.chain.log_A.data.begin(), model.chain.log_A.data.end());
  if constexpr (detail::is_flow_mixture<Emission>::value) {
    fp.insert(fp.end(), model.emission.log_weights.data.begin(),
              model.emission.log_weights.data.end());
    const auto p = detail::gather_params(model.emission);
    fp.insert(fp.end(), p.begin(), p.end());
  } else {
    fp.insert(fp.end(), model.emission.log_weights.data.begin(),
              model.emission.log_weights.data.end());
    for (const auto& m : model.emission.means) fp.insert(fp.end(), m.data.begin(), m.data.end());
    for (const auto& v : model.emission.log_vars)
      fp.insert(fp.end(), v.data.begin(), v.data.end());
  }
  return fp;
}

double total_data_nll(const NvpHmm& model, const std::vector<Matrix>& data) {
  double nll = 0.0;
  for (const auto& seq : data) nll -= sequence_log_likelihood(model, seq);
  return nll;
}

}  // namespace

TEST_CASE("adam step matches an independent implementation and optimizes a parabola") {
  TrainConfig cfg;
  AdamState state;
  std::vector<double> p{1.0};
  ScalarAdam ref;
  double p_ref = 1.0;
  for (int i = 0; i < 50; ++i) {
    const std::vector<double> g{2.0 * p[0]};
    const double g_ref = 2.0 * p_ref;
    adam_step(state, p, g, 0.1, cfg);
    p_ref = ref.step(p_ref, g_ref, 0.1, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    REQUIRE(std::abs(p[0] - p_ref) < 1e-12);
  }
  REQUIRE(std::abs(p[0]) < 0.5);
}

TEST_CASE("adam step is a no-op on zero gradients") {
  TrainConfig cfg;
  AdamState state;
  std::vector<double> p{1.0, -2.5, 0.3};
  const auto before = p;
  adam_step(state, p, {0.0, 0.0, 0.0}, 0.1, cfg);
  REQUIRE(p == before);
}

TEST_CASE("adam step size on a constant gradient is bounded by the learning rate") {
  TrainConfig cfg;
  AdamState state;
  std::vector<double> p{0.0};
  double prev = p[0];
  for (int i = 0; i < 20; ++i) {
    adam_step(state, p, {3.7}, 0.05, cfg);
    REQUIRE(std::abs(p[0] - prev) <= 0.05 * (1.0 + 1e-6));
    prev = p[0];
  }
}

TEST_CASE("adam step rejects non-finite gradients naming the block") {
  TrainConfig cfg;
  AdamState state;
  std::vector<double> p{0.0, 0.0, 0.0, 0.0};
  std::vector<double> g{0.0, 0.0, 0.0, std::nan("")};
  const std::vector<ParamBlock> blocks{{"alpha", 0, 2}, {"beta", 2, 2}};
  REQUIRE_THROWS_WITH(adam_step(state, p, g, 0.1, cfg, blocks),
                      Catch::Matchers::ContainsSubstring("beta"));
  REQUIRE_THROWS_AS(adam_step(state, p, g, 0.1, cfg), std::runtime_error);
}

TEST_CASE("convergence check counts sub-threshold streaks and resets on violations") {
  ConvergenceStreak streak;
  // 100 -> 99.99 is a 1e-4 relative change, below the 1e-3 threshold.
  REQUIRE_FALSE(check_convergence(100.0, 99.99, 1e-3, 2, streak));
  REQUIRE(streak.count == 1);
  REQUIRE(check_convergence(99.99, 99.985, 1e-3, 2, streak));

  streak.count = 0;
  REQUIRE_FALSE(check_convergence(100.0, 99.99, 1e-3, 2, streak));
  REQUIRE_FALSE(check_convergence(99.99, 90.0, 1e-3, 2, streak));  // big move resets
  REQUIRE(streak.count == 0);
  REQUIRE_FALSE(check_convergence(90.0, 89.995, 1e-3, 2, streak));
  REQUIRE(check_convergence(89.995, 89.9945, 1e-3, 2, streak));

  // Streak of one converges immediately on any sub-threshold change.
  ConvergenceStreak one;
  REQUIRE(check_convergence(50.0, 50.0, 1e-3, 1, one));

  REQUIRE_THROWS_AS(check_convergence(0.0, 1.0, 1e-3, 1, streak), std::invalid_argument);
}

TEST_CASE("train config invariants are enforced") {
  const TrainConfig good;
  REQUIRE_NOTHROW(validate_config(good));
  auto bad = good;
  bad.learning_rate = 0.0;
  REQUIRE_THROWS_AS(validate_config(bad), std::invalid_argument);
  bad = good;
  bad.convergence_threshold = 0.0;
  REQUIRE_THROWS_AS(validate_config(bad), std::invalid_argument);
  bad = good;
  bad.convergence_threshold = 1.0;
  REQUIRE_THROWS_AS(validate_config(bad), std::invalid_argument);
  bad = good;
  bad.convergence_streak = 0;
  REQUIRE_THROWS_AS(validate_config(bad), std::invalid_argument);
  bad = good;
  bad.batch_size = 0;
  REQUIRE_THROWS_AS(validate_config(bad), std::invalid_argument);
  bad = good;
  bad.adam_beta1 = 1.0;
  REQUIRE_THROWS_AS(validate_config(bad), std::invalid_argument);
}

TEST_CASE("length-sorted minibatches partition the dataset") {
  RngStream rng(7);
  std::vector<Matrix> data;
  const std::vector<std::size_t> lens{9, 3, 7, 3, 12, 5, 1};
  for (auto l : lens) data.emplace_back(l, 2);
  const auto batches = flowhmm::detail::make_batches(data, 3);
  REQUIRE(batches.size() == 3);
  std::vector<bool> seen(data.size(), false);
  std::size_t prev_len = 0;
  for (const auto& b : batches)
    for (std::size_t m : b) {
      REQUIRE_FALSE(seen[m]);
      seen[m] = true;
      REQUIRE(data[m].rows >= prev_len);
      prev_len = data[m].rows;
    }
  for (bool s : seen) REQUIRE(s);
}

TEST_CASE("inner loop leaves an identity model nearly unchanged on matched data") {
  RngStream rng(11);
  auto model = make_nvp_hmm(2, 2, 2, 4, 8, rng, 0.0);
  const auto data = gaussian_sequences(32, 12, 2, rng);

  std::vector<PosteriorStats> stats;
  for (const auto& seq : data) stats.push_back(model_e_step(model, seq));
  double nll0 = 0.0;
  for (const auto& st : stats) nll0 -= st.log_likelihood;

  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.max_inner_iters = 10;
  cfg.convergence_streak = 99;  // run all ten epochs
  AdamState adam;
  RngStream train_rng(1);
  const auto res = train_inner(model, data, stats, adam, cfg.learning_rate, cfg, train_rng);
  REQUIRE(res.iterations == 10);
  REQUIRE(std::abs(res.final_nll - nll0) / std::abs(nll0) < 0.005);
}

TEST_CASE("inner loop with a zero iteration budget changes nothing") {
  RngStream rng(3);
  auto model = make_nvp_hmm(1, 1, 2, 2, 4, rng, 0.05);
  const auto before = flowhmm::detail::gather_params(model.emission);
  const auto data = gaussian_sequences(4, 6, 2, rng);
  std::vector<PosteriorStats> stats;
  for (const auto& seq : data) stats.push_back(model_e_step(model, seq));

  TrainConfig cfg;
  cfg.max_inner_iters = 0;
  AdamState adam;
  RngStream train_rng(1);
  const auto res = train_inner(model, data, stats, adam, cfg.learning_rate, cfg, train_rng);
  REQUIRE(res.iterations == 0);
  REQUIRE(res.nll_trace.empty());
  REQUIRE(flowhmm::detail::gather_params(model.emission) == before);
  REQUIRE(adam.step == 0);
}

TEST_CASE("inner loop descends steadily on curved planar data") {
  RngStream rng(23);
  const auto data = moon_frames(300, rng);
  auto model = make_nvp_hmm(1, 1, 2, 4, 8, rng, 0.01);

  std::vector<PosteriorStats> stats;
  for (const auto& seq : data) stats.push_back(model_e_step(model, seq));

  TrainConfig cfg;
  cfg.batch_size = 300;
  cfg.max_inner_iters = 200;
  cfg.convergence_threshold = 1e-12;
  cfg.convergence_streak = 1000;  // never trip; observe the full trace
  AdamState adam;
  RngStream train_rng(5);
  const auto res = train_inner(model, data, stats, adam, cfg.learning_rate, cfg, train_rng);
  REQUIRE(res.iterations == 200);

  double entry_nll = 0.0;
  for (const auto& st : stats) entry_nll -= st.log_likelihood;
  std::size_t decreases = 0;
  double prev = entry_nll;
  for (double nll : res.nll_trace) {
    if (nll < prev) ++decreases;
    prev = nll;
  }
  REQUIRE(decreases >= 180);  // strict decrease in at least 90% of epochs
  REQUIRE(res.final_nll < entry_nll);
}

TEST_CASE("outer loop on a GMM emission is monotone in the logged cost") {
  RngStream rng(31);
  std::vector<Matrix> data;
  for (std::size_t i = 0; i < 20; ++i) {
    Matrix seq(10, 2);
    for (std::size_t t = 0; t < seq.rows; ++t) {
      const double c = (t < 5) ? -1.5 : 1.5;
      seq(t, 0) = c + 0.7 * rng.normal();
      seq(t, 1) = -c + 0.7 * rng.normal();
    }
    data.push_back(std::move(seq));
  }
  auto model = make_gmm_hmm(2, 2, data, rng);

  TrainConfig cfg;
  cfg.outer_iters = 10;
  const auto log = train_outer(model, data, cfg);
  REQUIRE(log.size() == 10);
  for (std::size_t i = 0; i < log.size(); ++i) {
    REQUIRE(log[i].outer == i + 1);
    REQUIRE(std::isfinite(log[i].nll));
    REQUIRE(log[i].inner_iters == 0);
    if (i > 0) REQUIRE(log[i].nll <= log[i - 1].nll + 1e-8);
  }
}

TEST_CASE("outer loop with a frozen inner stage is monotone for flow mixtures") {
  RngStream rng(37);
  auto model = make_nvp_hmm(2, 2, 2, 2, 4, rng, 0.05);
  std::vector<Matrix> data;
  for (std::size_t i = 0; i < 15; ++i) {
    Matrix seq(8, 2);
    for (double& v : seq.data) v = rng.normal() + ((i % 2 == 0) ? 0.5 : -0.5);
    data.push_back(std::move(seq));
  }

  TrainConfig cfg;
  cfg.outer_iters = 10;
  cfg.max_inner_iters = 0;  // chain and weight updates only: exact EM steps
  const auto log = train_outer(model, data, cfg);
  REQUIRE(log.size() == 10);
  for (std::size_t i = 1; i < log.size(); ++i) REQUIRE(log[i].nll <= log[i - 1].nll + 1e-8);
}

TEST_CASE("outer loop with zero iterations returns an empty log and leaves the model alone") {
  RngStream rng(41);
  auto model = make_nvp_hmm(2, 1, 2, 2, 4, rng, 0.05);
  const auto before = model_fingerprint(model);
  const auto data = gaussian_sequences(4, 6, 2, rng);
  TrainConfig cfg;
  cfg.outer_iters = 0;
  const auto log = train_outer(model, data, cfg);
  REQUIRE(log.empty());
  REQUIRE(model_fingerprint(model) == before);
}

TEST_CASE("training rejects mismatched dimensions and empty datasets") {
  RngStream rng(43);
  auto model = make_nvp_hmm(2, 1, 2, 2, 4, rng, 0.05);
  TrainConfig cfg;
  REQUIRE_THROWS_AS(train_outer(model, {}, cfg), std::invalid_argument);
  const auto wrong = gaussian_sequences(2, 5, 3, rng);
  REQUIRE_THROWS_AS(train_outer(model, wrong, cfg), std::invalid_argument);
}

TEST_CASE("learning rate decays on schedule in the log") {
  RngStream rng(47);
  auto model = make_nvp_hmm(1, 1, 2, 2, 4, rng, 0.02);
  const auto data = gaussian_sequences(6, 6, 2, rng);
  TrainConfig cfg;
  cfg.outer_iters = 5;
  cfg.max_inner_iters = 1;
  cfg.lr_decay_every = 2;
  cfg.lr_decay_factor = 0.5;
  const auto log = train_outer(model, data, cfg);
  REQUIRE(log.size() == 5);
  REQUIRE(log[0].learning_rate == cfg.learning_rate);
  REQUIRE(log[1].learning_rate == cfg.learning_rate);
  REQUIRE(log[2].learning_rate == 0.5 * cfg.learning_rate);
  REQUIRE(log[3].learning_rate == 0.5 * cfg.learning_rate);
  REQUIRE(log[4].learning_rate == 0.25 * cfg.learning_rate);
}

TEST_CASE("training is a deterministic function of data and seed") {
  TrainConfig cfg;
  cfg.outer_iters = 3;
  cfg.max_inner_iters = 2;
  cfg.seed = 99;

  const auto run = [&] {
    RngStream rng(17);
    auto model = make_nvp_hmm(2, 1, 2, 2, 4, rng, 0.05);
    RngStream data_rng(53);
    const auto data = gaussian_sequences(10, 8, 2, data_rng);
    const auto log = train_outer(model, data, cfg);
    return std::pair{model_fingerprint(model), log};
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.first == b.first);
  REQUIRE(a.second.size() == b.second.size());
  for (std::size_t i = 0; i < a.second.size(); ++i) {
    REQUIRE(a.second[i].nll == b.second[i].nll);
    REQUIRE(a.second[i].inner_iters == b.second[i].inner_iters);
  }
}

TEST_CASE("checkpointed state resumes bit for bit") {
  TrainConfig cfg;
  cfg.outer_iters = 4;
  cfg.max_inner_iters = 2;
  cfg.lr_decay_every = 2;
  cfg.seed = 7;

  RngStream data_rng(61);
  const auto data = gaussian_sequences(8, 7, 2, data_rng);
  const auto fresh_model = [] {
    RngStream rng(19);
    return make_nvp_hmm(2, 1, 2, 2, 4, rng, 0.05);
  };

  auto full = fresh_model();
  const auto full_log = train_outer(full, data, cfg);

  auto probe = fresh_model();
  TrainerState snapshot;
  std::vector<double> snapshot_params;
  bool captured = false;
  const CheckpointSink sink = [&](const TrainerState& st, const TrainLog& log) {
    if (log.size() == 2 && !captured) {
      snapshot = st;
      snapshot_params = model_fingerprint(probe);
      captured = true;
    }
  };
  train_outer(probe, data, cfg, nullptr, sink);
  REQUIRE(captured);
  REQUIRE(snapshot.next_outer == 3);
  REQUIRE(snapshot.learning_rate == 0.5 * cfg.learning_rate);

  auto resumed = fresh_model();
  {
    // Restore the checkpointed model parameters onto a fresh skeleton.
    auto fp = snapshot_params;
    const std::size_t S = resumed.states();
    std::size_t off = 0;
    for (std::size_t s = 0; s < S; ++s) resumed.chain.log_q[s] = fp[off++];
    for (double& v : resumed.chain.log_A.data) v = fp[off++];
    for (double& v : resumed.emission.log_weights.data) v = fp[off++];
    std::vector<double> flow(fp.begin() + off, fp.end());
    flowhmm::detail::scatter_params(resumed.emission, flow);
  }
  TrainerState st = snapshot;
  const auto tail_log = train_outer(resumed, data, cfg, &st);
  REQUIRE(tail_log.size() == 2);
  REQUIRE(model_fingerprint(resumed) == model_fingerprint(full));
  REQUIRE(tail_log[0].nll == full_log[2].nll);
  REQUIRE(tail_log[1].nll == full_log[3].nll);
}

TEST_CASE("flow training recovers a generating model's held-out likelihood") {
  RngStream gen_rng(71);
  auto generator = make_nvp_hmm(2, 1, 2, 2, 4, gen_rng, 0.3);
  // Perturb every parameter, output layers included, so the generator is a
  // genuine warp rather than the identity the builder starts from.
  for (auto& row : generator.emission.flows)
    for (auto& stack : row) {
      auto p = stack.get_params();
      for (auto& v : p) v += 0.5 * gen_rng.normal();
      stack.set_params(p);
    }

  RngStream sample_rng(73);
  std::vector<Matrix> train_data, held_out;
  for (std::size_t i = 0; i < 40; ++i)
    train_data.push_back(sample_sequence(generator, 10 + sample_rng.uniform_index(10), sample_rng));
  for (std::size_t i = 0; i < 10; ++i)
    held_out.push_back(sample_sequence(generator, 10 + sample_rng.uniform_index(10), sample_rng));

  const double gen_nll = total_data_nll(generator, held_out);

  RngStream init_rng(79);
  auto model = make_nvp_hmm(2, 1, 2, 2, 4, init_rng, 0.01);
  const double start_nll = total_data_nll(model, held_out);

  TrainConfig cfg;
  cfg.outer_iters = 30;
  cfg.max_inner_iters = 5;
  cfg.seed = 83;
  train_outer(model, train_data, cfg);
  const double end_nll = total_data_nll(model, held_out);

  REQUIRE(std::abs(end_nll - gen_nll) / std::abs(gen_nll) < 0.05);
  REQUIRE(std::abs(end_nll - gen_nll) < std::abs(start_nll - gen_nll));
}

TEST_CASE("per-class training is independent of scheduling and shares nothing across classes") {
  RngStream data_rng(89);
  std::vector<std::vector<Matrix>> classes;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<Matrix> seqs;
    for (std::size_t i = 0; i < 6; ++i) {
      Matrix seq(6, 2);
      for (double& v : seq.data) v = data_rng.normal() + 0.8 * static_cast<double>(c);
      seqs.push_back(std::move(seq));
    }
    classes.push_back(std::move(seqs));
  }

  TrainConfig cfg;
  cfg.outer_iters = 2;
  cfg.max_inner_iters = 2;
  cfg.seed = 97;
  const auto factory = [](RngStream& rng, const std::vector<Matrix>&) {
    return make_nvp_hmm(2, 1, 2, 2, 4, rng, 0.05);
  };

  const auto serial = train_class_set<NvpHmm>(classes, cfg, factory, 1);
  const auto threaded = train_class_set<NvpHmm>(classes, cfg, factory, 4);
  REQUIRE(serial.size() == 3);
  for (std::size_t c = 0; c < 3; ++c)
    REQUIRE(model_fingerprint(serial[c]) == model_fingerprint(threaded[c]));

  // Identical class data yields identical models.
  std::vector<std::vector<Matrix>> twins{classes[0], classes[0]};
  const auto twin_models = train_class_set<NvpHmm>(twins, cfg, factory, 2);
  REQUIRE(model_fingerprint(twin_models[0]) == model_fingerprint(twin_models[1]));

  std::vector<std::vector<Matrix>> with_empty{classes[0], {}};
  REQUIRE_THROWS_WITH(train_class_set<NvpHmm>(with_empty, cfg, factory, 1),
                      Catch::Matchers::ContainsSubstring("class 1"));
}

TEST_CASE("glow training keeps the mixing matrices comfortably invertible") {
  RngStream rng(101);
  const auto data = moon_frames(200, rng);
  auto model = make_glow_hmm(1, 1, 2, 2, 4, rng, 0.01);
  {
    std::vector<std::vector<double>> frames;
    for (const auto& seq : data) frames.push_back(seq.row(0));
    for (auto& row : model.emission.flows)
      for (auto& st : row) glow_initialize(st, frames);
  }

  std::vector<PosteriorStats> stats;
  for (const auto& seq : data) stats.push_back(model_e_step(model, seq));

  TrainConfig cfg;
  cfg.learning_rate = 1e-4;
  cfg.batch_size = 32;
  cfg.max_inner_iters = 1;
  cfg.convergence_threshold = 1e-12;
  cfg.convergence_streak = 1000;
  AdamState adam;
  RngStream train_rng(13);
  double min_log_abs_det = 0.0;
  for (int chunk = 0; chunk < 200; ++chunk) {
    train_inner(model, data, stats, adam, cfg.learning_rate, cfg, train_rng);
    for (const auto& step : model.emission.flows[0][0].steps) {
      const auto lu = lu_factor(step.invconv.w);
      min_log_abs_det = std::min(min_log_abs_det, lu_log_abs_det(lu));
    }
  }
  INFO("minimum log|det W| over 200 iterations: " << min_log_abs_det);
  if (min_log_abs_det <= std::log(1e-6))
    WARN("mixing matrix drifted toward singularity: log|det W| = " << min_log_abs_det);
  REQUIRE(std::isfinite(min_log_abs_det));
}
