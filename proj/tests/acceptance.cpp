// Acceptance gate for the toolkit: twelve orthogonal checks covering oracle
// equivalences (enumeration, finite differences, quadrature), invariants
// (bijectivity, identity anchoring, EM monotonicity, metric identities),
// deterministic persistence, and desk-scale directional claims (flows beat
// the Gaussian baseline on warped data; accuracy degrades gracefully under
// additive noise).
//
// Each criterion prints exactly one [PASS]/[FAIL] line with its measured
// values, pinned tolerance, elapsed time, and budget; exceeding the budget
// fails the criterion. Run every criterion with no arguments, or a single
// one by number: ./acceptance 8

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "flowhmm/hmm.hpp"
#include "flowhmm/trainer.hpp"
#include "flowhmm/features.hpp"
#include "flowhmm/synth.hpp"
#include "flowhmm/classify.hpp"
#include "flowhmm/io.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace flowhmm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Forward pass and posteriors against exhaustive path enumeration.
// ---------------------------------------------------------------------------

constexpr double kTolEnum = 1e-9;

template <class Model>
void compare_with_enumeration(const Model& model, const Matrix& seq, std::size_t K,
                              double& worst_ll, double& worst_post) {
  const PosteriorStats st = model_e_step(model, seq);
  const oracle::EnumPosteriors want = oracle::enumerate_posteriors(
      model.chain.log_q, model.chain.log_A,
      [&](std::size_t t, std::size_t s, std::size_t k) {
        return model.emission.component_log_pdfs(s, seq.row(t))[k];
      },
      seq.rows, K);

  worst_ll = std::max(worst_ll, std::abs(st.log_likelihood - want.log_likelihood));
  const std::size_t S = model.states(), T = seq.rows;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      worst_post = std::max(worst_post, std::abs(std::exp(st.log_gamma(t, s)) - want.gamma(t, s)));
      for (std::size_t k = 0; k < K; ++k)
        worst_post = std::max(
            worst_post, std::abs(std::exp(st.comp(t, s, k)) -
                                 static_cast<double>(want.comp_gamma[(t * S + s) * K + k])));
    }
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j)
      worst_post =
          std::max(worst_post, std::abs(std::exp(st.log_xi_sum(i, j)) - want.xi_sum(i, j)));
}

MarkovChain random_chain(std::size_t S, RngStream& rng) {
  MarkovChain chain;
  chain.num_states = S;
  chain.log_q.resize(S);
  chain.log_A = Matrix(S, S);
  const auto norm_log = [&](double* p, std::size_t n) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform(0.1, 1.0);
      total += p[i];
    }
    for (std::size_t i = 0; i < n; ++i) p[i] = std::log(p[i] / total);
  };
  norm_log(chain.log_q.data(), S);
  for (std::size_t i = 0; i < S; ++i) norm_log(chain.log_A.data.data() + i * S, S);
  return chain;
}

Matrix random_log_weights(std::size_t S, std::size_t K, RngStream& rng) {
  Matrix w(S, K);
  for (std::size_t s = 0; s < S; ++s) {
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      w(s, k) = rng.uniform(0.2, 1.0);
      total += w(s, k);
    }
    for (std::size_t k = 0; k < K; ++k) w(s, k) = std::log(w(s, k) / total);
  }
  return w;
}

Outcome criterion_01() {
  RngStream rng(901);
  double worst_ll = 0.0, worst_post = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t S = 1 + rng.uniform_index(3);
    const std::size_t T = 1 + rng.uniform_index(5);
    const std::size_t K = 1 + rng.uniform_index(2);
    const std::size_t D = 2 + rng.uniform_index(3);
    Matrix seq(T, D);
    for (auto& v : seq.data) v = 1.5 * rng.normal();

    const int kind = i % 3;
    if (kind == 0) {
      GmmHmm model;
      model.chain = random_chain(S, rng);
      Matrix w(S, K);
      std::vector<Matrix> means, vars;
      for (std::size_t s = 0; s < S; ++s) {
        double total = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          w(s, k) = rng.uniform(0.2, 1.0);
          total += w(s, k);
        }
        for (std::size_t k = 0; k < K; ++k) w(s, k) /= total;
        Matrix mu(K, D), var(K, D);
        for (auto& v : mu.data) v = 1.5 * rng.normal();
        for (auto& v : var.data) v = rng.uniform(0.3, 2.0);
        means.push_back(std::move(mu));
        vars.push_back(std::move(var));
      }
      model.emission = make_gmm(w, std::move(means), vars);
      compare_with_enumeration(model, seq, K, worst_ll, worst_post);
    } else if (kind == 1) {
      NvpHmm model = make_nvp_hmm(S, K, D, 2, 6, rng, 0.3);
      model.chain = random_chain(S, rng);
      model.emission.log_weights = random_log_weights(S, K, rng);
      compare_with_enumeration(model, seq, K, worst_ll, worst_post);
    } else {
      GlowHmm model = make_glow_hmm(S, K, D, 2, 6, rng, 0.3);
      model.chain = random_chain(S, rng);
      model.emission.log_weights = random_log_weights(S, K, rng);
      for (auto& per_state : model.emission.flows)
        for (auto& stack : per_state) {
          std::vector<std::vector<double>> frames;
          for (int f = 0; f < 24; ++f) frames.push_back(rng.normal_vector(D));
          glow_initialize(stack, frames);
        }
      compare_with_enumeration(model, seq, K, worst_ll, worst_post);
    }
  }
  return {worst_ll < kTolEnum && worst_post < kTolEnum,
          "max ll err " + sci(worst_ll) + ", max posterior err " + sci(worst_post) + " (tol " +
              sci(kTolEnum) + ")"};
}

// ---------------------------------------------------------------------------
// 2. Bijectivity: inverse(forward(x)) recovers x.
// ---------------------------------------------------------------------------

constexpr double kTolBijNvp = 1e-9;
constexpr double kTolBijGlow = 1e-8;

Outcome criterion_02() {
  RngStream rng(902);
  double worst_nvp = 0.0, worst_glow = 0.0;
  for (std::size_t D : {std::size_t(2), std::size_t(8), std::size_t(39)}) {
    NvpStack nvp = make_nvp_stack(D, 4, 2 * D, rng);
    {
      auto p = nvp.get_params();
      for (auto& v : p) v += rng.uniform(-0.5, 0.5);
      nvp.set_params(p);
    }
    GlowStack glow = make_glow_stack(D, 3, 2 * D, rng);
    {
      std::vector<std::vector<double>> frames;
      for (int f = 0; f < 64; ++f) frames.push_back(rng.normal_vector(D));
      glow_initialize(glow, frames);
      auto p = glow.get_params();
      for (auto& v : p) v += rng.uniform(-0.3, 0.3);
      glow.set_params(p);
    }
    for (int i = 0; i < 1000; ++i) {
      const std::vector<double> x = rng.normal_vector(D);
      const std::vector<double> xn = nvp.inverse(nvp.forward(x).first);
      const std::vector<double> xg = glow.inverse(glow.forward(x).first);
      for (std::size_t d = 0; d < D; ++d) {
        worst_nvp = std::max(worst_nvp, std::abs(xn[d] - x[d]));
        worst_glow = std::max(worst_glow, std::abs(xg[d] - x[d]));
      }
    }
  }
  return {worst_nvp < kTolBijNvp && worst_glow < kTolBijGlow,
          "nvp " + sci(worst_nvp) + " (tol " + sci(kTolBijNvp) + "), glow " + sci(worst_glow) +
              " (tol " + sci(kTolBijGlow) + ")"};
}

// ---------------------------------------------------------------------------
// 3. Analytic log-determinant against a finite-difference Jacobian.
// ---------------------------------------------------------------------------

constexpr double kTolJac = 1e-4;

Outcome criterion_03() {
  RngStream rng(903);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t D = 2 + rng.uniform_index(7);
    NvpStack nvp = make_nvp_stack(D, 4, 2 * D, rng);
    auto p = nvp.get_params();
    for (auto& v : p) v += rng.uniform(-0.5, 0.5);
    nvp.set_params(p);
    const std::vector<double> x = rng.normal_vector(D);
    const double analytic = nvp.forward(x).second;
    const Matrix jac =
        oracle::fd_jacobian([&](const std::vector<double>& v) { return nvp.forward(v).first; }, x);
    const double ref = oracle::ref_log_abs_det(jac);
    worst = std::max(worst, std::abs(analytic - ref) / std::max(1.0, std::abs(ref)));
  }
  for (int i = 0; i < 20; ++i) {
    const std::size_t D = 2 + rng.uniform_index(7);
    GlowStack glow = make_glow_stack(D, 3, 2 * D, rng);
    std::vector<std::vector<double>> frames;
    for (int f = 0; f < 64; ++f) frames.push_back(rng.normal_vector(D));
    glow_initialize(glow, frames);
    auto p = glow.get_params();
    for (auto& v : p) v += rng.uniform(-0.3, 0.3);
    glow.set_params(p);
    const std::vector<double> x = rng.normal_vector(D);
    const double analytic = glow.forward(x).second;
    const Matrix jac =
        oracle::fd_jacobian([&](const std::vector<double>& v) { return glow.forward(v).first; }, x);
    const double ref = oracle::ref_log_abs_det(jac);
    worst = std::max(worst, std::abs(analytic - ref) / std::max(1.0, std::abs(ref)));
  }
  return {worst < kTolJac, "max rel err " + sci(worst) + " (tol " + sci(kTolJac) + ")"};
}

// ---------------------------------------------------------------------------
// 4. Hand-derived gradients against central differences.
// ---------------------------------------------------------------------------

constexpr double kTolGrad = 1e-5;

Outcome criterion_04() {
  RngStream rng(904);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    NvpStack st = make_nvp_stack(4, 4, 8, rng);
    auto p = st.get_params();
    for (auto& v : p) v += rng.uniform(-0.5, 0.5);
    st.set_params(p);
    const std::vector<double> x = rng.normal_vector(4);
    const double w = i % 2 == 0 ? 1.0 : 0.37;
    std::vector<double> grad(st.param_count(), 0.0);
    st.backward(x, w, grad);
    NvpStack probe = st;
    const auto loss = [&](const std::vector<double>& q) {
      probe.set_params(q);
      return w * probe.log_likelihood(x);
    };
    worst = std::max(worst, grad_check(loss, st.get_params(), grad, 1e-5));
  }
  for (int i = 0; i < 10; ++i) {
    GlowStack st = make_glow_stack(4, 2, 8, rng);
    std::vector<std::vector<double>> frames;
    for (int f = 0; f < 64; ++f) frames.push_back(rng.normal_vector(4));
    glow_initialize(st, frames);
    auto p = st.get_params();
    for (auto& v : p) v += rng.uniform(-0.3, 0.3);
    st.set_params(p);
    const std::vector<double> x = rng.normal_vector(4);
    const double w = i % 2 == 0 ? 1.0 : -0.6;
    std::vector<double> grad(st.param_count(), 0.0);
    st.backward(x, w, grad);
    GlowStack probe = st;
    const auto loss = [&](const std::vector<double>& q) {
      probe.set_params(q);
      return w * probe.log_likelihood(x);
    };
    worst = std::max(worst, grad_check(loss, st.get_params(), grad, 1e-5));
  }
  return {worst < kTolGrad, "max rel err " + sci(worst) + " (tol " + sci(kTolGrad) + ")"};
}

// ---------------------------------------------------------------------------
// 5. Trained 2-D flow densities integrate to one over [-6, 6]^2.
// ---------------------------------------------------------------------------

constexpr double kTolMass = 1e-2;

std::vector<Matrix> two_blob_sequences(std::size_t n, std::size_t T, RngStream& rng) {
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix seq(T, 2);
    for (std::size_t t = 0; t < T; ++t) {
      const bool left = rng.uniform(0.0, 1.0) < 0.5;
      const double cx = left ? -1.2 : 1.2, cy = left ? -0.8 : 0.8;
      const double n1 = rng.normal(), n2 = rng.normal();
      seq(t, 0) = cx + 0.6 * n1;
      seq(t, 1) = cy + 0.3 * n1 + 0.5 * n2;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

template <class Emission>
double grid_mass(const HmmModel<Emission>& model) {
  const int n = 500;
  const double lo = -6.0, hi = 6.0, h = (hi - lo) / n;
  long double mass = 0.0L;
  std::vector<double> x(2);
  for (int i = 0; i < n; ++i) {
    x[0] = lo + (i + 0.5) * h;
    for (int j = 0; j < n; ++j) {
      x[1] = lo + (j + 0.5) * h;
      mass += std::exp(static_cast<long double>(model.emission.log_pdf(0, x)));
    }
  }
  return static_cast<double>(mass) * h * h;
}

Outcome criterion_05() {
  RngStream rng(905);
  const std::vector<Matrix> data = two_blob_sequences(120, 10, rng);
  TrainConfig tc;
  tc.outer_iters = 8;
  tc.max_inner_iters = 4;
  tc.learning_rate = 4e-3;
  tc.batch_size = 8;
  tc.seed = 3;

  NvpHmm nvp = make_nvp_hmm(1, 1, 2, 4, 8, rng);
  train_outer(nvp, data, tc);
  const double mass_nvp = grid_mass(nvp);

  GlowHmm glow = make_glow_hmm(1, 1, 2, 2, 8, rng);
  train_outer(glow, data, tc);
  const double mass_glow = grid_mass(glow);

  return {std::abs(mass_nvp - 1.0) < kTolMass && std::abs(mass_glow - 1.0) < kTolMass,
          "nvp mass " + sci(mass_nvp) + ", glow mass " + sci(mass_glow) + " (tol 1 +/- " +
              sci(kTolMass) + ")"};
}

// ---------------------------------------------------------------------------
// 6. EM monotonicity: full GMM updates, and chain/weight-only flow updates.
// ---------------------------------------------------------------------------

constexpr double kTolMono = 1e-8;

Outcome criterion_06() {
  RngStream rng(906);
  DeskConfig cfg;
  const DeskBenchmark bench = make_desk_benchmark(cfg, rng);
  std::vector<std::vector<Matrix>> class_data(cfg.num_classes);
  for (std::size_t i = 0; i < bench.train.sequences.size(); ++i)
    class_data[bench.train.labels[i]].push_back(bench.train.sequences[i]);

  TrainConfig tc;
  tc.outer_iters = 10;
  tc.seed = 3;
  std::vector<TrainLog> logs;
  train_class_set<GmmHmm>(
      class_data, tc,
      [&](RngStream& r, const std::vector<Matrix>& d) { return make_gmm_hmm(3, 2, d, r); }, 1,
      &logs);

  double worst_rise = 0.0;
  for (const TrainLog& log : logs)
    for (std::size_t i = 1; i < log.size(); ++i)
      worst_rise = std::max(worst_rise, log[i].nll - log[i - 1].nll);

  TrainConfig frozen = tc;
  frozen.max_inner_iters = 0;
  NvpHmm nmm = make_nvp_hmm(3, 2, cfg.dim, 2, 8, rng, 0.05);
  const TrainLog nmm_log = train_outer(nmm, class_data[0], frozen);
  double worst_rise_nmm = 0.0;
  for (std::size_t i = 1; i < nmm_log.size(); ++i)
    worst_rise_nmm = std::max(worst_rise_nmm, nmm_log[i].nll - nmm_log[i - 1].nll);

  return {worst_rise <= kTolMono && worst_rise_nmm <= kTolMono,
          "gmm worst nll rise " + sci(worst_rise) + ", frozen-flow worst rise " +
              sci(worst_rise_nmm) + " (tol " + sci(kTolMono) + ")"};
}

// ---------------------------------------------------------------------------
// 7. Identity-initialized flows match the unit Gaussian exactly.
// ---------------------------------------------------------------------------

constexpr double kTolIdentity = 1e-10;

Outcome criterion_07() {
  RngStream rng(907);
  const std::size_t S = 3, D = 4;
  const NvpHmm nvp = make_nvp_hmm(S, 3, D, 4, 2 * D, rng);
  GlowHmm glow;
  glow.chain = nvp.chain;
  glow.emission.num_states = S;
  glow.emission.num_components = 2;
  glow.emission.dim = D;
  glow.emission.log_weights = Matrix(S, 2, std::log(0.5));
  glow.emission.flows.assign(S, std::vector<GlowStack>(2, make_identity_glow(D, 3, 2 * D)));
  GmmHmm gmm;
  gmm.chain = nvp.chain;
  Matrix w(S, 1, 1.0);
  std::vector<Matrix> mu(S, Matrix(1, D, 0.0)), var(S, Matrix(1, D, 1.0));
  gmm.emission = make_gmm(w, std::move(mu), var);

  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Matrix seq(3 + rng.uniform_index(8), D);
    for (auto& v : seq.data) v = rng.normal();
    const double base = sequence_log_likelihood(gmm, seq);
    worst = std::max(worst, std::abs(sequence_log_likelihood(nvp, seq) - base));
    worst = std::max(worst, std::abs(sequence_log_likelihood(glow, seq) - base));
  }
  return {worst < kTolIdentity,
          "max abs ll err " + sci(worst) + " over 100 sequences (tol " + sci(kTolIdentity) + ")"};
}

// ---------------------------------------------------------------------------
// 8. Flows beat the Gaussian baseline on a warped corpus by >= 3 points.
// ---------------------------------------------------------------------------

constexpr double kMinAccGap = 3.0;

double bank_accuracy(const ClassifierBank& bank, const Corpus& corpus) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i)
    if (classify(bank, corpus.sequences[i]).label == corpus.labels[i]) ++correct;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(corpus.sequences.size());
}

Outcome criterion_08() {
  RngStream rng(101);
  DeskConfig cfg;
  cfg.class_spread = 0.3;
  cfg.state_spread = 1.0;
  const DeskBenchmark bench = make_desk_benchmark(cfg, rng);

  Corpus train = bench.train, test = bench.test;
  for (int pass = 0; pass < 2; ++pass) {
    const CubicWarp warp = make_cubic_warp(cfg.dim, 0.8, rng);
    train = make_warped_corpus(train, warp);
    test = make_warped_corpus(test, warp);
  }
  const Standardizer st = fit_standardizer(train);
  train = apply_standardizer(st, train);
  test = apply_standardizer(st, test);

  std::vector<std::vector<Matrix>> class_data(cfg.num_classes);
  for (std::size_t i = 0; i < train.sequences.size(); ++i)
    class_data[train.labels[i]].push_back(train.sequences[i]);

  TrainConfig tc;
  tc.outer_iters = 10;
  tc.max_inner_iters = 4;
  tc.learning_rate = 4e-3;
  tc.batch_size = 8;
  tc.seed = 3;

  auto gmm_models = train_class_set<GmmHmm>(
      class_data, tc,
      [&](RngStream& r, const std::vector<Matrix>& d) { return make_gmm_hmm(3, 2, d, r); });
  auto nvp_models = train_class_set<NvpHmm>(
      class_data, tc, [&](RngStream& r, const std::vector<Matrix>&) {
        return make_nvp_hmm(3, 2, cfg.dim, 4, 12, r);
      });

  ClassifierBank gmm_bank, nvp_bank;
  gmm_bank.class_labels = nvp_bank.class_labels = train.label_names;
  for (auto& m : gmm_models) gmm_bank.models.push_back(std::move(m));
  for (auto& m : nvp_models) nvp_bank.models.push_back(std::move(m));

  const double acc_gmm = bank_accuracy(gmm_bank, test);
  const double acc_nvp = bank_accuracy(nvp_bank, test);
  return {acc_nvp >= acc_gmm + kMinAccGap, "nvp " + pct(acc_nvp) + "% vs gmm " + pct(acc_gmm) +
                                               "% (needs gap >= " + pct(kMinAccGap) + " points)"};
}

// ---------------------------------------------------------------------------
// 9. Majority vote: exhaustive truth table plus uniform tie-breaking.
// ---------------------------------------------------------------------------

constexpr double kTolVoteUniform = 0.02;

Outcome criterion_09() {
  RngStream rng(909);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 3; ++c) {
        const bool disagreement = a != b && a != c && b != c;
        if (disagreement) continue;
        const std::size_t expected = (a == b || a == c) ? a : b;
        if (vote({a, b, c}, rng) != expected)
          return {false, "agreement case (" + std::to_string(a) + "," + std::to_string(b) + "," +
                             std::to_string(c) + ") misvoted"};
      }

  const int n = 10000;
  std::size_t counts[3] = {0, 0, 0};
  RngStream tie_rng(4242);
  for (int i = 0; i < n; ++i) ++counts[vote({0, 1, 2}, tie_rng)];
  double worst_dev = 0.0;
  for (std::size_t c = 0; c < 3; ++c)
    worst_dev = std::max(
        worst_dev, std::abs(static_cast<double>(counts[c]) / n - 1.0 / 3.0));
  return {worst_dev < kTolVoteUniform,
          "truth table exact; tie split " + std::to_string(counts[0]) + "/" +
              std::to_string(counts[1]) + "/" + std::to_string(counts[2]) + ", max dev " +
              sci(worst_dev) + " (tol " + sci(kTolVoteUniform) + ")"};
}

// ---------------------------------------------------------------------------
// 10. Accuracy degrades monotonically with noise, flows no worse than +2.
// ---------------------------------------------------------------------------

constexpr double kMaxExtraDrop = 2.0;

Outcome criterion_10() {
  RngStream rng(2024);
  DeskAudioConfig cfg;
  cfg.test_per_class = 60;
  const DeskAudio audio = make_desk_audio(cfg, rng);

  const auto features_of = [](const Waveform& w) {
    MfccConfig mc;
    return cmvn(extract_mfcc(w, mc)).features;
  };

  std::vector<std::vector<Matrix>> class_data(cfg.num_classes);
  for (std::size_t i = 0; i < audio.train.waves.size(); ++i)
    class_data[audio.train.labels[i]].push_back(features_of(audio.train.waves[i]));
  const std::size_t D = class_data[0][0].cols;

  TrainConfig tc;
  tc.outer_iters = 10;
  tc.max_inner_iters = 4;
  tc.learning_rate = 4e-3;
  tc.batch_size = 8;
  tc.seed = 3;

  auto gmm_models = train_class_set<GmmHmm>(
      class_data, tc,
      [&](RngStream& r, const std::vector<Matrix>& d) { return make_gmm_hmm(3, 2, d, r); });
  auto nvp_models = train_class_set<NvpHmm>(
      class_data, tc,
      [&](RngStream& r, const std::vector<Matrix>&) { return make_nvp_hmm(3, 2, D, 2, 8, r); });
  auto glow_models = train_class_set<GlowHmm>(
      class_data, tc,
      [&](RngStream& r, const std::vector<Matrix>&) { return make_glow_hmm(3, 2, D, 2, 16, r); });

  std::vector<ClassifierBank> banks(3);
  for (auto& b : banks) b.class_labels = audio.train.label_names;
  for (auto& m : gmm_models) banks[0].models.push_back(std::move(m));
  for (auto& m : nvp_models) banks[1].models.push_back(std::move(m));
  for (auto& m : glow_models) banks[2].models.push_back(std::move(m));

  const auto accuracy = [&](const ClassifierBank& bank, const std::vector<Matrix>& seqs) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < seqs.size(); ++i)
      if (classify(bank, seqs[i]).label == audio.test.labels[i]) ++correct;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(seqs.size());
  };

  // accs[m][0] is the clean accuracy, then SNR 25/20/15/10 in order.
  const double snrs[] = {25.0, 20.0, 15.0, 10.0};
  std::vector<std::vector<double>> accs(3);
  std::vector<Matrix> clean;
  for (const auto& w : audio.test.waves) clean.push_back(features_of(w));
  for (std::size_t m = 0; m < 3; ++m) accs[m].push_back(accuracy(banks[m], clean));
  for (double snr : snrs) {
    const RngStream noise_root(777);
    std::vector<Matrix> noisy;
    for (std::size_t i = 0; i < audio.test.waves.size(); ++i) {
      RngStream nr = noise_root.split(i);
      const Waveform& w = audio.test.waves[i];
      const Waveform noise = gen_noise(NoiseKind::white, w.samples.size(), w.sample_rate, nr);
      noisy.push_back(features_of(mix_noise(w, noise, snr, nr).wave));
    }
    for (std::size_t m = 0; m < 3; ++m) accs[m].push_back(accuracy(banks[m], noisy));
  }

  bool monotone = true;
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t i = 1; i < accs[m].size(); ++i)
      if (accs[m][i] > accs[m][i - 1] + 1e-12) monotone = false;

  const double drop_gmm = accs[0].front() - accs[0].back();
  const double drop_nvp = accs[1].front() - accs[1].back();
  const double drop_glow = accs[2].front() - accs[2].back();
  const bool graceful =
      drop_nvp <= drop_gmm + kMaxExtraDrop && drop_glow <= drop_gmm + kMaxExtraDrop;

  std::string detail = "clean->10dB drop: gmm " + pct(drop_gmm) + ", nvp " + pct(drop_nvp) +
                       ", glow " + pct(drop_glow) + " points (flow bound gmm+" +
                       pct(kMaxExtraDrop) + "); curves " +
                       (monotone ? "non-increasing" : "NOT monotone");
  if (!monotone) {
    detail += " [";
    for (std::size_t m = 0; m < 3; ++m) {
      for (double a : accs[m]) detail += " " + pct(a);
      detail += m + 1 < 3 ? ";" : " ]";
    }
  }
  return {monotone && graceful, detail};
}

// ---------------------------------------------------------------------------
// 11. Determinism: retrain, parallel train, checkpoint resume, file formats.
// ---------------------------------------------------------------------------

std::vector<double> flat_params(const AnyHmm& m) {
  return std::visit(
      [](const auto& h) {
        std::vector<double> out(h.chain.log_q);
        out.insert(out.end(), h.chain.log_A.data.begin(), h.chain.log_A.data.end());
        out.insert(out.end(), h.emission.log_weights.data.begin(),
                   h.emission.log_weights.data.end());
        using E = std::decay_t<decltype(h.emission)>;
        if constexpr (std::is_same_v<E, GmmEmission>) {
          for (std::size_t s = 0; s < h.states(); ++s) {
            out.insert(out.end(), h.emission.means[s].data.begin(),
                       h.emission.means[s].data.end());
            out.insert(out.end(), h.emission.log_vars[s].data.begin(),
                       h.emission.log_vars[s].data.end());
          }
        } else {
          for (const auto& per_state : h.emission.flows)
            for (const auto& stack : per_state) {
              const auto p = stack.get_params();
              out.insert(out.end(), p.begin(), p.end());
            }
        }
        return out;
      },
      m);
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

Outcome criterion_11() {
  RngStream data_rng(911);
  std::vector<std::vector<Matrix>> class_data(2);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 8; ++i) {
      Matrix seq(10 + (i % 3), 2);
      for (auto& v : seq.data) v = data_rng.normal() + (c == 0 ? 0.7 : -0.7);
      class_data[c].push_back(std::move(seq));
    }

  TrainConfig tc;
  tc.outer_iters = 4;
  tc.max_inner_iters = 2;
  tc.batch_size = 4;
  tc.seed = 21;

  // Retraining from the same seed reproduces every parameter bit.
  const auto nvp_factory = [](RngStream& r, const std::vector<Matrix>&) {
    return make_nvp_hmm(2, 1, 2, 2, 4, r, 0.1);
  };
  const auto gmm_factory = [](RngStream& r, const std::vector<Matrix>& d) {
    return make_gmm_hmm(2, 2, d, r);
  };
  const auto run_nvp = [&](std::size_t jobs) {
    auto models = train_class_set<NvpHmm>(class_data, tc, nvp_factory, jobs);
    std::vector<std::vector<double>> out;
    for (auto& m : models) out.push_back(flat_params(AnyHmm(std::move(m))));
    return out;
  };
  const auto a = run_nvp(1), b = run_nvp(1), par = run_nvp(3);
  for (std::size_t c = 0; c < 2; ++c) {
    if (!bitwise_equal(a[c], b[c])) return {false, "fixed-seed retrain differs"};
    if (!bitwise_equal(a[c], par[c])) return {false, "parallel training differs from serial"};
  }
  {
    auto g1 = train_class_set<GmmHmm>(class_data, tc, gmm_factory);
    auto g2 = train_class_set<GmmHmm>(class_data, tc, gmm_factory);
    for (std::size_t c = 0; c < 2; ++c)
      if (!bitwise_equal(flat_params(AnyHmm(g1[c])), flat_params(AnyHmm(g2[c]))))
        return {false, "gmm fixed-seed retrain differs"};
  }

  // Resuming from a mid-run checkpoint lands on the uninterrupted result.
  const fs::path root = fs::temp_directory_path() / "flowhmm_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto fresh_model = [] {
    RngStream r(91);
    return make_nvp_hmm(2, 1, 2, 2, 4, r, 0.1);
  };
  NvpHmm straight = fresh_model();
  const TrainLog full_log = train_outer(straight, class_data[0], tc);

  NvpHmm interrupted = fresh_model();
  TrainConfig snap_cfg = tc;
  snap_cfg.outer_iters = 2;
  TrainerState state = fresh_trainer_state(tc);
  const TrainLog head_log = train_outer(interrupted, class_data[0], snap_cfg, &state);
  save_checkpoint(root / "ckpt", TrainCheckpoint{AnyHmm(interrupted), state, tc});
  TrainCheckpoint cp = load_checkpoint(root / "ckpt");
  const TrainLog tail_log = train_outer(std::get<NvpHmm>(cp.model), class_data[0], cp.config,
                                        &cp.state);
  if (!bitwise_equal(flat_params(AnyHmm(straight)), flat_params(AnyHmm(std::get<NvpHmm>(cp.model)))))
    return {false, "checkpoint resume differs from uninterrupted run"};
  if (head_log.size() + tail_log.size() != full_log.size())
    return {false, "checkpoint resume produced a different iteration count"};
  for (std::size_t i = 0; i < tail_log.size(); ++i)
    if (tail_log[i].nll != full_log[head_log.size() + i].nll)
      return {false, "resumed loss trajectory differs"};

  // Container round trips: a reload then re-save is byte-identical.
  RngStream rng(912);
  ModelContainer mc;
  mc.bank.class_labels = {"one", "two"};
  mc.train_config = tc;
  mc.seed = tc.seed;
  {
    auto models = train_class_set<NvpHmm>(class_data, tc, nvp_factory);
    for (auto& m : models) mc.bank.models.push_back(std::move(m));
  }
  save_model(root / "bank", mc);
  const ModelContainer back = load_model(root / "bank");
  save_model(root / "bank2", back);
  const auto bytes_of = [](const fs::path& p) { return flowhmm::detail::read_file_bytes(p); };
  if (bytes_of(root / "bank" / kModelParamsFile) != bytes_of(root / "bank2" / kModelParamsFile) ||
      bytes_of(root / "bank" / kModelMetaFile) != bytes_of(root / "bank2" / kModelMetaFile))
    return {false, "model container round trip is not byte-identical"};

  // Feature archives preserve float32 payloads; WAV files preserve samples.
  std::vector<FeatureRecord> records;
  Matrix feats(7, 3);
  for (std::size_t i = 0; i < feats.data.size(); ++i)
    feats.data[i] = static_cast<double>(static_cast<float>(std::sin(0.37 * (double)i) * 13.5));
  records.push_back({"utt0", feats});
  write_features(root / "f.arc", records);
  const auto feats_back = read_features(root / "f.arc");
  if (feats_back.size() != 1 || feats_back[0].features.data != feats.data)
    return {false, "feature archive round trip lost precision"};

  Waveform w;
  w.sample_rate = 16000.0;
  for (int i = 0; i < 1000; ++i)
    w.samples.push_back(static_cast<double>(static_cast<float>(std::sin(0.01 * i))));
  write_wav(root / "w.wav", w);
  const Waveform wav_back = read_wav(root / "w.wav");
  if (wav_back.samples != w.samples || wav_back.sample_rate != w.sample_rate)
    return {false, "wav round trip lost samples"};

  Manifest mf;
  mf.labels = {"one", "two"};
  mf.entries = {{"utt0", "f.arc", "one"}, {"utt1", "f.arc", "two"}};
  write_manifest(root / "m.tsv", mf);
  const Manifest mf_back = read_manifest(root / "m.tsv");
  if (mf_back.labels != mf.labels || mf_back.entries.size() != mf.entries.size())
    return {false, "manifest round trip changed content"};
  for (std::size_t i = 0; i < mf.entries.size(); ++i)
    if (mf_back.entries[i].id != mf.entries[i].id || mf_back.entries[i].label != mf.entries[i].label)
      return {false, "manifest round trip changed content"};

  fs::remove_all(root);
  return {true, "retrain, parallel, resume all bitwise; container/archive/wav/manifest lossless"};
}

// ---------------------------------------------------------------------------
// 12. Metric identities.
// ---------------------------------------------------------------------------

constexpr double kTolMetric = 1e-12;

Outcome criterion_12() {
  RngStream rng(913);
  double worst = 0.0;
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t C = 2 + rng.uniform_index(5);
    std::vector<std::size_t> y_true, y_pred;
    for (int i = 0; i < 200; ++i) {
      y_true.push_back(rng.uniform_index(C));
      y_pred.push_back(rng.uniform_index(C));
    }
    const EvalReport rep_out = evaluate(y_pred, y_true, C);
    worst = std::max(worst, std::abs(rep_out.weighted_recall - rep_out.accuracy));
  }
  if (worst >= kTolMetric)
    return {false, "weighted recall deviates from accuracy by " + sci(worst)};

  // Hand case: truth {0,0,1,1}, predictions {0,1,1,1}.
  {
    const EvalReport r = evaluate({0, 1, 1, 1}, {0, 0, 1, 1}, 2);
    const double p0 = 1.0, r0 = 0.5, f0 = 2.0 * p0 * r0 / (p0 + r0);
    const double p1 = 2.0 / 3.0, r1 = 1.0, f1 = 2.0 * p1 * r1 / (p1 + r1);
    if (r.accuracy != 0.75 || r.precision[0] != p0 || r.recall[0] != r0 || r.f1[0] != f0 ||
        r.precision[1] != p1 || r.recall[1] != r1 || r.f1[1] != f1 ||
        r.confusion(0, 0) != 1.0 || r.confusion(0, 1) != 1.0 || r.confusion(1, 0) != 0.0 ||
        r.confusion(1, 1) != 2.0 || r.support[0] != 2 || r.support[1] != 2)
      return {false, "binary hand case mismatch"};
  }
  // Hand case: class 2 never occurs in truth and is predicted once.
  {
    const EvalReport r = evaluate({0, 1, 2, 1}, {0, 1, 0, 1}, 3);
    if (r.accuracy != 0.75 || r.precision[2] != 0.0 || r.recall[2] != 0.0 || r.f1[2] != 0.0 ||
        r.support[2] != 0 || r.recall[0] != 0.5 || r.precision[0] != 1.0 ||
        r.weighted_recall != r.accuracy)
      return {false, "absent-class hand case mismatch"};
  }
  // Hand case: perfect prediction.
  {
    const EvalReport r = evaluate({0, 1, 2}, {0, 1, 2}, 3);
    if (r.accuracy != 1.0 || r.weighted_f1 != 1.0 || r.weighted_precision != 1.0)
      return {false, "perfect-prediction hand case mismatch"};
  }
  return {true,
          "weighted recall == accuracy, max dev " + sci(worst) + " (tol " + sci(kTolMetric) +
              "); hand-computed cases exact"};
}

// ---------------------------------------------------------------------------

struct CriterionSpec {
  const char* name;
  Outcome (*run)();
  double budget_seconds;
};

const CriterionSpec kCriteria[] = {
    {"forward pass and posteriors match exhaustive enumeration", criterion_01, 10.0},
    {"flow round trips are bijective at D in {2, 8, 39}", criterion_02, 10.0},
    {"analytic log-det matches the finite-difference Jacobian", criterion_03, 30.0},
    {"hand-derived gradients match central differences", criterion_04, 60.0},
    {"trained 2-D flow densities integrate to one", criterion_05, 60.0},
    {"EM updates never decrease the likelihood", criterion_06, 120.0},
    {"identity flows reproduce the unit-Gaussian baseline", criterion_07, 10.0},
    {"flows beat the Gaussian baseline on warped data", criterion_08, 900.0},
    {"majority vote: truth table and uniform tie-breaking", criterion_09, 5.0},
    {"noise robustness: monotone degradation, graceful flows", criterion_10, 1200.0},
    {"determinism: retrain, resume, and format round trips", criterion_11, 300.0},
    {"metric identities hold exactly", criterion_12, 5.0},
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc > 1) {
    only = std::atoi(argv[1]);
    if (only < 1 || only > 12) {
      std::fprintf(stderr, "usage: %s [criterion 1-12]\n", argv[0]);
      return 2;
    }
  }

  int failures = 0;
  for (int i = 0; i < 12; ++i) {
    if (only != 0 && only != i + 1) continue;
    const CriterionSpec& spec = kCriteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = spec.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (elapsed > spec.budget_seconds) {
      out.pass = false;
      out.detail += " [over budget]";
    }
    std::printf("[%s] %2d %s: %s [%.1fs / budget %.0fs]\n", out.pass ? "PASS" : "FAIL", i + 1,
                spec.name, out.detail.c_str(), elapsed, spec.budget_seconds);
    std::fflush(stdout);
    if (!out.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
