#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowhmm/matrix.hpp"
#include "flowhmm/numeric.hpp"
#include "flowhmm/params.hpp"
#include "flowhmm/rng.hpp"

namespace flowhmm {

// ---------------------------------------------------------------------------
// Glow: each flow-step is actnorm, an invertible 1x1 convolution, and an
// affine coupling, applied in that order in the normalizing direction.
// A D-dim frame is treated as D channels at a single spatial position, so
// the convolution is one DxD matrix multiply per frame.
// ---------------------------------------------------------------------------

inline constexpr double kInvConvDetFloor = 1e-12;
inline constexpr double kActivationNormFloor = 1e-3;

/// Per-channel affine standardization. sigma* holds the negative log of the
/// batch std at init time, so forward multiplication by exp(sigma*)
/// whitens the activations.
struct ActNorm {
  std::vector<double> bias;       // mu, D
  std::vector<double> log_scale;  // sigma*, D
  bool initialized = false;
};

/// Data-dependent init from one batch: exactly once per layer.
inline void actnorm_init(ActNorm& layer, const std::vector<std::vector<double>>& batch) {
  if (layer.initialized) throw std::runtime_error("actnorm_init: layer already initialized");
  if (batch.empty()) throw std::invalid_argument("actnorm_init: empty batch");
  const std::size_t D = layer.bias.size();
  const double n = static_cast<double>(batch.size());
  for (std::size_t d = 0; d < D; ++d) {
    double mean = 0.0, sq = 0.0;
    for (const auto& x : batch) {
      mean += x[d];
      sq += x[d] * x[d];
    }
    mean /= n;
    const double var = std::max(sq / n - mean * mean, 0.0);
    layer.bias[d] = mean;
    layer.log_scale[d] = -std::log(std::max(std::sqrt(var), 1e-6));
  }
  layer.initialized = true;
}

/// Invertible 1x1 convolution over channels: one weight matrix.
struct InvConv {
  Matrix w;  // D x D
};

/// Affine coupling. The first ceil(D/2) dims are transformed (x_a) from a
/// net over the remainder (x_b). All linear maps are weight-normalized:
/// effective row i is g_i * v_i / ||v_i||. Hidden activations pass through
/// tanh and are then divided by their Euclidean norm.
struct WnLinear {
  Matrix v;               // Out x In, direction
  std::vector<double> g;  // Out, magnitude
  std::vector<double> b;  // Out

  std::size_t in_dim() const { return v.cols; }
  std::size_t out_dim() const { return v.rows; }
  std::size_t param_count() const { return v.data.size() + g.size() + b.size(); }

  double row_norm(std::size_t i) const {
    double acc = 0.0;
    for (std::size_t j = 0; j < v.cols; ++j) acc += v(i, j) * v(i, j);
    return std::sqrt(acc);
  }

  std::vector<double> eval(const std::vector<double>& in) const {
    std::vector<double> out(v.rows);
    if (v.cols == 0) return b;  // D=1 stacks have an empty conditioning half
    for (std::size_t i = 0; i < v.rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < v.cols; ++j) acc += v(i, j) * in[j];
      out[i] = g[i] / row_norm(i) * acc + b[i];
    }
    return out;
  }
};

struct GlowCoupling {
  std::size_t split = 0;  // width of x_a = ceil(D/2)
  WnLinear l1;            // x_b -> hidden
  WnLinear l2;            // normalized hidden -> (log sigma, mu)
};

struct GlowStep {
  ActNorm actnorm;
  InvConv invconv;
  GlowCoupling coupling;
};

class GlowStack {
 public:
  std::size_t dim = 0;
  std::vector<GlowStep> steps;

  bool initialized() const {
    for (const auto& st : steps)
      if (!st.actnorm.initialized) return false;
    return true;
  }

  /// Normalizing map with total log|det|: per step sum(sigma*) +
  /// log|det W| + sum(log sigma).
  std::pair<std::vector<double>, double> forward(const std::vector<double>& x) const {
    check_dim(x.size());
    require_initialized();
    std::vector<double> cur = x;
    double log_det = 0.0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& st = steps[i];
      for (std::size_t d = 0; d < dim; ++d) {
        cur[d] = (cur[d] - st.actnorm.bias[d]) * std::exp(st.actnorm.log_scale[d]);
        log_det += st.actnorm.log_scale[d];
      }
      const auto lu = lu_factor(st.invconv.w);
      const double ladet = lu_log_abs_det(lu);
      if (!(ladet > std::log(kInvConvDetFloor)))
        throw std::runtime_error("glow forward: singular convolution in step " +
                                 std::to_string(i));
      cur = matvec(st.invconv.w, cur);
      log_det += ladet;
      log_det += couple_forward(st.coupling, cur);
      for (double v : cur)
        if (!std::isfinite(v))
          throw std::runtime_error("glow forward: non-finite value after step " +
                                   std::to_string(i));
    }
    return {cur, log_det};
  }

  std::vector<double> inverse(const std::vector<double>& z) const {
    check_dim(z.size());
    require_initialized();
    std::vector<double> cur = z;
    for (std::size_t i = steps.size(); i-- > 0;) {
      const auto& st = steps[i];
      couple_inverse(st.coupling, cur);
      const auto lu = lu_factor(st.invconv.w);
      if (!(lu_log_abs_det(lu) > std::log(kInvConvDetFloor)))
        throw std::runtime_error("glow inverse: singular convolution in step " +
                                 std::to_string(i));
      cur = lu_solve(lu, cur);
      for (std::size_t d = 0; d < dim; ++d)
        cur[d] = cur[d] * std::exp(-st.actnorm.log_scale[d]) + st.actnorm.bias[d];
    }
    return cur;
  }

  double log_likelihood(const std::vector<double>& x) const {
    const auto [z, log_det] = forward(x);
    double acc = 0.0;
    for (double v : z) acc += v * v;
    return -0.5 * (acc + static_cast<double>(dim) * 1.8378770664093453) + log_det;
  }

  /// Gradient of upstream_weight * log_likelihood(x) into grad. Covers
  /// actnorm bias/scale, the convolution weights (including the log-det
  /// term through the inverse transpose), and the weight-normalized
  /// coupling parameters.
  void backward(const std::vector<double>& x, double upstream_weight,
                std::vector<double>& grad) const {
    check_dim(x.size());
    require_initialized();
    if (grad.size() != param_count())
      throw std::invalid_argument("glow backward: gradient buffer size mismatch");
    if (upstream_weight == 0.0) return;
    const double w_up = upstream_weight;

    struct StepTrace {
      std::vector<double> an_out;      // after actnorm
      std::vector<double> conv_out;    // after convolution (coupling input)
      std::vector<double> hid_raw;     // tanh activations
      double hid_norm = 0.0;           // divisor actually applied
      std::vector<double> hid;         // normalized activations
      std::vector<double> net_out;     // (log sigma, mu)
      std::vector<double> z;           // after coupling
      Matrix w_inv_t;                  // for the log-det gradient
    };
    std::vector<StepTrace> traces(steps.size());
    std::vector<double> cur = x;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& st = steps[i];
      auto& tr = traces[i];
      tr.an_out.resize(dim);
      for (std::size_t d = 0; d < dim; ++d)
        tr.an_out[d] = (cur[d] - st.actnorm.bias[d]) * std::exp(st.actnorm.log_scale[d]);
      const auto lu = lu_factor(st.invconv.w);
      if (!(lu_log_abs_det(lu) > std::log(kInvConvDetFloor)))
        throw std::runtime_error("glow backward: singular convolution in step " +
                                 std::to_string(i));
      tr.w_inv_t = transpose(lu_inverse(lu));
      tr.conv_out = matvec(st.invconv.w, tr.an_out);

      const std::size_t da = st.coupling.split;
      std::vector<double> xb(tr.conv_out.begin() + da, tr.conv_out.end());
      std::vector<double> pre = st.coupling.l1.eval(xb);
      tr.hid_raw.resize(pre.size());
      for (std::size_t j = 0; j < pre.size(); ++j) tr.hid_raw[j] = std::tanh(pre[j]);
      double nrm = 0.0;
      for (double h : tr.hid_raw) nrm += h * h;
      tr.hid_norm = std::max(std::sqrt(nrm), kActivationNormFloor);
      tr.hid.resize(pre.size());
      for (std::size_t j = 0; j < pre.size(); ++j) tr.hid[j] = tr.hid_raw[j] / tr.hid_norm;
      tr.net_out = st.coupling.l2.eval(tr.hid);

      tr.z = tr.conv_out;
      for (std::size_t j = 0; j < da; ++j)
        tr.z[j] = (tr.conv_out[j] + tr.net_out[da + j]) * std::exp(tr.net_out[j]);
      cur = tr.z;
    }

    std::vector<double> g(dim);
    for (std::size_t d = 0; d < dim; ++d) g[d] = -w_up * cur[d];

    std::size_t offset = param_count();
    for (std::size_t i = steps.size(); i-- > 0;) {
      const auto& st = steps[i];
      const auto& tr = traces[i];
      const std::size_t da = st.coupling.split;
      offset -= step_param_count(st);
      double* base = grad.data() + offset;
      double* g_bias = base;
      double* g_scale = g_bias + dim;
      double* g_w = g_scale + dim;
      double* g_l1 = g_w + dim * dim;
      double* g_l2 = g_l1 + st.coupling.l1.param_count();

      // Coupling: z_a = (y_a + mu) * sigma, z_b = y_b, with y the conv output.
      std::vector<double> dnet(tr.net_out.size(), 0.0);
      std::vector<double> dy(dim);
      for (std::size_t j = 0; j < da; ++j) {
        const double sigma = std::exp(tr.net_out[j]);
        dy[j] = g[j] * sigma;
        dnet[j] = g[j] * tr.z[j] + w_up;      // d/d log sigma, data + log-det
        dnet[da + j] = g[j] * sigma;          // d/d mu
      }
      for (std::size_t j = da; j < dim; ++j) dy[j] = g[j];

      // Output linear (weight-normalized).
      std::vector<double> dhid(tr.hid.size(), 0.0);
      wn_backward(st.coupling.l2, tr.hid, dnet, g_l2, dhid);

      // Euclidean normalization of the hidden activations.
      std::vector<double> dhraw(tr.hid_raw.size());
      double dot = 0.0;
      for (std::size_t j = 0; j < tr.hid.size(); ++j) dot += dhid[j] * tr.hid[j];
      const bool floored = tr.hid_norm == kActivationNormFloor;
      for (std::size_t j = 0; j < tr.hid.size(); ++j)
        dhraw[j] = floored ? dhid[j] / tr.hid_norm
                           : (dhid[j] - dot * tr.hid[j]) / tr.hid_norm;

      // tanh and first linear.
      std::vector<double> dpre(tr.hid_raw.size());
      for (std::size_t j = 0; j < tr.hid_raw.size(); ++j)
        dpre[j] = dhraw[j] * (1.0 - tr.hid_raw[j] * tr.hid_raw[j]);
      std::vector<double> xb(tr.conv_out.begin() + da, tr.conv_out.end());
      std::vector<double> dxb(xb.size(), 0.0);
      wn_backward(st.coupling.l1, xb, dpre, g_l1, dxb);
      for (std::size_t j = 0; j < dxb.size(); ++j) dy[da + j] += dxb[j];

      // Convolution: z = W y. Data term plus log-det term W^{-T}.
      for (std::size_t r = 0; r < dim; ++r)
        for (std::size_t c = 0; c < dim; ++c)
          g_w[r * dim + c] += dy[r] * tr.an_out[c] + w_up * tr.w_inv_t(r, c);
      std::vector<double> dan = matvec_t(st.invconv.w, dy);

      // Actnorm: a = (in - mu) * exp(sigma*).
      for (std::size_t d = 0; d < dim; ++d) {
        const double e = std::exp(st.actnorm.log_scale[d]);
        g_bias[d] += -dan[d] * e;
        g_scale[d] += dan[d] * tr.an_out[d] + w_up;
        g[d] = dan[d] * e;
      }
    }
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& st : steps) n += step_param_count(st);
    return n;
  }

  std::vector<ParamBlock> blocks() const {
    std::vector<ParamBlock> out;
    std::size_t off = 0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& st = steps[i];
      const auto add = [&](const std::string& tag, std::size_t n) {
        out.push_back({"step" + std::to_string(i) + "." + tag, off, n});
        off += n;
      };
      add("actnorm.bias", dim);
      add("actnorm.log_scale", dim);
      add("conv.w", dim * dim);
      add("coupling.l1.v", st.coupling.l1.v.data.size());
      add("coupling.l1.g", st.coupling.l1.g.size());
      add("coupling.l1.b", st.coupling.l1.b.size());
      add("coupling.l2.v", st.coupling.l2.v.data.size());
      add("coupling.l2.g", st.coupling.l2.g.size());
      add("coupling.l2.b", st.coupling.l2.b.size());
    }
    return out;
  }

  std::vector<double> get_params() const {
    std::vector<double> out;
    out.reserve(param_count());
    for (const auto& st : steps) {
      out.insert(out.end(), st.actnorm.bias.begin(), st.actnorm.bias.end());
      out.insert(out.end(), st.actnorm.log_scale.begin(), st.actnorm.log_scale.end());
      out.insert(out.end(), st.invconv.w.data.begin(), st.invconv.w.data.end());
      for (const WnLinear* l : {&st.coupling.l1, &st.coupling.l2}) {
        out.insert(out.end(), l->v.data.begin(), l->v.data.end());
        out.insert(out.end(), l->g.begin(), l->g.end());
        out.insert(out.end(), l->b.begin(), l->b.end());
      }
    }
    return out;
  }

  void set_params(const std::vector<double>& p) {
    if (p.size() != param_count())
      throw std::invalid_argument("glow set_params: size mismatch");
    std::size_t off = 0;
    const auto take = [&](double* dst, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) dst[i] = p[off + i];
      off += n;
    };
    for (auto& st : steps) {
      take(st.actnorm.bias.data(), dim);
      take(st.actnorm.log_scale.data(), dim);
      take(st.invconv.w.data.data(), dim * dim);
      for (WnLinear* l : {&st.coupling.l1, &st.coupling.l2}) {
        take(l->v.data.data(), l->v.data.size());
        take(l->g.data(), l->g.size());
        take(l->b.data(), l->b.size());
      }
    }
  }

 private:
  void check_dim(std::size_t n) const {
    if (n != dim) throw std::invalid_argument("glow: input dimension mismatch");
  }

  void require_initialized() const {
    for (std::size_t i = 0; i < steps.size(); ++i)
      if (!steps[i].actnorm.initialized)
        throw std::runtime_error("glow: actnorm of step " + std::to_string(i) +
                                 " not initialized");
  }

  static std::size_t step_param_count(const GlowStep& st) {
    return 2 * st.actnorm.bias.size() + st.invconv.w.data.size() +
           st.coupling.l1.param_count() + st.coupling.l2.param_count();
  }

  /// In-place coupling in the normalizing direction; returns its log-det.
  double couple_forward(const GlowCoupling& c, std::vector<double>& v) const {
    const std::size_t da = c.split;
    std::vector<double> xb(v.begin() + da, v.end());
    std::vector<double> pre = c.l1.eval(xb);
    double nrm = 0.0;
    for (auto& h : pre) {
      h = std::tanh(h);
      nrm += h * h;
    }
    const double div = std::max(std::sqrt(nrm), kActivationNormFloor);
    for (auto& h : pre) h /= div;
    const std::vector<double> out = c.l2.eval(pre);
    double log_det = 0.0;
    for (std::size_t j = 0; j < da; ++j) {
      v[j] = (v[j] + out[da + j]) * std::exp(out[j]);
      log_det += out[j];
    }
    return log_det;
  }

  void couple_inverse(const GlowCoupling& c, std::vector<double>& v) const {
    const std::size_t da = c.split;
    std::vector<double> xb(v.begin() + da, v.end());
    std::vector<double> pre = c.l1.eval(xb);
    double nrm = 0.0;
    for (auto& h : pre) {
      h = std::tanh(h);
      nrm += h * h;
    }
    const double div = std::max(std::sqrt(nrm), kActivationNormFloor);
    for (auto& h : pre) h /= div;
    const std::vector<double> out = c.l2.eval(pre);
    for (std::size_t j = 0; j < da; ++j) v[j] = v[j] * std::exp(-out[j]) - out[da + j];
  }

  /// Backward through one weight-normalized linear map. Accumulates v, g, b
  /// gradients (in that layout) into gslice and dL/din into din.
  static void wn_backward(const WnLinear& l, const std::vector<double>& in,
                          const std::vector<double>& dout, double* gslice,
                          std::vector<double>& din) {
    const std::size_t Out = l.out_dim(), In = l.in_dim();
    double* gv = gslice;
    double* gg = gv + l.v.data.size();
    double* gb = gg + l.g.size();
    for (std::size_t i = 0; i < Out; ++i) {
      const double norm = l.row_norm(i);
      const double go = dout[i];
      gb[i] += go;
      // Effective weight row w_i = g_i v_i / ||v_i||; dL/dw_i = go * in.
      double dot_wv = 0.0;  // (dL/dw_i) . v_hat
      for (std::size_t j = 0; j < In; ++j) dot_wv += go * in[j] * l.v(i, j) / norm;
      gg[i] += dot_wv;
      const double scale = l.g[i] / norm;
      for (std::size_t j = 0; j < In; ++j) {
        const double vhat = l.v(i, j) / norm;
        gv[i * In + j] += scale * (go * in[j] - dot_wv * vhat);
        din[j] += scale * l.v(i, j) * go;
      }
    }
  }
};

/// Identity-configured stack: W = I, actnorm neutral and marked
/// initialized, coupling output zeroed. Useful as an exact unit-Gaussian
/// anchor.
inline GlowStack make_identity_glow(std::size_t D, std::size_t num_steps, std::size_t hidden) {
  GlowStack g;
  g.dim = D;
  const std::size_t da = (D + 1) / 2, db = D - da;
  for (std::size_t i = 0; i < num_steps; ++i) {
    GlowStep st;
    st.actnorm.bias.assign(D, 0.0);
    st.actnorm.log_scale.assign(D, 0.0);
    st.actnorm.initialized = true;
    st.invconv.w = identity_matrix(D);
    st.coupling.split = da;
    st.coupling.l1.v = Matrix(hidden, db, 0.0);
    for (std::size_t j = 0; j < hidden && db > 0; ++j) st.coupling.l1.v(j, j % db) = 1.0;
    st.coupling.l1.g.assign(hidden, 1.0);
    st.coupling.l1.b.assign(hidden, 0.0);
    st.coupling.l2.v = Matrix(2 * da, hidden, 0.0);
    for (std::size_t j = 0; j < 2 * da; ++j) st.coupling.l2.v(j, j % hidden) = 1.0;
    st.coupling.l2.g.assign(2 * da, 0.0);
    st.coupling.l2.b.assign(2 * da, 0.0);
    g.steps.push_back(std::move(st));
  }
  return g;
}

/// Training init: random rotation for W, fan-in scaled directions with
/// weight-norm magnitudes matching (hidden) or zero (output, identity
/// start). Actnorms are left uninitialized; call glow_initialize with the
/// first batch before any evaluation.
inline GlowStack make_glow_stack(std::size_t D, std::size_t num_steps, std::size_t hidden,
                                 RngStream& rng, double hidden_jitter_std = 0.0) {
  if (D < 2) throw std::invalid_argument("make_glow_stack: need D >= 2");
  if (num_steps == 0) throw std::invalid_argument("make_glow_stack: need at least one step");
  GlowStack g;
  g.dim = D;
  const std::size_t da = (D + 1) / 2, db = D - da;
  for (std::size_t i = 0; i < num_steps; ++i) {
    GlowStep st;
    st.actnorm.bias.assign(D, 0.0);
    st.actnorm.log_scale.assign(D, 0.0);

    // QR of a Gaussian matrix by Gram-Schmidt; sign-fixed to a rotation.
    Matrix m(D, D);
    for (auto& v : m.data) v = rng.normal();
    for (std::size_t c = 0; c < D; ++c) {
      for (std::size_t prev = 0; prev < c; ++prev) {
        double dot = 0.0;
        for (std::size_t r = 0; r < D; ++r) dot += m(r, c) * m(r, prev);
        for (std::size_t r = 0; r < D; ++r) m(r, c) -= dot * m(r, prev);
      }
      double nrm = 0.0;
      for (std::size_t r = 0; r < D; ++r) nrm += m(r, c) * m(r, c);
      nrm = std::sqrt(nrm);
      for (std::size_t r = 0; r < D; ++r) m(r, c) /= nrm;
    }
    if (lu_det_sign(lu_factor(m)) < 0.0)
      for (std::size_t r = 0; r < D; ++r) m(r, 0) = -m(r, 0);
    st.invconv.w = m;

    st.coupling.split = da;
    st.coupling.l1.v = Matrix(hidden, db);
    const double bound = 1.0 / std::sqrt(static_cast<double>(db));
    for (auto& v : st.coupling.l1.v.data)
      v = rng.uniform(-bound, bound) + hidden_jitter_std * rng.normal();
    st.coupling.l1.g.resize(hidden);
    for (std::size_t j = 0; j < hidden; ++j) st.coupling.l1.g[j] = st.coupling.l1.row_norm(j);
    st.coupling.l1.b.assign(hidden, 0.0);

    st.coupling.l2.v = Matrix(2 * da, hidden);
    const double bound2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (auto& v : st.coupling.l2.v.data) v = rng.uniform(-bound2, bound2);
    st.coupling.l2.g.assign(2 * da, 0.0);  // zero output: identity start
    st.coupling.l2.b.assign(2 * da, 0.0);
    g.steps.push_back(std::move(st));
  }
  return g;
}

/// Sequential data-dependent init: each step's actnorm sees the batch as
/// transformed by everything before it.
inline void glow_initialize(GlowStack& g, const std::vector<std::vector<double>>& batch) {
  if (batch.empty()) throw std::invalid_argument("glow_initialize: empty batch");
  std::vector<std::vector<double>> cur = batch;
  for (auto& st : g.steps) {
    actnorm_init(st.actnorm, cur);
    for (auto& x : cur) {
      for (std::size_t d = 0; d < g.dim; ++d)
        x[d] = (x[d] - st.actnorm.bias[d]) * std::exp(st.actnorm.log_scale[d]);
      x = matvec(st.invconv.w, x);
    }
    // Coupling output starts at zero, but apply it anyway in case a
    // pre-trained stack is re-initialized layer by layer.
    for (auto& x : cur) {
      std::vector<double> xb(x.begin() + st.coupling.split, x.end());
      std::vector<double> pre = st.coupling.l1.eval(xb);
      double nrm = 0.0;
      for (auto& h : pre) {
        h = std::tanh(h);
        nrm += h * h;
      }
      const double div = std::max(std::sqrt(nrm), kActivationNormFloor);
      for (auto& h : pre) h /= div;
      const std::vector<double> out = st.coupling.l2.eval(pre);
      for (std::size_t j = 0; j < st.coupling.split; ++j)
        x[j] = (x[j] + out[st.coupling.split + j]) * std::exp(out[j]);
    }
  }
}

}  // namespace flowhmm
