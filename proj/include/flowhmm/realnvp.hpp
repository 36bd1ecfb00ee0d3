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
// RealNVP: a stack of affine coupling layers. The stack maps data x to latent
// z (the normalizing direction); the generating direction is the exact
// algebraic inverse. The latent prior is a standard isotropic Gaussian.
// ---------------------------------------------------------------------------

/// One-hidden-layer feedforward net: out = W2 tanh(W1 p + b1) + b2,
/// with an optional tanh squashing the output (used for the log-scale net,
/// which also bounds the log-scale to (-1, 1) so no extra clamping is
/// needed anywhere).
struct ShallowNet {
  Matrix w1;               // H x In
  std::vector<double> b1;  // H
  Matrix w2;               // Out x H
  std::vector<double> b2;  // Out
  bool squash_output = false;

  std::size_t in_dim() const { return w1.cols; }
  std::size_t out_dim() const { return w2.rows; }
  std::size_t hidden_dim() const { return w1.rows; }
  std::size_t param_count() const {
    return w1.data.size() + b1.size() + w2.data.size() + b2.size();
  }

  std::vector<double> eval(const std::vector<double>& in) const {
    std::vector<double> h = matvec(w1, in);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::tanh(h[i] + b1[i]);
    std::vector<double> out = matvec(w2, h);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += b2[i];
      if (squash_output) out[i] = std::tanh(out[i]);
    }
    return out;
  }
};

namespace detail {

struct ShallowTrace {
  std::vector<double> in, h, out;  // h and out are post-activation
};

inline ShallowTrace net_forward(const ShallowNet& net, const std::vector<double>& in) {
  ShallowTrace tr;
  tr.in = in;
  tr.h = matvec(net.w1, in);
  for (std::size_t i = 0; i < tr.h.size(); ++i) tr.h[i] = std::tanh(tr.h[i] + net.b1[i]);
  tr.out = matvec(net.w2, tr.h);
  for (std::size_t i = 0; i < tr.out.size(); ++i) {
    tr.out[i] += net.b2[i];
    if (net.squash_output) tr.out[i] = std::tanh(tr.out[i]);
  }
  return tr;
}

/// Accumulates parameter gradients into the four slices and returns dL/din.
inline std::vector<double> net_backward(const ShallowNet& net, const ShallowTrace& tr,
                                        std::vector<double> dout, double* gw1, double* gb1,
                                        double* gw2, double* gb2) {
  const std::size_t H = net.hidden_dim(), In = net.in_dim(), Out = net.out_dim();
  if (net.squash_output)
    for (std::size_t i = 0; i < Out; ++i) dout[i] *= 1.0 - tr.out[i] * tr.out[i];
  std::vector<double> dh(H, 0.0);
  for (std::size_t i = 0; i < Out; ++i) {
    gb2[i] += dout[i];
    for (std::size_t j = 0; j < H; ++j) {
      gw2[i * H + j] += dout[i] * tr.h[j];
      dh[j] += net.w2(i, j) * dout[i];
    }
  }
  std::vector<double> din(In, 0.0);
  for (std::size_t j = 0; j < H; ++j) {
    const double dpre = dh[j] * (1.0 - tr.h[j] * tr.h[j]);
    gb1[j] += dpre;
    for (std::size_t d = 0; d < In; ++d) {
      gw1[j * In + d] += dpre * tr.in[d];
      din[d] += net.w1(j, d) * dpre;
    }
  }
  return din;
}

}  // namespace detail

/// Affine coupling layer. `split` is the width of the first part of the
/// vector; `flip` selects which half passes through unchanged (first part
/// when false). The nets map the passive half to the active half's width.
struct CouplingLayer {
  std::size_t split = 0;
  bool flip = false;
  ShallowNet s_net;  // log-scale, tanh-bounded output
  ShallowNet t_net;  // translation, identity output
};

class NvpStack {
 public:
  std::size_t dim = 0;
  std::vector<CouplingLayer> layers;  // applied in index order, x toward z

  std::size_t passive_width(const CouplingLayer& l) const {
    return l.flip ? dim - l.split : l.split;
  }

  /// Normalizing map: z = f(x) plus the accumulated log|det| of this
  /// direction, which is the sum of -s over active coordinates and layers.
  std::pair<std::vector<double>, double> forward(const std::vector<double>& x) const {
    check_dim(x.size());
    std::vector<double> cur = x;
    double log_det = 0.0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      const auto [pas, act] = split_parts(layer, cur);
      const std::vector<double> s = layer.s_net.eval(pas);
      const std::vector<double> t = layer.t_net.eval(pas);
      std::vector<double> out(act.size());
      for (std::size_t j = 0; j < act.size(); ++j) {
        out[j] = (act[j] - t[j]) * std::exp(-s[j]);
        log_det -= s[j];
      }
      merge_parts(layer, pas, out, cur);
      for (double v : cur)
        if (!std::isfinite(v))
          throw std::runtime_error("nvp forward: non-finite value after layer " +
                                   std::to_string(l));
    }
    return {cur, log_det};
  }

  /// Generating map: exact algebraic inverse of forward.
  std::vector<double> inverse(const std::vector<double>& z) const {
    check_dim(z.size());
    std::vector<double> cur = z;
    for (std::size_t li = layers.size(); li-- > 0;) {
      const auto& layer = layers[li];
      const auto [pas, act] = split_parts(layer, cur);
      const std::vector<double> s = layer.s_net.eval(pas);
      const std::vector<double> t = layer.t_net.eval(pas);
      std::vector<double> out(act.size());
      for (std::size_t j = 0; j < act.size(); ++j) out[j] = act[j] * std::exp(s[j]) + t[j];
      merge_parts(layer, pas, out, cur);
      for (double v : cur)
        if (!std::isfinite(v))
          throw std::runtime_error("nvp inverse: non-finite value after layer " +
                                   std::to_string(li));
    }
    return cur;
  }

  /// Change of variables against the standard Gaussian prior.
  double log_likelihood(const std::vector<double>& x) const {
    const auto [z, log_det] = forward(x);
    double acc = 0.0;
    for (double v : z) acc += v * v;
    return -0.5 * (acc + static_cast<double>(dim) * 1.8378770664093453) + log_det;
  }

  /// Gradient of upstream_weight * log_likelihood(x) w.r.t. all net
  /// parameters, accumulated into grad (size param_count()).
  void backward(const std::vector<double>& x, double upstream_weight,
                std::vector<double>& grad) const {
    check_dim(x.size());
    if (grad.size() != param_count())
      throw std::invalid_argument("nvp backward: gradient buffer size mismatch");
    if (upstream_weight == 0.0) return;

    // Forward with traces.
    struct LayerTrace {
      detail::ShallowTrace s_tr, t_tr;
      std::vector<double> z_act;  // active output of this layer
    };
    std::vector<LayerTrace> traces(layers.size());
    std::vector<double> cur = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      const auto [pas, act] = split_parts(layer, cur);
      traces[l].s_tr = detail::net_forward(layer.s_net, pas);
      traces[l].t_tr = detail::net_forward(layer.t_net, pas);
      const auto& s = traces[l].s_tr.out;
      const auto& t = traces[l].t_tr.out;
      traces[l].z_act.resize(act.size());
      for (std::size_t j = 0; j < act.size(); ++j)
        traces[l].z_act[j] = (act[j] - t[j]) * std::exp(-s[j]);
      merge_parts(layer, pas, traces[l].z_act, cur);
    }

    // Prior term seeds the reverse pass; log-det terms enter per layer.
    std::vector<double> g(dim);
    for (std::size_t d = 0; d < dim; ++d) g[d] = -upstream_weight * cur[d];

    std::size_t offset = param_count();
    for (std::size_t li = layers.size(); li-- > 0;) {
      const auto& layer = layers[li];
      const auto& tr = traces[li];
      const std::size_t pw = passive_width(layer), aw = dim - pw;
      offset -= layer.s_net.param_count() + layer.t_net.param_count();

      std::vector<double> g_pas(pw), g_act(aw);
      split_grad(layer, g, g_pas, g_act);

      const auto& s = tr.s_tr.out;
      std::vector<double> ds(aw), dt(aw), dx_act(aw);
      for (std::size_t j = 0; j < aw; ++j) {
        const double e = std::exp(-s[j]);
        dx_act[j] = g_act[j] * e;
        ds[j] = -g_act[j] * tr.z_act[j] - upstream_weight;
        dt[j] = -g_act[j] * e;
      }

      double* base = grad.data() + offset;
      double* s_w1 = base;
      double* s_b1 = s_w1 + layer.s_net.w1.data.size();
      double* s_w2 = s_b1 + layer.s_net.b1.size();
      double* s_b2 = s_w2 + layer.s_net.w2.data.size();
      double* t_w1 = s_b2 + layer.s_net.b2.size();
      double* t_b1 = t_w1 + layer.t_net.w1.data.size();
      double* t_w2 = t_b1 + layer.t_net.b1.size();
      double* t_b2 = t_w2 + layer.t_net.w2.data.size();

      const auto din_s = detail::net_backward(layer.s_net, tr.s_tr, ds, s_w1, s_b1, s_w2, s_b2);
      const auto din_t = detail::net_backward(layer.t_net, tr.t_tr, dt, t_w1, t_b1, t_w2, t_b2);
      for (std::size_t d = 0; d < pw; ++d) g_pas[d] += din_s[d] + din_t[d];
      merge_grad(layer, g_pas, dx_act, g);
    }
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.s_net.param_count() + l.t_net.param_count();
    return n;
  }

  std::vector<ParamBlock> blocks() const {
    std::vector<ParamBlock> out;
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto add = [&](const std::string& tag, std::size_t n) {
        out.push_back({"layer" + std::to_string(l) + "." + tag, off, n});
        off += n;
      };
      add("s.w1", layers[l].s_net.w1.data.size());
      add("s.b1", layers[l].s_net.b1.size());
      add("s.w2", layers[l].s_net.w2.data.size());
      add("s.b2", layers[l].s_net.b2.size());
      add("t.w1", layers[l].t_net.w1.data.size());
      add("t.b1", layers[l].t_net.b1.size());
      add("t.w2", layers[l].t_net.w2.data.size());
      add("t.b2", layers[l].t_net.b2.size());
    }
    return out;
  }

  std::vector<double> get_params() const {
    std::vector<double> out;
    out.reserve(param_count());
    for (const auto& l : layers)
      for (const ShallowNet* net : {&l.s_net, &l.t_net}) {
        out.insert(out.end(), net->w1.data.begin(), net->w1.data.end());
        out.insert(out.end(), net->b1.begin(), net->b1.end());
        out.insert(out.end(), net->w2.data.begin(), net->w2.data.end());
        out.insert(out.end(), net->b2.begin(), net->b2.end());
      }
    return out;
  }

  void set_params(const std::vector<double>& p) {
    if (p.size() != param_count())
      throw std::invalid_argument("nvp set_params: size mismatch");
    std::size_t off = 0;
    const auto take = [&](double* dst, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) dst[i] = p[off + i];
      off += n;
    };
    for (auto& l : layers)
      for (ShallowNet* net : {&l.s_net, &l.t_net}) {
        take(net->w1.data.data(), net->w1.data.size());
        take(net->b1.data(), net->b1.size());
        take(net->w2.data.data(), net->w2.data.size());
        take(net->b2.data(), net->b2.size());
      }
  }

 private:
  void check_dim(std::size_t n) const {
    if (n != dim) throw std::invalid_argument("nvp: input dimension mismatch");
  }

  // The passive part is the first `split` coordinates when flip is false,
  // the trailing coordinates when flip is true.
  std::pair<std::vector<double>, std::vector<double>> split_parts(
      const CouplingLayer& l, const std::vector<double>& v) const {
    const std::size_t d = l.split;
    std::vector<double> first(v.begin(), v.begin() + d);
    std::vector<double> second(v.begin() + d, v.end());
    if (l.flip) return {std::move(second), std::move(first)};
    return {std::move(first), std::move(second)};
  }

  void merge_parts(const CouplingLayer& l, const std::vector<double>& pas,
                   const std::vector<double>& act, std::vector<double>& out) const {
    const auto& first = l.flip ? act : pas;
    const auto& second = l.flip ? pas : act;
    std::copy(first.begin(), first.end(), out.begin());
    std::copy(second.begin(), second.end(), out.begin() + l.split);
  }

  void split_grad(const CouplingLayer& l, const std::vector<double>& g, std::vector<double>& g_pas,
                  std::vector<double>& g_act) const {
    const std::size_t d = l.split;
    if (l.flip) {
      std::copy(g.begin(), g.begin() + d, g_act.begin());
      std::copy(g.begin() + d, g.end(), g_pas.begin());
    } else {
      std::copy(g.begin(), g.begin() + d, g_pas.begin());
      std::copy(g.begin() + d, g.end(), g_act.begin());
    }
  }

  void merge_grad(const CouplingLayer& l, const std::vector<double>& g_pas,
                  const std::vector<double>& g_act, std::vector<double>& g) const {
    const auto& first = l.flip ? g_act : g_pas;
    const auto& second = l.flip ? g_pas : g_act;
    std::copy(first.begin(), first.end(), g.begin());
    std::copy(second.begin(), second.end(), g.begin() + l.split);
  }
};

/// Fan-in scaled uniform weights, zero-initialized output layers so the
/// whole stack starts as the identity map. `hidden_jitter_std`, when
/// nonzero, perturbs the hidden weights; mixture components use it to break
/// symmetry between otherwise identical stacks.
inline NvpStack make_nvp_stack(std::size_t D, std::size_t num_layers, std::size_t hidden,
                               RngStream& rng, double hidden_jitter_std = 0.0) {
  if (D < 2) throw std::invalid_argument("make_nvp_stack: need D >= 2");
  if (num_layers == 0 || num_layers % 2 != 0)
    throw std::invalid_argument("make_nvp_stack: layer count must be even and positive");
  NvpStack st;
  st.dim = D;
  const std::size_t d = D / 2;
  for (std::size_t l = 0; l < num_layers; ++l) {
    CouplingLayer layer;
    layer.split = d;
    layer.flip = (l % 2 == 1);
    const std::size_t pw = layer.flip ? D - d : d;
    const std::size_t aw = D - pw;
    for (ShallowNet* net : {&layer.s_net, &layer.t_net}) {
      net->w1 = Matrix(hidden, pw);
      const double bound = 1.0 / std::sqrt(static_cast<double>(pw));
      for (auto& v : net->w1.data)
        v = rng.uniform(-bound, bound) + hidden_jitter_std * rng.normal();
      net->b1.assign(hidden, 0.0);
      net->w2 = Matrix(aw, hidden, 0.0);
      net->b2.assign(aw, 0.0);
    }
    layer.s_net.squash_output = true;
    st.layers.push_back(std::move(layer));
  }
  return st;
}

}  // namespace flowhmm
