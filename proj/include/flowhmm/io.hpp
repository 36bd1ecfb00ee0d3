#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "flowhmm/classify.hpp"
#include "flowhmm/features.hpp"
#include "flowhmm/hmm.hpp"
#include "flowhmm/trainer.hpp"

/// Persistence layer: model containers (directory of JSON metadata plus a
/// named-tensor binary), feature archives, dataset manifests, prediction
/// files, training logs, checkpoints, and mono WAV audio. All binary
/// payloads are explicit little-endian; JSON metadata is strict and unknown
/// fields are rejected. Every writer goes through a temp-file-plus-rename
/// so concurrent readers never observe a partial file.

namespace flowhmm {

/// Filesystem-level failure: missing file, unreadable or unwritable path.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Content-level failure: bad magic or version, truncation, schema or shape
/// mismatch, unknown fields.
struct FormatError : IoError {
  using IoError::IoError;
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

/// Bounds-checked cursor over an in-memory file image; every read throws
/// FormatError on truncation instead of running past the end.
struct ByteReader {
  const std::string& buf;
  std::string label;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (n > buf.size() - pos) throw FormatError(label + ": truncated file");
  }
  std::uint16_t get_u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 2;
    return v;
  }
  std::uint32_t get_u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t get_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double get_f64() { return std::bit_cast<double>(get_u64()); }
  float get_f32() { return std::bit_cast<float>(get_u32()); }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos += n;
  }
  std::size_t remaining() const { return buf.size() - pos; }
};

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed on " + path.string());
  return std::move(ss).str();
}

inline void atomic_write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed on " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::error_code ec2;
    std::filesystem::remove(tmp, ec2);
    throw IoError("cannot replace " + path.string() + ": " + ec.message());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Named-tensor binary payload: magic "NMMH", u32 version, u32 tensor count,
// then per tensor: u32 name length, name bytes, u32 rank, u64 dims, f64
// little-endian payload. Tensors are keyed by name and stored sorted, so the
// byte stream is a pure function of the contents.
// ---------------------------------------------------------------------------

struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<double> data;
};

using TensorMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::size_t kMaxTensorRank = 8;

inline std::string encode_tensors(const TensorMap& tensors) {
  std::string out;
  out.append("NMMH", 4);
  detail::put_u32(out, kTensorFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.empty()) throw std::invalid_argument("encode_tensors: empty tensor name");
    std::size_t count = 1;
    for (std::size_t d : t.dims) count *= d;
    if (count != t.data.size())
      throw std::invalid_argument("encode_tensors: tensor '" + name + "' dims do not match payload size");
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (std::size_t d : t.dims) detail::put_u64(out, static_cast<std::uint64_t>(d));
    for (double v : t.data) detail::put_f64(out, v);
  }
  return out;
}

inline TensorMap decode_tensors(const std::string& bytes, const std::string& label) {
  detail::ByteReader r{bytes, label};
  if (r.get_bytes(4) != "NMMH") throw FormatError(label + ": not a tensor file (bad magic)");
  const std::uint32_t version = r.get_u32();
  if (version != kTensorFormatVersion)
    throw FormatError(label + ": unsupported tensor format version " + std::to_string(version));
  const std::uint32_t count = r.get_u32();
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.get_u32();
    const std::string name = r.get_bytes(name_len);
    if (name.empty()) throw FormatError(label + ": empty tensor name");
    const std::uint32_t rank = r.get_u32();
    if (rank > kMaxTensorRank)
      throw FormatError(label + ": tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Tensor t;
    std::size_t elems = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.get_u64();
      if (dim != 0 && elems > r.remaining() / dim)
        throw FormatError(label + ": tensor '" + name + "' larger than file");
      elems *= static_cast<std::size_t>(dim);
      t.dims.push_back(static_cast<std::size_t>(dim));
    }
    r.need(elems * 8);
    t.data.resize(elems);
    for (std::size_t e = 0; e < elems; ++e) t.data[e] = r.get_f64();
    if (!out.emplace(name, std::move(t)).second)
      throw FormatError(label + ": duplicate tensor '" + name + "'");
  }
  if (r.remaining() != 0) throw FormatError(label + ": trailing bytes after tensor table");
  return out;
}

/// Loader-side view of a TensorMap that records which tensors were consumed,
/// so anything left over is reported as unexpected.
struct TensorReader {
  const TensorMap& map;
  std::string label;
  std::set<std::string> used;

  const Tensor& get(const std::string& name, const std::vector<std::size_t>& dims) {
    const auto it = map.find(name);
    if (it == map.end()) throw FormatError(label + ": missing tensor '" + name + "'");
    if (it->second.dims != dims) {
      std::string want, got;
      for (std::size_t d : dims) want += (want.empty() ? "" : "x") + std::to_string(d);
      for (std::size_t d : it->second.dims) got += (got.empty() ? "" : "x") + std::to_string(d);
      throw FormatError(label + ": tensor '" + name + "' has shape [" + got + "], expected [" + want + "]");
    }
    used.insert(name);
    return it->second;
  }
  void finish() const {
    for (const auto& [name, t] : map)
      if (!used.count(name)) throw FormatError(label + ": unexpected tensor '" + name + "'");
  }
};

// ---------------------------------------------------------------------------
// JSON helpers: strict field sets, exact unsigned integers.
// ---------------------------------------------------------------------------

namespace detail {

using nlohmann::json;

inline json parse_json_strict(const std::string& text, const std::string& label) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError(label + ": malformed JSON");
  if (!j.is_object()) throw FormatError(label + ": top-level value must be an object");
  return j;
}

inline void check_keys(const json& obj, const std::string& label, const std::vector<std::string>& required,
                       const std::vector<std::string>& optional = {}) {
  for (const auto& key : required)
    if (!obj.contains(key)) throw FormatError(label + ": missing field '" + key + "'");
  for (const auto& item : obj.items()) {
    const std::string& key = item.key();
    const bool known = std::find(required.begin(), required.end(), key) != required.end() ||
                       std::find(optional.begin(), optional.end(), key) != optional.end();
    if (!known) throw FormatError(label + ": unknown field '" + key + "'");
  }
}

inline const json& get_field(const json& obj, const std::string& key, const std::string& label) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw FormatError(label + ": missing field '" + key + "'");
  return *it;
}

inline std::uint64_t get_u64_field(const json& obj, const std::string& key, const std::string& label) {
  const json& v = get_field(obj, key, label);
  if (!v.is_number_unsigned()) throw FormatError(label + ": field '" + key + "' must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

inline std::size_t get_size_field(const json& obj, const std::string& key, const std::string& label) {
  return static_cast<std::size_t>(get_u64_field(obj, key, label));
}

inline double get_f64_field(const json& obj, const std::string& key, const std::string& label) {
  const json& v = get_field(obj, key, label);
  if (!v.is_number()) throw FormatError(label + ": field '" + key + "' must be a number");
  return v.get<double>();
}

inline std::string get_str_field(const json& obj, const std::string& key, const std::string& label) {
  const json& v = get_field(obj, key, label);
  if (!v.is_string()) throw FormatError(label + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["learning_rate"] = cfg.learning_rate;
  j["batch_size"] = static_cast<std::uint64_t>(cfg.batch_size);
  j["max_inner_iters"] = static_cast<std::uint64_t>(cfg.max_inner_iters);
  j["convergence_threshold"] = cfg.convergence_threshold;
  j["convergence_streak"] = static_cast<std::uint64_t>(cfg.convergence_streak);
  j["outer_iters"] = static_cast<std::uint64_t>(cfg.outer_iters);
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["adam_epsilon"] = cfg.adam_epsilon;
  j["lr_decay_factor"] = cfg.lr_decay_factor;
  j["lr_decay_every"] = static_cast<std::uint64_t>(cfg.lr_decay_every);
  j["seed"] = cfg.seed;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& label) {
  if (!j.is_object()) throw FormatError(label + ": train_config must be an object");
  detail::check_keys(j, label + ": train_config",
                     {"learning_rate", "batch_size", "max_inner_iters", "convergence_threshold",
                      "convergence_streak", "outer_iters", "adam_beta1", "adam_beta2", "adam_epsilon",
                      "lr_decay_factor", "lr_decay_every", "seed"});
  TrainConfig cfg;
  cfg.learning_rate = detail::get_f64_field(j, "learning_rate", label);
  cfg.batch_size = detail::get_size_field(j, "batch_size", label);
  cfg.max_inner_iters = detail::get_size_field(j, "max_inner_iters", label);
  cfg.convergence_threshold = detail::get_f64_field(j, "convergence_threshold", label);
  cfg.convergence_streak = detail::get_size_field(j, "convergence_streak", label);
  cfg.outer_iters = detail::get_size_field(j, "outer_iters", label);
  cfg.adam_beta1 = detail::get_f64_field(j, "adam_beta1", label);
  cfg.adam_beta2 = detail::get_f64_field(j, "adam_beta2", label);
  cfg.adam_epsilon = detail::get_f64_field(j, "adam_epsilon", label);
  cfg.lr_decay_factor = detail::get_f64_field(j, "lr_decay_factor", label);
  cfg.lr_decay_every = detail::get_size_field(j, "lr_decay_every", label);
  cfg.seed = detail::get_u64_field(j, "seed", label);
  try {
    validate_config(cfg);
  } catch (const std::invalid_argument& e) {
    throw FormatError(label + ": invalid train_config: " + e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Model containers. A container directory holds model.json (strict metadata)
// and params.bin (the tensor payload). A bank stores one HMM per class under
// tensor prefixes "class0.", "class1.", ...; a checkpoint stores one HMM
// under "model." plus the optimizer and RNG state needed for bitwise resume.
// ---------------------------------------------------------------------------

enum class ModelKind { gmm, nvp, glow };

inline const char* kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::gmm: return "gmm";
    case ModelKind::nvp: return "nvp";
    case ModelKind::glow: return "glow";
  }
  throw std::logic_error("kind_name: bad enum");
}

inline ModelKind parse_kind(const std::string& s, const std::string& label) {
  if (s == "gmm") return ModelKind::gmm;
  if (s == "nvp") return ModelKind::nvp;
  if (s == "glow") return ModelKind::glow;
  throw FormatError(label + ": unknown model kind '" + s + "'");
}

inline ModelKind model_kind(const AnyHmm& m) {
  switch (m.index()) {
    case 0: return ModelKind::gmm;
    case 1: return ModelKind::nvp;
    case 2: return ModelKind::glow;
  }
  throw std::logic_error("model_kind: empty variant");
}

/// Flow architecture hyperparameters: coupling-layer count (NVP) or step
/// count (Glow), plus the conditioner hidden width.
struct FlowShape {
  std::size_t depth = 0;
  std::size_t hidden = 0;
};

/// Shape metadata identifying a model architecture; together with the tensor
/// payload it fully determines the model.
struct ModelShape {
  ModelKind kind = ModelKind::gmm;
  std::size_t states = 0;
  std::size_t dim = 0;
  std::size_t num_components = 0;
  FlowShape flow;
};

namespace detail {

inline ModelShape shape_of(const GmmHmm& m) {
  return {ModelKind::gmm, m.states(), m.dim(), m.emission.components(), {}};
}

inline ModelShape shape_of(const NvpHmm& m) {
  const NvpStack& st = m.emission.flows.at(0).at(0);
  return {ModelKind::nvp, m.states(), m.dim(), m.emission.components(),
          {st.layers.size(), st.layers.at(0).s_net.w1.rows}};
}

inline ModelShape shape_of(const GlowHmm& m) {
  const GlowStack& st = m.emission.flows.at(0).at(0);
  return {ModelKind::glow, m.states(), m.dim(), m.emission.components(),
          {st.steps.size(), st.steps.at(0).coupling.l1.v.rows}};
}

inline ModelShape shape_of_any(const AnyHmm& m) {
  return std::visit([](const auto& h) { return shape_of(h); }, m);
}

inline bool same_shape(const ModelShape& a, const ModelShape& b) {
  return a.kind == b.kind && a.states == b.states && a.dim == b.dim &&
         a.num_components == b.num_components && a.flow.depth == b.flow.depth &&
         a.flow.hidden == b.flow.hidden;
}

inline void pack_chain(const MarkovChain& chain, const std::string& prefix, TensorMap& out) {
  const std::size_t S = chain.num_states;
  out[prefix + "chain.log_q"] = Tensor{{S}, chain.log_q};
  out[prefix + "chain.log_A"] = Tensor{{S, S}, chain.log_A.data};
}

inline void pack_model(const GmmHmm& m, const std::string& prefix, TensorMap& out) {
  pack_chain(m.chain, prefix, out);
  const std::size_t S = m.states(), K = m.emission.components(), D = m.dim();
  out[prefix + "mix.log_weights"] = Tensor{{S, K}, m.emission.log_weights.data};
  for (std::size_t s = 0; s < S; ++s) {
    const std::string sp = prefix + "state" + std::to_string(s) + ".";
    out[sp + "means"] = Tensor{{K, D}, m.emission.means[s].data};
    out[sp + "log_vars"] = Tensor{{K, D}, m.emission.log_vars[s].data};
  }
}

inline void pack_model(const NvpHmm& m, const std::string& prefix, TensorMap& out) {
  pack_chain(m.chain, prefix, out);
  const std::size_t S = m.states(), K = m.emission.components();
  out[prefix + "mix.log_weights"] = Tensor{{S, K}, m.emission.log_weights.data};
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> p = m.emission.flows[s][k].get_params();
      const std::size_t n = p.size();
      out[prefix + "state" + std::to_string(s) + ".comp" + std::to_string(k) + ".params"] =
          Tensor{{n}, std::move(p)};
    }
}

inline void pack_model(const GlowHmm& m, const std::string& prefix, TensorMap& out) {
  pack_chain(m.chain, prefix, out);
  const std::size_t S = m.states(), K = m.emission.components();
  out[prefix + "mix.log_weights"] = Tensor{{S, K}, m.emission.log_weights.data};
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t k = 0; k < K; ++k) {
      const GlowStack& st = m.emission.flows[s][k];
      const std::string cp = prefix + "state" + std::to_string(s) + ".comp" + std::to_string(k) + ".";
      std::vector<double> p = st.get_params();
      const std::size_t n = p.size();
      out[cp + "params"] = Tensor{{n}, std::move(p)};
      std::vector<double> init(st.steps.size());
      for (std::size_t i = 0; i < st.steps.size(); ++i) init[i] = st.steps[i].actnorm.initialized ? 1.0 : 0.0;
      out[cp + "actnorm_init"] = Tensor{{st.steps.size()}, std::move(init)};
    }
}

inline void pack_any(const AnyHmm& m, const std::string& prefix, TensorMap& out) {
  std::visit([&](const auto& h) { pack_model(h, prefix, out); }, m);
}

inline MarkovChain unpack_chain(std::size_t S, const std::string& prefix, TensorReader& r) {
  MarkovChain chain;
  chain.num_states = S;
  chain.log_q = r.get(prefix + "chain.log_q", {S}).data;
  chain.log_A = Matrix(S, S);
  chain.log_A.data = r.get(prefix + "chain.log_A", {S, S}).data;
  return chain;
}

inline AnyHmm unpack_model(const ModelShape& sh, const std::string& prefix, TensorReader& r) {
  const std::size_t S = sh.states, K = sh.num_components, D = sh.dim;
  const MarkovChain chain = unpack_chain(S, prefix, r);
  Matrix log_w(S, K);
  log_w.data = r.get(prefix + "mix.log_weights", {S, K}).data;

  if (sh.kind == ModelKind::gmm) {
    GmmHmm m;
    m.chain = chain;
    m.emission.num_states = S;
    m.emission.num_components = K;
    m.emission.dim = D;
    m.emission.log_weights = std::move(log_w);
    for (std::size_t s = 0; s < S; ++s) {
      const std::string sp = prefix + "state" + std::to_string(s) + ".";
      Matrix mu(K, D), lv(K, D);
      mu.data = r.get(sp + "means", {K, D}).data;
      lv.data = r.get(sp + "log_vars", {K, D}).data;
      m.emission.means.push_back(std::move(mu));
      m.emission.log_vars.push_back(std::move(lv));
    }
    return m;
  }

  if (sh.kind == ModelKind::nvp) {
    NvpHmm m;
    m.chain = chain;
    m.emission.num_states = S;
    m.emission.num_components = K;
    m.emission.dim = D;
    m.emission.log_weights = std::move(log_w);
    RngStream scratch(0);
    m.emission.flows.resize(S);
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t k = 0; k < K; ++k) {
        NvpStack st;
        try {
          st = make_nvp_stack(D, sh.flow.depth, sh.flow.hidden, scratch);
        } catch (const std::invalid_argument& e) {
          throw FormatError(r.label + ": invalid flow architecture: " + e.what());
        }
        const std::string name =
            prefix + "state" + std::to_string(s) + ".comp" + std::to_string(k) + ".params";
        st.set_params(r.get(name, {st.param_count()}).data);
        m.emission.flows[s].push_back(std::move(st));
      }
    return m;
  }

  GlowHmm m;
  m.chain = chain;
  m.emission.num_states = S;
  m.emission.num_components = K;
  m.emission.dim = D;
  m.emission.log_weights = std::move(log_w);
  m.emission.flows.resize(S);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t k = 0; k < K; ++k) {
      GlowStack st;
      try {
        st = make_identity_glow(D, sh.flow.depth, sh.flow.hidden);
      } catch (const std::invalid_argument& e) {
        throw FormatError(r.label + ": invalid flow architecture: " + e.what());
      }
      const std::string cp = prefix + "state" + std::to_string(s) + ".comp" + std::to_string(k) + ".";
      st.set_params(r.get(cp + "params", {st.param_count()}).data);
      const Tensor& init = r.get(cp + "actnorm_init", {st.steps.size()});
      for (std::size_t i = 0; i < st.steps.size(); ++i) {
        if (init.data[i] != 0.0 && init.data[i] != 1.0)
          throw FormatError(r.label + ": tensor '" + cp + "actnorm_init' holds a non-flag value");
        st.steps[i].actnorm.initialized = init.data[i] == 1.0;
      }
      m.emission.flows[s].push_back(std::move(st));
    }
  return m;
}

inline nlohmann::json shape_to_json(const ModelShape& sh) {
  nlohmann::json j;
  j["kind"] = kind_name(sh.kind);
  j["states"] = static_cast<std::uint64_t>(sh.states);
  j["dim"] = static_cast<std::uint64_t>(sh.dim);
  j["num_components"] = static_cast<std::uint64_t>(sh.num_components);
  if (sh.kind != ModelKind::gmm) {
    nlohmann::json f;
    f[sh.kind == ModelKind::nvp ? "layers" : "steps"] = static_cast<std::uint64_t>(sh.flow.depth);
    f["hidden"] = static_cast<std::uint64_t>(sh.flow.hidden);
    j["flow"] = f;
  }
  return j;
}

inline ModelShape shape_from_json(const nlohmann::json& j, const std::string& label) {
  ModelShape sh;
  sh.kind = parse_kind(get_str_field(j, "kind", label), label);
  sh.states = get_size_field(j, "states", label);
  sh.dim = get_size_field(j, "dim", label);
  sh.num_components = get_size_field(j, "num_components", label);
  if (sh.states == 0 || sh.dim == 0 || sh.num_components == 0)
    throw FormatError(label + ": states, dim, and num_components must be positive");
  if (sh.kind != ModelKind::gmm) {
    const nlohmann::json& f = get_field(j, "flow", label);
    if (!f.is_object()) throw FormatError(label + ": field 'flow' must be an object");
    const std::string depth_key = sh.kind == ModelKind::nvp ? "layers" : "steps";
    check_keys(f, label + ": flow", {depth_key, "hidden"});
    sh.flow.depth = get_size_field(f, depth_key, label);
    sh.flow.hidden = get_size_field(f, "hidden", label);
    if (sh.flow.depth == 0 || sh.flow.hidden == 0)
      throw FormatError(label + ": flow depth and hidden width must be positive");
  }
  return sh;
}

}  // namespace detail

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr const char* kModelMetaFile = "model.json";
inline constexpr const char* kModelParamsFile = "params.bin";

/// A trained classifier for one model family: one HMM per class plus the
/// configuration it was trained with.
struct ModelContainer {
  ClassifierBank bank;
  TrainConfig train_config;
  std::uint64_t seed = 0;
};

inline void save_model(const std::filesystem::path& dir, const ModelContainer& mc) {
  validate_bank(mc.bank);
  const ModelShape sh = detail::shape_of_any(mc.bank.models.front());
  for (const auto& m : mc.bank.models)
    if (!detail::same_shape(detail::shape_of_any(m), sh))
      throw std::invalid_argument("save_model: bank models have mixed architectures");

  nlohmann::json j = detail::shape_to_json(sh);
  j["container"] = "bank";
  j["format_version"] = kModelFormatVersion;
  j["labels"] = mc.bank.class_labels;
  j["seed"] = mc.seed;
  j["train_config"] = train_config_to_json(mc.train_config);

  TensorMap tensors;
  for (std::size_t c = 0; c < mc.bank.models.size(); ++c)
    detail::pack_any(mc.bank.models[c], "class" + std::to_string(c) + ".", tensors);

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  detail::atomic_write_file(dir / kModelMetaFile, j.dump(2) + "\n");
  detail::atomic_write_file(dir / kModelParamsFile, encode_tensors(tensors));
}

inline ModelContainer load_model(const std::filesystem::path& dir) {
  const std::string meta_label = (dir / kModelMetaFile).string();
  const nlohmann::json j = detail::parse_json_strict(detail::read_file_bytes(dir / kModelMetaFile), meta_label);

  const std::string container = detail::get_str_field(j, "container", meta_label);
  if (container != "bank")
    throw FormatError(meta_label + ": expected a model bank, found container '" + container + "'");
  const std::uint64_t version = detail::get_u64_field(j, "format_version", meta_label);
  if (version != kModelFormatVersion)
    throw FormatError(meta_label + ": unsupported model format version " + std::to_string(version));

  std::vector<std::string> required = {"container", "format_version", "kind",  "states",
                                       "dim",       "num_components", "labels", "seed",
                                       "train_config"};
  const std::string kind_str = detail::get_str_field(j, "kind", meta_label);
  if (kind_str != "gmm") required.push_back("flow");
  detail::check_keys(j, meta_label, required);

  const ModelShape sh = detail::shape_from_json(j, meta_label);

  const nlohmann::json& jl = j.at("labels");
  if (!jl.is_array() || jl.empty()) throw FormatError(meta_label + ": field 'labels' must be a non-empty array");
  std::vector<std::string> labels;
  for (const auto& v : jl) {
    if (!v.is_string() || v.get<std::string>().empty())
      throw FormatError(meta_label + ": labels must be non-empty strings");
    labels.push_back(v.get<std::string>());
  }
  std::set<std::string> unique_labels(labels.begin(), labels.end());
  if (unique_labels.size() != labels.size()) throw FormatError(meta_label + ": duplicate class label");

  ModelContainer mc;
  mc.seed = detail::get_u64_field(j, "seed", meta_label);
  mc.train_config = train_config_from_json(j.at("train_config"), meta_label);
  mc.bank.class_labels = std::move(labels);

  const std::string params_label = (dir / kModelParamsFile).string();
  const TensorMap tensors = decode_tensors(detail::read_file_bytes(dir / kModelParamsFile), params_label);
  TensorReader r{tensors, params_label, {}};
  for (std::size_t c = 0; c < mc.bank.class_labels.size(); ++c)
    mc.bank.models.push_back(detail::unpack_model(sh, "class" + std::to_string(c) + ".", r));
  r.finish();
  validate_bank(mc.bank);
  return mc;
}

/// Mid-training snapshot of one model: parameters plus the trainer state
/// (Adam moments, step count, learning rate, RNG position) that makes
/// resumed training bitwise-identical to an uninterrupted run.
struct TrainCheckpoint {
  AnyHmm model;
  TrainerState state;
  TrainConfig config;
};

inline void save_checkpoint(const std::filesystem::path& dir, const TrainCheckpoint& cp) {
  const ModelShape sh = detail::shape_of_any(cp.model);
  if (cp.state.adam.m.size() != cp.state.adam.v.size())
    throw std::invalid_argument("save_checkpoint: adam moment vectors differ in size");

  nlohmann::json j = detail::shape_to_json(sh);
  j["container"] = "checkpoint";
  j["format_version"] = kModelFormatVersion;
  j["seed"] = cp.config.seed;
  j["train_config"] = train_config_to_json(cp.config);
  nlohmann::json t;
  t["next_outer"] = static_cast<std::uint64_t>(cp.state.next_outer);
  t["adam_step"] = cp.state.adam.step;
  t["rng_seed"] = cp.state.rng.seed();
  t["rng_counter"] = cp.state.rng.counter();
  j["trainer"] = t;

  TensorMap tensors;
  detail::pack_any(cp.model, "model.", tensors);
  tensors["trainer.adam.m"] = Tensor{{cp.state.adam.m.size()}, cp.state.adam.m};
  tensors["trainer.adam.v"] = Tensor{{cp.state.adam.v.size()}, cp.state.adam.v};
  tensors["trainer.learning_rate"] = Tensor{{1}, {cp.state.learning_rate}};

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  detail::atomic_write_file(dir / kModelMetaFile, j.dump(2) + "\n");
  detail::atomic_write_file(dir / kModelParamsFile, encode_tensors(tensors));
}

inline TrainCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const std::string meta_label = (dir / kModelMetaFile).string();
  const nlohmann::json j = detail::parse_json_strict(detail::read_file_bytes(dir / kModelMetaFile), meta_label);

  const std::string container = detail::get_str_field(j, "container", meta_label);
  if (container != "checkpoint")
    throw FormatError(meta_label + ": expected a checkpoint, found container '" + container + "'");
  const std::uint64_t version = detail::get_u64_field(j, "format_version", meta_label);
  if (version != kModelFormatVersion)
    throw FormatError(meta_label + ": unsupported model format version " + std::to_string(version));

  std::vector<std::string> required = {"container", "format_version", "kind", "states",
                                       "dim",       "num_components", "seed", "train_config",
                                       "trainer"};
  const std::string kind_str = detail::get_str_field(j, "kind", meta_label);
  if (kind_str != "gmm") required.push_back("flow");
  detail::check_keys(j, meta_label, required);

  const ModelShape sh = detail::shape_from_json(j, meta_label);

  TrainCheckpoint cp;
  cp.config = train_config_from_json(j.at("train_config"), meta_label);

  const nlohmann::json& t = j.at("trainer");
  if (!t.is_object()) throw FormatError(meta_label + ": field 'trainer' must be an object");
  detail::check_keys(t, meta_label + ": trainer", {"next_outer", "adam_step", "rng_seed", "rng_counter"});
  cp.state.next_outer = detail::get_size_field(t, "next_outer", meta_label);
  cp.state.adam.step = detail::get_u64_field(t, "adam_step", meta_label);
  cp.state.rng = RngStream(detail::get_u64_field(t, "rng_seed", meta_label),
                           detail::get_u64_field(t, "rng_counter", meta_label));

  const std::string params_label = (dir / kModelParamsFile).string();
  const TensorMap tensors = decode_tensors(detail::read_file_bytes(dir / kModelParamsFile), params_label);
  TensorReader r{tensors, params_label, {}};
  cp.model = detail::unpack_model(sh, "model.", r);
  const std::size_t n_adam = tensors.count("trainer.adam.m") ? tensors.at("trainer.adam.m").data.size() : 0;
  cp.state.adam.m = r.get("trainer.adam.m", {n_adam}).data;
  cp.state.adam.v = r.get("trainer.adam.v", {n_adam}).data;
  cp.state.learning_rate = r.get("trainer.learning_rate", {1}).data[0];
  r.finish();
  return cp;
}

// ---------------------------------------------------------------------------
// Feature archive: magic "NMMF", u32 version, u32 record count, then per
// record: u32 id length, id bytes, u64 T, u64 D, T*D row-major 32-bit
// little-endian floats.
// ---------------------------------------------------------------------------

struct FeatureRecord {
  std::string id;
  Matrix features;
};

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

inline void write_features(const std::filesystem::path& path, const std::vector<FeatureRecord>& records) {
  std::set<std::string> seen;
  std::string out;
  out.append("NMMF", 4);
  detail::put_u32(out, kFeatureFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    if (rec.id.empty()) throw std::invalid_argument("write_features: empty utterance id");
    if (!seen.insert(rec.id).second)
      throw std::invalid_argument("write_features: duplicate utterance id '" + rec.id + "'");
    detail::put_u32(out, static_cast<std::uint32_t>(rec.id.size()));
    out.append(rec.id);
    detail::put_u64(out, static_cast<std::uint64_t>(rec.features.rows));
    detail::put_u64(out, static_cast<std::uint64_t>(rec.features.cols));
    for (double v : rec.features.data) {
      const float f = static_cast<float>(v);
      if (!std::isfinite(f))
        throw std::invalid_argument("write_features: value outside float32 range in utterance '" + rec.id + "'");
      detail::put_f32(out, f);
    }
  }
  detail::atomic_write_file(path, out);
}

inline std::vector<FeatureRecord> read_features(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  const std::string label = path.string();
  detail::ByteReader r{bytes, label};
  if (r.get_bytes(4) != "NMMF") throw FormatError(label + ": not a feature archive (bad magic)");
  const std::uint32_t version = r.get_u32();
  if (version != kFeatureFormatVersion)
    throw FormatError(label + ": unsupported feature archive version " + std::to_string(version));
  const std::uint32_t count = r.get_u32();
  std::vector<FeatureRecord> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureRecord rec;
    const std::uint32_t id_len = r.get_u32();
    rec.id = r.get_bytes(id_len);
    if (rec.id.empty()) throw FormatError(label + ": empty utterance id");
    if (!seen.insert(rec.id).second) throw FormatError(label + ": duplicate utterance id '" + rec.id + "'");
    const std::uint64_t T = r.get_u64();
    const std::uint64_t D = r.get_u64();
    if (D != 0 && T > r.remaining() / 4 / D)
      throw FormatError(label + ": record '" + rec.id + "' larger than file");
    rec.features = Matrix(static_cast<std::size_t>(T), static_cast<std::size_t>(D));
    for (auto& v : rec.features.data) v = static_cast<double>(r.get_f32());
    out.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw FormatError(label + ": trailing bytes after last record");
  return out;
}

// ---------------------------------------------------------------------------
// Dataset manifest: UTF-8 text, a "#labels:" header declaring the label set,
// then one tab-separated line per utterance: id, relative path, label.
// Prediction files share the header but carry two columns: id, label.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::string path;
  std::string label;
};

struct Manifest {
  std::vector<std::string> labels;
  std::vector<ManifestEntry> entries;
};

struct PredictionFileEntry {
  std::string id;
  std::string label;
};

struct PredictionFile {
  std::vector<std::string> labels;
  std::vector<PredictionFileEntry> entries;
};

namespace detail {

inline void check_field_text(const std::string& value, const char* what) {
  if (value.empty()) throw std::invalid_argument(std::string(what) + " must be non-empty");
  if (value.find_first_of("\t\n\r") != std::string::npos)
    throw std::invalid_argument(std::string(what) + " must not contain tabs or line breaks");
}

inline std::string label_header(const std::vector<std::string>& labels) {
  if (labels.empty()) throw std::invalid_argument("label set must be non-empty");
  std::set<std::string> seen;
  std::string line = "#labels:";
  for (const auto& lab : labels) {
    check_field_text(lab, "label");
    if (!seen.insert(lab).second) throw std::invalid_argument("duplicate label '" + lab + "'");
    line += "\t" + lab;
  }
  return line + "\n";
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

inline std::vector<std::string> read_text_lines(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  const std::string label = path.string();
  if (text.find('\r') != std::string::npos)
    throw FormatError(label + ": carriage returns are not part of the format");
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t nl = text.find('\n', start);
    if (nl == std::string::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

inline std::vector<std::string> parse_label_header(const std::vector<std::string>& lines,
                                                   const std::string& label) {
  if (lines.empty() || lines[0].rfind("#labels:", 0) != 0)
    throw FormatError(label + ": missing #labels: header line");
  const std::vector<std::string> fields = split_tabs(lines[0].substr(8));
  std::vector<std::string> labels;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i == 0 && fields[i].empty()) continue;
    if (fields[i].empty()) throw FormatError(label + ": empty label in header");
    if (!seen.insert(fields[i]).second)
      throw FormatError(label + ": duplicate label '" + fields[i] + "' in header");
    labels.push_back(fields[i]);
  }
  if (labels.empty()) throw FormatError(label + ": header declares no labels");
  return labels;
}

}  // namespace detail

inline void write_manifest(const std::filesystem::path& path, const Manifest& mf) {
  std::string out = detail::label_header(mf.labels);
  const std::set<std::string> label_set(mf.labels.begin(), mf.labels.end());
  std::set<std::string> ids;
  for (const auto& e : mf.entries) {
    detail::check_field_text(e.id, "utterance id");
    detail::check_field_text(e.path, "path");
    detail::check_field_text(e.label, "label");
    if (!ids.insert(e.id).second)
      throw std::invalid_argument("write_manifest: duplicate utterance id '" + e.id + "'");
    if (!label_set.count(e.label))
      throw std::invalid_argument("write_manifest: label '" + e.label + "' not in the declared set");
    out += e.id + "\t" + e.path + "\t" + e.label + "\n";
  }
  detail::atomic_write_file(path, out);
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  const std::string label = path.string();
  const std::vector<std::string> lines = detail::read_text_lines(path);
  Manifest mf;
  mf.labels = detail::parse_label_header(lines, label);
  const std::set<std::string> label_set(mf.labels.begin(), mf.labels.end());
  std::set<std::string> ids;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::vector<std::string> fields = detail::split_tabs(lines[i]);
    if (fields.size() != 3)
      throw FormatError(label + ": line " + std::to_string(i + 1) + " must have 3 tab-separated fields");
    for (const auto& f : fields)
      if (f.empty()) throw FormatError(label + ": line " + std::to_string(i + 1) + " has an empty field");
    if (!ids.insert(fields[0]).second)
      throw FormatError(label + ": duplicate utterance id '" + fields[0] + "'");
    if (!label_set.count(fields[2]))
      throw FormatError(label + ": line " + std::to_string(i + 1) + " uses undeclared label '" + fields[2] + "'");
    mf.entries.push_back({fields[0], fields[1], fields[2]});
  }
  return mf;
}

inline void write_predictions(const std::filesystem::path& path, const PredictionFile& pf) {
  std::string out = detail::label_header(pf.labels);
  const std::set<std::string> label_set(pf.labels.begin(), pf.labels.end());
  std::set<std::string> ids;
  for (const auto& e : pf.entries) {
    detail::check_field_text(e.id, "utterance id");
    detail::check_field_text(e.label, "label");
    if (!ids.insert(e.id).second)
      throw std::invalid_argument("write_predictions: duplicate utterance id '" + e.id + "'");
    if (!label_set.count(e.label))
      throw std::invalid_argument("write_predictions: label '" + e.label + "' not in the declared set");
    out += e.id + "\t" + e.label + "\n";
  }
  detail::atomic_write_file(path, out);
}

inline PredictionFile read_predictions(const std::filesystem::path& path) {
  const std::string label = path.string();
  const std::vector<std::string> lines = detail::read_text_lines(path);
  PredictionFile pf;
  pf.labels = detail::parse_label_header(lines, label);
  const std::set<std::string> label_set(pf.labels.begin(), pf.labels.end());
  std::set<std::string> ids;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::vector<std::string> fields = detail::split_tabs(lines[i]);
    if (fields.size() != 2)
      throw FormatError(label + ": line " + std::to_string(i + 1) + " must have 2 tab-separated fields");
    for (const auto& f : fields)
      if (f.empty()) throw FormatError(label + ": line " + std::to_string(i + 1) + " has an empty field");
    if (!ids.insert(fields[0]).second)
      throw FormatError(label + ": duplicate utterance id '" + fields[0] + "'");
    if (!label_set.count(fields[1]))
      throw FormatError(label + ": line " + std::to_string(i + 1) + " uses undeclared label '" + fields[1] + "'");
    pf.entries.push_back({fields[0], fields[1]});
  }
  return pf;
}

// ---------------------------------------------------------------------------
// Training log: one JSON object per line.
// ---------------------------------------------------------------------------

inline void write_train_log(const std::filesystem::path& path, const TrainLog& log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::json j;
    j["outer"] = static_cast<std::uint64_t>(e.outer);
    j["nll"] = e.nll;
    j["inner_iters"] = static_cast<std::uint64_t>(e.inner_iters);
    j["learning_rate"] = e.learning_rate;
    j["wall_ms"] = e.wall_ms;
    out += j.dump() + "\n";
  }
  detail::atomic_write_file(path, out);
}

inline TrainLog read_train_log(const std::filesystem::path& path) {
  const std::string label = path.string();
  const std::vector<std::string> lines = detail::read_text_lines(path);
  TrainLog log;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) throw FormatError(label + ": blank line " + std::to_string(i + 1));
    const std::string where = label + ": line " + std::to_string(i + 1);
    const nlohmann::json j = detail::parse_json_strict(lines[i], where);
    detail::check_keys(j, where, {"outer", "nll", "inner_iters", "learning_rate", "wall_ms"});
    TrainLogEntry e;
    e.outer = detail::get_size_field(j, "outer", where);
    e.nll = detail::get_f64_field(j, "nll", where);
    e.inner_iters = detail::get_size_field(j, "inner_iters", where);
    e.learning_rate = detail::get_f64_field(j, "learning_rate", where);
    e.wall_ms = detail::get_f64_field(j, "wall_ms", where);
    log.push_back(e);
  }
  return log;
}

// ---------------------------------------------------------------------------
// WAV audio: reads single-channel little-endian PCM16 or IEEE float32,
// writes float32. Unknown RIFF chunks are skipped on read.
// ---------------------------------------------------------------------------

inline Waveform read_wav(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  const std::string label = path.string();
  detail::ByteReader r{bytes, label};
  if (r.get_bytes(4) != "RIFF") throw FormatError(label + ": not a WAV file (missing RIFF)");
  r.get_u32();
  if (r.get_bytes(4) != "WAVE") throw FormatError(label + ": not a WAV file (missing WAVE)");

  bool have_fmt = false;
  std::uint16_t format_tag = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  std::string data;
  bool have_data = false;

  while (r.remaining() >= 8) {
    const std::string chunk_id = r.get_bytes(4);
    const std::uint32_t chunk_size = r.get_u32();
    if (chunk_id == "fmt ") {
      if (chunk_size < 16) throw FormatError(label + ": fmt chunk too short");
      const std::size_t chunk_end = r.pos + chunk_size;
      format_tag = r.get_u16();
      channels = r.get_u16();
      sample_rate = r.get_u32();
      r.get_u32();
      r.get_u16();
      bits = r.get_u16();
      r.skip(chunk_end - r.pos);
      have_fmt = true;
    } else if (chunk_id == "data") {
      data = r.get_bytes(chunk_size);
      have_data = true;
    } else {
      r.skip(chunk_size);
    }
    if (chunk_size % 2 == 1 && r.remaining() > 0) r.skip(1);
  }
  if (!have_fmt) throw FormatError(label + ": missing fmt chunk");
  if (!have_data) throw FormatError(label + ": missing data chunk");
  if (channels != 1) throw FormatError(label + ": only mono WAV is supported, found " +
                                       std::to_string(channels) + " channels");
  if (sample_rate == 0) throw FormatError(label + ": zero sample rate");

  Waveform w;
  w.sample_rate = static_cast<double>(sample_rate);
  detail::ByteReader d{data, label};
  if (format_tag == 1 && bits == 16) {
    if (data.size() % 2 != 0) throw FormatError(label + ": PCM16 data size not a multiple of 2");
    w.samples.reserve(data.size() / 2);
    while (d.remaining() > 0)
      w.samples.push_back(static_cast<double>(static_cast<std::int16_t>(d.get_u16())) / 32768.0);
  } else if (format_tag == 3 && bits == 32) {
    if (data.size() % 4 != 0) throw FormatError(label + ": float32 data size not a multiple of 4");
    w.samples.reserve(data.size() / 4);
    while (d.remaining() > 0) w.samples.push_back(static_cast<double>(d.get_f32()));
  } else {
    throw FormatError(label + ": unsupported WAV encoding (format tag " + std::to_string(format_tag) +
                      ", " + std::to_string(bits) + " bits)");
  }
  if (w.samples.empty()) throw FormatError(label + ": empty data chunk");
  return w;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  validate_waveform(w);
  const double rate = std::round(w.sample_rate);
  if (!(rate >= 1.0 && rate <= 4294967295.0) || rate != w.sample_rate)
    throw std::invalid_argument("write_wav: sample rate must be a positive integer");
  for (double v : w.samples)
    if (!std::isfinite(v)) throw std::invalid_argument("write_wav: non-finite sample");

  const std::uint32_t sr = static_cast<std::uint32_t>(rate);
  const std::uint32_t data_size = static_cast<std::uint32_t>(w.samples.size() * 4);
  std::string out;
  out.append("RIFF", 4);
  detail::put_u32(out, 4 + 24 + 12 + 8 + data_size);
  out.append("WAVE", 4);
  out.append("fmt ", 4);
  detail::put_u32(out, 16);
  detail::put_u16(out, 3);
  detail::put_u16(out, 1);
  detail::put_u32(out, sr);
  detail::put_u32(out, sr * 4);
  detail::put_u16(out, 4);
  detail::put_u16(out, 32);
  out.append("fact", 4);
  detail::put_u32(out, 4);
  detail::put_u32(out, static_cast<std::uint32_t>(w.samples.size()));
  out.append("data", 4);
  detail::put_u32(out, data_size);
  for (double v : w.samples) detail::put_f32(out, static_cast<float>(v));
  detail::atomic_write_file(path, out);
}

// ---------------------------------------------------------------------------
// Evaluation report rendering: aligned text table plus a machine-readable
// JSON record.
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}
}  // namespace detail

inline nlohmann::json eval_report_to_json(const EvalReport& rep, const std::vector<std::string>& labels) {
  if (labels.size() != rep.support.size())
    throw std::invalid_argument("eval_report_to_json: label count does not match report");
  nlohmann::json j;
  j["accuracy"] = rep.accuracy;
  j["weighted_precision"] = rep.weighted_precision;
  j["weighted_recall"] = rep.weighted_recall;
  j["weighted_f1"] = rep.weighted_f1;
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t c = 0; c < labels.size(); ++c) {
    nlohmann::json row;
    row["label"] = labels[c];
    row["support"] = static_cast<std::uint64_t>(rep.support[c]);
    row["precision"] = rep.precision[c];
    row["recall"] = rep.recall[c];
    row["f1"] = rep.f1[c];
    per.push_back(row);
  }
  j["per_class"] = per;
  nlohmann::json conf = nlohmann::json::array();
  for (std::size_t i = 0; i < rep.confusion.rows; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t k = 0; k < rep.confusion.cols; ++k)
      row.push_back(static_cast<std::uint64_t>(rep.confusion(i, k)));
    conf.push_back(row);
  }
  j["confusion"] = conf;
  return j;
}

inline std::string eval_report_text(const EvalReport& rep, const std::vector<std::string>& labels) {
  if (labels.size() != rep.support.size())
    throw std::invalid_argument("eval_report_text: label count does not match report");
  std::size_t width = 5;
  for (const auto& lab : labels) width = std::max(width, lab.size());

  std::ostringstream out;
  out << "accuracy " << detail::fixed6(rep.accuracy) << "\n";
  out << "weighted precision " << detail::fixed6(rep.weighted_precision) << "  recall "
      << detail::fixed6(rep.weighted_recall) << "  f1 " << detail::fixed6(rep.weighted_f1) << "\n\n";
  out << std::string(width, ' ') << "  support  precision  recall    f1\n";
  for (std::size_t c = 0; c < labels.size(); ++c) {
    out << labels[c] << std::string(width - labels[c].size(), ' ') << "  ";
    std::string sup = std::to_string(rep.support[c]);
    out << sup << std::string(sup.size() < 7 ? 7 - sup.size() : 1, ' ') << "  "
        << detail::fixed6(rep.precision[c]) << "   " << detail::fixed6(rep.recall[c]) << "  "
        << detail::fixed6(rep.f1[c]) << "\n";
  }
  out << "\nconfusion (rows: truth, cols: predicted)\n";
  for (std::size_t i = 0; i < rep.confusion.rows; ++i) {
    out << labels[i] << std::string(width - labels[i].size(), ' ');
    for (std::size_t k = 0; k < rep.confusion.cols; ++k) {
      std::string cell = std::to_string(static_cast<std::uint64_t>(rep.confusion(i, k)));
      out << "  " << std::string(cell.size() < 6 ? 6 - cell.size() : 0, ' ') << cell;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace flowhmm
