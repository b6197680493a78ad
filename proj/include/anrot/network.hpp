#pragma once

// Encoder (conv backbone + channel/spatial attention + variational heads) and
// decoder, expressed on the autograd tape.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "anrot/autograd.hpp"
#include "anrot/errors.hpp"
#include "anrot/gauss_metrics.hpp"
#include "anrot/rng.hpp"
#include "anrot/tensor.hpp"

namespace anrot {

/// Everything needed to derive parameter shapes.
struct Architecture {
  std::string backbone = "conv4-attn";  // or "resnet12-attn"
  int in_channels = 1;
  int height = 16;
  int width = 16;
  std::vector<int> widths = {32, 64, 64, 64};
  std::vector<int> attention_after = {2, 4};  // 1-based block indices; empty = no attention
  int reduction = 4;
  int latent_dim = 32;
  int spatial_kernel = 7;

  static Architecture resnet12() {
    Architecture a;
    a.backbone = "resnet12-attn";
    a.widths = {64, 160, 320, 640};
    return a;
  }

  bool has_attention(int block) const {
    for (int b : attention_after)
      if (b == block) return true;
    return false;
  }

  /// Spatial size of the input (level 0) and after each block.
  std::vector<std::pair<int, int>> levels() const {
    std::vector<std::pair<int, int>> out{{height, width}};
    for (std::size_t i = 0; i < widths.size(); ++i) {
      auto [h, w] = out.back();
      out.emplace_back(h / 2, w / 2);
    }
    return out;
  }

  void validate() const {
    if (backbone != "conv4-attn" && backbone != "resnet12-attn")
      throw ConfigError("unknown backbone '" + backbone + "' (expected conv4-attn, resnet12-attn)");
    if (in_channels < 1 || height < 1 || width < 1) throw ConfigError("input dims must be >= 1");
    if (widths.empty()) throw ConfigError("backbone needs at least one block");
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    if (reduction < 1) throw ConfigError("attention reduction must be >= 1");
    if (spatial_kernel < 1 || spatial_kernel % 2 == 0)
      throw ConfigError("spatial attention kernel must be odd");
    for (int w : widths)
      if (w < 1) throw ConfigError("block widths must be >= 1");
    auto lv = levels();
    if (lv.back().first < 1 || lv.back().second < 1)
      throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) +
                        " too small for " + std::to_string(widths.size()) + " pooling blocks");
    for (int b : attention_after) {
      if (b < 1 || b > static_cast<int>(widths.size()))
        throw ConfigError("attention block index " + std::to_string(b) + " out of range");
      if (widths[b - 1] % reduction != 0)
        throw ConfigError("attention reduction " + std::to_string(reduction) +
                          " must divide block width " + std::to_string(widths[b - 1]));
    }
  }

  nlohmann::json to_json() const {
    return {{"backbone", backbone},         {"in_channels", in_channels},
            {"height", height},             {"width", width},
            {"widths", widths},             {"attention_after", attention_after},
            {"reduction", reduction},       {"latent_dim", latent_dim},
            {"spatial_kernel", spatial_kernel}};
  }

  static Architecture from_json(const nlohmann::json& j) {
    Architecture a;
    a.backbone = j.at("backbone").get<std::string>();
    a.in_channels = j.at("in_channels").get<int>();
    a.height = j.at("height").get<int>();
    a.width = j.at("width").get<int>();
    a.widths = j.at("widths").get<std::vector<int>>();
    a.attention_after = j.at("attention_after").get<std::vector<int>>();
    a.reduction = j.at("reduction").get<int>();
    a.latent_dim = j.at("latent_dim").get<int>();
    a.spatial_kernel = j.at("spatial_kernel").get<int>();
    a.validate();
    return a;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Named parameter tensors; std::map order is the canonical order.
template <class T>
struct ModelState {
  Architecture arch;
  std::map<std::string, Tensor<T>> params;
  // free-form provenance carried through checkpoints (e.g. trained_robust)
  nlohmann::json meta = nlohmann::json::object();

  const Tensor<T>& at(const std::string& name) const {
    auto it = params.find(name);
    require(it != params.end(), "ModelState: no parameter named '" + name + "'");
    return it->second;
  }

  template <class U>
  ModelState<U> cast() const {
    ModelState<U> out{arch, {}, meta};
    for (const auto& [k, v] : params) out.params.emplace(k, v.template cast<U>());
    return out;
  }
};

struct ParamCount {
  std::size_t total = 0;
  std::map<std::string, std::size_t> groups;  // name minus its last component
};

template <class T>
ParamCount param_count(const ModelState<T>& state) {
  ParamCount pc;
  for (const auto& [name, t] : state.params) {
    pc.total += t.size();
    const auto dot = name.rfind('.');
    pc.groups[dot == std::string::npos ? name : name.substr(0, dot)] += t.size();
  }
  return pc;
}

namespace detail {

struct ShapeSpec {
  std::string name;
  std::vector<int> dims;
  enum class Init { HeNormal, Normal, Zero, One } init;
  double std = 0.0;
};

inline void conv_spec(std::vector<ShapeSpec>& out, const std::string& prefix, int in, int o, int k,
                      bool bias = true) {
  out.push_back({prefix + ".w", {o, in, k, k}, ShapeSpec::Init::HeNormal,
                 std::sqrt(2.0 / (in * k * k))});
  if (bias) out.push_back({prefix + ".b", {o}, ShapeSpec::Init::Zero, 0.0});
}

inline void scale_shift_spec(std::vector<ShapeSpec>& out, const std::string& scale,
                             const std::string& shift, int c) {
  out.push_back({scale, {c}, ShapeSpec::Init::One, 0.0});
  out.push_back({shift, {c}, ShapeSpec::Init::Zero, 0.0});
}

inline std::vector<ShapeSpec> parameter_specs(const Architecture& a) {
  a.validate();
  std::vector<ShapeSpec> s;
  int in = a.in_channels;
  for (std::size_t i = 0; i < a.widths.size(); ++i) {
    const std::string blk = "enc.block" + std::to_string(i + 1);
    const int w = a.widths[i];
    if (a.backbone == "conv4-attn") {
      conv_spec(s, blk + ".conv", in, w, 3);
      scale_shift_spec(s, blk + ".scale", blk + ".shift", w);
    } else {
      for (int j = 1; j <= 3; ++j) {
        conv_spec(s, blk + ".conv" + std::to_string(j), j == 1 ? in : w, w, 3);
        scale_shift_spec(s, blk + ".scale" + std::to_string(j), blk + ".shift" + std::to_string(j), w);
      }
      conv_spec(s, blk + ".short", in, w, 1, false);
      scale_shift_spec(s, blk + ".short.scale", blk + ".short.shift", w);
    }
    if (a.has_attention(static_cast<int>(i) + 1)) {
      const std::string att = "enc.att" + std::to_string(i + 1);
      const int hidden = w / a.reduction;
      s.push_back({att + ".mlp1.w", {hidden, w}, ShapeSpec::Init::HeNormal, std::sqrt(2.0 / w)});
      s.push_back({att + ".mlp1.b", {hidden}, ShapeSpec::Init::Zero, 0.0});
      s.push_back({att + ".mlp2.w", {w, hidden}, ShapeSpec::Init::Normal, std::sqrt(1.0 / hidden)});
      s.push_back({att + ".mlp2.b", {w}, ShapeSpec::Init::Zero, 0.0});
      const int k = a.spatial_kernel;
      s.push_back({att + ".spatial.w", {1, 2, k, k}, ShapeSpec::Init::Normal,
                   std::sqrt(1.0 / (2 * k * k))});
      s.push_back({att + ".spatial.b", {1}, ShapeSpec::Init::Zero, 0.0});
    }
    in = w;
  }
  const int feat = a.widths.back();
  const int d = a.latent_dim;
  s.push_back({"head.mu.w", {d, feat}, ShapeSpec::Init::Normal, std::sqrt(1.0 / feat)});
  s.push_back({"head.mu.b", {d}, ShapeSpec::Init::Zero, 0.0});
  s.push_back({"head.logvar.w", {d, feat}, ShapeSpec::Init::Normal, 0.1 * std::sqrt(1.0 / feat)});
  s.push_back({"head.logvar.b", {d}, ShapeSpec::Init::Zero, 0.0});

  const auto lv = a.levels();
  const int n = static_cast<int>(a.widths.size());
  const int fc_out = feat * lv.back().first * lv.back().second;
  s.push_back({"dec.fc.w", {fc_out, d}, ShapeSpec::Init::HeNormal, std::sqrt(2.0 / d)});
  s.push_back({"dec.fc.b", {fc_out}, ShapeSpec::Init::Zero, 0.0});
  for (int st = 0; st < n; ++st) {
    const int cin = a.widths[n - 1 - st];
    const int cout = st < n - 1 ? a.widths[n - 2 - st] : a.in_channels;
    conv_spec(s, "dec.stage" + std::to_string(st + 1) + ".conv", cin, cout, 3);
  }
  return s;
}

}  // namespace detail

/// Fresh parameters for `arch`, deterministic in `seed`.
template <class T>
ModelState<T> init_model(const Architecture& arch, std::uint64_t seed) {
  ModelState<T> st;
  st.arch = arch;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& spec : detail::parameter_specs(arch)) {
    Tensor<T> t(spec.dims);
    for (auto& v : t.storage()) {
      switch (spec.init) {
        case detail::ShapeSpec::Init::HeNormal:
        case detail::ShapeSpec::Init::Normal: v = static_cast<T>(spec.std * normal(rng)); break;
        case detail::ShapeSpec::Init::Zero: v = T(0); break;
        case detail::ShapeSpec::Init::One: v = T(1); break;
      }
    }
    st.params.emplace(spec.name, std::move(t));
  }
  return st;
}

// ---------------------------------------------------------------------------
// tape-level network

using ParamVars = std::map<std::string, ad::Var>;

/// Put every parameter on the tape as a differentiable leaf (or a constant).
template <class T>
ParamVars bind_params(ad::Tape<T>& tape, const ModelState<T>& st, bool trainable = true) {
  ParamVars vars;
  for (const auto& [name, t] : st.params)
    vars.emplace(name, trainable ? tape.variable(t) : tape.constant(t));
  return vars;
}

namespace detail {

inline ad::Var param(const ParamVars& p, const std::string& name) {
  auto it = p.find(name);
  require(it != p.end(), "missing parameter '" + name + "'");
  return it->second;
}

template <class T>
void check_finite(const ad::Tape<T>& tape, ad::Var v, const std::string& layer) {
  if (!tape.value(v).all_finite()) throw DomainError("non-finite activations after " + layer);
}

}  // namespace detail

/// sigmoid(MLP(avgpool(psi)) + MLP(maxpool(psi))) applied as a channel gate.
template <class T>
ad::Var channel_attention_on(ad::Tape<T>& t, ad::Var psi, ad::Var w1, ad::Var b1, ad::Var w2,
                             ad::Var b2) {
  const auto& pv = t.value(psi);
  require(pv.rank() == 4, "channel_attention: rank-4 input expected");
  require(t.value(w1).rank() == 2 && t.value(w1).dim(1) == pv.channels(),
          "channel_attention: MLP expects " + std::to_string(t.value(w1).dim(1)) +
              " channels, input has " + std::to_string(pv.channels()));
  auto mlp = [&](ad::Var v) {
    return ad::linear(t, ad::relu(t, ad::linear(t, v, w1, b1)), w2, b2);
  };
  ad::Var avg = mlp(ad::global_avg_pool(t, psi));
  ad::Var mx = mlp(ad::global_max_pool(t, psi));
  ad::Var gate = ad::sigmoid(t, ad::add(t, avg, mx));
  return ad::gate_channels(t, psi, gate);
}

/// sigmoid(conv_kxk([mean_c; max_c])) applied as a spatial gate.
template <class T>
ad::Var spatial_attention_on(ad::Tape<T>& t, ad::Var psi, ad::Var w, ad::Var b) {
  const auto& wv = t.value(w);
  require(wv.rank() == 4 && wv.dim(0) == 1 && wv.dim(1) == 2 && wv.dim(2) == wv.dim(3),
          "spatial_attention: kernel must be (1,2,k,k)");
  const int pad = wv.dim(2) / 2;
  ad::Var pooled = ad::concat_channels(t, ad::channel_mean(t, psi), ad::channel_max(t, psi));
  ad::Var s = ad::sigmoid(t, ad::conv2d(t, pooled, w, b, pad));
  return ad::gate_spatial(t, psi, s);
}

struct EncodeVars {
  ad::Var mean, var, logvar;
  ad::Var pooled;     // global-average-pooled final map (B, C)
  ad::Var final_map;  // last block output incl. attention, before any offset
  ad::Var head_input; // final_map after the optional feature offset
  ad::Var offset;     // the offset leaf, when one was given
};

/// Encoder forward. `feature_offset`, when given, is added to the final
/// feature map (feature-space perturbation) before pooling; with
/// `offset_grad` the offset is a differentiable leaf, so its gradient is the
/// gradient with respect to the feature map.
template <class T>
EncodeVars encode_on(ad::Tape<T>& t, const ParamVars& p, const Architecture& a, ad::Var x,
                     const Tensor<T>* feature_offset = nullptr, bool offset_grad = false) {
  const auto& xv = t.value(x);
  require(xv.rank() == 4 && xv.channels() == a.in_channels && xv.height() == a.height &&
              xv.width() == a.width,
          "encode: input " + dims_string(xv.dims()) + " does not match architecture (" +
              std::to_string(a.in_channels) + "," + std::to_string(a.height) + "," +
              std::to_string(a.width) + ")");
  using detail::param;
  ad::Var h = x;
  for (std::size_t i = 0; i < a.widths.size(); ++i) {
    const std::string blk = "enc.block" + std::to_string(i + 1);
    if (a.backbone == "conv4-attn") {
      h = ad::conv2d(t, h, param(p, blk + ".conv.w"), param(p, blk + ".conv.b"), 1);
      h = ad::scale_shift(t, h, param(p, blk + ".scale"), param(p, blk + ".shift"));
      h = ad::relu(t, h);
    } else {
      ad::Var r = h;
      for (int j = 1; j <= 3; ++j) {
        const std::string js = std::to_string(j);
        r = ad::conv2d(t, r, param(p, blk + ".conv" + js + ".w"), param(p, blk + ".conv" + js + ".b"), 1);
        r = ad::scale_shift(t, r, param(p, blk + ".scale" + js), param(p, blk + ".shift" + js));
        if (j < 3) r = ad::leaky_relu(t, r, T(0.1));
      }
      ad::Var sc = ad::conv2d(t, h, param(p, blk + ".short.w"), ad::Var{}, 0);
      sc = ad::scale_shift(t, sc, param(p, blk + ".short.scale"), param(p, blk + ".short.shift"));
      h = ad::leaky_relu(t, ad::add(t, r, sc), T(0.1));
    }
    h = ad::maxpool2(t, h);
    detail::check_finite(t, h, blk);
    if (a.has_attention(static_cast<int>(i) + 1)) {
      const std::string att = "enc.att" + std::to_string(i + 1);
      h = channel_attention_on(t, h, param(p, att + ".mlp1.w"), param(p, att + ".mlp1.b"),
                               param(p, att + ".mlp2.w"), param(p, att + ".mlp2.b"));
      h = spatial_attention_on(t, h, param(p, att + ".spatial.w"), param(p, att + ".spatial.b"));
      detail::check_finite(t, h, att);
    }
  }
  EncodeVars out;
  out.final_map = h;
  if (feature_offset) {
    require(feature_offset->dims() == t.value(h).dims(), "encode: feature offset shape");
    out.offset = offset_grad ? t.variable(*feature_offset) : t.constant(*feature_offset);
    h = ad::add(t, h, out.offset);
  }
  out.head_input = h;
  out.pooled = ad::global_avg_pool(t, h);
  out.mean = ad::linear(t, out.pooled, param(p, "head.mu.w"), param(p, "head.mu.b"));
  out.logvar = ad::linear(t, out.pooled, param(p, "head.logvar.w"), param(p, "head.logvar.b"));
  out.var = ad::exp_plus(t, out.logvar, T(DiagGaussian::kVarianceFloor));
  detail::check_finite(t, out.var, "head.logvar");
  detail::check_finite(t, out.mean, "head.mu");
  return out;
}

/// Decoder forward: z (B, d) -> images (B, C, H, W) in (0, 1).
template <class T>
ad::Var decode_on(ad::Tape<T>& t, const ParamVars& p, const Architecture& a, ad::Var z) {
  const auto& zv = t.value(z);
  require(zv.rank() == 2 && zv.dim(1) == a.latent_dim,
          "decode: latent dimension " + (zv.rank() == 2 ? std::to_string(zv.dim(1)) : std::string("?")) +
              " != " + std::to_string(a.latent_dim));
  using detail::param;
  const auto lv = a.levels();
  const int n = static_cast<int>(a.widths.size());
  ad::Var h = ad::relu(t, ad::linear(t, z, param(p, "dec.fc.w"), param(p, "dec.fc.b")));
  h = ad::reshape(t, h, {zv.dim(0), a.widths.back(), lv.back().first, lv.back().second});
  for (int st = 0; st < n; ++st) {
    const auto [th, tw] = lv[static_cast<std::size_t>(n - 1 - st)];
    const std::string name = "dec.stage" + std::to_string(st + 1) + ".conv";
    h = ad::resize_nearest(t, h, th, tw);
    h = ad::conv2d(t, h, param(p, name + ".w"), param(p, name + ".b"), 1);
    h = st < n - 1 ? ad::relu(t, h) : ad::sigmoid(t, h);
    detail::check_finite(t, h, "dec.stage" + std::to_string(st + 1));
  }
  return h;
}

template <class T>
std::map<std::string, Tensor<T>> collect_grads(const ad::Tape<T>& t, const ParamVars& vars) {
  std::map<std::string, Tensor<T>> g;
  for (const auto& [name, v] : vars) g.emplace(name, t.grad(v));
  return g;
}

// ---------------------------------------------------------------------------
// value-level API

template <class T>
struct ChannelAttentionParams {
  Tensor<T> w1, b1, w2, b2;  // (C/r, C), (C/r), (C, C/r), (C)
};

template <class T>
struct SpatialAttentionParams {
  Tensor<T> w, b;  // (1, 2, k, k), (1)
};

template <class T>
Tensor<T> channel_attention(const Tensor<T>& psi, const ChannelAttentionParams<T>& prm) {
  require(psi.rank() == 4, "channel_attention: rank-4 input expected");
  require(prm.w1.rank() == 2 && prm.w1.dim(1) == psi.channels() && prm.w2.rank() == 2 &&
              prm.w2.dim(0) == psi.channels() && prm.w2.dim(1) == prm.w1.dim(0),
          "channel_attention: parameter shapes do not match " + std::to_string(psi.channels()) +
              " channels");
  ad::Tape<T> t;
  auto out = channel_attention_on(t, t.constant(psi), t.constant(prm.w1), t.constant(prm.b1),
                                  t.constant(prm.w2), t.constant(prm.b2));
  return t.value(out);
}

template <class T>
Tensor<T> spatial_attention(const Tensor<T>& psi, const SpatialAttentionParams<T>& prm) {
  require(psi.rank() == 4, "spatial_attention: rank-4 input expected");
  ad::Tape<T> t;
  auto out = spatial_attention_on(t, t.constant(psi), t.constant(prm.w), t.constant(prm.b));
  return t.value(out);
}

template <class T>
struct EncodeOutput {
  std::vector<DiagGaussian> q;
  Tensor<T> final_feature_map;
  Tensor<T> pooled;
};

template <class T>
std::vector<DiagGaussian> to_gaussians(const Tensor<T>& mean, const Tensor<T>& var) {
  require(mean.rank() == 2 && mean.dims() == var.dims(), "to_gaussians: shapes");
  const int B = mean.dim(0), d = mean.dim(1);
  std::vector<DiagGaussian> out;
  out.reserve(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const auto off = static_cast<std::size_t>(b) * d;
    out.emplace_back(std::vector<double>(mean.data().begin() + off, mean.data().begin() + off + d),
                     std::vector<double>(var.data().begin() + off, var.data().begin() + off + d));
  }
  return out;
}

template <class T>
EncodeOutput<T> encode(const Tensor<T>& x, const ModelState<T>& st) {
  ad::Tape<T> t;
  auto p = bind_params(t, st, false);
  auto e = encode_on(t, p, st.arch, t.constant(x));
  return {to_gaussians(t.value(e.mean), t.value(e.var)), t.value(e.final_map), t.value(e.pooled)};
}

/// Decode a batch of latent rows (B, d).
template <class T>
Tensor<T> decode(const Tensor<T>& z, const ModelState<T>& st) {
  ad::Tape<T> t;
  auto p = bind_params(t, st, false);
  return t.value(decode_on(t, p, st.arch, t.constant(z)));
}

template <class T>
Tensor<T> decode(const std::vector<double>& z, const ModelState<T>& st) {
  require(z.size() == static_cast<std::size_t>(st.arch.latent_dim),
          "decode: latent dimension " + std::to_string(z.size()) + " != " +
              std::to_string(st.arch.latent_dim));
  return decode(Tensor<T>({1, static_cast<int>(z.size())}, std::vector<T>(z.begin(), z.end())), st);
}

}  // namespace anrot
