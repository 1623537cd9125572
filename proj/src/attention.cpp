#include "mea/attention.hpp"

#include <cmath>

#include "mea/error.hpp"
#include "mea/variants.hpp"

namespace mea {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::MhaGqa: return "mha";
    case Variant::Tha: return "tha";
    case Variant::ThaModified: return "tha-mod";
    case Variant::Dfa: return "dfa";
    case Variant::DfaNoGn: return "dfa-nogn";
    case Variant::Mea: return "mea";
    case Variant::MeaNoGn: return "mea-nogn";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  if (name == "mha" || name == "gqa" || name == "mqa") return Variant::MhaGqa;
  if (name == "tha") return Variant::Tha;
  if (name == "tha-mod") return Variant::ThaModified;
  if (name == "dfa") return Variant::Dfa;
  if (name == "dfa-nogn") return Variant::DfaNoGn;
  if (name == "mea") return Variant::Mea;
  if (name == "mea-nogn") return Variant::MeaNoGn;
  throw ConfigError("unknown attention variant '" + std::string(name) + "'");
}

void AttnConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("attention config: " + m); };
  if (h == 0 || g == 0) fail("h and g must be positive");
  if (h % g != 0) fail("h must be a multiple of g");
  if (d_qk == 0 || d_v == 0 || d_model == 0) fail("dimensions must be positive");
  if (d_qk % 2 != 0) fail("d_qk must be even for rotary embedding");
  if (is_dfa() && h % 2 != 0) fail("differential attention pairs heads, h must be even");
  if (h_prime != 0 && h_prime != g && !is_mea()) fail("h' != g is only supported by MEA");
  if (!(rope_base > 0.0)) fail("rope_base must be positive");
}

std::size_t AttnConfig::kv_heads() const { return is_mea() ? component_heads() : g; }

bool AttnConfig::group_norm() const {
  switch (variant) {
    case Variant::Mea:
    case Variant::Dfa: return true;
    case Variant::MeaNoGn:
    case Variant::DfaNoGn: return false;
    default: return use_group_norm;
  }
}

namespace {

void expect_shape(const Tensor& t, const Shape& shape, const char* name) {
  if (t.shape() != shape)
    throw DimensionError(std::string("attention weight '") + name + "' has shape " +
                         shape_str(t.shape()) + ", expected " + shape_str(shape));
}

Shape gain_shape(const AttnConfig& cfg) {
  if (cfg.is_dfa()) return {cfg.h / 2, 2 * cfg.d_v};
  return {cfg.h, cfg.d_v};
}

}  // namespace

void AttnWeights::check(const AttnConfig& cfg) const {
  cfg.validate();
  expect_shape(wq, {cfg.d_model, cfg.h * cfg.d_qk}, "wq");
  expect_shape(wkv, {cfg.d_model, cfg.kv_heads() * (cfg.d_qk + cfg.d_v)}, "wkv");
  expect_shape(wo, {cfg.h * cfg.d_v, cfg.d_model}, "wo");
  if (cfg.is_mea()) {
    expect_shape(w_lc_k, {cfg.component_heads(), cfg.g}, "w_lc_k");
    expect_shape(w_lc_v, {cfg.component_heads(), cfg.g}, "w_lc_v");
  }
  if (cfg.is_tha()) {
    expect_shape(t_qk, {cfg.g, cfg.g}, "t_qk");
    expect_shape(t_v, {cfg.g, cfg.g}, "t_v");
  }
  if (cfg.is_dfa()) {
    expect_shape(lambda, {cfg.h / 2}, "lambda");
    if (!lambda.all_finite()) throw DimensionError("lambda must be finite");
  }
  if (cfg.group_norm()) expect_shape(gn_gain, gain_shape(cfg), "gn_gain");
}

AttnWeights init_attention(const AttnConfig& cfg, Rng& rng, const InitOptions& opts) {
  cfg.validate();
  const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  AttnWeights w;
  w.wq = Tensor::randn({cfg.d_model, cfg.h * cfg.d_qk}, rng, std);
  w.wkv = Tensor::randn({cfg.d_model, cfg.kv_heads() * (cfg.d_qk + cfg.d_v)}, rng, std);
  w.wo = Tensor::randn({cfg.h * cfg.d_v, cfg.d_model}, rng, std);
  Rng extras(rng());
  auto near_identity = [&](std::size_t r, std::size_t c) {
    Tensor t = Tensor::eye(r, c);
    if (opts.mix_noise > 0.0) axpy(1.0, Tensor::randn({r, c}, extras, opts.mix_noise), t);
    return t;
  };
  if (cfg.is_mea()) {
    w.w_lc_k = near_identity(cfg.component_heads(), cfg.g);
    w.w_lc_v = near_identity(cfg.component_heads(), cfg.g);
  }
  if (cfg.is_tha()) {
    w.t_qk = near_identity(cfg.g, cfg.g);
    w.t_v = near_identity(cfg.g, cfg.g);
  }
  if (cfg.is_dfa()) w.lambda = Tensor({cfg.h / 2}, cfg.lambda_init);
  if (cfg.group_norm()) w.gn_gain = Tensor(gain_shape(cfg), 1.0);
  return w;
}

void store_attention(TensorBundle& bundle, const std::string& prefix, const AttnWeights& w) {
  auto put = [&](const char* name, const Tensor& t) {
    if (!t.empty()) bundle.set(prefix + name, t);
  };
  put("wq", w.wq);
  put("wkv", w.wkv);
  put("wo", w.wo);
  put("w_lc_k", w.w_lc_k);
  put("w_lc_v", w.w_lc_v);
  put("t_qk", w.t_qk);
  put("t_v", w.t_v);
  put("lambda", w.lambda);
  put("gn_gain", w.gn_gain);
}

AttnWeights load_attention(const TensorBundle& bundle, const std::string& prefix) {
  auto opt = [&](const char* name) { return bundle.find(prefix + name).value_or(Tensor()); };
  AttnWeights w;
  w.wq = bundle.get(prefix + "wq");
  w.wkv = bundle.get(prefix + "wkv");
  w.wo = bundle.get(prefix + "wo");
  w.w_lc_k = opt("w_lc_k");
  w.w_lc_v = opt("w_lc_v");
  w.t_qk = opt("t_qk");
  w.t_v = opt("t_v");
  w.lambda = opt("lambda");
  w.gn_gain = opt("gn_gain");
  return w;
}

std::size_t group_of(std::size_t i, std::size_t h, std::size_t g) {
  if (h == 0 || g == 0) throw ContractError("group_of: h and g must be positive");
  if (i < 1 || i > h)
    throw ContractError("group_of: head index " + std::to_string(i) + " outside [1, " +
                        std::to_string(h) + "]");
  return (i * g + h - 1) / h;
}

Tensor group_selector(std::size_t h, std::size_t g) {
  Tensor e({g, h});
  for (std::size_t i = 1; i <= h; ++i) e.at(group_of(i, h, g) - 1, i - 1) = 1.0;
  return e;
}

AttnParams bind_attention(ad::Tape& tape, const AttnWeights& w, bool trainable) {
  auto bind = [&](const Tensor& t) { return t.empty() ? ad::Var{} : tape.leaf(t, trainable); };
  return AttnParams{bind(w.wq),   bind(w.wkv), bind(w.wo),     bind(w.w_lc_k), bind(w.w_lc_v),
                    bind(w.t_qk), bind(w.t_v), bind(w.lambda), bind(w.gn_gain)};
}

std::pair<ad::Var, ad::Var> project_kv(const AttnConfig& cfg, ad::Var wkv, ad::Var x,
                                       std::size_t heads) {
  const std::size_t n = x.shape().at(0);
  ad::Var kv = ad::reshape(ad::matmul(x, wkv), {n, heads, cfg.d_qk + cfg.d_v});
  return {ad::slice_last(kv, 0, cfg.d_qk), ad::slice_last(kv, cfg.d_qk, cfg.d_v)};
}

namespace {

ad::Var expand_groups(ad::Var t, std::size_t h, std::size_t groups) {
  if (groups == h) return t;
  return ad::head_mix(t, t.tape->constant(group_selector(h, groups)));
}

}  // namespace

ad::Var attention_maps(const AttnConfig& cfg, ad::Var q, ad::Var k, std::size_t groups,
                       bool logits_only) {
  ad::Var qr = ad::rope(q, cfg.rope_base);
  ad::Var kr = expand_groups(ad::rope(k, cfg.rope_base), cfg.h, groups);
  ad::Var logits = ad::scale(ad::bmm_nt(ad::swap01(qr), ad::swap01(kr)),
                             1.0 / std::sqrt(static_cast<double>(cfg.d_qk)));
  return logits_only ? logits : ad::softmax_rows(logits, true);
}

ad::Var grouped_context(const AttnConfig& cfg, ad::Var q, ad::Var k, ad::Var v,
                        std::size_t groups) {
  ad::Var a = attention_maps(cfg, q, k, groups);
  return ad::bmm(a, ad::swap01(expand_groups(v, cfg.h, groups)));
}

ad::Var project_output(const AttnConfig& cfg, const AttnParams& p, ad::Var context) {
  ad::Var concat;
  if (cfg.group_norm()) {
    const std::size_t n = context.shape().at(1);
    ad::Var normed = group_norm_heads(ad::swap01(context), p.gn_gain, cfg.gn_eps);
    concat = ad::reshape(normed, {n, cfg.h * cfg.d_v});
  } else {
    concat = ad::concat_heads(context);
  }
  return ad::matmul(concat, p.wo);
}

ad::Var attention_forward(ad::Tape& tape, const AttnConfig& cfg, const AttnParams& p, ad::Var x) {
  cfg.validate();
  switch (cfg.variant) {
    case Variant::Mea:
    case Variant::MeaNoGn: return mea_forward(tape, cfg, p, x);
    case Variant::Dfa:
    case Variant::DfaNoGn: return dfa_forward(tape, cfg, p, x);
    case Variant::Tha: return tha_forward(tape, cfg, p, x, ThaMode::Original);
    case Variant::ThaModified: return tha_forward(tape, cfg, p, x, ThaMode::Modified);
    case Variant::MhaGqa: break;
  }
  const std::size_t n = x.shape().at(0);
  ad::Var q = ad::reshape(ad::matmul(x, p.wq), {n, cfg.h, cfg.d_qk});
  auto [k, v] = project_kv(cfg, p.wkv, x, cfg.g);
  return project_output(cfg, p, grouped_context(cfg, q, k, v, cfg.g));
}

Tensor attend(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x) {
  w.check(cfg);
  require_rank(x, 2, "attend input");
  if (x.dim(1) != cfg.d_model) throw DimensionError("attend: input width differs from d_model");
  ad::Tape tape;
  AttnParams p = bind_attention(tape, w, false);
  return attention_forward(tape, cfg, p, tape.constant(x)).value();
}

}  // namespace mea
