#include "mea/variants.hpp"

#include <algorithm>

#include "mea/error.hpp"

namespace mea {

Tensor group_norm_heads(const Tensor& c, const Tensor& gain, double eps) {
  require_rank(c, 3, "group_norm_heads input");
  require_rank(gain, 2, "group_norm_heads gain");
  if (gain.dim(0) != c.dim(1) || gain.dim(1) != c.dim(2))
    throw DimensionError("group_norm_heads: gain " + shape_str(gain.shape()) + " does not match " +
                         shape_str(c.shape()));
  return rms_norm(c, gain, eps);
}

ad::Var group_norm_heads(ad::Var c, ad::Var gain, double eps) {
  const Shape& cs = c.shape();
  const Shape& gs = gain.shape();
  if (cs.size() != 3 || gs.size() != 2 || gs[0] != cs[1] || gs[1] != cs[2])
    throw DimensionError("group_norm_heads: gain " + shape_str(gs) + " does not match " +
                         shape_str(cs));
  return ad::rms_norm(c, gain, eps);
}

Tensor recombine_weights(const Tensor& w_lc, const Tensor& w_comp) {
  require_rank(w_lc, 2, "recombine_weights w_lc");
  require_rank(w_comp, 2, "recombine_weights w_comp");
  const std::size_t hp = w_lc.dim(0), h = w_lc.dim(1);
  const std::size_t rows = w_comp.dim(0), cols = w_comp.dim(1);
  if (cols % hp != 0)
    throw DimensionError("recombine_weights: width " + std::to_string(cols) +
                         " is not divisible by " + std::to_string(hp) + " component heads");
  const std::size_t d = cols / hp;
  return head_mix(w_comp.reshaped({rows, hp, d}), w_lc).reshaped({rows, h * d});
}

std::pair<Tensor, Tensor> split_kv_weights(const Tensor& wkv, std::size_t heads, std::size_t dk,
                                           std::size_t dv) {
  require_rank(wkv, 2, "split_kv_weights");
  const std::size_t stride = dk + dv, rows = wkv.dim(0);
  if (wkv.dim(1) != heads * stride)
    throw DimensionError("split_kv_weights: width " + std::to_string(wkv.dim(1)) + " is not " +
                         std::to_string(heads) + " x (" + std::to_string(dk) + " + " +
                         std::to_string(dv) + ")");
  Tensor wk({rows, heads * dk}), wv({rows, heads * dv});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < heads; ++j) {
      const double* src = &wkv.at(r, j * stride);
      std::copy_n(src, dk, &wk.at(r, j * dk));
      std::copy_n(src + dk, dv, &wv.at(r, j * dv));
    }
  return {std::move(wk), std::move(wv)};
}

Tensor fuse_kv_weights(const Tensor& wk, const Tensor& wv, std::size_t heads, std::size_t dk,
                       std::size_t dv) {
  require_rank(wk, 2, "fuse_kv_weights K");
  require_rank(wv, 2, "fuse_kv_weights V");
  if (wk.dim(1) != heads * dk || wv.dim(1) != heads * dv || wk.dim(0) != wv.dim(0))
    throw DimensionError("fuse_kv_weights: " + shape_str(wk.shape()) + " and " +
                         shape_str(wv.shape()) + " do not split into " + std::to_string(heads) +
                         " heads");
  const std::size_t stride = dk + dv, rows = wk.dim(0);
  Tensor out({rows, heads * stride});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < heads; ++j) {
      std::copy_n(&wk.at(r, j * dk), dk, &out.at(r, j * stride));
      std::copy_n(&wv.at(r, j * dv), dv, &out.at(r, j * stride + dk));
    }
  return out;
}

ad::Var expand_transfer(ad::Tape& tape, ad::Var t, std::size_t h, std::size_t g) {
  if (g == h) return ad::transpose(t);
  ad::Var e = tape.constant(group_selector(h, g));
  return ad::matmul(ad::transpose(e), ad::matmul(ad::transpose(t), e));
}

namespace {

void require_family(bool ok, const char* what) {
  if (!ok) throw ConfigError(std::string(what) + ": config variant does not belong to this family");
}

ad::Var project_q(const AttnConfig& cfg, const AttnParams& p, ad::Var x) {
  return ad::reshape(ad::matmul(x, p.wq), {x.shape().at(0), cfg.h, cfg.d_qk});
}

// Applies a head-level matrix to per-head N x N maps stored as h x N x N.
ad::Var mix_maps(ad::Var maps, ad::Var m) {
  const Shape s = maps.shape();
  ad::Var flat = ad::reshape(maps, {1, s[0], s[1] * s[2]});
  ad::Var mixed = ad::head_mix(flat, m);
  return ad::reshape(mixed, {m.shape()[1], s[1], s[2]});
}

ad::Var expand_heads(ad::Tape& tape, ad::Var t, std::size_t h, std::size_t groups) {
  if (groups == h) return t;
  return ad::head_mix(t, tape.constant(group_selector(h, groups)));
}

}  // namespace

ad::Var mea_forward(ad::Tape& tape, const AttnConfig& cfg, const AttnParams& p, ad::Var x) {
  (void)tape;
  require_family(cfg.is_mea(), "mea_forward");
  ad::Var q = project_q(cfg, p, x);
  auto [k_comp, v_comp] = project_kv(cfg, p.wkv, x, cfg.component_heads());
  ad::Var k_lc = ad::head_mix(k_comp, p.w_lc_k);
  ad::Var v_lc = ad::head_mix(v_comp, p.w_lc_v);
  return project_output(cfg, p, grouped_context(cfg, q, k_lc, v_lc, cfg.g));
}

ad::Var dfa_forward(ad::Tape& tape, const AttnConfig& cfg, const AttnParams& p, ad::Var x) {
  require_family(cfg.is_dfa(), "dfa_forward");
  if (cfg.h % 2 != 0) throw ConfigError("dfa_forward: h must be even");
  const std::size_t n = x.shape().at(0);
  const std::size_t pairs = cfg.h / 2;
  ad::Var q = project_q(cfg, p, x);
  auto [k, v] = project_kv(cfg, p.wkv, x, cfg.g);
  ad::Var maps = attention_maps(cfg, q, k, cfg.g);

  Tensor pick_first({cfg.h, pairs}), pick_second({cfg.h, pairs});
  for (std::size_t d = 0; d < pairs; ++d) {
    pick_first.at(2 * d, d) = 1.0;
    pick_second.at(2 * d + 1, d) = 1.0;
  }
  ad::Var first = mix_maps(maps, tape.constant(pick_first));
  ad::Var second = mix_maps(maps, tape.constant(pick_second));
  ad::Var diff = ad::sub(first, ad::scale_blocks(second, p.lambda));

  // adjacent heads (2i-1, 2i) concatenate into one 2*d_v wide pair value
  ad::Var v_heads = expand_heads(tape, v, cfg.h, cfg.g);
  ad::Var v_pairs = ad::swap01(ad::reshape(v_heads, {n, pairs, 2 * cfg.d_v}));
  ad::Var ctx = ad::bmm(diff, v_pairs);

  ad::Var concat;
  if (cfg.group_norm()) {
    ad::Var normed = group_norm_heads(ad::swap01(ctx), p.gn_gain, cfg.gn_eps);
    concat = ad::scale(ad::reshape(normed, {n, cfg.h * cfg.d_v}), 1.0 - cfg.lambda_init);
  } else {
    concat = ad::concat_heads(ctx);
  }
  return ad::matmul(concat, p.wo);
}

ad::Var tha_forward(ad::Tape& tape, const AttnConfig& cfg, const AttnParams& p, ad::Var x,
                    ThaMode mode) {
  require_family(cfg.is_tha(), "tha_forward");
  ad::Var q = project_q(cfg, p, x);
  auto [k, v] = project_kv(cfg, p.wkv, x, cfg.g);
  ad::Var m_qk = expand_transfer(tape, p.t_qk, cfg.h, cfg.g);
  ad::Var m_v = expand_transfer(tape, p.t_v, cfg.h, cfg.g);

  if (mode == ThaMode::Original) {
    ad::Var logits = attention_maps(cfg, q, k, cfg.g, true);
    ad::Var maps = ad::softmax_rows(mix_maps(logits, m_qk), true);
    ad::Var mixed = mix_maps(maps, m_v);
    ad::Var ctx = ad::bmm(mixed, ad::swap01(expand_heads(tape, v, cfg.h, cfg.g)));
    return project_output(cfg, p, ctx);
  }
  ad::Var k_mix = ad::head_mix(expand_heads(tape, k, cfg.h, cfg.g), m_qk);
  ad::Var v_mix = ad::head_mix(expand_heads(tape, v, cfg.h, cfg.g), m_v);
  return project_output(cfg, p, grouped_context(cfg, q, k_mix, v_mix, cfg.h));
}

namespace {

template <typename F>
Tensor run_pure(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x, F&& f) {
  w.check(cfg);
  require_rank(x, 2, "attention input");
  if (x.dim(1) != cfg.d_model) throw DimensionError("attention input width differs from d_model");
  ad::Tape tape;
  AttnParams p = bind_attention(tape, w, false);
  return f(tape, p, tape.constant(x)).value();
}

}  // namespace

Tensor mea_forward(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x) {
  return run_pure(cfg, w, x, [&](ad::Tape& t, const AttnParams& p, ad::Var xv) {
    return mea_forward(t, cfg, p, xv);
  });
}

Tensor dfa_forward(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x) {
  return run_pure(cfg, w, x, [&](ad::Tape& t, const AttnParams& p, ad::Var xv) {
    return dfa_forward(t, cfg, p, xv);
  });
}

Tensor tha_forward(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x, ThaMode mode) {
  return run_pure(cfg, w, x, [&](ad::Tape& t, const AttnParams& p, ad::Var xv) {
    return tha_forward(t, cfg, p, xv, mode);
  });
}

}  // namespace mea
