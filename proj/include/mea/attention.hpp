#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "mea/autodiff.hpp"
#include "mea/bundle.hpp"
#include "mea/tensor.hpp"

namespace mea {

enum class Variant { MhaGqa, Tha, ThaModified, Dfa, DfaNoGn, Mea, MeaNoGn };

std::string_view variant_name(Variant v);
/// Accepts the CLI spellings: mha, gqa, mqa, tha, tha-mod, dfa, dfa-nogn, mea, mea-nogn.
Variant parse_variant(std::string_view name);

struct AttnConfig {
  std::size_t h = 4;        // query heads
  std::size_t g = 4;        // key-value groups
  std::size_t h_prime = 0;  // MEA component heads; 0 means "same as g"
  std::size_t d_qk = 8;
  std::size_t d_v = 8;
  std::size_t d_model = 32;
  double rope_base = 10000.0;
  Variant variant = Variant::MhaGqa;
  double lambda_init = 0.5;
  /// Extra per-head GroupNorm for MHA/THA ("Transformer + GroupNorm").
  /// MEA and DFA decide GroupNorm from the variant itself.
  bool use_group_norm = false;
  double gn_eps = 1e-6;

  /// Throws ConfigError on violated invariants.
  void validate() const;
  /// Heads stored in the fused KV projection.
  std::size_t kv_heads() const;
  std::size_t component_heads() const { return h_prime == 0 ? g : h_prime; }
  bool group_norm() const;
  bool is_mea() const { return variant == Variant::Mea || variant == Variant::MeaNoGn; }
  bool is_dfa() const { return variant == Variant::Dfa || variant == Variant::DfaNoGn; }
  bool is_tha() const { return variant == Variant::Tha || variant == Variant::ThaModified; }
};

/// Projection weights plus the variant-specific extras. Extras that a
/// variant does not use stay empty.
struct AttnWeights {
  Tensor wq;       // d_model x (h * d_qk)
  Tensor wkv;      // d_model x (kv_heads * (d_qk + d_v)), [K_j, V_j] fused per group
  Tensor wo;       // (h * d_v) x d_model
  Tensor w_lc_k;   // h' x g (MEA)
  Tensor w_lc_v;   // h' x g (MEA)
  Tensor t_qk;     // g x g (THA)
  Tensor t_v;      // g x g (THA)
  Tensor lambda;   // h / 2 (DFA)
  Tensor gn_gain;  // h x d_v, or (h/2) x (2 d_v) for DFA

  /// Throws DimensionError when a shape disagrees with `cfg`.
  void check(const AttnConfig& cfg) const;
};

struct InitOptions {
  /// Std-dev of the perturbation added to identity-initialized mixing matrices.
  double mix_noise = 0.02;
};

/// Projections ~ Normal(0, 1/sqrt(d_model)); mixing matrices identity plus
/// noise; lambda = lambda_init; GroupNorm gains = 1. Exactly three
/// projection draws plus one fork draw are taken from `rng` regardless of
/// variant, so variants sharing a seed share their projections.
AttnWeights init_attention(const AttnConfig& cfg, Rng& rng, const InitOptions& opts = {});

/// Canonical bundle names: wq, wkv, wo, w_lc_k, w_lc_v, t_qk, t_v, lambda, gn_gain.
void store_attention(TensorBundle& bundle, const std::string& prefix, const AttnWeights& w);
AttnWeights load_attention(const TensorBundle& bundle, const std::string& prefix);

/// G(i) = ceil(i * g / h) with 1-based i and result. Throws ContractError
/// when i is outside [1, h].
std::size_t group_of(std::size_t i, std::size_t h, std::size_t g);

/// g x h matrix with E[G(i)-1, i-1] = 1: head_mix with it repeats each group
/// for its query heads.
Tensor group_selector(std::size_t h, std::size_t g);

/// Tape handles for an AttnWeights set.
struct AttnParams {
  ad::Var wq, wkv, wo, w_lc_k, w_lc_v, t_qk, t_v, lambda, gn_gain;
};

AttnParams bind_attention(ad::Tape& tape, const AttnWeights& w, bool trainable);

/// Splits x * wkv into K (N x heads x d_qk) and V (N x heads x d_v).
std::pair<ad::Var, ad::Var> project_kv(const AttnConfig& cfg, ad::Var wkv, ad::Var x,
                                       std::size_t heads);

/// Causal grouped attention: q is N x h x d_qk, k and v carry `groups` heads.
/// RoPE is applied to q and k. Returns the head-major context h x N x d_v.
ad::Var grouped_context(const AttnConfig& cfg, ad::Var q, ad::Var k, ad::Var v,
                        std::size_t groups);

/// Per-head attention maps softmax(phi(Q_i) phi(K_G(i))^T / sqrt(d_qk)) as
/// h x N x N (pre-softmax logits when `logits_only`).
ad::Var attention_maps(const AttnConfig& cfg, ad::Var q, ad::Var k, std::size_t groups,
                       bool logits_only = false);

/// Applies the optional per-head GroupNorm and W^O to a head-major context.
ad::Var project_output(const AttnConfig& cfg, const AttnParams& p, ad::Var context);

/// Full attention layer on the tape; dispatches on cfg.variant.
ad::Var attention_forward(ad::Tape& tape, const AttnConfig& cfg, const AttnParams& p, ad::Var x);

/// Attention(X) = Concat(C_1..C_h) W^O for any variant, evaluated without
/// gradients. x is N x d_model; the causal mask is always applied.
Tensor attend(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x);

}  // namespace mea
