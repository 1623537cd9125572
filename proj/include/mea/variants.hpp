#pragma once

#include "mea/attention.hpp"

namespace mea {

enum class ThaMode { Original, Modified };

/// RMSNorm of each head's d-vector at each position, times a per-(head,
/// channel) gain. c is N x h x d, gain is h x d.
Tensor group_norm_heads(const Tensor& c, const Tensor& gain, double eps);
ad::Var group_norm_heads(ad::Var c, ad::Var gain, double eps);

/// Head-wise recombination W_lc (x) W_comp: head j block of the result is
/// sum_i w_lc[i, j] * (head i block of w_comp). w_lc is h' x h, w_comp is
/// d_model x (h' * d); the result is d_model x (h * d) and satisfies
/// x * result == head_mix(x * w_comp, w_lc) for every x.
Tensor recombine_weights(const Tensor& w_lc, const Tensor& w_comp);

// Tape-level forwards. Each expects cfg.variant to belong to its family.
ad::Var mea_forward(ad::Tape& tape, const AttnConfig& cfg, const AttnParams& p, ad::Var x);
ad::Var dfa_forward(ad::Tape& tape, const AttnConfig& cfg, const AttnParams& p, ad::Var x);
ad::Var tha_forward(ad::Tape& tape, const AttnConfig& cfg, const AttnParams& p, ad::Var x,
                    ThaMode mode);

// Gradient-free evaluations.
Tensor mea_forward(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x);
Tensor dfa_forward(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x);
Tensor tha_forward(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x, ThaMode mode);

/// Splits a fused [K_j, V_j]-per-head projection into its K part
/// (rows x heads*dk) and V part (rows x heads*dv).
std::pair<Tensor, Tensor> split_kv_weights(const Tensor& wkv, std::size_t heads, std::size_t dk,
                                           std::size_t dv);
Tensor fuse_kv_weights(const Tensor& wk, const Tensor& wv, std::size_t heads, std::size_t dk,
                       std::size_t dv);

/// h x h matrix M with M[j, i] = t[G(i), G(j)], i.e. the head-level weights
/// realizing sum_j t[G(i), G(j)] * X_j as head_mix(X, M).
ad::Var expand_transfer(ad::Tape& tape, ad::Var t, std::size_t h, std::size_t g);

}  // namespace mea
