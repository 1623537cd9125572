#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mea/attention.hpp"

namespace mea {

/// Pre-norm decoder: token embedding, `layers` x [RMSNorm -> attention ->
/// residual, RMSNorm -> SwiGLU FFN -> residual], final RMSNorm, untied head.
struct ModelConfig {
  std::size_t layers = 4;
  std::size_t d_model = 64;
  AttnConfig attn;  // attn.d_model must equal d_model
  std::size_t ffn_hidden = 128;
  std::size_t vocab = 256;
  std::size_t max_seq = 128;
  double norm_eps = 1e-6;
  /// Perturbation of identity-initialized mixing matrices at init.
  double mix_noise = 0.02;
  /// Per-layer attention overrides (empty: every layer uses `attn`). Set
  /// when single layers are swapped, e.g. by head compression.
  std::vector<AttnConfig> layer_attn;

  const AttnConfig& attn_for(std::size_t layer) const {
    return layer_attn.empty() ? attn : layer_attn.at(layer);
  }
  void validate() const;
};

void to_json(nlohmann::json& j, const AttnConfig& c);
void from_json(const nlohmann::json& j, AttnConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <class T, class A>
struct LayerSlots {
  T norm1;
  A attn;
  T norm2;
  T w_gate, w_up, w_down;
};

template <class T, class A>
struct ModelSlots {
  T embed;
  std::vector<LayerSlots<T, A>> layers;
  T norm_f;
  T lm_head;
};

using ModelWeights = ModelSlots<Tensor, AttnWeights>;
using ModelParams = ModelSlots<ad::Var, AttnParams>;

enum class ParamKind { Matrix, Gain, Mixing, Lambda };

/// Visits every parameter slot in a fixed order with (name, slot, kind).
/// Works for both ModelWeights and ModelParams; empty attention extras are
/// visited too and must be skipped by the caller.
template <class M, class F>
void visit_model(M& m, F&& f) {
  f(std::string("embed"), m.embed, ParamKind::Matrix);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& layer = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "norm1", layer.norm1, ParamKind::Gain);
    f(p + "attn.wq", layer.attn.wq, ParamKind::Matrix);
    f(p + "attn.wkv", layer.attn.wkv, ParamKind::Matrix);
    f(p + "attn.wo", layer.attn.wo, ParamKind::Matrix);
    f(p + "attn.w_lc_k", layer.attn.w_lc_k, ParamKind::Mixing);
    f(p + "attn.w_lc_v", layer.attn.w_lc_v, ParamKind::Mixing);
    f(p + "attn.t_qk", layer.attn.t_qk, ParamKind::Mixing);
    f(p + "attn.t_v", layer.attn.t_v, ParamKind::Mixing);
    f(p + "attn.lambda", layer.attn.lambda, ParamKind::Lambda);
    f(p + "attn.gn_gain", layer.attn.gn_gain, ParamKind::Gain);
    f(p + "norm2", layer.norm2, ParamKind::Gain);
    f(p + "ffn.w_gate", layer.w_gate, ParamKind::Matrix);
    f(p + "ffn.w_up", layer.w_up, ParamKind::Matrix);
    f(p + "ffn.w_down", layer.w_down, ParamKind::Matrix);
  }
  f(std::string("norm_f"), m.norm_f, ParamKind::Gain);
  f(std::string("lm_head"), m.lm_head, ParamKind::Matrix);
}

/// Embedding ~ Normal(0, 1); projections ~ Normal(0, 1/sqrt(fan_in)); gains 1.
/// Draw order is fixed and independent of the attention variant, so
/// variants with equal projection shapes share their weights under a seed.
ModelWeights init_model(const ModelConfig& cfg, Rng& rng);

void check_model(const ModelConfig& cfg, const ModelWeights& w);

/// Leaves for every non-empty weight, in visit order.
ModelParams bind_model(ad::Tape& tape, const ModelWeights& w, bool trainable);

/// Logits (N x vocab) for one token window.
ad::Var model_logits(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& p,
                     std::span<const int> tokens);

/// Mean next-token cross-entropy over one window: predicts tokens[1..] from tokens[..N-1].
ad::Var window_loss(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& p,
                    std::span<const int> window);

/// Mean cross-entropy over consecutive non-overlapping windows of
/// `seq_len + 1` tokens (a trailing partial window is dropped).
double evaluate_loss(const ModelConfig& cfg, const ModelWeights& w, std::span<const int> tokens,
                     std::size_t seq_len);

/// Bundle with the model config in its attributes and tensors named as in visit_model.
TensorBundle store_model(const ModelConfig& cfg, const ModelWeights& w);
std::pair<ModelConfig, ModelWeights> load_model(const TensorBundle& bundle);

std::size_t parameter_count(const ModelWeights& w);

}  // namespace mea
