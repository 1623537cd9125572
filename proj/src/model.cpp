#include "mea/model.hpp"

#include <cmath>

#include "mea/error.hpp"

namespace mea {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (layers == 0 || d_model == 0 || ffn_hidden == 0 || vocab == 0 || max_seq == 0)
    fail("all sizes must be positive");
  if (!layer_attn.empty() && layer_attn.size() != layers)
    fail(std::to_string(layer_attn.size()) + " layer overrides for " + std::to_string(layers) +
         " layers");
  if (!(norm_eps >= 0.0) || !(mix_noise >= 0.0)) fail("eps and mix_noise must be non-negative");
  for (std::size_t l = 0; l < layers; ++l) {
    const AttnConfig& a = attn_for(l);
    if (a.d_model != d_model)
      fail("attention d_model " + std::to_string(a.d_model) + " differs from " +
           std::to_string(d_model));
    a.validate();
  }
}

void to_json(nlohmann::json& j, const AttnConfig& c) {
  j = nlohmann::json{{"h", c.h},
                     {"g", c.g},
                     {"h_prime", c.component_heads()},
                     {"d_qk", c.d_qk},
                     {"d_v", c.d_v},
                     {"d_model", c.d_model},
                     {"rope_base", c.rope_base},
                     {"variant", std::string(variant_name(c.variant))},
                     {"lambda_init", c.lambda_init},
                     {"use_group_norm", c.use_group_norm},
                     {"gn_eps", c.gn_eps}};
}

void from_json(const nlohmann::json& j, AttnConfig& c) {
  c.h = j.at("h").get<std::size_t>();
  c.g = j.at("g").get<std::size_t>();
  c.h_prime = j.value("h_prime", std::size_t{0});
  c.d_qk = j.at("d_qk").get<std::size_t>();
  c.d_v = j.at("d_v").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.rope_base = j.value("rope_base", 10000.0);
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.lambda_init = j.value("lambda_init", 0.5);
  c.use_group_norm = j.value("use_group_norm", false);
  c.gn_eps = j.value("gn_eps", 1e-6);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},         {"d_model", c.d_model},
                     {"attn", c.attn},             {"ffn_hidden", c.ffn_hidden},
                     {"vocab", c.vocab},           {"max_seq", c.max_seq},
                     {"norm_eps", c.norm_eps},     {"mix_noise", c.mix_noise}};
  if (!c.layer_attn.empty()) j["layer_attn"] = c.layer_attn;
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.layers = j.at("layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.attn = j.at("attn").get<AttnConfig>();
  c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.norm_eps = j.value("norm_eps", 1e-6);
  c.mix_noise = j.value("mix_noise", 0.02);
  c.layer_attn.clear();
  if (j.contains("layer_attn")) c.layer_attn = j.at("layer_attn").get<std::vector<AttnConfig>>();
}

ModelWeights init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const double dm = static_cast<double>(cfg.d_model);
  ModelWeights w;
  w.embed = Tensor::randn({cfg.vocab, cfg.d_model}, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerSlots<Tensor, AttnWeights> layer;
    layer.norm1 = Tensor({cfg.d_model}, 1.0);
    layer.attn = init_attention(cfg.attn_for(l), rng, InitOptions{cfg.mix_noise});
    layer.norm2 = Tensor({cfg.d_model}, 1.0);
    layer.w_gate = Tensor::randn({cfg.d_model, cfg.ffn_hidden}, rng, 1.0 / std::sqrt(dm));
    layer.w_up = Tensor::randn({cfg.d_model, cfg.ffn_hidden}, rng, 1.0 / std::sqrt(dm));
    layer.w_down = Tensor::randn({cfg.ffn_hidden, cfg.d_model}, rng,
                                 1.0 / std::sqrt(static_cast<double>(cfg.ffn_hidden)));
    w.layers.push_back(std::move(layer));
  }
  w.norm_f = Tensor({cfg.d_model}, 1.0);
  w.lm_head = Tensor::randn({cfg.d_model, cfg.vocab}, rng, 1.0 / std::sqrt(dm));
  return w;
}

void check_model(const ModelConfig& cfg, const ModelWeights& w) {
  cfg.validate();
  auto expect = [](const Tensor& t, const Shape& s, const std::string& name) {
    if (t.shape() != s)
      throw DimensionError("model weight '" + name + "' has shape " + shape_str(t.shape()) +
                           ", expected " + shape_str(s));
  };
  if (w.layers.size() != cfg.layers)
    throw DimensionError("model has " + std::to_string(w.layers.size()) + " layers, config says " +
                         std::to_string(cfg.layers));
  expect(w.embed, {cfg.vocab, cfg.d_model}, "embed");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& layer = w.layers[l];
    expect(layer.norm1, {cfg.d_model}, "norm1");
    expect(layer.norm2, {cfg.d_model}, "norm2");
    expect(layer.w_gate, {cfg.d_model, cfg.ffn_hidden}, "w_gate");
    expect(layer.w_up, {cfg.d_model, cfg.ffn_hidden}, "w_up");
    expect(layer.w_down, {cfg.ffn_hidden, cfg.d_model}, "w_down");
    layer.attn.check(cfg.attn_for(l));
  }
  expect(w.norm_f, {cfg.d_model}, "norm_f");
  expect(w.lm_head, {cfg.d_model, cfg.vocab}, "lm_head");
}

ModelParams bind_model(ad::Tape& tape, const ModelWeights& w, bool trainable) {
  std::vector<const Tensor*> values;
  visit_model(w, [&](const std::string&, const Tensor& t, ParamKind) { values.push_back(&t); });
  ModelParams p;
  p.layers.resize(w.layers.size());
  std::size_t k = 0;
  visit_model(p, [&](const std::string&, ad::Var& v, ParamKind) {
    const Tensor& t = *values[k++];
    v = t.empty() ? ad::Var{} : tape.leaf(t, trainable);
  });
  return p;
}

ad::Var model_logits(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& p,
                     std::span<const int> tokens) {
  if (tokens.empty() || tokens.size() > cfg.max_seq)
    throw DimensionError("model input length " + std::to_string(tokens.size()) +
                         " outside [1, " + std::to_string(cfg.max_seq) + "]");
  ad::Var x = ad::embedding(p.embed, tokens);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    ad::Var h = ad::rms_norm(x, layer.norm1, cfg.norm_eps);
    x = ad::add(x, attention_forward(tape, cfg.attn_for(l), layer.attn, h));
    ad::Var h2 = ad::rms_norm(x, layer.norm2, cfg.norm_eps);
    ad::Var act = ad::swiglu(ad::matmul(h2, layer.w_gate), ad::matmul(h2, layer.w_up));
    x = ad::add(x, ad::matmul(act, layer.w_down));
  }
  return ad::matmul(ad::rms_norm(x, p.norm_f, cfg.norm_eps), p.lm_head);
}

ad::Var window_loss(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& p,
                    std::span<const int> window) {
  if (window.size() < 2) throw DimensionError("a training window needs at least two tokens");
  const std::size_t n = window.size() - 1;
  return ad::cross_entropy(model_logits(tape, cfg, p, window.first(n)), window.subspan(1, n));
}

double evaluate_loss(const ModelConfig& cfg, const ModelWeights& w, std::span<const int> tokens,
                     std::size_t seq_len) {
  check_model(cfg, w);
  if (seq_len == 0 || seq_len > cfg.max_seq)
    throw ConfigError("evaluation length must lie in [1, max_seq]");
  const std::size_t span = seq_len + 1;
  if (tokens.size() < span) throw DataError("evaluation stream shorter than one window");
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t off = 0; off + span <= tokens.size(); off += span) {
    ad::Tape tape;
    ModelParams p = bind_model(tape, w, false);
    total += window_loss(tape, cfg, p, tokens.subspan(off, span)).value().item();
    ++windows;
  }
  return total / static_cast<double>(windows);
}

TensorBundle store_model(const ModelConfig& cfg, const ModelWeights& w) {
  check_model(cfg, w);
  TensorBundle b;
  b.attributes()["model"] = cfg;
  visit_model(w, [&](const std::string& name, const Tensor& t, ParamKind) {
    if (!t.empty()) b.set(name, t);
  });
  return b;
}

std::pair<ModelConfig, ModelWeights> load_model(const TensorBundle& bundle) {
  if (!bundle.attributes().contains("model"))
    throw DataError("bundle carries no model config attribute");
  ModelConfig cfg;
  try {
    cfg = bundle.attributes().at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model config: ") + e.what());
  }
  ModelWeights w;
  w.layers.resize(cfg.layers);
  visit_model(w, [&](const std::string& name, Tensor& t, ParamKind) {
    if (auto found = bundle.find(name)) t = std::move(*found);
  });
  check_model(cfg, w);
  return {cfg, std::move(w)};
}

std::size_t parameter_count(const ModelWeights& w) {
  std::size_t n = 0;
  visit_model(w, [&](const std::string&, const Tensor& t, ParamKind) { n += t.size(); });
  return n;
}

}  // namespace mea
