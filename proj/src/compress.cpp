#include "mea/compress.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include "mea/error.hpp"
#include "mea/linalg.hpp"
#include "mea/variants.hpp"

namespace mea {

Tensor reshape_by_head(const Tensor& w, std::size_t heads) {
  if (w.rank() != 2 || heads == 0 || w.dim(1) % heads != 0)
    throw DimensionError("reshape_by_head: width of " + shape_str(w.shape()) +
                         " is not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dim = w.dim(0), d = w.dim(1) / heads;
  Tensor r({dim * d, heads});
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < heads; ++j)
      for (std::size_t c = 0; c < d; ++c) r.at(i * d + c, j) = w.at(i, j * d + c);
  return r;
}

Tensor unreshape_by_head(const Tensor& r, std::size_t dim) {
  if (r.rank() != 2 || dim == 0 || r.dim(0) % dim != 0)
    throw DimensionError("unreshape_by_head: " + std::to_string(r.rank() == 2 ? r.dim(0) : 0) +
                         " rows are not a multiple of " + std::to_string(dim));
  const std::size_t heads = r.dim(1), d = r.dim(0) / dim;
  Tensor w({dim, heads * d});
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < heads; ++j)
      for (std::size_t c = 0; c < d; ++c) w.at(i, j * d + c) = r.at(i * d + c, j);
  return w;
}

ProjectionCompression compress_projection(const Tensor& w, std::size_t heads,
                                          std::size_t heads_kept) {
  if (heads_kept == 0 || heads_kept > heads)
    throw ConfigError("compress_projection: need 1 <= H' <= H, got H'=" +
                      std::to_string(heads_kept) + ", H=" + std::to_string(heads));
  const Tensor r = reshape_by_head(w, heads);
  if (r.dim(0) < heads)
    throw DimensionError("compress_projection: a head block has fewer entries than there are heads");
  const SvdResult s = svd(r);
  const std::size_t rows = r.dim(0);

  ProjectionCompression out;
  Tensor u({rows, heads_kept});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < heads_kept; ++k) u.at(i, k) = s.u.at(i, k);
  out.basis = unreshape_by_head(u, w.dim(0));
  out.lc = Tensor({heads_kept, heads});
  for (std::size_t k = 0; k < heads_kept; ++k)
    for (std::size_t j = 0; j < heads; ++j) out.lc.at(k, j) = s.sigma[k] * s.vt.at(k, j);
  double sq = 0.0;
  for (std::size_t k = heads_kept; k < s.sigma.size(); ++k) {
    out.discarded_sigma.push_back(s.sigma[k]);
    sq += s.sigma[k] * s.sigma[k];
  }
  out.error = std::sqrt(sq);
  return out;
}

const LayerCompression& CompressionPlan::layer(std::size_t id) const {
  for (const auto& l : layers)
    if (l.layer == id) return l;
  throw ContractError("compression plan does not cover layer " + std::to_string(id));
}

void to_json(nlohmann::json& j, const CompressionPlan& plan) {
  j = nlohmann::json{{"H", plan.H}, {"H_prime", plan.H_prime}, {"layers", nlohmann::json::array()}};
  for (const auto& l : plan.layers)
    j["layers"].push_back({{"layer", l.layer},
                           {"k_discarded_sigma", l.k.discarded_sigma},
                           {"k_error", l.k.error},
                           {"v_discarded_sigma", l.v.discarded_sigma},
                           {"v_error", l.v.error}});
}

std::pair<Tensor, Tensor> effective_kv(const AttnConfig& cfg, const AttnWeights& w) {
  if (cfg.is_tha() || cfg.is_dfa())
    throw ConfigError("head compression supports MHA/GQA and MEA layers, not " +
                      std::string(variant_name(cfg.variant)));
  auto [wk, wv] = split_kv_weights(w.wkv, cfg.kv_heads(), cfg.d_qk, cfg.d_v);
  if (cfg.is_mea()) return {recombine_weights(w.w_lc_k, wk), recombine_weights(w.w_lc_v, wv)};
  return {std::move(wk), std::move(wv)};
}

LayerCompression plan_layer(const AttnConfig& cfg, const AttnWeights& w, std::size_t heads_kept,
                            std::size_t layer_id) {
  w.check(cfg);
  auto [wk, wv] = effective_kv(cfg, w);
  return {layer_id, compress_projection(wk, cfg.g, heads_kept),
          compress_projection(wv, cfg.g, heads_kept)};
}

std::pair<AttnConfig, AttnWeights> compressed_layer(const AttnConfig& cfg, const AttnWeights& w,
                                                    const LayerCompression& lc) {
  const std::size_t kept = lc.k.lc.dim(0);
  if (lc.k.lc.dim(1) != cfg.g || lc.v.lc.dim(0) != kept || lc.v.lc.dim(1) != cfg.g)
    throw ContractError("compression plan does not match the layer's " + std::to_string(cfg.g) +
                        " kv heads");
  AttnConfig c = cfg;
  c.variant = cfg.group_norm() ? Variant::Mea : Variant::MeaNoGn;
  c.h_prime = kept;
  AttnWeights out;
  out.wq = w.wq;
  out.wo = w.wo;
  out.wkv = fuse_kv_weights(lc.k.basis, lc.v.basis, kept, cfg.d_qk, cfg.d_v);
  out.w_lc_k = lc.k.lc;
  out.w_lc_v = lc.v.lc;
  if (c.group_norm()) out.gn_gain = w.gn_gain;
  out.check(c);
  return {c, std::move(out)};
}

Tensor apply_compressed_attention(const AttnConfig& cfg, const CompressionPlan& plan,
                                  const AttnWeights& w, const Tensor& x, std::size_t layer_id) {
  w.check(cfg);
  if (plan.H != cfg.g)
    throw ContractError("plan was built for " + std::to_string(plan.H) + " kv heads, layer has " +
                        std::to_string(cfg.g));
  auto [c, cw] = compressed_layer(cfg, w, plan.layer(layer_id));
  return attend(c, cw, x);
}

std::size_t kv_cache_bytes(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x) {
  w.check(cfg);
  const std::size_t n = x.dim(0), heads = cfg.kv_heads();
  const Tensor kv = matmul(x, w.wkv).reshaped({n, heads, cfg.d_qk + cfg.d_v});
  TensorBundle cache;
  cache.set("k", slice_last(kv, 0, cfg.d_qk));
  cache.set("v", slice_last(kv, cfg.d_qk, cfg.d_v));
  return cache.payload_bytes();
}

CompressedModel compress_model(const ModelConfig& cfg, const ModelWeights& w,
                               std::size_t heads_kept, std::vector<std::size_t> layers) {
  check_model(cfg, w);
  if (layers.empty())
    for (std::size_t l = 0; l < cfg.layers; ++l) layers.push_back(l);
  CompressedModel out{cfg, w, {}};
  std::vector<AttnConfig> per_layer;
  for (std::size_t l = 0; l < cfg.layers; ++l) per_layer.push_back(cfg.attn_for(l));
  out.plan.H_prime = heads_kept;
  for (std::size_t l : layers) {
    if (l >= cfg.layers) throw ConfigError("layer " + std::to_string(l) + " does not exist");
    const AttnConfig& a = cfg.attn_for(l);
    if (out.plan.layers.empty()) {
      out.plan.H = a.g;
      out.plan.d_k = a.d_qk;
      out.plan.d_v = a.d_v;
    }
    LayerCompression lc = plan_layer(a, w.layers[l].attn, heads_kept, l);
    auto [c, cw] = compressed_layer(a, w.layers[l].attn, lc);
    per_layer[l] = c;
    out.weights.layers[l].attn = std::move(cw);
    out.plan.layers.push_back(std::move(lc));
  }
  const bool uniform = std::all_of(per_layer.begin(), per_layer.end(), [&](const AttnConfig& a) {
    return nlohmann::json(a) == nlohmann::json(per_layer.front());
  });
  out.config.layer_attn.clear();
  if (uniform)
    out.config.attn = per_layer.front();
  else
    out.config.layer_attn = std::move(per_layer);
  check_model(out.config, out.weights);
  return out;
}

void to_json(nlohmann::json& j, const SensitivityProfile& p) {
  j = nlohmann::json{{"H", p.H}, {"H_prime", p.H_prime}, {"rows", nlohmann::json::array()}};
  for (const auto& r : p.rows)
    j["rows"].push_back({{"layer", r.layer},
                         {"baseline_ce", r.baseline_ce},
                         {"compressed_ce", r.compressed_ce},
                         {"delta", r.delta}});
}

SensitivityProfile profile_layers(const ModelConfig& cfg, const ModelWeights& w,
                                  std::span<const int> tokens, std::size_t heads_kept,
                                  std::size_t seq_len, std::size_t threads) {
  const double baseline = evaluate_loss(cfg, w, tokens, seq_len);
  SensitivityProfile p;
  p.H = cfg.attn_for(0).g;
  p.H_prime = heads_kept;
  p.rows.resize(cfg.layers);
  // Plans are validated up front so errors surface on the calling thread.
  std::vector<CompressedModel> models;
  for (std::size_t l = 0; l < cfg.layers; ++l) models.push_back(compress_model(cfg, w, heads_kept, {l}));

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t l = next++; l < cfg.layers; l = next++) {
      const double ce = evaluate_loss(models[l].config, models[l].weights, tokens, seq_len);
      p.rows[l] = {l, baseline, ce, ce - baseline};
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, cfg.layers));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return p;
}

void write_profile_csv(const std::filesystem::path& path, const SensitivityProfile& p) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write profile to '" + path.string() + "'");
  out << "layer,baseline_ce,compressed_ce,delta\n";
  out.precision(17);
  for (const auto& r : p.rows)
    out << r.layer << ',' << r.baseline_ce << ',' << r.compressed_ce << ',' << r.delta << '\n';
}

}  // namespace mea
