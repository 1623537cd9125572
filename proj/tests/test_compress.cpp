#include <gtest/gtest.h>

#include <cmath>

#include "mea/compress.hpp"
#include "mea/error.hpp"
#include "mea/linalg.hpp"
#include "mea/variants.hpp"

using namespace mea;

namespace {

AttnConfig layer_config(Variant v = Variant::MhaGqa, std::size_t h = 4, std::size_t g = 4) {
  AttnConfig cfg;
  cfg.h = h;
  cfg.g = g;
  cfg.d_qk = 4;
  cfg.d_v = 6;
  cfg.d_model = 12;
  cfg.variant = v;
  return cfg;
}

// Folds the truncated reconstruction straight from the SVD of the reshaped
// matrix, without going through basis/lc.
Tensor truncated(const Tensor& w, std::size_t heads, std::size_t kept) {
  return unreshape_by_head(svd_reconstruct(svd(reshape_by_head(w, heads)), kept), w.dim(0));
}

AttnWeights folded_weights(const AttnConfig& cfg, const AttnWeights& w, std::size_t kept) {
  auto [wk, wv] = split_kv_weights(w.wkv, cfg.g, cfg.d_qk, cfg.d_v);
  AttnWeights out = w;
  out.wkv = fuse_kv_weights(truncated(wk, cfg.g, kept), truncated(wv, cfg.g, kept), cfg.g,
                            cfg.d_qk, cfg.d_v);
  return out;
}

ModelConfig toy_model() {
  ModelConfig m;
  m.layers = 4;
  m.d_model = 16;
  m.ffn_hidden = 32;
  m.vocab = 64;
  m.max_seq = 16;
  m.attn = layer_config();
  m.attn.d_model = 16;
  return m;
}

}  // namespace

TEST(ReshapeByHead, IndexFormulaAndRoundTrip) {
  Rng rng(1);
  Tensor w = Tensor::randn({4, 6}, rng);
  Tensor r = reshape_by_head(w, 3);
  ASSERT_EQ(r.shape(), (Shape{8, 3}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(r.at(i * 2 + c, j), w.at(i, j * 2 + c));
  EXPECT_EQ(unreshape_by_head(r, 4), w);
  Tensor one = reshape_by_head(w, 1);
  for (std::size_t k = 0; k < w.size(); ++k) EXPECT_EQ(one[k], w[k]);
  EXPECT_THROW(reshape_by_head(w, 4), DimensionError);
}

TEST(CompressProjection, FullRankIsLossless) {
  Rng rng(2);
  Tensor w = Tensor::randn({12, 16}, rng);
  ProjectionCompression c = compress_projection(w, 4, 4);
  EXPECT_LT(c.error, 1e-8);
  EXPECT_LT(max_abs_diff(recombine_weights(c.lc, c.basis), w), 1e-8);
  EXPECT_THROW(compress_projection(w, 4, 5), ConfigError);
  EXPECT_THROW(compress_projection(w, 4, 0), ConfigError);
}

TEST(CompressProjection, DuplicatedHeadsCompressToHalf) {
  Rng rng(3);
  Tensor block = Tensor::randn({12, 4}, rng);
  Tensor w({12, 8});
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 4; ++c) w.at(i, c) = w.at(i, 4 + c) = block.at(i, c);
  ProjectionCompression c = compress_projection(w, 2, 1);
  EXPECT_LT(c.error, 1e-8);
  EXPECT_LT(frobenius_norm(sub(recombine_weights(c.lc, c.basis), w)), 1e-8);
}

TEST(CompressProjection, ErrorIsDiscardedSigmaAndMonotone) {
  Rng rng(4);
  Tensor w = Tensor::randn({12, 16}, rng);
  double previous = INFINITY;
  for (std::size_t kept = 1; kept <= 4; ++kept) {
    ProjectionCompression c = compress_projection(w, 4, kept);
    const double actual = frobenius_norm(sub(recombine_weights(c.lc, c.basis), w));
    EXPECT_NEAR(actual, c.error, 1e-8);
    EXPECT_EQ(c.discarded_sigma.size(), 4 - kept);
    EXPECT_LE(c.error, previous);
    previous = c.error;
    EXPECT_LT(max_abs_diff(recombine_weights(c.lc, c.basis), truncated(w, 4, kept)), 1e-10);
  }
  // discarded sigma at H'=2 are the two smallest singular values
  ProjectionCompression c = compress_projection(w, 4, 2);
  const SvdResult s = svd(reshape_by_head(w, 4));
  EXPECT_NEAR(c.error, std::hypot(s.sigma[2], s.sigma[3]), 1e-12);
}

TEST(CompressedAttention, MatchesUncompressedAndFoldedOracle) {
  const AttnConfig cfg = layer_config();
  Rng rng(5);
  AttnWeights w = init_attention(cfg, rng);
  Tensor x = Tensor::randn({7, cfg.d_model}, rng);
  const Tensor full = attend(cfg, w, x);
  for (std::size_t kept : {4u, 3u, 2u, 1u}) {
    CompressionPlan plan{4, kept, cfg.d_qk, cfg.d_v, {plan_layer(cfg, w, kept)}};
    const Tensor y = apply_compressed_attention(cfg, plan, w, x);
    if (kept == 4) {
      EXPECT_LT(max_abs_diff(y, full), 1e-8);
    }
    EXPECT_LT(max_abs_diff(y, attend(cfg, folded_weights(cfg, w, kept), x)), 1e-10) << kept;
  }
}

TEST(CompressedAttention, DuplicatedHeadsExactAtHalf) {
  const AttnConfig cfg = layer_config();
  Rng rng(6);
  AttnWeights w = init_attention(cfg, rng);
  auto [wk, wv] = split_kv_weights(w.wkv, 4, cfg.d_qk, cfg.d_v);
  for (std::size_t i = 0; i < cfg.d_model; ++i) {
    for (std::size_t c = 0; c < cfg.d_qk; ++c) {
      wk.at(i, 1 * cfg.d_qk + c) = wk.at(i, c);
      wk.at(i, 3 * cfg.d_qk + c) = wk.at(i, 2 * cfg.d_qk + c);
    }
    for (std::size_t c = 0; c < cfg.d_v; ++c) {
      wv.at(i, 1 * cfg.d_v + c) = wv.at(i, c);
      wv.at(i, 3 * cfg.d_v + c) = wv.at(i, 2 * cfg.d_v + c);
    }
  }
  w.wkv = fuse_kv_weights(wk, wv, 4, cfg.d_qk, cfg.d_v);
  Tensor x = Tensor::randn({5, cfg.d_model}, rng);
  CompressionPlan plan{4, 2, cfg.d_qk, cfg.d_v, {plan_layer(cfg, w, 2)}};
  EXPECT_LT(max_abs_diff(apply_compressed_attention(cfg, plan, w, x), attend(cfg, w, x)), 1e-8);
}

TEST(CompressedAttention, CacheBytesHalve) {
  const AttnConfig cfg = layer_config();
  Rng rng(7);
  AttnWeights w = init_attention(cfg, rng);
  Tensor x = Tensor::randn({9, cfg.d_model}, rng);
  auto [c, cw] = compressed_layer(cfg, w, plan_layer(cfg, w, 2));
  const std::size_t base = kv_cache_bytes(cfg, w, x);
  EXPECT_EQ(base, 9u * 4u * (4u + 6u) * sizeof(double));
  EXPECT_EQ(2 * kv_cache_bytes(c, cw, x), base);
  EXPECT_EQ(c.variant, Variant::MeaNoGn);
  EXPECT_EQ(c.component_heads(), 2u);
}

TEST(CompressedAttention, SourcesAndRejections) {
  Rng rng(8);
  // MEA source is folded first; GroupNorm is kept.
  AttnConfig mea = layer_config(Variant::Mea, 4, 4);
  mea.h_prime = 3;
  AttnWeights w = init_attention(mea, rng, InitOptions{0.3});
  Tensor x = Tensor::randn({6, mea.d_model}, rng);
  auto [c, cw] = compressed_layer(mea, w, plan_layer(mea, w, 3));
  EXPECT_EQ(c.variant, Variant::Mea);
  EXPECT_LT(max_abs_diff(attend(c, cw, x), attend(mea, w, x)), 1e-8);

  AttnConfig gqa = layer_config(Variant::MhaGqa, 4, 2);
  AttnWeights wg = init_attention(gqa, rng);
  auto [cg, cwg] = compressed_layer(gqa, wg, plan_layer(gqa, wg, 1));
  EXPECT_LT(max_abs_diff(attend(cg, cwg, x), attend(gqa, folded_weights(gqa, wg, 1), x)), 1e-10);

  for (Variant v : {Variant::Tha, Variant::ThaModified, Variant::Dfa, Variant::DfaNoGn}) {
    AttnConfig bad = layer_config(v);
    EXPECT_THROW(plan_layer(bad, init_attention(bad, rng), 2), ConfigError);
  }
  CompressionPlan plan{2, 1, 4, 6, {plan_layer(gqa, wg, 1)}};
  EXPECT_THROW(apply_compressed_attention(layer_config(), plan, init_attention(layer_config(), rng), x),
               ContractError);
}

TEST(ProfileLayers, FullRankDeltasVanish) {
  ModelConfig cfg = toy_model();
  Rng rng(9);
  ModelWeights w = init_model(cfg, rng);
  std::vector<int> toks(200);
  for (std::size_t i = 0; i < toks.size(); ++i) toks[i] = static_cast<int>((i * 7 + i / 5) % 64);
  SensitivityProfile p = profile_layers(cfg, w, toks, 4, 15);
  ASSERT_EQ(p.rows.size(), 4u);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(p.rows[l].layer, l);
    EXPECT_LT(std::abs(p.rows[l].delta), 1e-6);
    EXPECT_EQ(p.rows[l].baseline_ce, p.rows[0].baseline_ce);
  }
}

TEST(ProfileLayers, HalfHeadsMatchFoldedWeightFile) {
  ModelConfig cfg = toy_model();
  Rng rng(10);
  ModelWeights w = init_model(cfg, rng);
  std::vector<int> toks(300);
  for (std::size_t i = 0; i < toks.size(); ++i) toks[i] = static_cast<int>((i * i + 3 * i) % 64);
  SensitivityProfile p = profile_layers(cfg, w, toks, 2, 15);
  SensitivityProfile threaded = profile_layers(cfg, w, toks, 2, 15, 3);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    ModelWeights folded = w;
    folded.layers[l].attn = folded_weights(cfg.attn, w.layers[l].attn, 2);
    auto [cfg2, w2] =
        load_model(TensorBundle::deserialize(store_model(cfg, folded).serialize()));
    const double oracle = evaluate_loss(cfg2, w2, toks, 15);
    EXPECT_NEAR(p.rows[l].compressed_ce, oracle, 1e-6) << "layer " << l;
    EXPECT_TRUE(std::isfinite(p.rows[l].delta));
    EXPECT_NE(p.rows[l].delta, 0.0);
    EXPECT_EQ(threaded.rows[l].compressed_ce, p.rows[l].compressed_ce);
  }
}

TEST(CompressModel, AllLayersUniformConfig) {
  ModelConfig cfg = toy_model();
  Rng rng(11);
  ModelWeights w = init_model(cfg, rng);
  CompressedModel all = compress_model(cfg, w, 2);
  EXPECT_TRUE(all.config.layer_attn.empty());
  EXPECT_EQ(all.config.attn.variant, Variant::MeaNoGn);
  EXPECT_EQ(all.plan.layers.size(), 4u);
  CompressedModel one = compress_model(cfg, w, 2, {1});
  ASSERT_EQ(one.config.layer_attn.size(), 4u);
  EXPECT_EQ(one.config.layer_attn[0].variant, Variant::MhaGqa);
  auto [cfg2, w2] = load_model(TensorBundle::deserialize(store_model(one.config, one.weights).serialize()));
  EXPECT_EQ(cfg2.layer_attn.size(), 4u);
  EXPECT_THROW(compress_model(cfg, w, 2, {7}), ConfigError);
}
