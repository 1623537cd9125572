#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mea/model.hpp"

namespace mea {

/// Column j is the Dim x d_k block of head j flattened row-major:
/// out[i * d_k + c][j] = w[i][j * d_k + c]. w is Dim x (heads * d_k).
Tensor reshape_by_head(const Tensor& w, std::size_t heads);
/// Inverse of reshape_by_head; r is (dim * d_k) x heads.
Tensor unreshape_by_head(const Tensor& r, std::size_t dim);

struct ProjectionCompression {
  Tensor basis;  // Dim x (H' * d), the projection of the cached virtual heads
  Tensor lc;     // H' x H, Sigma_H' * V_H'^T
  std::vector<double> discarded_sigma;
  double error = 0.0;  // sqrt(sum of discarded sigma^2)
};

/// Truncated SVD of reshape_by_head(w): recombine_weights(lc, basis) is the
/// best head-rank-H' approximation of w in Frobenius norm.
ProjectionCompression compress_projection(const Tensor& w, std::size_t heads,
                                          std::size_t heads_kept);

struct LayerCompression {
  std::size_t layer = 0;
  ProjectionCompression k, v;
};

struct CompressionPlan {
  std::size_t H = 0;        // original kv heads
  std::size_t H_prime = 0;  // retained virtual heads
  std::size_t d_k = 0, d_v = 0;
  std::vector<LayerCompression> layers;

  const LayerCompression& layer(std::size_t id) const;
};

void to_json(nlohmann::json& j, const CompressionPlan& plan);  // sigmas and errors only

/// The effective (folded) K and V projections of a layer: Dim x (H * d).
/// MEA layers are folded through their W_lc first. THA and DFA are rejected.
std::pair<Tensor, Tensor> effective_kv(const AttnConfig& cfg, const AttnWeights& w);

/// Plans compression of one attention layer to `heads_kept` virtual heads.
LayerCompression plan_layer(const AttnConfig& cfg, const AttnWeights& w, std::size_t heads_kept,
                            std::size_t layer_id = 0);

/// The compressed layer as an MEA layer with h' = H' and W_lc = lc
/// (GroupNorm kept iff the source layer had it).
std::pair<AttnConfig, AttnWeights> compressed_layer(const AttnConfig& cfg, const AttnWeights& w,
                                                    const LayerCompression& lc);

/// Runs the compressed layer: K/V of H' virtual heads, expanded through lc,
/// RoPE after expansion, then standard attention.
Tensor apply_compressed_attention(const AttnConfig& cfg, const CompressionPlan& plan,
                                  const AttnWeights& w, const Tensor& x, std::size_t layer_id = 0);

/// Bytes of serialized per-token K/V cache tensors (N x kv_heads x d) the
/// layer would store for input x.
std::size_t kv_cache_bytes(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x);

/// Compresses the listed layers (all when empty) and returns the new model.
struct CompressedModel {
  ModelConfig config;
  ModelWeights weights;
  CompressionPlan plan;
};
CompressedModel compress_model(const ModelConfig& cfg, const ModelWeights& w,
                               std::size_t heads_kept, std::vector<std::size_t> layers = {});

struct SensitivityRow {
  std::size_t layer = 0;
  double baseline_ce = 0.0;
  double compressed_ce = 0.0;
  double delta = 0.0;
};

struct SensitivityProfile {
  std::size_t H = 0, H_prime = 0;
  std::vector<SensitivityRow> rows;  // sorted by layer
};

void to_json(nlohmann::json& j, const SensitivityProfile& p);

/// Compresses one layer at a time and evaluates held-out cross-entropy.
/// Layers are independent, so up to `threads` are evaluated concurrently;
/// the result does not depend on the thread count.
SensitivityProfile profile_layers(const ModelConfig& cfg, const ModelWeights& w,
                                  std::span<const int> tokens, std::size_t heads_kept,
                                  std::size_t seq_len, std::size_t threads = 1);

void write_profile_csv(const std::filesystem::path& path, const SensitivityProfile& p);

}  // namespace mea
