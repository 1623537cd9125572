#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mea/attention.hpp"

namespace mea {

struct EquivalenceReport {
  std::string name;
  double max_abs_diff = 0.0;
  double tolerance = 0.0;
  bool passed = false;  // max_abs_diff <= tolerance
  std::size_t trials = 0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const EquivalenceReport& r);

/// How the randomized checks draw their instances. With `sweep_heads` each
/// trial picks h from {2, 4, 8} and g from {1, 2, h}; otherwise base.h and
/// base.g are used as given. Sequence length is drawn from [1, max_seq].
struct TrialSpace {
  AttnConfig base;
  bool sweep_heads = true;
  std::size_t max_seq = 8;
};

// Per-instance differences. Each takes weights of the named variant family
// and returns a max-abs difference.

/// Logits built as sum_j T[G(i),G(j)] phi(Q_i) phi(K_G(j))^T against
/// phi(Q_i) phi(HLC(T, K)_i)^T. cfg.variant must be a THA variant.
double presoftmax_rewrite_diff(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x);

/// DFA without GroupNorm against original THA with the pair-structured
/// transfer matrix built from lambda.
double dfa_as_tha_diff(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x);

/// Original post-softmax mixing with (T, W^O) against the modified
/// evaluation on transported weights (T^T, per-head pre-projected values,
/// identity output blocks). When g == h the library's original THA path is
/// compared as well.
double postsoftmax_transport_diff(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x);

EquivalenceReport check_presoftmax_rewrite(const TrialSpace& space, std::size_t trials,
                                           std::uint64_t seed);
EquivalenceReport check_dfa_as_tha(const TrialSpace& space, std::size_t trials,
                                   std::uint64_t seed);
EquivalenceReport check_postsoftmax_equivalence(const TrialSpace& space, std::size_t trials,
                                                std::uint64_t seed);

/// One plain gradient-descent step on the factored MEA parameters
/// (W_lc^K, W_lc^V, K/V projections) under an MSE loss on a random batch.
/// Returns the Frobenius norm of the exact effective-weight change minus its
/// first-order part, combined over K and V. Zero for lr == 0.
double degeneration_residual(const AttnConfig& cfg, double lr, std::uint64_t seed,
                             std::size_t seq_len = 6);

/// Least-squares slope of log(residual) against log(lr).
double degeneration_slope(const AttnConfig& cfg, const std::vector<double>& lrs,
                          std::uint64_t seed);

/// Output mismatch between the factored MEA step and the best single-matrix
/// gradient step eta * grad(W~) on the folded model, minimized over eta.
double single_matrix_mismatch(const AttnConfig& cfg, double lr, std::uint64_t seed,
                              std::size_t seq_len = 6);

enum class Suite { All, Presoftmax, DfaTha, Postsoftmax, Degeneration };
Suite parse_suite(const std::string& name);

/// Runs a suite with the CLI defaults; degeneration reports the slope
/// deviation from 2 against a 0.1 tolerance.
std::vector<EquivalenceReport> run_suite(Suite suite, std::size_t trials, std::uint64_t seed);

}  // namespace mea
