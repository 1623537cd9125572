#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mea {

struct LossPoint {
  double tokens = 0.0;
  double loss = 0.0;
};

struct LossCurve {
  std::vector<LossPoint> points;  // tokens strictly increasing
  double lr = 0.0;
  std::string label;
  std::uint64_t seed = 0;

  /// Throws DataError on non-positive/non-increasing tokens or non-finite losses.
  void validate() const;
};

/// Reads a CSV with at least `tokens` and `loss` columns (the training
/// curve format step,tokens,loss,lr is accepted as is).
LossCurve read_curve_csv(const std::filesystem::path& path);

/// L(D) = (d_c / D)^alpha_d + l_0. log_d_c is kept because d_c can
/// overflow for tiny alpha.
struct ScalingFit {
  double d_c = 0.0;
  double log_d_c = 0.0;
  double alpha_d = 0.0;
  double l_0 = 0.0;
  double rmse = 0.0;
  bool converged = false;
};

void to_json(nlohmann::json& j, const ScalingFit& f);

struct FitOptions {
  std::size_t grid = 200;  // l_0 candidates in [0, min loss)
  double tolerance = 1e-12;  // relative SSE change that ends the polish
  std::size_t max_iterations = 5000;
};

/// Grid over l_0 with a log-linear regression at each candidate, golden
/// section refinement of l_0, then a damped Gauss-Newton polish of all
/// three parameters in loss space.
ScalingFit fit_power_law(const LossCurve& curve, const FitOptions& opts = {});

/// Throws ContractError for an unconverged fit.
double extrapolate(const ScalingFit& fit, double tokens);

/// Index i >= window is a spike when loss[i] > median(loss[i-window, i)) *
/// (1 + threshold) and no later loss returns to that median or below.
/// Once flagged, following points that still meet the first condition
/// belong to the same episode and are not reported again.
std::vector<std::size_t> detect_spike(const LossCurve& curve, std::size_t window = 16,
                                      double threshold = 0.15);

struct SelectionOptions {
  std::size_t window = 16;
  double threshold = 0.15;
  std::optional<double> horizon;  // default: 10x the largest observed tokens
  FitOptions fit;
};

struct CurveReport {
  std::string label;
  double lr = 0.0;
  std::vector<std::size_t> spikes;
  std::optional<ScalingFit> fit;
  std::optional<double> horizon_loss;
  std::vector<std::string> warnings;
};

struct LrSelection {
  double lr = 0.0;
  std::string label;  // curve that won the tie-break at the chosen lr
  double horizon = 0.0;
  std::vector<CurveReport> reports;
};

void to_json(nlohmann::json& j, const CurveReport& r);
void to_json(nlohmann::json& j, const LrSelection& s);

/// 10x the largest observed tokens.
double default_horizon(const std::vector<LossCurve>& curves);

/// Spikes, fit, extrapolated loss and warnings for one curve.
CurveReport report_curve(const LossCurve& curve, double horizon, const SelectionOptions& opts = {});

/// The selection rule on precomputed reports (see select_lr).
LrSelection choose_lr(std::vector<CurveReport> reports, double horizon);

/// Drops every lr with a spiking curve and picks the largest surviving lr;
/// several curves at that lr are ranked by extrapolated loss at the horizon.
/// Throws DataError for fewer than two distinct lrs and SelectionError
/// (message lists every lr and its spikes) when all of them spike.
LrSelection select_lr(const std::vector<LossCurve>& curves, const SelectionOptions& opts = {});

/// Synthetic curve from the law, with optional multiplicative Gaussian
/// noise of relative size `noise`.
LossCurve synthetic_curve(double d_c, double alpha, double l_0, const std::vector<double>& tokens,
                          double noise = 0.0, std::uint64_t seed = 0);

/// `count` points log-spaced over [lo, hi].
std::vector<double> log_space(double lo, double hi, std::size_t count);

/// Four learning rates: the smallest is stable but barely moves (a poor
/// fit), the two middle ones follow the law, the largest spikes and never
/// recovers.
std::vector<LossCurve> four_lr_scenario(std::uint64_t seed = 0);

}  // namespace mea
