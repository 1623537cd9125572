#include "mea/scaling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <random>
#include <sstream>

#include "mea/error.hpp"

namespace mea {

void LossCurve::validate() const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!(p.tokens > 0.0) || !std::isfinite(p.tokens))
      throw DataError("curve '" + label + "': token count at point " + std::to_string(i) +
                      " must be positive");
    if (i > 0 && !(p.tokens > points[i - 1].tokens))
      throw DataError("curve '" + label + "': tokens must be strictly increasing (point " +
                      std::to_string(i) + ")");
    if (!std::isfinite(p.loss))
      throw DataError("curve '" + label + "': non-finite loss at point " + std::to_string(i));
  }
}

LossCurve read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open curve file '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("curve file '" + path.string() + "' is empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      header.push_back(cell);
    }
  }
  auto column = [&](const std::string& name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const auto tc = column("tokens"), lc = column("loss"), rc = column("lr");
  if (tc < 0 || lc < 0)
    throw DataError("curve file '" + path.string() + "' needs 'tokens' and 'loss' columns");

  LossCurve curve;
  curve.label = path.stem().string();
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    auto number = [&](std::ptrdiff_t c) {
      if (static_cast<std::size_t>(c) >= cells.size())
        throw DataError(path.string() + ":" + std::to_string(row) + ": missing column");
      try {
        return std::stod(cells[static_cast<std::size_t>(c)]);
      } catch (const std::exception&) {
        throw DataError(path.string() + ":" + std::to_string(row) + ": not a number: '" +
                        cells[static_cast<std::size_t>(c)] + "'");
      }
    };
    curve.points.push_back({number(tc), number(lc)});
    // Training curves log the scheduled lr per step; its peak is the run's lr.
    if (rc >= 0) curve.lr = std::max(curve.lr, number(rc));
  }
  curve.validate();
  return curve;
}

void to_json(nlohmann::json& j, const ScalingFit& f) {
  j = nlohmann::json{{"d_c", f.d_c},         {"log_d_c", f.log_d_c}, {"alpha_d", f.alpha_d},
                     {"l_0", f.l_0},         {"rmse", f.rmse},       {"converged", f.converged}};
}

namespace {

constexpr double kMinAlpha = 1e-6;

struct Params {
  double l0, alpha, log_dc;
};

double predict(const Params& p, double log_d) { return std::exp(p.alpha * (p.log_dc - log_d)) + p.l0; }

double sse(const Params& p, const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = predict(p, x[i]) - y[i];
    s += r * r;
  }
  return s;
}

// Log-linear regression of log(L - l0) on log D for a fixed floor.
Params profile(double l0, const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  std::vector<double> z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    z[i] = std::log(y[i] - l0);
    mx += x[i];
    my += z[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (z[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  const double alpha = std::max(kMinAlpha, -sxy / sxx);
  const double intercept = my + alpha * mx;  // z = intercept - alpha * x
  return {l0, alpha, intercept / alpha};
}

bool solve3(std::array<std::array<double, 3>, 3> a, std::array<double, 3> b, std::array<double, 3>& x) {
  for (int c = 0; c < 3; ++c) {
    int piv = c;
    for (int r = c + 1; r < 3; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    if (!(std::abs(a[piv][c]) > 1e-300)) return false;
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (int r = c + 1; r < 3; ++r) {
      const double f = a[r][c] / a[c][c];
      for (int k = c; k < 3; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  for (int c = 2; c >= 0; --c) {
    double s = b[c];
    for (int k = c + 1; k < 3; ++k) s -= a[c][k] * x[k];
    x[c] = s / a[c][c];
  }
  return std::isfinite(x[0]) && std::isfinite(x[1]) && std::isfinite(x[2]);
}

}  // namespace

ScalingFit fit_power_law(const LossCurve& curve, const FitOptions& opts) {
  curve.validate();
  if (curve.points.size() < 5)
    throw DataError("curve '" + curve.label + "' has " + std::to_string(curve.points.size()) +
                    " points, the power-law fit needs at least 5");
  std::vector<double> x, y;
  for (const auto& p : curve.points) {
    if (!(p.loss > 0.0)) throw DataError("curve '" + curve.label + "' has a non-positive loss");
    x.push_back(std::log(p.tokens));
    y.push_back(p.loss);
  }
  const double floor_max = *std::min_element(y.begin(), y.end());

  // Candidate floors: a uniform grid plus points crowding the upper bound,
  // where nearly flat curves have their optimum.
  std::vector<double> cands;
  for (std::size_t k = 0; k < opts.grid; ++k)
    cands.push_back(floor_max * static_cast<double>(k) / static_cast<double>(opts.grid));
  for (double e = 1.0; e <= 13.0; e += 0.5) cands.push_back(floor_max * (1.0 - std::pow(10.0, -e)));
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());

  auto objective = [&](double l0) { return sse(profile(l0, x, y), x, y); };
  std::size_t best = 0;
  double best_sse = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const double s = objective(cands[k]);
    if (s <= best_sse) {  // ties go to the larger floor
      best_sse = s;
      best = k;
    }
  }

  // Golden-section refinement between the neighbouring candidates.
  double lo = best > 0 ? cands[best - 1] : cands[best];
  double hi = best + 1 < cands.size() ? cands[best + 1] : cands[best];
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - phi * (hi - lo), d = lo + phi * (hi - lo);
  double fc = objective(c), fd = objective(d);
  for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, floor_max); ++it) {
    if (fc <= fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - phi * (hi - lo);
      fc = objective(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + phi * (hi - lo);
      fd = objective(d);
    }
  }
  Params p = profile(cands[best], x, y);
  double cur = best_sse;
  for (double l0 : {c, d}) {
    const Params q = profile(l0, x, y);
    const double s = sse(q, x, y);
    if (s < cur) {
      cur = s;
      p = q;
    }
  }

  // Levenberg-Marquardt polish of (l0, alpha, log_dc) in loss space.
  bool converged = cur <= 1e-30 * static_cast<double>(x.size());
  double mu = 1e-3;
  for (std::size_t it = 0; it < opts.max_iterations && !converged; ++it) {
    std::array<std::array<double, 3>, 3> jtj{};
    std::array<double, 3> jtr{};
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = std::exp(p.alpha * (p.log_dc - x[i]));
      const std::array<double, 3> g{1.0, e * (p.log_dc - x[i]), e * p.alpha};
      const double r = e + p.l0 - y[i];
      for (int a = 0; a < 3; ++a) {
        jtr[a] += g[a] * r;
        for (int b = 0; b < 3; ++b) jtj[a][b] += g[a] * g[b];
      }
    }
    bool accepted = false;
    while (mu < 1e12) {
      auto m = jtj;
      for (int a = 0; a < 3; ++a) m[a][a] += mu * std::max(jtj[a][a], 1e-30);
      std::array<double, 3> step{};
      std::array<double, 3> rhs{-jtr[0], -jtr[1], -jtr[2]};
      if (solve3(m, rhs, step)) {
        Params q{std::clamp(p.l0 + step[0], 0.0, floor_max), std::max(kMinAlpha, p.alpha + step[1]),
                 p.log_dc + step[2]};
        const double s = sse(q, x, y);
        if (s < cur) {
          const double gain = (cur - s) / std::max(cur, 1e-300);
          p = q;
          cur = s;
          mu = std::max(mu / 10.0, 1e-12);
          accepted = true;
          if (gain < opts.tolerance) converged = true;
          break;
        }
      }
      mu *= 10.0;
    }
    // No descent direction left at any damping: a stationary point.
    if (!accepted) converged = true;
  }

  ScalingFit f;
  f.l_0 = p.l0;
  f.alpha_d = p.alpha;
  f.log_d_c = p.log_dc;
  f.d_c = std::exp(p.log_dc);
  f.rmse = std::sqrt(cur / static_cast<double>(x.size()));
  f.converged = converged;
  return f;
}

double extrapolate(const ScalingFit& fit, double tokens) {
  if (!fit.converged) throw ContractError("extrapolate: the fit did not converge");
  if (!(tokens > 0.0)) throw ContractError("extrapolate: token count must be positive");
  if (std::isinf(tokens)) return fit.l_0;
  return std::exp(fit.alpha_d * (fit.log_d_c - std::log(tokens))) + fit.l_0;
}

namespace {

double median_of(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0)
    m = (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid))) / 2.0;
  return m;
}

}  // namespace

std::vector<std::size_t> detect_spike(const LossCurve& curve, std::size_t window, double threshold) {
  if (window < 2) throw ConfigError("detect_spike: window must be at least 2");
  const auto& pts = curve.points;
  std::vector<std::size_t> out;
  bool in_episode = false;
  for (std::size_t i = window; i < pts.size(); ++i) {
    std::vector<double> prev;
    for (std::size_t k = i - window; k < i; ++k) prev.push_back(pts[k].loss);
    const double med = median_of(std::move(prev));
    const bool high = pts[i].loss > med * (1.0 + threshold);
    if (!high) {
      in_episode = false;
      continue;
    }
    if (in_episode) continue;
    bool recovers = false;
    for (std::size_t j = i + 1; j < pts.size() && !recovers; ++j) recovers = pts[j].loss <= med;
    if (!recovers) {
      out.push_back(i);
      in_episode = true;
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const CurveReport& r) {
  j = nlohmann::json{{"label", r.label},
                     {"lr", r.lr},
                     {"spikes", r.spikes},
                     {"fit", nullptr},
                     {"horizon_loss", nullptr},
                     {"warnings", r.warnings}};
  if (r.fit) j["fit"] = *r.fit;
  if (r.horizon_loss) j["horizon_loss"] = *r.horizon_loss;
}

void to_json(nlohmann::json& j, const LrSelection& s) {
  j = nlohmann::json{{"chosen_lr", s.lr}, {"chosen_label", s.label}, {"horizon", s.horizon},
                     {"curves", s.reports}};
}

double default_horizon(const std::vector<LossCurve>& curves) {
  double max_tokens = 0.0;
  for (const auto& c : curves)
    if (!c.points.empty()) max_tokens = std::max(max_tokens, c.points.back().tokens);
  return 10.0 * max_tokens;
}

CurveReport report_curve(const LossCurve& c, double horizon, const SelectionOptions& opts) {
  c.validate();
  CurveReport r;
  r.label = c.label;
  r.lr = c.lr;
  r.spikes = detect_spike(c, opts.window, opts.threshold);
  try {
    ScalingFit f = fit_power_law(c, opts.fit);
    if (f.converged) {
      r.horizon_loss = extrapolate(f, horizon);
    } else {
      r.warnings.push_back("fit did not converge");
    }
    double mean = 0.0;
    for (const auto& p : c.points) mean += p.loss;
    mean /= static_cast<double>(c.points.size());
    if (f.rmse > 0.01 * mean)
      r.warnings.push_back("poor fit: rmse is " + std::to_string(100.0 * f.rmse / mean) +
                           "% of the mean loss");
    const std::size_t k = std::max<std::size_t>(1, c.points.size() / 10);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      head += c.points[i].loss;
      tail += c.points[c.points.size() - 1 - i].loss;
    }
    if (tail > 0.9 * head)
      r.warnings.push_back("slow trend: loss fell by less than 10% over the run, "
                           "extrapolation is unreliable");
    r.fit = f;
  } catch (const DataError& e) {
    r.warnings.push_back(std::string("no fit: ") + e.what());
  }
  return r;
}

LrSelection choose_lr(std::vector<CurveReport> reports, double horizon) {
  std::map<double, std::vector<std::size_t>> by_lr;
  for (std::size_t i = 0; i < reports.size(); ++i) by_lr[reports[i].lr].push_back(i);
  if (by_lr.size() < 2)
    throw DataError("learning-rate selection needs at least two distinct learning rates, got " +
                    std::to_string(by_lr.size()));

  std::optional<double> chosen;
  for (auto it = by_lr.rbegin(); it != by_lr.rend() && !chosen; ++it) {
    const bool spiked = std::any_of(it->second.begin(), it->second.end(),
                                    [&](std::size_t i) { return !reports[i].spikes.empty(); });
    if (!spiked) chosen = it->first;
  }
  if (!chosen) {
    std::string msg = "every learning rate shows an unrecoverable loss spike:";
    for (const auto& r : reports) {
      msg += " [" + r.label + " lr=" + std::to_string(r.lr) + " spikes at";
      for (std::size_t s : r.spikes) msg += " " + std::to_string(s);
      msg += "]";
    }
    throw SelectionError(msg);
  }
  LrSelection sel;
  sel.lr = *chosen;
  sel.horizon = horizon;
  const auto& idx = by_lr[*chosen];
  auto rank = [&](std::size_t i) {
    return reports[i].horizon_loss.value_or(std::numeric_limits<double>::infinity());
  };
  const std::size_t winner = *std::min_element(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return rank(a) < rank(b);
  });
  sel.label = reports[winner].label;
  sel.reports = std::move(reports);
  return sel;
}

LrSelection select_lr(const std::vector<LossCurve>& curves, const SelectionOptions& opts) {
  std::set<double> lrs;
  for (const auto& c : curves) {
    c.validate();
    lrs.insert(c.lr);
  }
  if (lrs.size() < 2)
    throw DataError("learning-rate selection needs at least two distinct learning rates, got " +
                    std::to_string(lrs.size()));
  const double horizon = opts.horizon.value_or(default_horizon(curves));
  std::vector<CurveReport> reports;
  for (const auto& c : curves) reports.push_back(report_curve(c, horizon, opts));
  return choose_lr(std::move(reports), horizon);
}

std::vector<double> log_space(double lo, double hi, std::size_t count) {
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double t = count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(count - 1);
    out.push_back(std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo))));
  }
  return out;
}

LossCurve synthetic_curve(double d_c, double alpha, double l_0, const std::vector<double>& tokens,
                          double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  LossCurve c;
  for (double d : tokens) {
    double l = std::pow(d_c / d, alpha) + l_0;
    if (noise > 0.0) l *= 1.0 + noise * n(rng);
    c.points.push_back({d, l});
  }
  return c;
}

std::vector<LossCurve> four_lr_scenario(std::uint64_t seed) {
  const std::vector<double> tokens = log_space(1e6, 1e9, 60);
  std::vector<LossCurve> out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);

  LossCurve slow;
  for (double d : tokens)
    slow.points.push_back({d, (6.0 - 0.15 * std::log10(d / 1e6)) * (1.0 + 0.003 * n(rng))});
  slow.lr = 1e-4;
  out.push_back(slow);

  LossCurve mid = synthetic_curve(1e7, 0.3, 2.2, tokens, 0.003, rng());
  mid.lr = 3e-4;
  out.push_back(mid);

  LossCurve high = synthetic_curve(5e6, 0.35, 2.0, tokens, 0.003, rng());
  high.lr = 1e-3;
  out.push_back(high);

  LossCurve spiky = synthetic_curve(4e6, 0.4, 1.9, tokens, 0.003, rng());
  for (std::size_t i = 36; i < spiky.points.size(); ++i) spiky.points[i].loss *= 1.6;
  spiky.lr = 3e-3;
  out.push_back(spiky);

  for (auto& c : out) c.label = "lr=" + std::to_string(c.lr);
  return out;
}

}  // namespace mea
