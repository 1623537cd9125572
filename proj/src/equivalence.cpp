#include "mea/equivalence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mea/error.hpp"
#include "mea/rope.hpp"
#include "mea/variants.hpp"

namespace mea {

void to_json(nlohmann::json& j, const EquivalenceReport& r) {
  j = nlohmann::json{{"name", r.name},       {"max_abs_diff", r.max_abs_diff},
                     {"tolerance", r.tolerance}, {"passed", r.passed},
                     {"trials", r.trials},   {"seed", r.seed}};
}

namespace {

constexpr double kCheckTol = 1e-10;

double dot(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) s += a[c] * b[c];
  return s;
}

// Column block [col, col + width) of a matrix.
Tensor column_block(const Tensor& m, std::size_t col, std::size_t width) {
  Tensor out({m.dim(0), width});
  for (std::size_t r = 0; r < m.dim(0); ++r) std::copy_n(&m.at(r, col), width, &out.at(r, 0));
  return out;
}

Tensor row_block(const Tensor& m, std::size_t row, std::size_t height) {
  Tensor out({height, m.dim(1)});
  std::copy_n(&m.at(row, 0), height * m.dim(1), out.data().data());
  return out;
}

// Fused KV projection with one block per query head (block i = group G(i)).
Tensor per_head_kv(const Tensor& wkv, std::size_t h, std::size_t g, std::size_t stride) {
  Tensor out({wkv.dim(0), h * stride});
  for (std::size_t r = 0; r < wkv.dim(0); ++r)
    for (std::size_t i = 1; i <= h; ++i)
      std::copy_n(&wkv.at(r, (group_of(i, h, g) - 1) * stride), stride, &out.at(r, (i - 1) * stride));
  return out;
}

// Head-major slice t[:, head, :] of an N x heads x d tensor as N x d.
Tensor head_slice(const Tensor& t, std::size_t head) {
  const std::size_t n = t.dim(0), d = t.dim(2);
  Tensor out({n, d});
  for (std::size_t p = 0; p < n; ++p) std::copy_n(&t.at(p, head, 0), d, &out.at(p, 0));
  return out;
}

AttnConfig draw_config(const TrialSpace& space, Rng& rng, Variant v, bool even_h) {
  AttnConfig cfg = space.base;
  cfg.variant = v;
  cfg.h_prime = 0;
  cfg.use_group_norm = false;
  if (space.sweep_heads) {
    static constexpr std::size_t kHeads[] = {2, 4, 8};
    cfg.h = kHeads[std::uniform_int_distribution<std::size_t>(0, 2)(rng)];
    const std::size_t gs[] = {1, 2, cfg.h};
    cfg.g = gs[std::uniform_int_distribution<std::size_t>(0, 2)(rng)];
  }
  if (even_h && cfg.h % 2 != 0) throw ConfigError("this check needs an even head count");
  cfg.validate();
  return cfg;
}

AttnWeights draw_weights(const AttnConfig& cfg, Rng& rng) {
  AttnWeights w = init_attention(cfg, rng, InitOptions{0.0});
  if (cfg.is_tha()) {
    w.t_qk = Tensor::randn(w.t_qk.shape(), rng);
    w.t_v = Tensor::randn(w.t_v.shape(), rng);
  }
  if (cfg.is_dfa()) w.lambda = Tensor::uniform(w.lambda.shape(), rng, -1.0, 1.0);
  if (cfg.is_mea()) {
    axpy(1.0, Tensor::randn(w.w_lc_k.shape(), rng, 0.3), w.w_lc_k);
    axpy(1.0, Tensor::randn(w.w_lc_v.shape(), rng, 0.3), w.w_lc_v);
  }
  return w;
}

Tensor draw_input(const TrialSpace& space, const AttnConfig& cfg, Rng& rng) {
  const std::size_t n = std::uniform_int_distribution<std::size_t>(1, space.max_seq)(rng);
  return Tensor::randn({n, cfg.d_model}, rng);
}

template <typename Diff>
EquivalenceReport run_trials(const char* name, const TrialSpace& space, std::size_t trials,
                             std::uint64_t seed, Variant v, bool even_h, Diff&& diff) {
  EquivalenceReport r{name, 0.0, kCheckTol, false, trials, seed};
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    AttnConfig cfg = draw_config(space, rng, v, even_h);
    AttnWeights w = draw_weights(cfg, rng);
    Tensor x = draw_input(space, cfg, rng);
    const double d = diff(cfg, w, x);
    r.max_abs_diff = std::isnan(d) ? d : std::max(r.max_abs_diff, d);
    if (std::isnan(d)) break;
  }
  r.passed = r.max_abs_diff <= r.tolerance;
  return r;
}

}  // namespace

double presoftmax_rewrite_diff(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x) {
  if (!cfg.is_tha()) throw ConfigError("presoftmax rewrite needs a THA config");
  w.check(cfg);
  const std::size_t n = x.dim(0), h = cfg.h, g = cfg.g, d = cfg.d_qk;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor qr = rope(matmul(x, w.wq).reshaped({n, h, d}), cfg.rope_base);
  Tensor k = slice_last(matmul(x, w.wkv).reshaped({n, g, d + cfg.d_v}), 0, d);
  Tensor kr = rope(k, cfg.rope_base);

  ad::Tape tape;
  ad::Var kx = tape.constant(k);
  if (g != h) kx = ad::head_mix(kx, tape.constant(group_selector(h, g)));
  ad::Var m = expand_transfer(tape, tape.constant(w.t_qk), h, g);
  Tensor mixed = rope(ad::head_mix(kx, m).value(), cfg.rope_base);

  double worst = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t gi = group_of(i + 1, h, g) - 1;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        double lhs = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
          const std::size_t gj = group_of(j + 1, h, g) - 1;
          lhs += w.t_qk.at(gi, gj) * (dot(&qr.at(a, i, 0), &kr.at(b, gj, 0), d) * inv);
        }
        const double rhs = dot(&qr.at(a, i, 0), &mixed.at(b, i, 0), d) * inv;
        worst = std::max(worst, std::abs(lhs - rhs));
      }
  }
  return worst;
}

double dfa_as_tha_diff(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x) {
  if (cfg.variant != Variant::DfaNoGn) throw ConfigError("dfa-as-tha compares DFA without GroupNorm");
  w.check(cfg);
  const std::size_t h = cfg.h;
  AttnConfig tc = cfg;
  tc.variant = Variant::Tha;
  tc.g = h;
  tc.use_group_norm = false;
  AttnWeights tw;
  tw.wq = w.wq;
  tw.wkv = per_head_kv(w.wkv, h, cfg.g, cfg.d_qk + cfg.d_v);
  tw.wo = w.wo;
  tw.t_qk = Tensor::identity(h);
  tw.t_v = Tensor({h, h});
  for (std::size_t d = 0; d < h / 2; ++d)
    for (std::size_t i : {2 * d, 2 * d + 1}) {
      tw.t_v.at(i, 2 * d) = 1.0;
      tw.t_v.at(i, 2 * d + 1) = -w.lambda[d];
    }
  return max_abs_diff(dfa_forward(cfg, w, x), tha_forward(tc, tw, x, ThaMode::Original));
}

double postsoftmax_transport_diff(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x) {
  if (!cfg.is_tha() || cfg.group_norm())
    throw ConfigError("post-softmax transport needs a THA config without GroupNorm");
  w.check(cfg);
  const std::size_t n = x.dim(0), h = cfg.h, g = cfg.g, dm = cfg.d_model, dv = cfg.d_v;
  const std::size_t stride = cfg.d_qk + dv;

  ad::Tape tape;
  AttnParams p = bind_attention(tape, w, false);
  ad::Var xv = tape.constant(x);
  ad::Var q = ad::reshape(ad::matmul(xv, p.wq), {n, h, cfg.d_qk});
  auto [k, v] = project_kv(cfg, p.wkv, xv, g);
  const Tensor maps = attention_maps(cfg, q, k, g).value();
  const Tensor& values = v.value();

  // y = sum_i sum_j T[G(i),G(j)] A_j V_G(i) W^O_i, evaluated literally
  Tensor y_orig({n, dm});
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t gi = group_of(i + 1, h, g) - 1;
    Tensor mix({n, n});
    for (std::size_t j = 0; j < h; ++j) {
      const std::size_t gj = group_of(j + 1, h, g) - 1;
      const double t = w.t_v.at(gi, gj);
      for (std::size_t e = 0; e < n * n; ++e) mix[e] += t * maps[j * n * n + e];
    }
    Tensor c = matmul(mix, head_slice(values, gi));
    y_orig = add(y_orig, matmul(c, row_block(w.wo, i * dv, dv)));
  }

  // Transport: head i carries value V_G(i) W^O_i, value transfer T^T, unit
  // output blocks, so the modified form evaluates sum_i A_i sum_j T[G(j),G(i)] V_G(j) W^O_j.
  AttnConfig tc = cfg;
  tc.variant = Variant::ThaModified;
  tc.g = h;
  tc.d_v = dm;
  AttnWeights tw;
  tw.wq = w.wq;
  tw.wkv = Tensor({dm, h * (cfg.d_qk + dm)});
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t gi = group_of(i + 1, h, g) - 1;
    Tensor wk = column_block(w.wkv, gi * stride, cfg.d_qk);
    Tensor wv = matmul(column_block(w.wkv, gi * stride + cfg.d_qk, dv), row_block(w.wo, i * dv, dv));
    for (std::size_t r = 0; r < dm; ++r) {
      std::copy_n(&wk.at(r, 0), cfg.d_qk, &tw.wkv.at(r, i * (cfg.d_qk + dm)));
      std::copy_n(&wv.at(r, 0), dm, &tw.wkv.at(r, i * (cfg.d_qk + dm) + cfg.d_qk));
    }
  }
  tw.wo = Tensor({h * dm, dm});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t c = 0; c < dm; ++c) tw.wo.at(i * dm + c, c) = 1.0;
  tw.t_qk = Tensor::identity(h);
  tw.t_v = Tensor({h, h});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < h; ++j)
      tw.t_v.at(i, j) = w.t_v.at(group_of(j + 1, h, g) - 1, group_of(i + 1, h, g) - 1);
  double worst = max_abs_diff(y_orig, tha_forward(tc, tw, x, ThaMode::Modified));

  if (g == h) {
    AttnWeights ow = w;
    ow.t_qk = Tensor::identity(h);
    AttnConfig oc = cfg;
    oc.variant = Variant::Tha;
    worst = std::max(worst, max_abs_diff(y_orig, tha_forward(oc, ow, x, ThaMode::Original)));
  }
  return worst;
}

EquivalenceReport check_presoftmax_rewrite(const TrialSpace& space, std::size_t trials,
                                           std::uint64_t seed) {
  return run_trials("presoftmax", space, trials, seed, Variant::ThaModified, false,
                    presoftmax_rewrite_diff);
}

EquivalenceReport check_dfa_as_tha(const TrialSpace& space, std::size_t trials,
                                   std::uint64_t seed) {
  return run_trials("dfa-tha", space, trials, seed, Variant::DfaNoGn, true, dfa_as_tha_diff);
}

EquivalenceReport check_postsoftmax_equivalence(const TrialSpace& space, std::size_t trials,
                                                std::uint64_t seed) {
  return run_trials("postsoftmax", space, trials, seed, Variant::Tha, false,
                    postsoftmax_transport_diff);
}

namespace {

struct FactoredProblem {
  AttnWeights w;
  Tensor x, target;
};

FactoredProblem factored_problem(const AttnConfig& cfg, std::uint64_t seed, std::size_t n) {
  if (!cfg.is_mea()) throw ConfigError("degeneration experiments need an MEA config");
  Rng rng(seed);
  FactoredProblem fp;
  fp.w = init_attention(cfg, rng, InitOptions{0.3});
  fp.x = Tensor::randn({n, cfg.d_model}, rng);
  fp.target = Tensor::randn({n, cfg.d_model}, rng);
  return fp;
}

// Gradients of the MSE loss with respect to every weight of `w`.
AttnWeights loss_gradients(const AttnConfig& cfg, const AttnWeights& w, const Tensor& x,
                           const Tensor& target) {
  ad::Tape tape;
  AttnParams p = bind_attention(tape, w, true);
  tape.backward(ad::mse(attention_forward(tape, cfg, p, tape.constant(x)), target));
  auto g = [&](ad::Var v) { return v.valid() ? tape.grad(v) : Tensor(); };
  AttnWeights out;
  out.wq = g(p.wq);
  out.wkv = g(p.wkv);
  out.wo = g(p.wo);
  out.w_lc_k = g(p.w_lc_k);
  out.w_lc_v = g(p.w_lc_v);
  out.gn_gain = g(p.gn_gain);
  return out;
}

// Effective K and V projections W_lc (x) W_comp of an MEA layer.
std::pair<Tensor, Tensor> effective_kv(const AttnConfig& cfg, const Tensor& wkv, const Tensor& lc_k,
                                       const Tensor& lc_v) {
  auto [wk, wv] = split_kv_weights(wkv, cfg.component_heads(), cfg.d_qk, cfg.d_v);
  return {recombine_weights(lc_k, wk), recombine_weights(lc_v, wv)};
}

}  // namespace

double degeneration_residual(const AttnConfig& cfg, double lr, std::uint64_t seed,
                             std::size_t seq_len) {
  if (!(lr >= 0.0)) throw ConfigError("degeneration_residual: lr must be non-negative");
  FactoredProblem fp = factored_problem(cfg, seed, seq_len);
  AttnWeights grad = loss_gradients(cfg, fp.w, fp.x, fp.target);
  const std::size_t hp = cfg.component_heads();
  auto [wk, wv] = split_kv_weights(fp.w.wkv, hp, cfg.d_qk, cfg.d_v);
  auto [gk, gv] = split_kv_weights(grad.wkv, hp, cfg.d_qk, cfg.d_v);

  double sq = 0.0;
  auto accumulate = [&](const Tensor& lc, const Tensor& comp, const Tensor& g_lc,
                        const Tensor& g_comp) {
    Tensor d_lc = scale(g_lc, -lr), d_comp = scale(g_comp, -lr);
    Tensor exact = sub(recombine_weights(add(lc, d_lc), add(comp, d_comp)),
                       recombine_weights(lc, comp));
    Tensor first = add(recombine_weights(d_lc, comp), recombine_weights(lc, d_comp));
    const double r = frobenius_norm(sub(exact, first));
    sq += r * r;
  };
  accumulate(fp.w.w_lc_k, wk, grad.w_lc_k, gk);
  accumulate(fp.w.w_lc_v, wv, grad.w_lc_v, gv);
  return std::sqrt(sq);
}

double degeneration_slope(const AttnConfig& cfg, const std::vector<double>& lrs,
                          std::uint64_t seed) {
  if (lrs.size() < 2) throw ConfigError("degeneration_slope needs at least two learning rates");
  std::vector<double> lx, ly;
  for (double lr : lrs) {
    lx.push_back(std::log(lr));
    ly.push_back(std::log(degeneration_residual(cfg, lr, seed)));
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(lx.size());
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

double single_matrix_mismatch(const AttnConfig& cfg, double lr, std::uint64_t seed,
                              std::size_t seq_len) {
  FactoredProblem fp = factored_problem(cfg, seed, seq_len);
  AttnWeights grad = loss_gradients(cfg, fp.w, fp.x, fp.target);

  AttnWeights stepped = fp.w;
  axpy(-lr, grad.wkv, stepped.wkv);
  axpy(-lr, grad.w_lc_k, stepped.w_lc_k);
  axpy(-lr, grad.w_lc_v, stepped.w_lc_v);
  const Tensor y_fact = attend(cfg, stepped, fp.x);

  AttnConfig base = cfg;
  base.variant = Variant::MhaGqa;
  base.h_prime = 0;
  base.use_group_norm = cfg.group_norm();
  AttnWeights folded = fp.w;
  folded.w_lc_k = folded.w_lc_v = Tensor();
  auto [ek, ev] = effective_kv(cfg, fp.w.wkv, fp.w.w_lc_k, fp.w.w_lc_v);
  folded.wkv = fuse_kv_weights(ek, ev, cfg.g, cfg.d_qk, cfg.d_v);
  const Tensor g_eff = loss_gradients(base, folded, fp.x, fp.target).wkv;

  auto mismatch = [&](double eta) {
    AttnWeights cand = folded;
    axpy(-eta, g_eff, cand.wkv);
    return frobenius_norm(sub(attend(base, cand, fp.x), y_fact));
  };
  // coarse scan, then golden-section refinement around the best cell
  const double hi = 20.0 * lr;
  const int cells = 40;
  int best = 0;
  double best_val = mismatch(0.0);
  for (int c = 1; c <= cells; ++c) {
    const double v = mismatch(hi * c / cells);
    if (v < best_val) best_val = v, best = c;
  }
  double a = hi * std::max(0, best - 1) / cells, b = hi * std::min(cells, best + 1) / cells;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 60; ++it) {
    const double c = b - phi * (b - a), d = a + phi * (b - a);
    if (mismatch(c) < mismatch(d)) b = d; else a = c;
  }
  return std::min(best_val, mismatch(0.5 * (a + b)));
}

Suite parse_suite(const std::string& name) {
  if (name == "all") return Suite::All;
  if (name == "presoftmax") return Suite::Presoftmax;
  if (name == "dfa-tha") return Suite::DfaTha;
  if (name == "postsoftmax") return Suite::Postsoftmax;
  if (name == "degeneration") return Suite::Degeneration;
  throw ConfigError("unknown check suite '" + name + "'");
}

std::vector<EquivalenceReport> run_suite(Suite suite, std::size_t trials, std::uint64_t seed) {
  TrialSpace space;
  space.base.d_qk = 8;
  space.base.d_v = 8;
  space.base.d_model = 16;
  std::vector<EquivalenceReport> out;
  const bool all = suite == Suite::All;
  if (all || suite == Suite::Presoftmax) out.push_back(check_presoftmax_rewrite(space, trials, seed));
  if (all || suite == Suite::DfaTha) out.push_back(check_dfa_as_tha(space, trials, seed));
  if (all || suite == Suite::Postsoftmax)
    out.push_back(check_postsoftmax_equivalence(space, trials, seed));
  if (all || suite == Suite::Degeneration) {
    AttnConfig cfg = space.base;
    cfg.h = 4;
    cfg.g = 2;
    cfg.h_prime = 4;
    cfg.variant = Variant::MeaNoGn;
    const std::size_t seeds = std::min<std::size_t>(trials, 10);
    EquivalenceReport r{"degeneration", 0.0, 0.1, false, seeds, seed};
    for (std::size_t s = 0; s < seeds; ++s) {
      const double slope = degeneration_slope(cfg, {1e-4, 1e-3, 1e-2, 1e-1}, seed + s);
      r.max_abs_diff = std::max(r.max_abs_diff, std::abs(slope - 2.0));
    }
    r.passed = r.max_abs_diff <= r.tolerance;
    out.push_back(r);
  }
  return out;
}

}  // namespace mea
