#include "mea/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "mea/error.hpp"

namespace mea {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(lr_peak >= 0.0) || !std::isfinite(lr_peak)) fail("lr_peak must be a finite non-negative number");
  if (!(final_fraction >= 0.0 && final_fraction <= 1.0)) fail("final_fraction must lie in [0, 1]");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (seq_len == 0) fail("seq_len must be positive");
  if (total_steps == 0) fail("total_steps must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (!(max_grad_norm >= 0.0)) fail("max_grad_norm must be non-negative");
  if (spike_window < 2) fail("spike_window must be at least 2");
  if (!(spike_threshold >= 0.0)) fail("spike_threshold must be non-negative");
}

std::size_t TrainConfig::windows_per_step() const {
  return std::max<std::size_t>(1, batch_tokens / seq_len);
}

Schedule parse_schedule(const std::string& name) {
  if (name == "cosine") return Schedule::Cosine;
  if (name == "constant") return Schedule::Constant;
  throw ConfigError("unknown schedule '" + name + "' (expected cosine or constant)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr_peak", c.lr_peak},
                     {"warmup_steps", c.warmup_steps},
                     {"schedule", c.schedule == Schedule::Cosine ? "cosine" : "constant"},
                     {"final_fraction", c.final_fraction},
                     {"weight_decay", c.weight_decay},
                     {"batch_tokens", c.batch_tokens},
                     {"seq_len", c.seq_len},
                     {"total_steps", c.total_steps},
                     {"seed", c.seed},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"max_grad_norm", c.max_grad_norm},
                     {"spike_window", c.spike_window},
                     {"spike_threshold", c.spike_threshold},
                     {"abort_on_spike", c.abort_on_spike},
                     {"freeze_hlc", c.freeze_hlc}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr_peak = j.value("lr_peak", d.lr_peak);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.schedule = parse_schedule(j.value("schedule", std::string("cosine")));
  c.final_fraction = j.value("final_fraction", d.final_fraction);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_tokens = j.value("batch_tokens", d.batch_tokens);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.seed = j.value("seed", d.seed);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
  c.spike_window = j.value("spike_window", d.spike_window);
  c.spike_threshold = j.value("spike_threshold", d.spike_threshold);
  c.abort_on_spike = j.value("abort_on_spike", d.abort_on_spike);
  c.freeze_hlc = j.value("freeze_hlc", d.freeze_hlc);
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  const auto s = static_cast<double>(step);
  if (step < cfg.warmup_steps) return cfg.lr_peak * s / static_cast<double>(cfg.warmup_steps);
  if (cfg.schedule == Schedule::Constant || cfg.total_steps <= cfg.warmup_steps) return cfg.lr_peak;
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  const double t = std::min(1.0, (s - static_cast<double>(cfg.warmup_steps)) / span);
  const double f = cfg.final_fraction;
  return cfg.lr_peak * ((1.0 + f) / 2.0 + (1.0 - f) / 2.0 * std::cos(std::numbers::pi * t));
}

void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                double lr, double weight_decay, const AdamConfig& cfg,
                const std::vector<bool>& decay) {
  if (params.size() != grads.size())
    throw DimensionError("adamw: " + std::to_string(params.size()) + " params but " +
                         std::to_string(grads.size()) + " grads");
  if (!decay.empty() && decay.size() != params.size())
    throw DimensionError("adamw: decay mask size differs from parameter count");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw: state does not match params");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape())
      throw DimensionError("adamw: shape mismatch at parameter " + std::to_string(i) + ": " +
                           shape_str(params[i]->shape()) + " vs grad " +
                           shape_str(grads[i].shape()));

  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const double shrink = (decay.empty() || decay[i]) ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] *= shrink;
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

CorpusKind parse_corpus_kind(const std::string& name) {
  if (name == "copy") return CorpusKind::Copy;
  if (name == "repeat_k" || name == "repeat") return CorpusKind::RepeatK;
  if (name == "markov") return CorpusKind::Markov;
  throw ConfigError("unknown corpus '" + name + "' (expected copy, repeat_k or markov)");
}

const char* corpus_kind_name(CorpusKind k) {
  switch (k) {
    case CorpusKind::Copy: return "copy";
    case CorpusKind::RepeatK: return "repeat_k";
    case CorpusKind::Markov: return "markov";
  }
  return "?";
}

Tensor markov_transitions() {
  return Tensor({kMarkovStates, kMarkovStates}, {0.10, 0.60, 0.20, 0.10,  //
                                                 0.30, 0.10, 0.40, 0.20,  //
                                                 0.25, 0.25, 0.10, 0.40,  //
                                                 0.50, 0.20, 0.20, 0.10});
}

namespace {

double markov_entropy() {
  const Tensor p = markov_transitions();
  std::vector<double> pi(kMarkovStates, 1.0 / kMarkovStates);
  for (int it = 0; it < 500; ++it) {
    std::vector<double> next(kMarkovStates, 0.0);
    for (std::size_t i = 0; i < kMarkovStates; ++i)
      for (std::size_t j = 0; j < kMarkovStates; ++j) next[j] += pi[i] * p.at(i, j);
    pi = next;
  }
  double h = 0.0;
  for (std::size_t i = 0; i < kMarkovStates; ++i)
    for (std::size_t j = 0; j < kMarkovStates; ++j) h -= pi[i] * p.at(i, j) * std::log(p.at(i, j));
  return h;
}

}  // namespace

Corpus make_corpus(CorpusKind kind, std::size_t size, std::uint64_t seed, std::size_t k) {
  if (size == 0) throw ConfigError("corpus size must be positive");
  Corpus c;
  c.tokens.reserve(size);
  Rng rng(seed);
  switch (kind) {
    case CorpusKind::Copy: {
      std::uniform_int_distribution<int> letter(0, 25);
      int prefix[kCopyPrefix];
      while (c.tokens.size() < size) {
        for (int& ch : prefix) ch = 'a' + letter(rng);
        for (int ch : prefix) c.tokens.push_back(ch);
        c.tokens.push_back('|');
        for (int ch : prefix) c.tokens.push_back(ch);
        c.tokens.push_back('\n');
      }
      c.tokens.resize(size);
      c.entropy_floor = static_cast<double>(kCopyPrefix) * std::log(26.0) /
                        static_cast<double>(2 * kCopyPrefix + 2);
      break;
    }
    case CorpusKind::RepeatK:
      if (k == 0 || k > 26) throw ConfigError("repeat_k needs 1 <= k <= 26");
      for (std::size_t i = 0; i < size; ++i) c.tokens.push_back('a' + static_cast<int>(i % k));
      c.entropy_floor = 0.0;
      break;
    case CorpusKind::Markov: {
      const Tensor p = markov_transitions();
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::size_t state = static_cast<std::size_t>(u(rng) * kMarkovStates) % kMarkovStates;
      for (std::size_t i = 0; i < size; ++i) {
        c.tokens.push_back('a' + static_cast<int>(state));
        const double r = u(rng);
        double acc = 0.0;
        std::size_t next = kMarkovStates - 1;
        for (std::size_t j = 0; j < kMarkovStates; ++j) {
          acc += p.at(state, j);
          if (r < acc) {
            next = j;
            break;
          }
        }
        state = next;
      }
      c.entropy_floor = markov_entropy();
      break;
    }
  }
  return c;
}

std::vector<int> tokens_from_text(const std::string& text) {
  std::vector<int> out(text.size());
  std::transform(text.begin(), text.end(), out.begin(),
                 [](char ch) { return static_cast<int>(static_cast<unsigned char>(ch)); });
  return out;
}

std::vector<int> load_tokens(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return tokens_from_text(ss.str());
}

namespace {

bool is_hlc(const std::string& name) {
  return name.ends_with("attn.w_lc_k") || name.ends_with("attn.w_lc_v");
}

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    m = (m + lo) / 2.0;
  }
  return m;
}

}  // namespace

SpikeMonitor::SpikeMonitor(std::size_t window, double threshold)
    : window_(window), threshold_(threshold) {
  if (window < 2) throw ConfigError("spike window must be at least 2");
}

bool SpikeMonitor::observe(double loss) {
  if (!std::isfinite(loss)) {
    reason_ = "non-finite loss";
    return true;
  }
  raw_.push_back(loss);
  if (raw_.size() < window_) return false;
  // Per-step batch losses are noisy; the rule runs on their trailing mean.
  double mean = 0.0;
  for (auto it = raw_.end() - static_cast<std::ptrdiff_t>(window_); it != raw_.end(); ++it) mean += *it;
  mean /= static_cast<double>(window_);
  if (episode_ > 0) {
    // One full window later the smoothed loss is made only of post-spike steps.
    if (++episode_ > window_) {
      if (mean > ref_ * (1.0 + threshold_)) {
        reason_ = "loss spike: smoothed loss " + std::to_string(mean) + " still above " +
                  std::to_string(ref_) + " after " + std::to_string(window_) + " steps";
        return true;
      }
      episode_ = 0;
    }
  } else if (history_.size() >= window_) {
    const double m = median(std::vector<double>(history_.end() - static_cast<std::ptrdiff_t>(window_),
                                                history_.end()));
    if (mean > m * (1.0 + threshold_)) {
      ref_ = m;
      episode_ = 1;
    }
  }
  history_.push_back(mean);
  return false;
}

namespace {

TrainResult run(const ModelConfig& model_cfg, const TrainConfig& cfg, std::span<const int> tokens,
                ModelWeights w, Rng& rng) {
  cfg.validate();
  check_model(model_cfg, w);
  if (cfg.seq_len > model_cfg.max_seq)
    throw ConfigError("seq_len " + std::to_string(cfg.seq_len) + " exceeds max_seq " +
                      std::to_string(model_cfg.max_seq));
  const std::size_t span = cfg.seq_len + 1;
  if (tokens.size() < span)
    throw DataError("corpus has " + std::to_string(tokens.size()) + " tokens, need at least " +
                    std::to_string(span));
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= model_cfg.vocab)
      throw DataError("token " + std::to_string(t) + " outside vocabulary of " +
                      std::to_string(model_cfg.vocab));

  std::vector<Tensor*> params;
  std::vector<bool> decay;
  std::vector<bool> frozen;
  visit_model(w, [&](const std::string& name, Tensor& t, ParamKind kind) {
    if (t.empty()) return;
    params.push_back(&t);
    decay.push_back(kind == ParamKind::Matrix);
    frozen.push_back(cfg.freeze_hlc && is_hlc(name));
  });

  const std::size_t batch = cfg.windows_per_step();
  std::uniform_int_distribution<std::size_t> offset(0, tokens.size() - span);
  const AdamConfig adam{cfg.beta1, cfg.beta2, cfg.eps};
  AdamState state;
  TrainResult result;
  SpikeMonitor monitor(cfg.spike_window, cfg.spike_threshold);

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    ad::Tape tape;
    ModelParams p = bind_model(tape, w, true);
    ad::Var loss;
    for (std::size_t b = 0; b < batch; ++b) {
      ad::Var l = window_loss(tape, model_cfg, p, tokens.subspan(offset(rng), span));
      loss = b == 0 ? l : ad::add(loss, l);
    }
    if (batch > 1) loss = ad::scale(loss, 1.0 / static_cast<double>(batch));
    const double value = loss.value().item();
    const double lr = lr_at(step, cfg);
    result.curve.push_back({step, (step + 1) * batch * cfg.seq_len, value, lr});

    if ((cfg.abort_on_spike || !std::isfinite(value)) && monitor.observe(value)) {
      result.unstable = true;
      result.abort_reason = monitor.reason() + " at step " + std::to_string(step);
      break;
    }

    tape.backward(loss);
    std::vector<Tensor> grads;
    std::size_t k = 0;
    visit_model(p, [&](const std::string&, ad::Var& v, ParamKind) {
      if (!v.valid()) return;
      grads.push_back(frozen[k] ? Tensor(v.shape()) : tape.grad(v));
      ++k;
    });
    if (cfg.max_grad_norm > 0.0) {
      double sq = 0.0;
      for (const Tensor& g : grads)
        for (double x : g.data()) sq += x * x;
      const double norm = std::sqrt(sq);
      if (norm > cfg.max_grad_norm)
        for (Tensor& g : grads) g = mea::scale(g, cfg.max_grad_norm / norm);
    }
    // Frozen tensors get a zero gradient and no decay, so AdamW leaves them bit-exact.
    std::vector<bool> mask = decay;
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] && !frozen[i];
    adamw_step(params, grads, state, lr, cfg.weight_decay, adam, mask);
  }
  result.weights = std::move(w);
  return result;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, std::span<const int> tokens) {
  Rng rng(cfg.seed);
  ModelWeights w = init_model(model_cfg, rng);
  return run(model_cfg, cfg, tokens, std::move(w), rng);
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, std::span<const int> tokens,
                  ModelWeights init) {
  Rng rng(cfg.seed);
  return run(model_cfg, cfg, tokens, std::move(init), rng);
}

void write_curve_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write curve to '" + path.string() + "'");
  out << "step,tokens,loss,lr\n";
  out.precision(17);
  for (const auto& r : curve) out << r.step << ',' << r.tokens << ',' << r.loss << ',' << r.lr << '\n';
}

}  // namespace mea
