#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mea/bundle.hpp"
#include "mea/compress.hpp"
#include "mea/equivalence.hpp"
#include "mea/error.hpp"
#include "mea/model.hpp"
#include "mea/scaling.hpp"
#include "mea/train.hpp"
#include "plot.hpp"

#ifndef MEA_LAB_VERSION
#define MEA_LAB_VERSION "0.0.0"
#endif

namespace mea::cli {

using nlohmann::json;
namespace fs = std::filesystem;

std::size_t thread_cap() {
  if (const char* env = std::getenv("MEA_LAB_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("MEA_LAB_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

// Runs fn(0..n-1) on up to `threads` workers; results are indexed, so the
// outcome does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

bool is_flag(const CLI::Option* opt) { return opt->get_type_size_max() == 0; }

std::string option_key(const CLI::Option* opt) {
  std::string n = opt->get_name();
  while (!n.empty() && n.front() == '-') n.erase(n.begin());
  return n;
}

// Values the option resolved to: explicit results, else the captured default.
std::vector<std::string> resolved_values(const CLI::Option* opt) {
  if (opt->count() > 0) return opt->results();
  if (!opt->get_default_str().empty()) return {opt->get_default_str()};
  return {};
}

std::vector<CLI::Option*> user_options(CLI::App* sub) {
  std::vector<CLI::Option*> out;
  for (CLI::Option* opt : sub->get_options())
    if (opt != sub->get_help_ptr()) out.push_back(opt);
  return out;
}

// Every option spelled out, so that replaying it does not depend on the
// defaults of a later version.
std::vector<std::string> canonical_argv(CLI::App* sub) {
  std::vector<std::string> argv{sub->get_name()};
  std::vector<std::string> positional;
  for (CLI::Option* opt : user_options(sub)) {
    if (is_flag(opt)) {
      if (opt->count() > 0) argv.push_back(opt->get_name());
      continue;
    }
    const auto vals = resolved_values(opt);
    if (vals.empty()) continue;
    if (!opt->nonpositional()) {
      positional.insert(positional.end(), vals.begin(), vals.end());
      continue;
    }
    argv.push_back(opt->get_name());
    argv.insert(argv.end(), vals.begin(), vals.end());
  }
  if (!positional.empty()) {
    argv.push_back("--");
    argv.insert(argv.end(), positional.begin(), positional.end());
  }
  return argv;
}

json resolved_options(CLI::App* sub) {
  json j = json::object();
  for (CLI::Option* opt : user_options(sub)) {
    if (is_flag(opt)) {
      j[option_key(opt)] = opt->count() > 0;
      continue;
    }
    const auto vals = resolved_values(opt);
    if (vals.empty()) {
      j[option_key(opt)] = nullptr;
    } else if (opt->get_expected_max() > 1) {
      j[option_key(opt)] = vals;
    } else {
      j[option_key(opt)] = vals.front();
    }
  }
  return j;
}

struct Run {
  Run(CLI::App* s, std::ostream& o, std::ostream& e) : sub(s), out(o), err(e) {}

  CLI::App* sub;
  std::ostream& out;
  std::ostream& err;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started_at = utc_now();
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  json config = json::object();

  void log(const std::string& msg) const { err << "[mea-lab " << sub->get_name() << "] " << msg << '\n'; }

  json manifest() const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return json{{"subcommand", sub->get_name()},
                {"version", MEA_LAB_VERSION},
                {"seed", seed},
                {"options", resolved_options(sub)},
                {"config", config},
                {"inputs", inputs},
                {"outputs", outputs},
                {"argv", canonical_argv(sub)},
                {"started_at", started_at},
                {"wall_clock_seconds", secs}};
  }

  // One manifest next to each artifact.
  void write_manifests() const {
    const json m = manifest();
    for (const auto& o : outputs) write_text(o + ".manifest.json", m.dump(2) + "\n");
  }

  static void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
    f << text;
    if (!f) throw DataError("failed writing '" + path.string() + "'");
  }
};

std::pair<ModelConfig, ModelWeights> load_model_file(const std::string& path) {
  try {
    return load_model(TensorBundle::load(path));
  } catch (const DataError& e) {
    const std::string what = e.what();
    if (what.find(path) != std::string::npos) throw;
    throw DataError("'" + path + "': " + what);
  }
}

// ---------------------------------------------------------------- check

struct CheckArgs {
  std::string suite = "all";
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_check(Run& run, const CheckArgs& a) {
  run.seed = a.seed;
  const Suite suite = parse_suite(a.suite);
  std::vector<Suite> parts{suite};
  if (suite == Suite::All) parts = {Suite::Presoftmax, Suite::DfaTha, Suite::Postsoftmax, Suite::Degeneration};
  std::vector<std::vector<EquivalenceReport>> results(parts.size());
  const std::size_t threads = thread_cap();
  run.log("running " + std::to_string(parts.size()) + " suite(s), " + std::to_string(a.trials) +
          " trials, " + std::to_string(std::min(threads, parts.size())) + " thread(s)");
  parallel_for(parts.size(), threads, [&](std::size_t i) { results[i] = run_suite(parts[i], a.trials, a.seed); });

  json reports = json::array();
  bool ok = true;
  for (const auto& part : results)
    for (const auto& r : part) {
      reports.push_back(r);
      ok = ok && r.passed;
      run.log(r.name + ": max diff " + sci(r.max_abs_diff) + (r.passed ? " ok" : " FAILED"));
    }
  run.config = {{"suite", a.suite}, {"trials", a.trials}, {"threads", threads}};
  run.out << reports.dump(2) << '\n';
  if (!a.out.empty()) {
    Run::write_text(a.out, reports.dump(2) + "\n");
    run.outputs.push_back(a.out);
    run.write_manifests();
  }
  return ok ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------- fit-scaling

struct FitArgs {
  std::vector<std::string> in;
  std::vector<double> lrs;
  std::optional<double> horizon;
  std::string out;
  std::string plot;
  std::size_t window = 16;
  double threshold = 0.15;
  std::uint64_t seed = 0;
};

std::string svg_fits(const std::vector<LossCurve>& curves, const std::vector<CurveReport>& reports,
                     double horizon, std::optional<double> chosen) {
  plot::LineChart chart;
  chart.title = "Loss curves and fitted power laws";
  chart.x_label = "tokens";
  chart.y_label = "loss";
  chart.log_x = true;
  chart.vlines = {horizon};
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const bool win = chosen && c.lr == *chosen;
    plot::Series obs{c.label, {}, {}, true, false, win};
    for (const auto& p : c.points) {
      obs.x.push_back(p.tokens);
      obs.y.push_back(p.loss);
    }
    chart.series.push_back(obs);
    const auto& f = reports[i].fit;
    if (f && f->converged) {
      plot::Series fit{c.label + " fit", {}, {}, false, true, win};
      for (double d : log_space(c.points.front().tokens, horizon, 80)) {
        fit.x.push_back(d);
        fit.y.push_back(extrapolate(*f, d));
      }
      chart.series.push_back(fit);
    }
  }
  return plot::render(chart);
}

int cmd_fit(Run& run, const FitArgs& a) {
  run.seed = a.seed;
  if (!a.lrs.empty() && a.lrs.size() != a.in.size())
    throw ConfigError("--lr must be given once per --in file (" + std::to_string(a.in.size()) + ")");
  std::vector<LossCurve> curves;
  for (std::size_t i = 0; i < a.in.size(); ++i) {
    curves.push_back(read_curve_csv(a.in[i]));
    if (!a.lrs.empty()) curves.back().lr = a.lrs[i];
    curves.back().validate();
    run.inputs.push_back(a.in[i]);
  }
  SelectionOptions opts;
  opts.window = a.window;
  opts.threshold = a.threshold;
  if (a.window < 2) throw ConfigError("--window must be at least 2");
  const double horizon = a.horizon.value_or(default_horizon(curves));
  std::vector<CurveReport> reports(curves.size());
  parallel_for(curves.size(), thread_cap(), [&](std::size_t i) { reports[i] = report_curve(curves[i], horizon, opts); });

  json verdict;
  std::optional<double> chosen;
  int code = kOk;
  try {
    LrSelection sel = choose_lr(reports, horizon);
    chosen = sel.lr;
    verdict = {{"status", "selected"}, {"lr", sel.lr}, {"label", sel.label}};
    run.log("selected lr " + sci(sel.lr) + " (" + sel.label + ")");
  } catch (const SelectionError& e) {
    verdict = {{"status", "all_spiking"}, {"reason", e.what()}};
    run.log(e.what());
    code = kCheckFailed;
  } catch (const DataError& e) {
    verdict = {{"status", "skipped"}, {"reason", e.what()}};
    run.log(std::string("no selection: ") + e.what());
  }
  for (const auto& r : reports)
    for (const auto& w : r.warnings) run.log(r.label + ": " + w);

  const json doc = {{"horizon", horizon}, {"curves", reports}, {"selection", verdict}};
  run.config = {{"horizon", horizon}, {"window", a.window}, {"threshold", a.threshold},
                {"grid", opts.fit.grid}, {"tolerance", opts.fit.tolerance},
                {"max_iterations", opts.fit.max_iterations}};
  run.out << doc.dump(2) << '\n';
  if (!a.out.empty()) {
    Run::write_text(a.out, doc.dump(2) + "\n");
    run.outputs.push_back(a.out);
  }
  if (!a.plot.empty()) {
    Run::write_text(a.plot, svg_fits(curves, reports, horizon, chosen));
    run.outputs.push_back(a.plot);
  }
  run.write_manifests();
  return code;
}

// ---------------------------------------------------------------- compress

struct CompressArgs {
  std::string in, out;
  std::size_t heads = 0;
  std::vector<std::size_t> layers;
  std::uint64_t seed = 0;
};

std::size_t model_cache_bytes_per_token(const ModelConfig& cfg, const ModelWeights& w) {
  std::size_t total = 0;
  const Tensor x({1, cfg.d_model});
  for (std::size_t l = 0; l < cfg.layers; ++l) total += kv_cache_bytes(cfg.attn_for(l), w.layers[l].attn, x);
  return total;
}

int cmd_compress(Run& run, const CompressArgs& a) {
  run.seed = a.seed;
  run.inputs.push_back(a.in);
  auto [cfg, w] = load_model_file(a.in);
  CompressedModel cm = compress_model(cfg, w, a.heads, a.layers);
  TensorBundle b = store_model(cm.config, cm.weights);
  b.attributes()["compression"] = cm.plan;
  b.save(a.out);
  run.outputs.push_back(a.out);

  const std::size_t before = model_cache_bytes_per_token(cfg, w);
  const std::size_t after = model_cache_bytes_per_token(cm.config, cm.weights);
  const json summary = {{"input", a.in},
                        {"output", a.out},
                        {"plan", cm.plan},
                        {"kv_cache_bytes_per_token", {{"baseline", before}, {"compressed", after}}},
                        {"kv_cache_ratio", static_cast<double>(after) / static_cast<double>(before)},
                        {"parameters", {{"baseline", parameter_count(w)}, {"compressed", parameter_count(cm.weights)}}}};
  run.log("kv cache per token " + std::to_string(before) + " -> " + std::to_string(after) + " bytes");
  run.config = {{"heads", a.heads}, {"layers", a.layers}};
  run.out << summary.dump(2) << '\n';
  run.write_manifests();
  return kOk;
}

// ---------------------------------------------------------------- profile-layers

struct ProfileArgs {
  std::string model, data, out, plot;
  std::size_t heads = 0;
  std::size_t seq_len = 32;
  std::size_t threads = 0;
  std::uint64_t seed = 0;
};

int cmd_profile(Run& run, const ProfileArgs& a) {
  run.seed = a.seed;
  run.inputs = {a.model, a.data};
  auto [cfg, w] = load_model_file(a.model);
  const auto tokens = load_tokens(a.data);
  const std::size_t threads = a.threads == 0 ? thread_cap() : std::min(a.threads, thread_cap());
  const std::size_t kept = a.heads == 0 ? std::max<std::size_t>(1, cfg.attn.g / 2) : a.heads;
  SensitivityProfile p = profile_layers(cfg, w, tokens, kept, a.seq_len, threads);
  for (const auto& r : p.rows)
    run.log("layer " + std::to_string(r.layer) + ": delta " + sci(r.delta));
  run.config = {{"heads", kept}, {"seq_len", a.seq_len}, {"threads", threads}};
  run.out << json(p).dump(2) << '\n';
  if (!a.out.empty()) {
    write_profile_csv(a.out, p);
    run.outputs.push_back(a.out);
  }
  if (!a.plot.empty()) {
    plot::BarChart chart;
    chart.title = "Per-layer loss increase, " + std::to_string(p.H) + " -> " + std::to_string(p.H_prime) + " heads";
    chart.y_label = "delta cross-entropy";
    for (const auto& r : p.rows) chart.bars.push_back({"layer " + std::to_string(r.layer), r.delta});
    Run::write_text(a.plot, plot::render(chart));
    run.outputs.push_back(a.plot);
  }
  run.write_manifests();
  return kOk;
}

// ---------------------------------------------------------------- train-toy

struct TrainArgs {
  std::string variant = "mha";
  std::size_t layers = 4, d_model = 64, heads = 4, groups = 0, h_prime = 0, d_head = 16;
  std::size_t ffn_hidden = 128, vocab = 256, max_seq = 128;
  double lambda_init = 0.5, mix_noise = 0.02;
  bool group_norm = false;
  TrainConfig train;
  std::string schedule = "cosine";
  bool no_abort = false;
  std::string corpus = "copy";
  std::size_t corpus_size = 100000, corpus_k = 2;
  std::string data;
  double holdout = 0.1;
  std::string out_curve, out_model, out_heldout;
};

AttnConfig attn_from(const TrainArgs& a) {
  AttnConfig c;
  c.variant = parse_variant(a.variant);
  c.h = a.heads;
  if (a.variant == "mha") {
    if (a.groups != 0 && a.groups != a.heads) throw ConfigError("mha uses one group per head; use gqa");
    c.g = a.heads;
  } else if (a.variant == "mqa") {
    if (a.groups > 1) throw ConfigError("mqa uses a single group; use gqa");
    c.g = 1;
  } else if (a.variant == "gqa") {
    c.g = a.groups != 0 ? a.groups : std::max<std::size_t>(1, a.heads / 2);
  } else {
    c.g = a.groups != 0 ? a.groups : a.heads;
  }
  c.h_prime = a.h_prime;
  c.d_qk = c.d_v = a.d_head;
  c.d_model = a.d_model;
  c.lambda_init = a.lambda_init;
  c.use_group_norm = a.group_norm;
  return c;
}

int cmd_train(Run& run, TrainArgs a) {
  ModelConfig mc;
  mc.layers = a.layers;
  mc.d_model = a.d_model;
  mc.attn = attn_from(a);
  mc.ffn_hidden = a.ffn_hidden;
  mc.vocab = a.vocab;
  mc.max_seq = a.max_seq;
  mc.mix_noise = a.mix_noise;
  mc.validate();
  a.train.schedule = parse_schedule(a.schedule);
  a.train.abort_on_spike = !a.no_abort;
  a.train.validate();
  if (!(a.holdout >= 0.0 && a.holdout < 1.0)) throw ConfigError("--holdout must be in [0, 1)");
  run.seed = a.train.seed;

  std::vector<int> tokens;
  double floor = 0.0;
  if (!a.data.empty()) {
    tokens = load_tokens(a.data);
    run.inputs.push_back(a.data);
  } else {
    Corpus c = make_corpus(parse_corpus_kind(a.corpus), a.corpus_size, a.train.seed, a.corpus_k);
    tokens = std::move(c.tokens);
    floor = c.entropy_floor;
  }
  const auto split = static_cast<std::size_t>(static_cast<double>(tokens.size()) * (1.0 - a.holdout));
  const std::span<const int> fit_tokens(tokens.data(), split);
  run.log("variant " + a.variant + ", " + std::to_string(split) + " training tokens, " +
          std::to_string(a.train.total_steps) + " steps at lr " + sci(a.train.lr_peak));

  TrainResult res = train(mc, a.train, fit_tokens);
  if (res.unstable) run.log("run aborted: " + res.abort_reason);

  run.config = {{"model", mc}, {"train", a.train}, {"corpus", a.data.empty() ? a.corpus : "file"},
                {"corpus_size", tokens.size()}, {"holdout", a.holdout}};
  if (!a.out_curve.empty()) {
    write_curve_csv(a.out_curve, res.curve);
    run.outputs.push_back(a.out_curve);
  }
  if (!a.out_model.empty()) {
    TensorBundle b = store_model(mc, res.weights);
    b.attributes()["train"] = a.train;
    b.save(a.out_model);
    run.outputs.push_back(a.out_model);
  }
  if (!a.out_heldout.empty()) {
    std::string text(tokens.begin() + static_cast<std::ptrdiff_t>(split), tokens.end());
    Run::write_text(a.out_heldout, text);
    run.outputs.push_back(a.out_heldout);
  }

  json summary = {{"variant", a.variant},
                  {"steps", res.curve.size()},
                  {"first_loss", res.curve.empty() ? 0.0 : res.curve.front().loss},
                  {"final_loss", res.curve.empty() ? 0.0 : res.curve.back().loss},
                  {"unstable", res.unstable},
                  {"abort_reason", res.abort_reason},
                  {"parameters", parameter_count(res.weights)}};
  if (a.data.empty()) summary["entropy_floor"] = floor;
  if (a.holdout > 0.0 && tokens.size() - split > a.train.seq_len && !res.unstable)
    summary["heldout_loss"] = evaluate_loss(mc, res.weights,
                                            std::span<const int>(tokens).subspan(split), a.train.seq_len);
  run.out << summary.dump(2) << '\n';
  run.write_manifests();
  return kOk;
}

// ---------------------------------------------------------------- info

int cmd_info(Run& run, const std::string& path) {
  run.inputs.push_back(path);
  const TensorBundle b = TensorBundle::load(path);
  json tensors = json::array();
  std::size_t offset = 0, elements = 0;
  for (const auto& [name, t] : b.entries()) {
    const std::size_t len = 8 * t.size();
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}, {"len", len}});
    offset += len;
    elements += t.size();
  }
  const json doc = {{"path", path},
                    {"attributes", b.attributes()},
                    {"tensors", tensors},
                    {"parameter_count", elements},
                    {"payload_bytes", b.payload_bytes()}};
  run.out << doc.dump(2) << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mea-lab: attention-variant laboratory (equivalence checks, KV compression, scaling fits, toy training)",
               "mea-lab"};
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", MEA_LAB_VERSION);
  app.option_defaults()->always_capture_default();
  std::string replay;
  app.add_option("--replay", replay, "Re-run the command recorded in a run manifest")->check(CLI::ExistingFile);
  app.require_subcommand(0, 1);

  auto seed_opt = [](CLI::App* s, std::uint64_t& seed) { s->add_option("--seed", seed, "Random seed"); };

  CheckArgs check;
  auto* c = app.add_subcommand("check", "Run the randomized equivalence and degeneration checks");
  c->add_option("--suite", check.suite, "all|presoftmax|dfa-tha|postsoftmax|degeneration")
      ->check(CLI::IsMember({"all", "presoftmax", "dfa-tha", "postsoftmax", "degeneration"}));
  c->add_option("--trials", check.trials, "Random instances per check")->check(CLI::PositiveNumber);
  seed_opt(c, check.seed);
  c->add_option("--out", check.out, "Also write the JSON report here");

  FitArgs fit;
  auto* f = app.add_subcommand("fit-scaling", "Fit L(D) = (Dc/D)^a + L0 per curve and select a learning rate");
  f->add_option("--in", fit.in, "Curve CSVs with tokens and loss columns")->required()->expected(1, -1);
  f->add_option("--lr", fit.lrs, "Learning rate per --in file (default: max of the lr column)")->expected(1, -1);
  f->add_option("--horizon", fit.horizon, "Extrapolation horizon in tokens (default 10x the largest)");
  f->add_option("--out", fit.out, "JSON output");
  f->add_option("--emit-plot", fit.plot, "SVG of the curves and fits");
  f->add_option("--window", fit.window, "Spike detection window");
  f->add_option("--threshold", fit.threshold, "Relative spike threshold");
  seed_opt(f, fit.seed);

  CompressArgs comp;
  auto* k = app.add_subcommand("compress", "SVD-compress the KV heads of a model bundle");
  k->add_option("--in", comp.in, "Model bundle")->required();
  k->add_option("--out", comp.out, "Compressed model bundle")->required();
  k->add_option("--heads", comp.heads, "Heads kept (H')")->required()->check(CLI::PositiveNumber);
  k->add_option("--layers", comp.layers, "Layers to compress (default all)")->expected(1, -1);
  seed_opt(k, comp.seed);

  ProfileArgs prof;
  auto* p = app.add_subcommand("profile-layers", "Per-layer loss sensitivity to KV head compression");
  p->add_option("--model", prof.model, "Model bundle")->required();
  p->add_option("--data", prof.data, "Held-out text corpus")->required();
  p->add_option("--heads", prof.heads, "Heads kept (default: half of the KV heads)");
  p->add_option("--out", prof.out, "CSV output (layer,baseline_ce,compressed_ce,delta)");
  p->add_option("--seq-len", prof.seq_len, "Evaluation window length")->check(CLI::PositiveNumber);
  p->add_option("--threads", prof.threads, "Worker threads (0: MEA_LAB_THREADS or all cores)");
  p->add_option("--emit-plot", prof.plot, "SVG bar chart of the deltas");
  seed_opt(p, prof.seed);

  TrainArgs tr;
  auto* t = app.add_subcommand("train-toy", "Train a small decoder on a synthetic or given corpus");
  t->add_option("--variant", tr.variant, "mha|gqa|mqa|tha|tha-mod|dfa|dfa-nogn|mea|mea-nogn")
      ->check(CLI::IsMember({"mha", "gqa", "mqa", "tha", "tha-mod", "dfa", "dfa-nogn", "mea", "mea-nogn"}));
  t->add_option("--lr", tr.train.lr_peak, "Peak learning rate");
  t->add_option("--steps", tr.train.total_steps, "Optimizer steps");
  seed_opt(t, tr.train.seed);
  t->add_option("--corpus", tr.corpus, "copy|repeat_k|markov")->check(CLI::IsMember({"copy", "repeat_k", "markov"}));
  t->add_option("--corpus-size", tr.corpus_size, "Generated corpus length in bytes");
  t->add_option("--corpus-k", tr.corpus_k, "Cycle length of the repeat_k corpus");
  t->add_option("--data", tr.data, "Train on this text file instead of a generated corpus");
  t->add_option("--holdout", tr.holdout, "Trailing fraction of the corpus kept out of training");
  t->add_option("--layers", tr.layers);
  t->add_option("--d-model", tr.d_model);
  t->add_option("--heads", tr.heads, "Query heads");
  t->add_option("--groups", tr.groups, "KV groups (0: variant default)");
  t->add_option("--h-prime", tr.h_prime, "MEA component heads (0: same as groups)");
  t->add_option("--d-head", tr.d_head, "Per-head key/value width");
  t->add_option("--ffn-hidden", tr.ffn_hidden);
  t->add_option("--vocab", tr.vocab);
  t->add_option("--max-seq", tr.max_seq);
  t->add_option("--lambda-init", tr.lambda_init, "Initial DFA lambda");
  t->add_option("--mix-noise", tr.mix_noise, "Std of the perturbation of identity mixing matrices");
  t->add_flag("--group-norm", tr.group_norm, "Per-head GroupNorm for mha/tha");
  t->add_option("--seq-len", tr.train.seq_len);
  t->add_option("--batch-tokens", tr.train.batch_tokens);
  t->add_option("--warmup", tr.train.warmup_steps);
  t->add_option("--schedule", tr.schedule, "cosine|constant")->check(CLI::IsMember({"cosine", "constant"}));
  t->add_option("--final-fraction", tr.train.final_fraction, "Cosine floor as a fraction of the peak lr");
  t->add_option("--weight-decay", tr.train.weight_decay);
  t->add_option("--beta1", tr.train.beta1);
  t->add_option("--beta2", tr.train.beta2);
  t->add_option("--adam-eps", tr.train.eps);
  t->add_option("--max-grad-norm", tr.train.max_grad_norm, "Global clipping norm (0 disables)");
  t->add_option("--spike-window", tr.train.spike_window);
  t->add_option("--spike-threshold", tr.train.spike_threshold);
  t->add_flag("--no-abort-on-spike", tr.no_abort, "Keep training through loss spikes");
  t->add_flag("--freeze-hlc", tr.train.freeze_hlc, "Keep MEA mixing matrices at their initial values");
  t->add_option("--out-curve", tr.out_curve, "CSV step,tokens,loss,lr");
  t->add_option("--out-model", tr.out_model, "Model bundle");
  t->add_option("--out-heldout", tr.out_heldout, "Write the held-out corpus slice here");

  std::string info_path;
  std::uint64_t info_seed = 0;
  auto* i = app.add_subcommand("info", "List the tensors and attributes of a bundle");
  i->add_option("bundle", info_path, "Tensor bundle")->required();
  seed_opt(i, info_seed);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(std::move(rev));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  if (!replay.empty()) {
    if (!app.get_subcommands().empty()) {
      err << "--replay takes no subcommand\n";
      return kUsage;
    }
    try {
      std::ifstream in(replay);
      const json m = json::parse(in);
      return run(m.at("argv").get<std::vector<std::string>>(), out, err);
    } catch (const json::exception& e) {
      err << "mea-lab: '" << replay << "' is not a run manifest: " << e.what() << '\n';
      return kDataError;
    }
  }
  if (app.get_subcommands().empty()) {
    err << app.help();
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  Run r(sub, out, err);
  try {
    if (sub == c) return cmd_check(r, check);
    if (sub == f) return cmd_fit(r, fit);
    if (sub == k) return cmd_compress(r, comp);
    if (sub == p) return cmd_profile(r, prof);
    if (sub == t) return cmd_train(r, tr);
    r.seed = info_seed;
    return cmd_info(r, info_path);
  } catch (const ConfigError& e) {
    err << "mea-lab " << sub->get_name() << ": " << e.what() << '\n' << sub->help();
    return kUsage;
  } catch (const SelectionError& e) {
    err << "mea-lab " << sub->get_name() << ": " << e.what() << '\n';
    return kCheckFailed;
  } catch (const std::exception& e) {
    err << "mea-lab " << sub->get_name() << ": " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace mea::cli
