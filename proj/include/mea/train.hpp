#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mea/model.hpp"

namespace mea {

enum class Schedule { Cosine, Constant };

struct TrainConfig {
  double lr_peak = 3e-3;
  std::size_t warmup_steps = 50;
  Schedule schedule = Schedule::Cosine;
  double final_fraction = 0.1;  // cosine ends at final_fraction * lr_peak
  double weight_decay = 0.1;
  std::size_t batch_tokens = 64;  // rounded down to whole windows, at least one
  std::size_t seq_len = 32;
  std::size_t total_steps = 500;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::size_t spike_window = 16;
  double spike_threshold = 0.15;
  bool abort_on_spike = true;
  bool freeze_hlc = false;  // keep MEA mixing matrices at their initial value

  void validate() const;
  std::size_t windows_per_step() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
Schedule parse_schedule(const std::string& name);

double lr_at(std::size_t step, const TrainConfig& cfg);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

/// Decoupled AdamW: p *= 1 - lr*wd, then p -= lr * mhat / (sqrt(vhat) + eps).
/// `decay[i]` selects which parameters are decayed (all when empty).
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                double lr, double weight_decay, const AdamConfig& cfg = {},
                const std::vector<bool>& decay = {});

enum class CorpusKind { Copy, RepeatK, Markov };
CorpusKind parse_corpus_kind(const std::string& name);
const char* corpus_kind_name(CorpusKind k);

struct Corpus {
  std::vector<int> tokens;  // bytes
  double entropy_floor = 0.0;  // nats per token for an ideal predictor
};

constexpr std::size_t kCopyPrefix = 8;
constexpr std::size_t kMarkovStates = 4;

/// copy: records "<8 random lowercase letters>|<same letters>\n".
/// repeat_k: the first k lowercase letters cycled.
/// markov: order-1 chain over 'a'..'d' with markov_transitions().
Corpus make_corpus(CorpusKind kind, std::size_t size, std::uint64_t seed, std::size_t k = 2);

/// Row-stochastic transition matrix of the markov corpus (fixed, seed-free).
Tensor markov_transitions();

std::vector<int> tokens_from_text(const std::string& text);
std::vector<int> load_tokens(const std::filesystem::path& path);

/// Online form of the spike rule used while training. It runs on the
/// trailing mean of the last `window` step losses: a smoothed loss above
/// median(previous `window` smoothed losses) * (1 + threshold) opens an
/// episode, and the run is unstable if the spike condition still holds
/// `window` steps later, when the mean covers only post-spike steps.
/// Non-finite losses abort immediately.
class SpikeMonitor {
 public:
  SpikeMonitor(std::size_t window, double threshold);
  /// Returns true when the run should abort.
  bool observe(double loss);
  const std::string& reason() const { return reason_; }

 private:
  std::size_t window_;
  double threshold_;
  std::vector<double> raw_;
  std::vector<double> history_;
  double ref_ = 0.0;
  std::size_t episode_ = 0;
  std::string reason_;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t tokens = 0;  // tokens consumed after this step
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> curve;
  ModelWeights weights;
  bool unstable = false;
  std::string abort_reason;
};

/// Trains from init_model(model_cfg, rng(seed)); windows are drawn from
/// `tokens` with the same stream. The loss recorded at step s is the batch
/// loss before the update of step s.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, std::span<const int> tokens);

/// Same, from given initial weights.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, std::span<const int> tokens,
                  ModelWeights init);

void write_curve_csv(const std::filesystem::path& path, const std::vector<StepRecord>& curve);

}  // namespace mea
