#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vara/config.hpp"
#include "vara/data.hpp"
#include "vara/io.hpp"
#include "vara/losses.hpp"
#include "vara/model.hpp"

namespace vara {

// max_lr * min(step / warmup, sqrt(warmup / step)).
double lr_schedule(int step, int warmup, double max_lr);

struct AdamState {
  std::vector<std::vector<double>> m, v;  // one entry per store item, in store order
  long t = 0;
};

AdamState make_adam_state(const ParamStore& store);

// One bias-corrected Adam step on a flat parameter with moments m, v at step t (>= 1).
void adam_update(std::span<double> p, std::span<const double> g, std::span<double> m, std::span<double> v, long t,
                 double lr, double b1, double b2, double eps);

// Padded batch. Each mel is padded to the longest member with the mel floor;
// lengths[i] marks where member i's real frames end.
struct Batch {
  std::vector<std::string> ids;
  std::vector<std::vector<int>> tokens;
  std::vector<std::optional<int>> speakers;
  std::vector<Tensor> mels;
  std::vector<std::size_t> lengths;
  std::vector<double> speed_targets;

  std::size_t size() const { return ids.size(); }
};

Batch make_batch(std::span<const Utterance* const> utts, const SpeedStats& stats);

struct BatchForward {
  Tensor total;
  LossTerms terms;
  std::vector<double> kl_per_layer;  // per-frame nats, batch mean
  double gain_reference = 0.0;  // per-element scale
  std::vector<ForwardResult> results;
};

// Losses for a batch. Each member only ever sees its own unpadded frames.
// The KL entering the ELBO and the gain's inputs are normalized per mel element
// and averaged over the batch; kl_per_layer reports the per-frame values. A fixed gain_reference makes the loss a
// smooth function of the parameters for finite-difference checks.
BatchForward batch_forward(const Batch& batch, const VaraModel& m, const LossConfig& loss, Rng& rng,
                           Mode mode = Mode::kTrain, std::optional<double> gain_reference = std::nullopt);

struct StepResult {
  LossBreakdown loss;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool clipped = false;
};

// Throws ConfigError when the corpus cannot feed this model.
void check_compatibility(const Config& cfg, const Corpus& corpus);

class Trainer {
 public:
  Trainer(const Config& cfg, const Corpus& corpus);

  Config cfg;
  const Corpus* corpus;
  VaraModel model;
  AdamState adam;
  Rng rng;
  int step = 0;

  // Members for the next step; a pure function of (seed, step).
  Batch next_batch() const;
  StepResult train_step(const Batch& batch);
  StepResult train_step() { return train_step(next_batch()); }

  std::vector<const Utterance*> train_split;
};

struct EvalRecord {
  int step = 0;
  LossBreakdown loss;                // mean over the split
  std::vector<double> kl_per_layer;  // per-frame nats
  std::vector<double> cumulative_kl; // prefix sums of kl_per_layer
  double speed_mse = 0.0;
  double neg_elbo = 0.0;             // recon + normalized KL
};

// Posterior-mean forward pass over every utterance; consumes no randomness.
EvalRecord evaluate(std::span<const Utterance* const> split, const VaraModel& m, const LossConfig& loss,
                    int step = 0);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Config cfg;
  Vocab vocab;
  SpeedStats speed_stats;
  VaraModel model;
  AdamState adam;
  int step = 0;
  Rng rng;
};

void save_checkpoint(const std::filesystem::path& path, const Config& cfg, const Vocab& vocab, const VaraModel& m,
                     const AdamState& adam, int step, const Rng& rng);
void save_checkpoint(const std::filesystem::path& path, const Trainer& t);
// `expected` (when given) must match the stored layout digest.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);
// Installs a checkpoint's state into a trainer built for the same config.
void restore(Trainer& t, Checkpoint&& ck);

using Logger = std::function<void(const std::string&)>;

struct RunOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  Logger log;
};

struct RunResult {
  std::vector<TelemetryRecord> telemetry;
  std::vector<EvalRecord> evals;
};

// Probe for heatmaps: the first validation utterance, else the first training one.
const Utterance* probe_utterance(const Corpus& corpus);
// Eval-mode alignments (initial, then one per group) for one utterance.
std::vector<Tensor> probe_alignments(const Utterance& u, const VaraModel& m);

// Runs until t.step == t.cfg.train.steps. Writes train.csv, valid.csv,
// checkpoints and probe heatmaps under out_dir.
RunResult run_training(Trainer& t, const RunOptions& opts);

void write_eval_csv(const std::filesystem::path& path, const std::vector<EvalRecord>& rows);

struct AblationEntry {
  std::string name;
  Config cfg;
  RunResult run;
  EvalRecord final_eval;
  std::vector<Tensor> alignments;
};

struct AblationReport {
  std::uint64_t seed = 0;
  std::vector<AblationEntry> entries;
};

// Trains base + each grid delta with the same seed. With an output directory,
// writes <name>/train.csv, <name>/valid.csv, <name>/align_*.pgm, side_by_side.csv and summary.csv.
AblationReport run_ablation(const Config& base, const std::vector<GridEntry>& grid, const Corpus& corpus,
                            const RunOptions& opts);

}  // namespace vara
