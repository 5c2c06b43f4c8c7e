#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "vara/config.hpp"
#include "vara/data.hpp"
#include "vara/errors.hpp"
#include "vara/io.hpp"
#include "vara/model.hpp"
#include "vara/trainer.hpp"

namespace fs = std::filesystem;
using namespace vara;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Level { kError = 0, kInfo = 1, kDebug = 2 };

Level log_level() {
  const char* env = std::getenv("VARA_LOG_LEVEL");
  if (!env) return Level::kInfo;
  const std::string s = env;
  if (s == "error") return Level::kError;
  if (s == "debug") return Level::kDebug;
  if (s == "info" || s.empty()) return Level::kInfo;
  throw UsageError("VARA_LOG_LEVEL must be one of error, info, debug (got '" + s + "')");
}

void log(Level at, const std::string& msg) {
  if (static_cast<int>(at) <= static_cast<int>(log_level())) std::cerr << msg << '\n';
}

// Output directories may not exist yet; an existing one must be empty unless --force.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) throw IoError(dir.string() + " already exists (pass --force to overwrite)");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void print_corpus_summary(const Corpus& c) {
  std::size_t n[3] = {0, 0, 0};
  for (const auto& u : c.utterances) ++n[static_cast<int>(u.split)];
  std::printf("utterances: %zu (train %zu, valid %zu, test %zu)\n", c.utterances.size(), n[0], n[1], n[2]);
  std::printf("vocab: %d symbols, mel bands: %d, speakers: %d\n", c.vocab.size(), c.n_mels, c.n_speakers);
  std::printf("frames/token ratio: min %.17g max %.17g\n", c.speed_stats.min_ratio, c.speed_stats.max_ratio);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f << s;
  if (!f) throw IoError("write failed for " + p.string());
}

// ---- subcommands ----

struct SyntheticArgs {
  std::uint64_t seed = 1;
  int n = 1000;
  int vocab = 12;
  int n_mels = 80;
  fs::path out;
  bool force = false;
};

int run_make_synthetic(const SyntheticArgs& a) {
  if (a.n <= 0) throw UsageError("--n must be positive");
  if (a.vocab < 2) throw UsageError("--vocab must be at least 2");
  prepare_out_dir(a.out, a.force);
  Rng rng(a.seed);
  SyntheticConfig sc;
  sc.n_mels = a.n_mels;
  Corpus c = make_synthetic_corpus(rng, a.n, a.vocab, sc);
  save_corpus(c, a.out);
  print_corpus_summary(c);
  return kExitOk;
}

struct PrepareArgs {
  fs::path metadata, wavs, out;
  MelConfig mel;
  double valid_fraction = 0.1, test_fraction = 0.1;
  bool force = false;
};

int run_prepare(const PrepareArgs& a) {
  prepare_out_dir(a.out, a.force);
  Corpus c = prepare_corpus(a.metadata, a.wavs, a.mel, a.valid_fraction, a.test_fraction);
  save_corpus(c, a.out);
  print_corpus_summary(c);
  return kExitOk;
}

struct TrainArgs {
  std::optional<fs::path> config;
  fs::path data, out;
  std::optional<fs::path> resume;
  std::map<std::string, std::string> overrides;
  bool force = false;
};

int run_train(const TrainArgs& a) {
  Config cfg = a.config ? load_config(*a.config) : Config{};
  for (const auto& [k, v] : a.overrides) set_config_value(cfg, k, v);
  cfg.validate();
  Corpus corpus = load_corpus(a.data);
  // Everything that can be checked is checked before the output directory is touched.
  check_compatibility(cfg, corpus);
  std::optional<Checkpoint> ck;
  if (a.resume) ck = load_checkpoint(*a.resume, &cfg.model);
  prepare_out_dir(a.out, a.force);
  write_text(a.out / "config.txt", format_config(cfg));

  Trainer t(cfg, corpus);
  if (ck) {
    restore(t, std::move(*ck));
    log(Level::kInfo, "resumed at step " + std::to_string(t.step));
  }
  log(Level::kInfo, "training " + std::to_string(t.model.store.scalar_count()) + " parameters for " +
                        std::to_string(cfg.train.steps) + " steps");
  RunOptions opts{a.out, [](const std::string& s) {
                    const bool eval = s.rfind("eval", 0) == 0;
                    log(eval ? Level::kInfo : Level::kDebug, s);
                  }};
  RunResult r = run_training(t, opts);
  if (!r.evals.empty()) {
    const auto& e = r.evals.back();
    std::printf("step %d valid recon %.6g kl %.6g speed_mse %.6g neg_elbo %.6g\n", e.step, e.loss.recon,
                e.loss.kl_total, e.speed_mse, e.neg_elbo);
  } else if (!r.telemetry.empty()) {
    std::printf("step %d train total %.6g\n", r.telemetry.back().step, r.telemetry.back().loss.total);
  }
  return kExitOk;
}

struct SynthArgs {
  fs::path ckpt, out;
  std::string text;
  std::optional<int> speaker;
  std::optional<std::size_t> frames;
  std::uint64_t seed = 0;
  bool force = false;
};

int run_synthesize(const SynthArgs& a) {
  if (a.frames && *a.frames == 0) throw UsageError("--frames must be positive");
  Checkpoint ck = load_checkpoint(a.ckpt);
  const std::vector<int> tokens = tokenize(a.text, ck.vocab);
  if (tokens.empty()) throw UsageError("--text is empty");
  for (int id : tokens)
    if (id == Vocab::kUnk) log(Level::kInfo, "warning: text contains symbols outside the training vocabulary");
  prepare_out_dir(a.out, a.force);

  TextEncoding text = encode_text(tokens, a.speaker, ck.model.text);
  Rng rng(a.seed);
  ForwardResult r = forward_infer(text, ck.model, rng, a.frames);
  write_feature_record(a.out / "mel.vfeat", MelSpectrogram::from_tensor(r.mel_hat));
  std::string info = "frames " + std::to_string(r.t_mel) + "\n";
  info += "tokens " + std::to_string(tokens.size()) + "\n";
  info += "predicted_speed " + std::to_string(r.speed.item()) + "\n";
  info += std::string("clamped ") + (r.clamped ? "true" : "false") + "\n";
  info += std::string("frames_source ") + (a.frames ? "override" : "speed") + "\n";
  write_text(a.out / "frames.txt", info);
  for (std::size_t i = 0; i < r.alignments.size(); ++i) {
    const std::string stem = "align_layer" + std::to_string(i);
    write_alignment_csv(a.out / (stem + ".csv"), r.alignments[i], static_cast<int>(i));
    write_pgm(a.out / (stem + ".pgm"), r.alignments[i]);
  }
  std::printf("frames %zu%s\n", r.t_mel, r.clamped ? " (clamped)" : "");
  return kExitOk;
}

struct DiagnoseArgs {
  fs::path ckpt, data, out;
  double threshold = 1e-3;
  bool force = false;
};

int run_diagnose(const DiagnoseArgs& a) {
  if (!(a.threshold >= 0.0)) throw UsageError("--threshold must be non-negative");
  Checkpoint ck = load_checkpoint(a.ckpt);
  Corpus corpus = load_corpus(a.data);
  check_compatibility(ck.cfg, corpus);
  auto split = corpus.split(Split::kValid);
  if (split.empty()) {
    log(Level::kInfo, "no validation split; using the training split");
    split = corpus.split(Split::kTrain);
  }
  prepare_out_dir(a.out, a.force);
  EvalRecord e = evaluate(split, ck.model, ck.cfg.loss, ck.step);

  CsvTable per;
  per.header = {"layer", "kl_per_frame", "collapsed"};
  CsvTable cum;
  cum.header = {"layer", "cumulative_kl"};
  std::vector<std::size_t> collapsed;
  for (std::size_t i = 0; i < e.kl_per_layer.size(); ++i) {
    const bool c = e.kl_per_layer[i] < a.threshold;
    if (c) collapsed.push_back(i);
    per.rows.push_back({static_cast<double>(i), e.kl_per_layer[i], c ? 1.0 : 0.0});
    cum.rows.push_back({static_cast<double>(i), e.cumulative_kl[i]});
  }
  const std::string note = "step " + std::to_string(ck.step) + ", threshold " + std::to_string(a.threshold);
  write_csv(a.out / "kl_per_layer.csv", per, note);
  write_csv(a.out / "cumulative_kl.csv", cum, note);
  for (std::size_t i = 0; i < e.kl_per_layer.size(); ++i)
    std::printf("layer %zu kl %.6g cumulative %.6g%s\n", i, e.kl_per_layer[i], e.cumulative_kl[i],
                e.kl_per_layer[i] < a.threshold ? " COLLAPSED" : "");
  std::printf("collapsed layers: %zu\n", collapsed.size());
  return kExitOk;
}

struct AblateArgs {
  std::optional<fs::path> config;
  fs::path grid, data, out;
  std::map<std::string, std::string> overrides;
  bool force = false;
};

int run_ablate(const AblateArgs& a) {
  std::vector<GridEntry> grid = load_grid(a.grid);
  if (grid.size() < 2) throw UsageError("grid " + a.grid.string() + " needs at least two configurations");
  Config base = a.config ? load_config(*a.config) : Config{};
  for (const auto& [k, v] : a.overrides) set_config_value(base, k, v);
  Corpus corpus = load_corpus(a.data);
  for (const auto& g : grid) {
    Config c = base;
    for (const auto& [k, v] : g.overrides) set_config_value(c, k, v);
    c.validate();
    check_compatibility(c, corpus);
  }
  prepare_out_dir(a.out, a.force);
  RunOptions opts{a.out, [](const std::string& s) { log(Level::kInfo, s); }};
  AblationReport rep = run_ablation(base, grid, corpus, opts);
  std::printf("shared seed %llu\n", static_cast<unsigned long long>(rep.seed));
  for (const auto& e : rep.entries)
    std::printf("%s: valid recon %.6g kl %.6g speed_mse %.6g neg_elbo %.6g\n", e.name.c_str(),
                e.final_eval.loss.recon, e.final_eval.loss.kl_total, e.final_eval.speed_mse, e.final_eval.neg_elbo);
  return kExitOk;
}

// Every config key becomes --<key> on the subcommands that take a config.
void add_overrides(CLI::App* cmd, std::map<std::string, std::string>& into) {
  for (const auto& k : config_keys()) {
    const std::string name = k.name;
    cmd->add_option_function<std::string>(
           "--" + name, [&into, name](const std::string& v) { into[name] = v; }, k.help)
        ->group("Config overrides");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical variational TTS acoustic model: data, training, inference, diagnostics"};
  app.require_subcommand(1);

  SyntheticArgs syn;
  auto* c_syn = app.add_subcommand("make-synthetic", "generate a synthetic corpus with known alignments");
  c_syn->add_option("--seed", syn.seed, "generator seed");
  c_syn->add_option("--n", syn.n, "number of utterances");
  c_syn->add_option("--vocab", syn.vocab, "vocabulary size including the unknown symbol");
  c_syn->add_option("--n-mels", syn.n_mels, "mel bands");
  c_syn->add_option("--out", syn.out, "output corpus directory")->required();
  c_syn->add_flag("--force", syn.force, "overwrite a non-empty output directory");

  PrepareArgs prep;
  auto* c_prep = app.add_subcommand("prepare-data", "extract mel features from id|text[|speaker] metadata and wavs");
  c_prep->add_option("--metadata", prep.metadata, "metadata file")->required()->check(CLI::ExistingFile);
  c_prep->add_option("--wavs", prep.wavs, "directory with <id>.wav files")->required()->check(CLI::ExistingDirectory);
  c_prep->add_option("--out", prep.out, "output corpus directory")->required();
  c_prep->add_option("--sample-rate", prep.mel.sample_rate, "target sample rate");
  c_prep->add_option("--window", prep.mel.window, "STFT window");
  c_prep->add_option("--hop", prep.mel.hop, "STFT hop");
  c_prep->add_option("--n-mels", prep.mel.n_mels, "mel bands");
  c_prep->add_option("--valid-fraction", prep.valid_fraction, "validation fraction");
  c_prep->add_option("--test-fraction", prep.test_fraction, "test fraction");
  c_prep->add_flag("--force", prep.force, "overwrite a non-empty output directory");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model");
  c_train->add_option("--config", tr.config, "config file (key = value lines)")->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "corpus directory")->required();
  c_train->add_option("--out", tr.out, "run directory")->required();
  c_train->add_option("--resume", tr.resume, "checkpoint to resume from");
  c_train->add_flag("--force", tr.force, "write into a non-empty run directory");
  add_overrides(c_train, tr.overrides);

  SynthArgs sy;
  auto* c_sy = app.add_subcommand("synthesize", "generate a mel-spectrogram from text");
  c_sy->add_option("--ckpt", sy.ckpt, "checkpoint")->required();
  c_sy->add_option("--text", sy.text, "input text")->required();
  c_sy->add_option("--speaker", sy.speaker, "speaker id");
  c_sy->add_option("--frames", sy.frames, "override the predicted frame count");
  c_sy->add_option("--seed", sy.seed, "sampling seed");
  c_sy->add_option("--out", sy.out, "output directory")->required();
  c_sy->add_flag("--force", sy.force, "overwrite a non-empty output directory");

  DiagnoseArgs dk;
  auto* c_dk = app.add_subcommand("diagnose-kl", "per-layer KL and posterior collapse report");
  c_dk->add_option("--ckpt", dk.ckpt, "checkpoint")->required();
  c_dk->add_option("--data", dk.data, "corpus directory")->required();
  c_dk->add_option("--out", dk.out, "output directory")->required();
  c_dk->add_option("--threshold", dk.threshold, "per-frame KL below which a layer counts as collapsed");
  c_dk->add_flag("--force", dk.force, "overwrite a non-empty output directory");

  AblateArgs ab;
  auto* c_ab = app.add_subcommand("ablate", "train every configuration of a grid with a shared seed");
  c_ab->add_option("--grid", ab.grid, "grid file: [name] sections of key = value deltas")->required();
  c_ab->add_option("--config", ab.config, "base config file")->check(CLI::ExistingFile);
  c_ab->add_option("--data", ab.data, "corpus directory")->required();
  c_ab->add_option("--out", ab.out, "output directory")->required();
  c_ab->add_flag("--force", ab.force, "overwrite a non-empty output directory");
  add_overrides(c_ab, ab.overrides);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    log_level();
    if (c_syn->parsed()) return run_make_synthetic(syn);
    if (c_prep->parsed()) return run_prepare(prep);
    if (c_train->parsed()) return run_train(tr);
    if (c_sy->parsed()) return run_synthesize(sy);
    if (c_dk->parsed()) return run_diagnose(dk);
    if (c_ab->parsed()) return run_ablate(ab);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitUsage;
}
