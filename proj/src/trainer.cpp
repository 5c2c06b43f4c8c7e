#include "vara/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "vara/errors.hpp"

namespace vara {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

double lr_schedule(int step, int warmup, double max_lr) {
  if (step < 1) throw InvalidArgument("lr_schedule: step must be >= 1, got " + std::to_string(step));
  if (warmup < 1) throw InvalidArgument("lr_schedule: warmup must be >= 1");
  const double s = step, w = warmup;
  return max_lr * std::min(s / w, std::sqrt(w / s));
}

AdamState make_adam_state(const ParamStore& store) {
  AdamState a;
  for (const auto& [name, t] : store.items()) {
    a.m.emplace_back(t.size(), 0.0);
    a.v.emplace_back(t.size(), 0.0);
  }
  return a;
}

void adam_update(std::span<double> p, std::span<const double> g, std::span<double> m, std::span<double> v, long t,
                 double lr, double b1, double b2, double eps) {
  if (t < 1) throw InvalidArgument("adam_update: t must be >= 1");
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g.empty() ? 0.0 : g[i];
    m[i] = b1 * m[i] + (1.0 - b1) * gi;
    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
    p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
  }
}

Batch make_batch(std::span<const Utterance* const> utts, const SpeedStats& stats) {
  if (utts.empty()) throw InvalidArgument("make_batch: empty batch");
  Batch b;
  std::size_t t_max = 0;
  for (const auto* u : utts) t_max = std::max(t_max, u->n_frames());
  for (const auto* u : utts) {
    const std::size_t T = u->n_frames(), M = u->mel.n_mels;
    std::vector<double> padded(t_max * M, kMelFloor);
    std::copy(u->mel.data.begin(), u->mel.data.end(), padded.begin());
    b.ids.push_back(u->id);
    b.tokens.push_back(u->tokens);
    b.speakers.push_back(u->speaker_id);
    b.mels.emplace_back(Shape{t_max, M}, std::move(padded));
    b.lengths.push_back(T);
    b.speed_targets.push_back(speaking_speed_target(T, u->n_tokens(), stats));
  }
  return b;
}

BatchForward batch_forward(const Batch& batch, const VaraModel& m, const LossConfig& loss, Rng& rng, Mode mode,
                           std::optional<double> gain_reference) {
  const std::size_t B = batch.size();
  if (B == 0) throw InvalidArgument("batch_forward: empty batch");
  const double M = static_cast<double>(m.cfg.n_mels);
  const std::size_t n_layers = static_cast<std::size_t>(m.cfg.n_latent_layers());

  BatchForward out;
  std::vector<Tensor> recons, speeds;
  std::vector<std::vector<Tensor>> per_elem(n_layers), per_frame(n_layers);
  for (std::size_t i = 0; i < B; ++i) {
    Tensor mel = take_rows(batch.mels[i], batch.lengths[i]);
    ForwardResult r = forward_train(batch.tokens[i], batch.speakers[i], mel, m, rng, mode);
    recons.push_back(reshape(recon_loss(mel, r.mel_hat), {1}));
    speeds.push_back(r.speed);
    const double T = static_cast<double>(batch.lengths[i]);
    for (std::size_t l = 0; l < n_layers; ++l) {
      per_elem[l].push_back(reshape(scale(r.layers[l].kl, 1.0 / (T * M)), {1}));
      per_frame[l].push_back(reshape(scale(r.layers[l].kl, 1.0 / (T * static_cast<double>(B))), {1}));
    }
    out.results.push_back(std::move(r));
  }
  std::vector<Tensor> kl_layers, kl_frames;
  for (std::size_t l = 0; l < n_layers; ++l) {
    kl_layers.push_back(sum_scalars(per_elem[l]));
    kl_frames.push_back(sum_scalars(per_frame[l]));
    out.kl_per_layer.push_back(kl_frames.back().item());
  }
  out.terms.recon = scale(sum_scalars(recons), 1.0 / static_cast<double>(B));
  out.terms.speed = speed_loss(speeds, batch.speed_targets);
  out.terms.kl = kl_total(kl_layers, B);
  // The gain sees the same per-element scale as the ELBO's KL so that lambda and
  // beta weigh commensurate quantities. Which layers sit below the reference is
  // the same as on the per-frame scale.
  std::vector<Tensor> kl_gain;
  std::vector<double> kl_gain_values;
  for (const Tensor& k : kl_frames) {
    kl_gain.push_back(scale(k, 1.0 / M));
    kl_gain_values.push_back(kl_gain.back().item());
  }
  out.gain_reference = gain_reference ? *gain_reference : kl_reference(kl_gain_values, loss.c);
  out.terms.gain = detailed_kl_gain(kl_gain, loss.c, loss.printed_gain, out.gain_reference);
  out.total = total_loss(out.terms, loss);
  return out;
}

void check_compatibility(const Config& cfg, const Corpus& corpus) {
  cfg.validate();
  if (cfg.model.n_mels != corpus.n_mels)
    throw ConfigError("model.n_mels=" + std::to_string(cfg.model.n_mels) + " but the corpus has " +
                      std::to_string(corpus.n_mels) + " mel bands");
  if (cfg.model.vocab_size < corpus.vocab.size())
    throw ConfigError("model.vocab_size=" + std::to_string(cfg.model.vocab_size) + " is smaller than the corpus vocabulary (" +
                      std::to_string(corpus.vocab.size()) + ")");
  if (corpus.n_speakers > cfg.model.n_speakers)
    throw ConfigError("corpus has " + std::to_string(corpus.n_speakers) + " speakers but model.n_speakers=" +
                      std::to_string(cfg.model.n_speakers));
  validate(corpus.speed_stats);
  const auto train = corpus.split(Split::kTrain);
  if (train.empty()) throw ConfigError("corpus has no training utterances");
  for (const auto& u : corpus.utterances)
    if (u.n_frames() < static_cast<std::size_t>(cfg.model.max_reduction()))
      throw ConfigError("utterance " + u.id + " has " + std::to_string(u.n_frames()) +
                        " frames, fewer than the total reduction " + std::to_string(cfg.model.max_reduction()));
}

Trainer::Trainer(const Config& c, const Corpus& data)
    : cfg(c), corpus(&data), model(VaraModel::create(c.model, c.train.seed)), rng(c.train.seed ^ 0x9E3779B97F4A7C15ULL) {
  check_compatibility(cfg, data);
  model.speed_stats = data.speed_stats;
  adam = make_adam_state(model.store);
  train_split = data.split(Split::kTrain);
}

Batch Trainer::next_batch() const {
  Rng pick(cfg.train.seed * 0x2545F4914F6CDD1DULL + static_cast<std::uint64_t>(step) + 1);
  std::vector<const Utterance*> members;
  for (int i = 0; i < cfg.train.batch_size; ++i)
    members.push_back(train_split[pick.uniform_int(0, train_split.size() - 1)]);
  return make_batch(members, model.speed_stats);
}

StepResult Trainer::train_step(const Batch& batch) {
  model.store.zero_grad();
  BatchForward f = batch_forward(batch, model, cfg.loss, rng, Mode::kTrain);
  auto fail = [&](const std::string& what) {
    std::string ids;
    for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ",") + id;
    throw NumericError(what + " at step " + std::to_string(step + 1) + " (recon=" +
                       std::to_string(f.terms.recon.item()) + " kl=" + std::to_string(f.terms.kl.item()) +
                       " speed=" + std::to_string(f.terms.speed.item()) + "); batch ids: " + ids);
  };
  if (!std::isfinite(f.total.item())) fail("non-finite loss");
  f.total.backward();

  double sq = 0.0;
  for (const auto& [name, p] : model.store.items())
    for (double g : p.grad()) sq += g * g;
  StepResult res;
  res.grad_norm = std::sqrt(sq);
  if (!std::isfinite(res.grad_norm)) fail("non-finite gradient");
  const double clip = res.grad_norm > cfg.train.clip_norm ? cfg.train.clip_norm / res.grad_norm : 1.0;
  res.clipped = clip < 1.0;

  ++step;
  res.lr = lr_schedule(step, cfg.train.warmup, cfg.train.max_lr);
  ++adam.t;
  std::vector<double> g;
  const auto& items = model.store.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor p = items[i].second;
    auto grad = p.grad();
    g.assign(grad.begin(), grad.end());
    if (g.empty()) g.assign(p.size(), 0.0);
    if (res.clipped)
      for (double& x : g) x *= clip;
    adam_update(p.mutable_values(), g, adam.m[i], adam.v[i], adam.t, res.lr, cfg.train.adam_b1, cfg.train.adam_b2,
                cfg.train.adam_eps);
  }
  model.store.zero_grad();
  res.loss = breakdown(f.terms, f.total, f.kl_per_layer, cfg.loss);
  return res;
}

EvalRecord evaluate(std::span<const Utterance* const> split, const VaraModel& m, const LossConfig& loss, int step) {
  EvalRecord rec;
  rec.step = step;
  const std::size_t n_layers = static_cast<std::size_t>(m.cfg.n_latent_layers());
  rec.kl_per_layer.assign(n_layers, 0.0);
  rec.loss.kl_per_layer.assign(n_layers, 0.0);
  if (split.empty()) return rec;
  const double n = static_cast<double>(split.size());
  Rng unused(0);
  for (const auto* u : split) {
    const Utterance* one[] = {u};
    Batch b = make_batch(one, m.speed_stats);
    BatchForward f = batch_forward(b, m, loss, unused, Mode::kEval);
    LossBreakdown lb = breakdown(f.terms, f.total, f.kl_per_layer, loss);
    rec.loss.speed += lb.speed / n;
    rec.loss.recon += lb.recon / n;
    rec.loss.kl_total += lb.kl_total / n;
    rec.loss.gain += lb.gain / n;
    rec.loss.total += lb.total / n;
    for (std::size_t l = 0; l < n_layers; ++l) rec.kl_per_layer[l] += lb.kl_per_layer[l] / n;
  }
  rec.loss.kl_per_layer = rec.kl_per_layer;
  rec.loss.alpha = loss.alpha;
  rec.loss.beta = loss.beta;
  rec.loss.lambda = loss.lambda;
  rec.loss.c = loss.c;
  rec.speed_mse = rec.loss.speed;
  rec.neg_elbo = rec.loss.recon + rec.loss.kl_total;
  double acc = 0.0;
  for (double k : rec.kl_per_layer) rec.cumulative_kl.push_back(acc += k);
  return rec;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'V', 'A', 'R', 'A', 'c', 'k', 'p', 't'};
constexpr std::uint8_t kF32 = 0, kF64 = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_blob(std::ostream& out, const std::string& name, const Shape& shape, std::span<const double> data) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(out, d);
  put<std::uint8_t>(out, kF64);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : b_(std::move(bytes)), path_(std::move(path)) {}
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void raw(void* dst, std::size_t n) {
    if (n > b_.size() - pos_) throw FormatError(path_, "truncated checkpoint");
    std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::string b_;
  std::string path_;
  std::size_t pos_ = 0;
};

struct Blob {
  Shape shape;
  std::vector<double> data;
};

}  // namespace

void save_checkpoint(const fs::path& path, const Config& cfg, const Vocab& vocab, const VaraModel& m,
                     const AdamState& adam, int step, const Rng& rng) {
  json meta;
  meta["config"] = format_config(cfg);
  meta["vocab"] = vocab.symbols();
  meta["speed_stats"] = {{"min_ratio", m.speed_stats.min_ratio}, {"max_ratio", m.speed_stats.max_ratio}};
  meta["step"] = step;
  meta["rng"] = {{"seed", rng.seed()}, {"counter", rng.counter()}};
  meta["adam_t"] = adam.t;
  const std::string meta_text = meta.dump();

  std::ostringstream out(std::ios::binary);
  out.write(kCkptMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, config_digest(cfg.model));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  const auto& items = m.store.items();
  const bool with_adam = adam.m.size() == items.size();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(items.size() * (with_adam ? 3 : 1)));
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& [name, t] = items[i];
    put_blob(out, "param/" + name, t.shape(), t.values());
    if (with_adam) {
      put_blob(out, "adam.m/" + name, t.shape(), adam.m[i]);
      put_blob(out, "adam.v/" + name, t.shape(), adam.v[i]);
    }
  }
  // Write to a sibling file first so a crash never leaves a half-written checkpoint.
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write " + tmp.string());
    const std::string bytes = out.str();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void save_checkpoint(const fs::path& path, const Trainer& t) {
  save_checkpoint(path, t.cfg, t.corpus->vocab, t.model, t.adam, t.step, t.rng);
}

Checkpoint load_checkpoint(const fs::path& path, const ModelConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  Reader r(ss.str(), path.string());

  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0) throw FormatError(path.string(), "not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError(path.string(), "checkpoint version " + std::to_string(version) + ", expected " +
                                           std::to_string(kCheckpointVersion));
  const auto digest = r.get<std::uint64_t>();
  if (expected && config_digest(*expected) != digest)
    throw ConfigError(path.string() + ": checkpoint was written for a different model configuration");
  const auto meta_len = r.get<std::uint32_t>();
  json meta;
  Config cfg;
  try {
    meta = json::parse(r.str(meta_len));
    cfg = parse_config(meta.at("config").get<std::string>(), path.string());
  } catch (const json::exception& e) {
    throw FormatError(path.string(), std::string("bad metadata: ") + e.what());
  }
  if (config_digest(cfg.model) != digest) throw FormatError(path.string(), "stored config does not match its digest");

  std::unordered_map<std::string, Blob> blobs;
  const auto n_blobs = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_blobs; ++i) {
    Blob b;
    const std::string name = r.str(r.get<std::uint32_t>());
    const auto nd = r.get<std::uint32_t>();
    if (nd > 8) throw FormatError(path.string(), "blob " + name + " has implausible rank");
    for (std::uint32_t d = 0; d < nd; ++d) b.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const auto dtype = r.get<std::uint8_t>();
    const std::size_t n = shape_size(b.shape);
    if (dtype == kF64) {
      b.data.resize(n);
      r.raw(b.data.data(), n * sizeof(double));
    } else if (dtype == kF32) {
      std::vector<float> tmp(n);
      r.raw(tmp.data(), n * sizeof(float));
      b.data.assign(tmp.begin(), tmp.end());
    } else {
      throw FormatError(path.string(), "blob " + name + " has unknown dtype");
    }
    blobs.emplace(name, std::move(b));
  }
  if (!r.done()) throw FormatError(path.string(), "trailing bytes after the last blob");

  Checkpoint ck{cfg, Vocab(meta.at("vocab").get<std::vector<std::string>>()), {}, VaraModel::create(cfg.model, 0),
                {}, meta.at("step").get<int>(), Rng(0)};
  ck.speed_stats = {meta["speed_stats"]["min_ratio"].get<double>(), meta["speed_stats"]["max_ratio"].get<double>()};
  ck.model.speed_stats = ck.speed_stats;
  ck.rng.restore(meta["rng"]["seed"].get<std::uint64_t>(), meta["rng"]["counter"].get<std::uint64_t>());
  ck.adam = make_adam_state(ck.model.store);
  ck.adam.t = meta.at("adam_t").get<long>();
  const auto& items = ck.model.store.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& [name, t] = items[i];
    auto take = [&](const std::string& key, std::span<double> dst, bool required) {
      auto it = blobs.find(key);
      if (it == blobs.end()) {
        if (required) throw FormatError(path.string(), "missing blob " + key);
        return;
      }
      if (it->second.shape != t.shape())
        throw FormatError(path.string(), "blob " + key + " has shape " + shape_string(it->second.shape) + ", expected " +
                                             shape_string(t.shape()));
      std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
    };
    Tensor p = t;
    take("param/" + name, p.mutable_values(), true);
    take("adam.m/" + name, ck.adam.m[i], false);
    take("adam.v/" + name, ck.adam.v[i], false);
  }
  return ck;
}

void restore(Trainer& t, Checkpoint&& ck) {
  if (config_digest(ck.cfg.model) != config_digest(t.cfg.model))
    throw ConfigError("checkpoint model configuration differs from the trainer's");
  t.model.store.copy_values_from(ck.model.store);
  t.model.speed_stats = ck.speed_stats;
  t.adam = std::move(ck.adam);
  t.step = ck.step;
  t.rng = ck.rng;
}

// ---- runs ------------------------------------------------------------------

const Utterance* probe_utterance(const Corpus& corpus) {
  auto valid = corpus.split(Split::kValid);
  if (!valid.empty()) return valid.front();
  auto train = corpus.split(Split::kTrain);
  return train.empty() ? nullptr : train.front();
}

std::vector<Tensor> probe_alignments(const Utterance& u, const VaraModel& m) {
  Rng unused(0);
  ForwardResult r = forward_train(u.tokens, u.speaker_id, u.mel.tensor(), m, unused, Mode::kEval);
  return r.alignments;
}

void write_eval_csv(const fs::path& path, const std::vector<EvalRecord>& rows) {
  CsvTable t;
  t.header = {"step", "recon", "kl_total", "gain", "total", "speed_mse", "neg_elbo"};
  const std::size_t n = rows.empty() ? 0 : rows.front().kl_per_layer.size();
  for (std::size_t i = 0; i < n; ++i) t.header.push_back("kl_" + std::to_string(i));
  for (std::size_t i = 0; i < n; ++i) t.header.push_back("cum_kl_" + std::to_string(i));
  for (const auto& r : rows) {
    std::vector<double> row{static_cast<double>(r.step), r.loss.recon, r.loss.kl_total, r.loss.gain,
                            r.loss.total,                r.speed_mse,  r.neg_elbo};
    row.insert(row.end(), r.kl_per_layer.begin(), r.kl_per_layer.end());
    row.insert(row.end(), r.cumulative_kl.begin(), r.cumulative_kl.end());
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

namespace {

void write_probe(const fs::path& dir, const std::string& tag, const std::vector<Tensor>& aligns) {
  for (std::size_t i = 0; i < aligns.size(); ++i)
    write_pgm(dir / (tag + "_layer" + std::to_string(i) + ".pgm"), aligns[i]);
}

}  // namespace

RunResult run_training(Trainer& t, const RunOptions& opts) {
  RunResult res;
  const bool emit = !opts.out_dir.empty();
  const auto valid = t.corpus->split(Split::kValid);
  const Utterance* probe = probe_utterance(*t.corpus);
  const auto& tc = t.cfg.train;
  const auto t0 = std::chrono::steady_clock::now();
  auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  auto flush = [&] {
    if (!emit) return;
    write_telemetry_csv(opts.out_dir / "train.csv", res.telemetry);
    write_eval_csv(opts.out_dir / "valid.csv", res.evals);
  };

  while (t.step < tc.steps) {
    StepResult s = t.train_step();
    if (tc.log_interval > 0 && t.step % tc.log_interval == 0) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.telemetry.push_back({t.step, s.loss, wall});
      std::ostringstream msg;
      msg << "step " << t.step << " total=" << s.loss.total << " recon=" << s.loss.recon << " kl=" << s.loss.kl_total
          << " gain=" << s.loss.gain << " speed=" << s.loss.speed << " |g|=" << s.grad_norm << " lr=" << s.lr;
      log(msg.str());
    }
    const bool last = t.step == tc.steps;
    if ((tc.eval_interval > 0 && t.step % tc.eval_interval == 0) || last) {
      if (!valid.empty()) {
        res.evals.push_back(evaluate(valid, t.model, t.cfg.loss, t.step));
        log("eval step " + std::to_string(t.step) + " recon=" + std::to_string(res.evals.back().loss.recon) +
            " speed_mse=" + std::to_string(res.evals.back().speed_mse));
      }
      if (emit && probe) write_probe(opts.out_dir / "probe", "step" + std::to_string(t.step), probe_alignments(*probe, t.model));
      flush();
    }
    if (emit && ((tc.ckpt_interval > 0 && t.step % tc.ckpt_interval == 0) || last)) {
      save_checkpoint(opts.out_dir / ("ckpt_step" + std::to_string(t.step) + ".vckpt"), t);
      save_checkpoint(opts.out_dir / "last.vckpt", t);
    }
  }
  flush();
  return res;
}

AblationReport run_ablation(const Config& base, const std::vector<GridEntry>& grid, const Corpus& corpus,
                            const RunOptions& opts) {
  if (grid.size() < 2) throw InvalidArgument("run_ablation: need at least two configurations");
  AblationReport rep;
  rep.seed = base.train.seed;
  const bool emit = !opts.out_dir.empty();
  const auto valid = corpus.split(Split::kValid);
  const Utterance* probe = probe_utterance(corpus);
  for (const auto& g : grid) {
    AblationEntry e;
    e.name = g.name;
    e.cfg = base;
    for (const auto& [k, v] : g.overrides) set_config_value(e.cfg, k, v);
    e.cfg.train.seed = base.train.seed;
    if (opts.log) opts.log("ablation: training '" + g.name + "'");
    Trainer t(e.cfg, corpus);
    RunOptions sub{emit ? opts.out_dir / g.name : fs::path{}, opts.log};
    e.run = run_training(t, sub);
    e.final_eval = evaluate(valid, t.model, e.cfg.loss, t.step);
    if (probe) e.alignments = probe_alignments(*probe, t.model);
    if (emit && probe) write_probe(opts.out_dir / g.name, "align", e.alignments);
    rep.entries.push_back(std::move(e));
  }
  if (!emit) return rep;

  // The summary is built from the CSVs on disk so it reflects exactly what was written.
  std::vector<std::vector<TelemetryRecord>> tel;
  for (const auto& e : rep.entries) tel.push_back(read_telemetry_csv(opts.out_dir / e.name / "train.csv"));

  CsvTable side;
  side.header = {"step"};
  for (const auto& e : rep.entries)
    for (const char* col : {"total", "recon", "kl_total", "gain", "speed"}) side.header.push_back(e.name + "." + col);
  const std::size_t n_rows = tel.empty() ? 0 : tel.front().size();
  for (std::size_t r = 0; r < n_rows; ++r) {
    std::vector<double> row{static_cast<double>(tel.front()[r].step)};
    for (const auto& t : tel) {
      if (r >= t.size()) throw InvalidArgument("run_ablation: telemetry lengths differ");
      const auto& l = t[r].loss;
      row.insert(row.end(), {l.total, l.recon, l.kl_total, l.gain, l.speed});
    }
    side.rows.push_back(std::move(row));
  }
  write_csv(opts.out_dir / "side_by_side.csv", side, "shared seed " + std::to_string(rep.seed) + " for every configuration");

  std::ofstream sum(opts.out_dir / "summary.csv");
  if (!sum) throw IoError("cannot write summary in " + opts.out_dir.string());
  sum << "# shared seed " << rep.seed << " for every configuration\n";
  sum << "name,steps,train_total,valid_recon,valid_kl_total,valid_speed_mse,valid_neg_elbo,cum_kl_final\n";
  sum.precision(17);
  for (std::size_t i = 0; i < rep.entries.size(); ++i) {
    const auto& e = rep.entries[i];
    const double train_total = tel[i].empty() ? NAN : tel[i].back().loss.total;
    const double cum = e.final_eval.cumulative_kl.empty() ? 0.0 : e.final_eval.cumulative_kl.back();
    sum << e.name << ',' << e.cfg.train.steps << ',' << train_total << ',' << e.final_eval.loss.recon << ','
        << e.final_eval.loss.kl_total << ',' << e.final_eval.speed_mse << ',' << e.final_eval.neg_elbo << ',' << cum
        << '\n';
  }
  return rep;
}

}  // namespace vara
