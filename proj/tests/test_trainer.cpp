#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"
#include "vara/errors.hpp"
#include "vara/trainer.hpp"

using namespace vara;
namespace fs = std::filesystem;

namespace {

Config tiny_config() {
  Config c;
  c.model = testutil::tiny_model();
  c.train.batch_size = 2;
  c.train.max_lr = 2e-3;
  c.train.warmup = 5;
  c.train.steps = 10;
  c.train.seed = 5;
  c.train.log_interval = 1;
  c.train.eval_interval = 5;
  c.train.ckpt_interval = 1000;
  return c;
}

bool same_params(const VaraModel& a, const VaraModel& b) {
  const auto& x = a.store.items();
  const auto& y = b.store.items();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto u = x[i].second.values();
    auto v = y[i].second.values();
    if (x[i].first != y[i].first || !std::equal(u.begin(), u.end(), v.begin(), v.end())) return false;
  }
  return true;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

// ---- schedule and optimizer ----

TEST(LrSchedule, WarmupThenInverseSqrt) {
  const double lr = 1.5e-4;
  const int w = 10000;
  EXPECT_DOUBLE_EQ(lr_schedule(w, w, lr), lr);
  EXPECT_DOUBLE_EQ(lr_schedule(w / 2, w, lr), lr / 2);
  EXPECT_DOUBLE_EQ(lr_schedule(4 * w, w, lr), lr / 2);
  EXPECT_DOUBLE_EQ(lr_schedule(1, w, lr), lr / w);
  for (int k = 1; k <= 16; ++k) EXPECT_NEAR(lr_schedule(k * w, w, lr), lr / std::sqrt(k), 1e-18);
  double prev = 0.0;
  for (int s = 1; s <= w; s += 97) {
    const double v = lr_schedule(s, w, lr);
    EXPECT_GT(v, prev);
    prev = v;
  }
  EXPECT_THROW(lr_schedule(0, w, lr), InvalidArgument);
}

TEST(Adam, MatchesScalarReference) {
  Rng rng(1);
  const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> p(5), m(5, 0.0), v(5, 0.0);
  for (auto& x : p) x = rng.normal();
  std::vector<double> rp = p, rm(5, 0.0), rv(5, 0.0);
  for (long t = 1; t <= 100; ++t) {
    std::vector<double> g(5);
    for (std::size_t i = 0; i < 5; ++i) g[i] = 2.0 * p[i] + 0.1 * rng.normal();
    adam_update(p, g, m, v, t, lr, b1, b2, eps);
    for (std::size_t i = 0; i < 5; ++i) {
      rm[i] = b1 * rm[i] + (1 - b1) * g[i];
      rv[i] = b2 * rv[i] + (1 - b2) * g[i] * g[i];
      const double mh = rm[i] / (1 - std::pow(b1, static_cast<double>(t)));
      const double vh = rv[i] / (1 - std::pow(b2, static_cast<double>(t)));
      rp[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    for (std::size_t i = 0; i < 5; ++i) ASSERT_NEAR(p[i], rp[i], 1e-12) << "t=" << t;
  }
  // First step moves every coordinate by lr against the sign of its gradient.
  std::vector<double> q{1.0, -1.0}, qm(2, 0.0), qv(2, 0.0), qg{3.0, -0.5};
  adam_update(q, qg, qm, qv, 1, 0.1, b1, b2, 0.0);
  EXPECT_NEAR(q[0], 0.9, 1e-15);
  EXPECT_NEAR(q[1], -0.9, 1e-15);
  EXPECT_THROW(adam_update(q, qg, qm, qv, 0, 0.1, b1, b2, eps), InvalidArgument);
}

// ---- batching ----

TEST(Batch, PadsWithFloorAndRecordsLengths) {
  Corpus c = testutil::tiny_corpus(1, 6);
  std::vector<const Utterance*> us{&c.utterances[0], &c.utterances[1], &c.utterances[2]};
  Batch b = make_batch(us, c.speed_stats);
  std::size_t longest = 0;
  for (auto* u : us) longest = std::max(longest, u->n_frames());
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(b.lengths[i], us[i]->n_frames());
    EXPECT_EQ(b.mels[i].rows(), longest);
    for (std::size_t t = b.lengths[i]; t < longest; ++t)
      for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(b.mels[i].at(t, k), kMelFloor);
    EXPECT_EQ(b.speed_targets[i], speaking_speed_target(us[i]->n_frames(), us[i]->n_tokens(), c.speed_stats));
  }
  EXPECT_THROW(make_batch({}, c.speed_stats), InvalidArgument);
}

TEST(Batch, PaddingNeverReachesLossOrGradients) {
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(2, 8);
  VaraModel m = VaraModel::create(cfg.model, 3);
  std::vector<const Utterance*> us;
  for (const auto& u : c.utterances) us.push_back(&u);
  Batch b = make_batch(us, c.speed_stats);
  Batch junk = b;
  for (std::size_t i = 0; i < junk.size(); ++i) {
    junk.mels[i] = Tensor(b.mels[i].shape(), std::vector<double>(b.mels[i].values().begin(), b.mels[i].values().end()));
    auto v = junk.mels[i].mutable_values();
    for (std::size_t t = b.lengths[i]; t < b.mels[i].rows(); ++t)
      for (std::size_t k = 0; k < 6; ++k) v[t * 6 + k] = 50.0 + static_cast<double>(t);
  }
  auto grads = [&](const Batch& bb) {
    m.store.zero_grad();
    Rng rng(4);
    BatchForward f = batch_forward(bb, m, cfg.loss, rng);
    f.total.backward();
    std::vector<double> g{f.total.item()};
    for (const auto& [name, t] : m.store.items()) g.insert(g.end(), t.grad().begin(), t.grad().end());
    return g;
  };
  const auto a = grads(b), z = grads(junk);
  ASSERT_EQ(a.size(), z.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], z[i], 1e-9 * std::max(1.0, std::abs(a[i])));
}

TEST(Batch, MemberResultsMatchSingletonForward) {
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(3, 4);
  VaraModel m = VaraModel::create(cfg.model, 5);
  std::vector<const Utterance*> us{&c.utterances[0], &c.utterances[1], &c.utterances[2]};
  Rng r0(0);
  BatchForward all = batch_forward(make_batch(us, c.speed_stats), m, cfg.loss, r0, Mode::kEval);
  for (std::size_t i = 0; i < us.size(); ++i) {
    std::vector<const Utterance*> one{us[i]};
    Rng r1(0);
    BatchForward s = batch_forward(make_batch(one, c.speed_stats), m, cfg.loss, r1, Mode::kEval);
    const Tensor& x = all.results[i].mel_hat;
    const Tensor& y = s.results[0].mel_hat;
    ASSERT_EQ(x.size(), y.size());
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(x[k], y[k]);
  }
}

TEST(Compatibility, RejectsMismatchedCorpus) {
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(1, 4);
  EXPECT_NO_THROW(check_compatibility(cfg, c));
  Config bad = cfg;
  bad.model.n_mels = 7;
  EXPECT_THROW(check_compatibility(bad, c), ConfigError);
  bad = cfg;
  bad.model.vocab_size = 2;
  EXPECT_THROW(check_compatibility(bad, c), ConfigError);
  Corpus none = c;
  for (auto& u : none.utterances) u.split = Split::kValid;
  EXPECT_THROW(check_compatibility(cfg, none), ConfigError);
  Corpus multi = c;
  multi.n_speakers = 3;
  EXPECT_THROW(check_compatibility(cfg, multi), ConfigError);
}

// ---- training ----

TEST(Trainer, BatchesArePureFunctionOfSeedAndStep) {
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(1, 10);
  Trainer a(cfg, c), b(cfg, c);
  b.train_step();
  b.train_step();
  a.step = 2;
  EXPECT_EQ(a.next_batch().ids, b.next_batch().ids);
  Config other = cfg;
  other.train.seed = 6;
  Trainer d(other, c);
  d.step = 2;
  bool differs = false;
  for (int s = 2; s < 8; ++s, ++a.step, ++d.step) differs |= a.next_batch().ids != d.next_batch().ids;
  EXPECT_TRUE(differs);
}

TEST(Trainer, DeterministicAcrossInstances) {
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(1, 10);
  Trainer a(cfg, c), b(cfg, c);
  for (int i = 0; i < 6; ++i) {
    StepResult x = a.train_step(), y = b.train_step();
    EXPECT_EQ(x.loss.total, y.loss.total);
    EXPECT_EQ(x.grad_norm, y.grad_norm);
  }
  EXPECT_TRUE(same_params(a.model, b.model));
}

TEST(Trainer, LossDecreases) {
  Config cfg = tiny_config();
  cfg.train.batch_size = 4;
  Corpus c = testutil::tiny_corpus(7, 20);
  Trainer t(cfg, c);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 80; ++i) {
    const double v = t.train_step().loss.total;
    if (i < 10) first += v;
    if (i >= 70) last += v;
  }
  EXPECT_LT(last, first);
}

TEST(Trainer, StepReportsScheduleAndClipping) {
  Config cfg = tiny_config();
  cfg.train.clip_norm = 1e-6;
  Corpus c = testutil::tiny_corpus(1, 6);
  Trainer t(cfg, c);
  StepResult s = t.train_step();
  EXPECT_EQ(t.step, 1);
  EXPECT_DOUBLE_EQ(s.lr, lr_schedule(1, cfg.train.warmup, cfg.train.max_lr));
  EXPECT_TRUE(s.clipped);
  EXPECT_GT(s.grad_norm, 1e-6);
  EXPECT_NEAR(s.loss.total,
              s.loss.alpha * s.loss.speed + s.loss.recon + s.loss.beta * s.loss.kl_total + s.loss.lambda * s.loss.gain,
              1e-9);
}

TEST(Trainer, NonFiniteLossNamesTheBatch) {
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(1, 6);
  Trainer t(cfg, c);
  Tensor w = t.model.out_w;
  w.mutable_values()[0] = std::nan("");
  Batch b = t.next_batch();
  try {
    t.train_step(b);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find(b.ids[0]), std::string::npos) << e.what();
  }
}

TEST(Trainer, LambdaOnlyChangesTheGainTerm) {
  Config on = tiny_config(), off = tiny_config();
  off.loss.lambda = 0.0;
  Corpus c = testutil::tiny_corpus(2, 8);
  Trainer a(on, c), b(off, c);
  StepResult x = a.train_step(), y = b.train_step();
  EXPECT_EQ(x.loss.recon, y.loss.recon);
  EXPECT_EQ(x.loss.kl_total, y.loss.kl_total);
  EXPECT_EQ(x.loss.speed, y.loss.speed);
  EXPECT_EQ(x.loss.gain, y.loss.gain);
  EXPECT_NEAR(x.loss.total - y.loss.total, x.loss.gain, 1e-12);
}

TEST(Trainer, DefaultDeskConfigStaysFinite) {
  Config cfg;
  cfg.model = desk_model();
  cfg.train.batch_size = 1;
  cfg.train.max_lr = 5e-4;
  cfg.train.warmup = 50;
  Rng rng(3);
  Corpus c = make_synthetic_corpus(rng, 40, 12, SyntheticConfig{});
  Trainer t(cfg, c);
  for (int i = 0; i < 200; ++i) {
    StepResult s = t.train_step();
    ASSERT_TRUE(std::isfinite(s.loss.total)) << "step " << t.step;
  }
}

// ---- evaluation ----

TEST(Evaluate, DeterministicWithPrefixSums) {
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(4, 12);
  VaraModel m = VaraModel::create(cfg.model, 2);
  m.speed_stats = c.speed_stats;
  auto split = c.split(Split::kTrain);
  EvalRecord a = evaluate(split, m, cfg.loss, 3), b = evaluate(split, m, cfg.loss, 3);
  EXPECT_EQ(a.loss.total, b.loss.total);
  EXPECT_EQ(a.step, 3);
  ASSERT_EQ(a.cumulative_kl.size(), a.kl_per_layer.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.kl_per_layer.size(); ++i) {
    EXPECT_GE(a.kl_per_layer[i], 0.0);
    s += a.kl_per_layer[i];
    EXPECT_NEAR(a.cumulative_kl[i], s, 1e-12);
    if (i > 0) EXPECT_GE(a.cumulative_kl[i], a.cumulative_kl[i - 1]);
  }
  EXPECT_NEAR(a.neg_elbo, a.loss.recon + a.loss.kl_total, 1e-12);
}

TEST(Evaluate, PinnedLayerIsAFlatSegment) {
  Config cfg = tiny_config();
  cfg.model.pinned_layers = {1};
  Corpus c = testutil::tiny_corpus(4, 12);
  Trainer t(cfg, c);
  for (int i = 0; i < 5; ++i) t.train_step();
  EvalRecord e = evaluate(c.split(Split::kTrain), t.model, cfg.loss);
  EXPECT_EQ(e.kl_per_layer[1], 0.0);
  EXPECT_EQ(e.cumulative_kl[1], e.cumulative_kl[0]);
  EXPECT_GT(e.kl_per_layer[2], 0.0);
}

// ---- checkpoints ----

TEST(Checkpoint, ResumeIsBitExact) {
  testutil::TempDir dir;
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(1, 10);
  Trainer straight(cfg, c);
  for (int i = 0; i < 6; ++i) straight.train_step();

  Trainer first(cfg, c);
  for (int i = 0; i < 3; ++i) first.train_step();
  save_checkpoint(dir.path / "mid.vckpt", first);
  Trainer resumed(cfg, c);
  restore(resumed, load_checkpoint(dir.path / "mid.vckpt", &cfg.model));
  EXPECT_EQ(resumed.step, 3);
  for (int i = 0; i < 3; ++i) resumed.train_step();
  EXPECT_TRUE(same_params(straight.model, resumed.model));
  EXPECT_EQ(straight.adam.t, resumed.adam.t);
  EXPECT_EQ(straight.adam.m, resumed.adam.m);
  EXPECT_EQ(straight.adam.v, resumed.adam.v);
  EXPECT_EQ(straight.rng.counter(), resumed.rng.counter());
}

TEST(Checkpoint, RoundTripsMetadata) {
  testutil::TempDir dir;
  Config cfg = tiny_config();
  cfg.loss.beta = 1.25;
  Corpus c = testutil::tiny_corpus(1, 6);
  Trainer t(cfg, c);
  t.train_step();
  save_checkpoint(dir.path / "a.vckpt", t);
  Checkpoint ck = load_checkpoint(dir.path / "a.vckpt");
  EXPECT_EQ(ck.step, 1);
  EXPECT_EQ(ck.cfg.loss.beta, 1.25);
  EXPECT_EQ(config_digest(ck.cfg.model), config_digest(cfg.model));
  EXPECT_EQ(ck.vocab.size(), c.vocab.size());
  EXPECT_EQ(ck.speed_stats.min_ratio, c.speed_stats.min_ratio);
  EXPECT_EQ(ck.speed_stats.max_ratio, c.speed_stats.max_ratio);
  EXPECT_EQ(ck.rng.seed(), t.rng.seed());
  EXPECT_EQ(ck.rng.counter(), t.rng.counter());
  EXPECT_TRUE(same_params(ck.model, t.model));
  EXPECT_FALSE(fs::exists(dir.path / "a.vckpt.tmp"));
}

TEST(Checkpoint, RejectsCorruptionAndForeignConfigs) {
  testutil::TempDir dir;
  Config cfg = tiny_config();
  Corpus c = testutil::tiny_corpus(1, 6);
  Trainer t(cfg, c);
  const fs::path p = dir.path / "c.vckpt";
  save_checkpoint(p, t);
  const auto bytes = read_bytes(p);

  auto corrupt = [&](std::vector<char> b) {
    const fs::path q = dir.path / "bad.vckpt";
    write_bytes(q, b);
    return q;
  };
  EXPECT_THROW(load_checkpoint(corrupt({bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2)})),
               FormatError);
  EXPECT_THROW(load_checkpoint(corrupt({bytes.begin(), bytes.begin() + 10})), FormatError);
  auto extra = bytes;
  extra.push_back('x');
  EXPECT_THROW(load_checkpoint(corrupt(extra)), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(load_checkpoint(corrupt(magic)), FormatError);
  auto version = bytes;
  version[8] = 9;
  EXPECT_THROW(load_checkpoint(corrupt(version)), VersionError);
  auto digest = bytes;
  digest[12] ^= 0x40;
  EXPECT_THROW(load_checkpoint(corrupt(digest)), FormatError);

  ModelConfig other = cfg.model;
  other.channels = 8;
  EXPECT_THROW(load_checkpoint(p, &other), ConfigError);
  EXPECT_THROW(load_checkpoint(dir.path / "missing.vckpt"), IoError);

  Config bigger = cfg;
  bigger.model.latent_dim = 3;
  Trainer wrong(bigger, c);
  EXPECT_THROW(restore(wrong, load_checkpoint(p)), ConfigError);
}

// ---- runs ----

TEST(RunTraining, WritesTelemetryProbesAndCheckpoints) {
  testutil::TempDir dir;
  Config cfg = tiny_config();
  cfg.train.steps = 6;
  cfg.train.log_interval = 2;
  cfg.train.eval_interval = 3;
  cfg.train.ckpt_interval = 3;
  Corpus c = testutil::tiny_corpus(1, 20);
  ASSERT_FALSE(c.split(Split::kValid).empty());
  Trainer t(cfg, c);
  std::vector<std::string> lines;
  RunResult r = run_training(t, {dir.path, [&](const std::string& s) { lines.push_back(s); }});
  EXPECT_EQ(t.step, 6);
  ASSERT_EQ(r.telemetry.size(), 3u);
  EXPECT_EQ(r.telemetry[0].step, 2);
  ASSERT_EQ(r.evals.size(), 2u);
  EXPECT_EQ(r.evals[1].step, 6);
  EXPECT_FALSE(lines.empty());

  auto tel = read_telemetry_csv(dir.path / "train.csv");
  ASSERT_EQ(tel.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(tel[i].step, r.telemetry[i].step);
    EXPECT_EQ(tel[i].loss.total, r.telemetry[i].loss.total);
    EXPECT_EQ(tel[i].loss.kl_per_layer, r.telemetry[i].loss.kl_per_layer);
  }
  CsvTable valid = read_csv(dir.path / "valid.csv");
  EXPECT_EQ(valid.rows.size(), 2u);
  EXPECT_TRUE(fs::exists(dir.path / "ckpt_step3.vckpt"));
  EXPECT_TRUE(fs::exists(dir.path / "ckpt_step6.vckpt"));
  EXPECT_EQ(load_checkpoint(dir.path / "last.vckpt").step, 6);
  for (int layer = 0; layer <= 2; ++layer)
    EXPECT_TRUE(fs::exists(dir.path / "probe" / ("step6_layer" + std::to_string(layer) + ".pgm")));
}

TEST(Ablation, SharedSeedAndSummaries) {
  testutil::TempDir dir;
  Config cfg = tiny_config();
  cfg.train.steps = 4;
  cfg.train.eval_interval = 2;
  Corpus c = testutil::tiny_corpus(1, 20);
  auto grid = parse_grid("[with_gain]\nloss.lambda = 1\n[no_gain]\nloss.lambda = 0\n");
  AblationReport rep = run_ablation(cfg, grid, c, {dir.path, {}});
  ASSERT_EQ(rep.entries.size(), 2u);
  EXPECT_EQ(rep.seed, cfg.train.seed);
  EXPECT_EQ(rep.entries[1].cfg.loss.lambda, 0.0);
  // The first step sees identical batches and weights, so only the gain weighting differs.
  const auto& a = rep.entries[0].run.telemetry[0].loss;
  const auto& b = rep.entries[1].run.telemetry[0].loss;
  EXPECT_EQ(a.recon, b.recon);
  EXPECT_EQ(a.kl_total, b.kl_total);

  for (const char* name : {"with_gain", "no_gain"}) {
    EXPECT_TRUE(fs::exists(dir.path / name / "train.csv"));
    EXPECT_TRUE(fs::exists(dir.path / name / "valid.csv"));
    EXPECT_TRUE(fs::exists(dir.path / name / "align_layer2.pgm"));
  }
  CsvTable side = read_csv(dir.path / "side_by_side.csv");
  EXPECT_EQ(side.header.size(), 11u);
  EXPECT_EQ(side.rows.size(), 4u);
  std::ifstream f(dir.path / "summary.csv");
  std::string comment, header, row;
  std::getline(f, comment);
  std::getline(f, header);
  std::getline(f, row);
  EXPECT_NE(comment.find("shared seed 5"), std::string::npos);
  EXPECT_EQ(header, "name,steps,train_total,valid_recon,valid_kl_total,valid_speed_mse,valid_neg_elbo,cum_kl_final");
  EXPECT_EQ(row.rfind("with_gain,4,", 0), 0u);

  EXPECT_THROW(run_ablation(cfg, {grid[0]}, c, {}), InvalidArgument);
}
