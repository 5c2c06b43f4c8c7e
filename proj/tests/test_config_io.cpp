#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"
#include "vara/attention.hpp"
#include "vara/config.hpp"
#include "vara/errors.hpp"
#include "vara/io.hpp"

using namespace vara;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  f << s;
}

}  // namespace

// ---- config ----

TEST(Config, FormatParseRoundTrip) {
  Config c;
  c.model = full_scale_model();
  c.model.pinned_layers = {0, 3};
  c.model.g_list = {0.015, 0.3};
  c.model.separate_speed = true;
  c.loss.beta = 1.0 / 3.0;
  c.train.max_lr = 1.2345678901234567e-4;
  c.train.seed = 0xFFFFFFFFFFull;
  const std::string text = format_config(c);
  Config back = parse_config(text);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.loss.beta, c.loss.beta);
  EXPECT_EQ(back.train.max_lr, c.train.max_lr);
  EXPECT_EQ(back.train.seed, c.train.seed);
  EXPECT_EQ(back.model.pinned_layers, c.model.pinned_layers);
  EXPECT_EQ(back.model.g_list, c.model.g_list);
  EXPECT_TRUE(back.model.separate_speed);
  EXPECT_EQ(config_digest(back.model), config_digest(c.model));
}

TEST(Config, EveryKeyRoundTripsThroughGetAndSet) {
  Config c;
  for (const auto& k : config_keys()) {
    const std::string v = get_config_value(c, k.name);
    Config d;
    set_config_value(d, k.name, v);
    EXPECT_EQ(get_config_value(d, k.name), v) << k.name;
  }
}

TEST(Config, CommentsBlankLinesAndPartialFiles) {
  Config c = parse_config("# desk run\n\nloss.lambda = 0   # ablation\n  train.steps=42\n");
  EXPECT_EQ(c.loss.lambda, 0.0);
  EXPECT_EQ(c.train.steps, 42);
  Config d;
  EXPECT_EQ(c.model.channels, d.model.channels);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("model.nope = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("train.steps = ten\n"), ConfigError);
  EXPECT_THROW(parse_config("train.steps = 10x\n"), ConfigError);
  EXPECT_THROW(parse_config("loss.beta = \n"), ConfigError);
  EXPECT_THROW(parse_config("model.separate_speed = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
  try {
    parse_config("a = 1\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg"), std::string::npos);
  }
  EXPECT_THROW(load_config("/nonexistent/dir/x.cfg"), IoError);
}

TEST(Config, Validation) {
  ModelConfig m = desk_model();
  EXPECT_NO_THROW(m.validate());
  ModelConfig bad = m;
  bad.reductions.push_back(2);
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = m;
  bad.attn_dim = 63;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = m;
  bad.text_kernel = 4;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = m;
  bad.pinned_layers = {m.n_latent_layers()};
  EXPECT_THROW(bad.validate(), ConfigError);
  TrainConfig t;
  t.warmup = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Config, LayoutDigestIgnoresTrainingKeys) {
  Config a, b;
  b.train.steps = 99;
  b.loss.beta = 0.1;
  EXPECT_EQ(config_digest(a.model), config_digest(b.model));
  b.model.latent_dim += 1;
  EXPECT_NE(config_digest(a.model), config_digest(b.model));
}

TEST(Config, PresetShapes) {
  ModelConfig f = full_scale_model();
  EXPECT_EQ(f.max_reduction(), 16);
  EXPECT_EQ(f.n_latent_layers(), 1 + [&] {
    int n = 0;
    for (int b : f.blocks) n += b;
    return n;
  }());
  ModelConfig d = desk_model();
  EXPECT_LE(d.channels, f.channels);
}

// ---- CSV and telemetry ----

TEST(Csv, RoundTripWithComment) {
  testutil::TempDir dir;
  CsvTable t;
  t.header = {"a", "b"};
  t.rows = {{1.0 / 3.0, -2e-300}, {1e300, 0.1}};
  write_csv(dir.path / "x.csv", t, "seed 7");
  std::ifstream f(dir.path / "x.csv");
  std::string first;
  std::getline(f, first);
  EXPECT_EQ(first, "# seed 7");
  CsvTable back = read_csv(dir.path / "x.csv");
  EXPECT_EQ(back.header, t.header);
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_THROW(read_csv(dir.path / "none.csv"), IoError);
}

TEST(Telemetry, RoundTripIsExact) {
  testutil::TempDir dir;
  std::vector<TelemetryRecord> rows;
  Rng rng(3);
  for (int s = 1; s <= 5; ++s) {
    TelemetryRecord r;
    r.step = s * 10;
    r.loss.speed = rng.uniform();
    r.loss.recon = rng.uniform();
    r.loss.kl_total = rng.uniform();
    r.loss.gain = rng.uniform();
    r.loss.total = rng.uniform();
    r.loss.kl_per_layer = {rng.uniform(), rng.uniform(), rng.uniform()};
    r.wall_seconds = 0.5 * s;
    rows.push_back(r);
  }
  write_telemetry_csv(dir.path / "t.csv", rows);
  auto back = read_telemetry_csv(dir.path / "t.csv");
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].step, rows[i].step);
    EXPECT_EQ(back[i].loss.speed, rows[i].loss.speed);
    EXPECT_EQ(back[i].loss.recon, rows[i].loss.recon);
    EXPECT_EQ(back[i].loss.kl_total, rows[i].loss.kl_total);
    EXPECT_EQ(back[i].loss.gain, rows[i].loss.gain);
    EXPECT_EQ(back[i].loss.total, rows[i].loss.total);
    EXPECT_EQ(back[i].loss.kl_per_layer, rows[i].loss.kl_per_layer);
    EXPECT_EQ(back[i].wall_seconds, rows[i].wall_seconds);
  }
  CsvTable raw = read_csv(dir.path / "t.csv");
  const std::vector<std::string> want{"step", "speed", "recon", "kl_total", "gain", "total",
                                      "kl_0", "kl_1",  "kl_2",  "wall_s"};
  EXPECT_EQ(raw.header, want);
}

// ---- alignments ----

TEST(AlignmentCsv, RoundTrip) {
  testutil::TempDir dir;
  Tensor a = initial_alignment(7, 3, 0.2);
  write_alignment_csv(dir.path / "a.csv", a, 2);
  auto [b, layer] = read_alignment_csv(dir.path / "a.csv");
  EXPECT_EQ(layer, 2);
  ASSERT_EQ(b.rows(), 7u);
  ASSERT_EQ(b.cols(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Pgm, ScalesToFullRangeAndTransposes) {
  testutil::TempDir dir;
  Tensor m = Tensor::matrix(3, 2, {0.0, 0.5, 1.0, 0.25, 0.75, 0.1});
  write_pgm(dir.path / "m.pgm", m);
  PgmImage img = read_pgm(dir.path / "m.pgm");
  // Frames run left to right, tokens top to bottom.
  EXPECT_EQ(img.width, 3u);
  EXPECT_EQ(img.height, 2u);
  EXPECT_EQ(img.min_value, 0.0);
  EXPECT_EQ(img.max_value, 1.0);
  ASSERT_EQ(img.pixels.size(), 6u);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t l = 0; l < 2; ++l)
      EXPECT_NEAR(img.pixels[l * 3 + t], 255.0 * m.at(t, l), 0.5 + 1e-9);

  std::ifstream f(dir.path / "m.pgm", std::ios::binary);
  std::string magic;
  f >> magic;
  EXPECT_EQ(magic, "P5");

  write_pgm(dir.path / "flat.pgm", Tensor(Shape{2, 2}, 0.3));
  PgmImage flat = read_pgm(dir.path / "flat.pgm");
  for (auto p : flat.pixels) EXPECT_EQ(p, 0);
  write_text(dir.path / "bad.pgm", "P2\n1 1\n255\n0\n");
  EXPECT_THROW(read_pgm(dir.path / "bad.pgm"), FormatError);
}

// ---- grids ----

TEST(Grid, ParsesSectionsAndRejectsJunk) {
  auto g = parse_grid("# lambda sweep\n[base]\n[no_gain]\nloss.lambda = 0\n\n[beta1]\nloss.beta=1.0  # lower\n");
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].name, "base");
  EXPECT_TRUE(g[0].overrides.empty());
  ASSERT_EQ(g[1].overrides.size(), 1u);
  EXPECT_EQ(g[1].overrides[0].first, "loss.lambda");
  EXPECT_EQ(g[1].overrides[0].second, "0");
  EXPECT_EQ(g[2].overrides[0].second, "1.0");
  EXPECT_THROW(parse_grid("loss.beta = 1\n"), ConfigError);
  EXPECT_THROW(parse_grid("[a]\nnot a pair\n"), ConfigError);
  EXPECT_THROW(parse_grid("[a]\n[a]\n"), ConfigError);
  EXPECT_THROW(parse_grid("[]\n"), ConfigError);
  EXPECT_THROW(load_grid("/nonexistent/grid.ini"), IoError);
}

TEST(EnsureWritable, RefusesExistingWithoutForce) {
  testutil::TempDir dir;
  const fs::path p = dir.path / "out.csv";
  EXPECT_NO_THROW(ensure_writable(p, false));
  write_text(p, "x");
  EXPECT_THROW(ensure_writable(p, false), IoError);
  EXPECT_NO_THROW(ensure_writable(p, true));
}
