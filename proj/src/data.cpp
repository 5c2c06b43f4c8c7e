#include "vara/data.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "vara/errors.hpp"

namespace vara {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- mel features -----------------------------------------------------------

MelSpectrogram MelSpectrogram::from_tensor(const Tensor& t, int sample_rate, int hop) {
  MelSpectrogram m;
  m.n_frames = t.rows();
  m.n_mels = t.cols();
  m.data.assign(t.values().begin(), t.values().end());
  m.sample_rate = sample_rate;
  m.hop = hop;
  return m;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

double effective_fmax(const MelConfig& cfg) {
  return cfg.fmax > 0.0 ? cfg.fmax : cfg.sample_rate / 2.0;
}

double mel_point(const MelConfig& cfg, int i) {
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(effective_fmax(cfg));
  return lo + (hi - lo) * i / (cfg.n_mels + 1);
}

}  // namespace

double mel_band_center(const MelConfig& cfg, int m) { return mel_to_hz(mel_point(cfg, m + 1)); }

std::vector<double> mel_filterbank(const MelConfig& cfg) {
  const int n_bins = cfg.window / 2 + 1;
  std::vector<double> bank(static_cast<std::size_t>(n_bins) * cfg.n_mels, 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = mel_to_hz(mel_point(cfg, m));
    const double centre = mel_to_hz(mel_point(cfg, m + 1));
    const double right = mel_to_hz(mel_point(cfg, m + 2));
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.window;
      double w = 0.0;
      if (f > left && f <= centre)
        w = (f - left) / (centre - left);
      else if (f > centre && f < right)
        w = (right - f) / (right - centre);
      bank[static_cast<std::size_t>(k) * cfg.n_mels + m] = w;
    }
  }
  return bank;
}

MelSpectrogram compute_mel(std::span<const double> waveform, int sample_rate, const MelConfig& cfg) {
  if (waveform.empty()) throw InvalidInput("compute_mel: empty waveform");
  if (sample_rate != cfg.sample_rate)
    throw InvalidInput("compute_mel: waveform is " + std::to_string(sample_rate) + " Hz, config expects " +
                       std::to_string(cfg.sample_rate) + " Hz (resample first)");
  const std::size_t win = static_cast<std::size_t>(cfg.window);
  if (waveform.size() < win)
    throw InvalidInput("compute_mel: waveform of " + std::to_string(waveform.size()) +
                       " samples is shorter than the " + std::to_string(win) + "-sample window");
  const std::size_t hop = static_cast<std::size_t>(cfg.hop);
  const std::size_t T = 1 + (waveform.size() - win) / hop;
  const std::size_t n_bins = win / 2 + 1;
  const std::size_t M = static_cast<std::size_t>(cfg.n_mels);

  std::vector<double> hann(win);
  for (std::size_t i = 0; i < win; ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(win));
  const auto bank = mel_filterbank(cfg);

  double* in = fftw_alloc_real(win);
  fftw_complex* out = fftw_alloc_complex(n_bins);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(win), in, out, FFTW_ESTIMATE);

  MelSpectrogram mel;
  mel.n_frames = T;
  mel.n_mels = M;
  mel.sample_rate = sample_rate;
  mel.hop = cfg.hop;
  mel.data.assign(T * M, 0.0);
  std::vector<double> mag(n_bins);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < win; ++i) in[i] = waveform[t * hop + i] * hann[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < n_bins; ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
    for (std::size_t k = 0; k < n_bins; ++k) {
      if (mag[k] == 0.0) continue;
      for (std::size_t m = 0; m < M; ++m) mel.data[t * M + m] += mag[k] * bank[k * M + m];
    }
  }
  for (auto& v : mel.data) v = std::max(v, kMelFloor);

  fftw_destroy_plan(plan);
  fftw_free(out);
  fftw_free(in);
  return mel;
}

std::vector<double> resample_linear(std::span<const double> samples, int from_rate, int to_rate) {
  if (from_rate <= 0 || to_rate <= 0) throw InvalidArgument("resample_linear: rates must be positive");
  if (from_rate == to_rate || samples.empty()) return {samples.begin(), samples.end()};
  const std::size_t n_out = static_cast<std::size_t>(
      std::floor(static_cast<double>(samples.size() - 1) * to_rate / from_rate)) + 1;
  std::vector<double> out(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * from_rate / to_rate;
    const std::size_t k = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(k);
    out[i] = k + 1 < samples.size() ? samples[k] * (1.0 - frac) + samples[k + 1] * frac : samples[k];
  }
  return out;
}

// ---- WAV ------------------------------------------------------------------------

namespace {

template <class T>
T read_le(std::istream& in, const fs::path& path) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError(path.string(), "unexpected end of file");
  T v{};
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(buf[i]) << (8 * i));
  return v;
}

template <class T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

}  // namespace

Waveform read_wav(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char tag[4];
  auto read_tag = [&] {
    if (!in.read(tag, 4)) throw FormatError(path.string(), "unexpected end of file");
    return std::string(tag, 4);
  };
  if (read_tag() != "RIFF") throw FormatError(path.string(), "missing RIFF header");
  read_le<std::uint32_t>(in, path);
  if (read_tag() != "WAVE") throw FormatError(path.string(), "missing WAVE tag");
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  while (true) {
    const std::string id = read_tag();
    const std::uint32_t size = read_le<std::uint32_t>(in, path);
    if (id == "fmt ") {
      format = read_le<std::uint16_t>(in, path);
      channels = read_le<std::uint16_t>(in, path);
      rate = read_le<std::uint32_t>(in, path);
      read_le<std::uint32_t>(in, path);
      read_le<std::uint16_t>(in, path);
      bits = read_le<std::uint16_t>(in, path);
      in.seekg(size - 16, std::ios::cur);
    } else if (id == "data") {
      if (format != 1 || bits != 16 || channels == 0)
        throw FormatError(path.string(), "only 16-bit PCM is supported");
      const std::size_t frames = size / (2u * channels);
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::uint16_t c = 0; c < channels; ++c)
          acc += static_cast<std::int16_t>(read_le<std::uint16_t>(in, path)) / 32768.0;
        w.samples[i] = acc / channels;
      }
      return w;
    } else {
      in.seekg(size + (size & 1u), std::ios::cur);
    }
  }
}

void write_wav(const fs::path& path, const Waveform& wav) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(wav.samples.size() * 2);
  out.write("RIFF", 4);
  write_le<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  write_le<std::uint32_t>(out, 16);
  write_le<std::uint16_t>(out, 1);
  write_le<std::uint16_t>(out, 1);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(wav.sample_rate));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(wav.sample_rate * 2));
  write_le<std::uint16_t>(out, 2);
  write_le<std::uint16_t>(out, 16);
  out.write("data", 4);
  write_le<std::uint32_t>(out, data_bytes);
  for (double s : wav.samples) {
    const double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32768.0))));
  }
}

// ---- vocabulary ------------------------------------------------------------------

Vocab::Vocab() : Vocab(std::vector<std::string>{kUnkSymbol}) {}

Vocab::Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  if (symbols_.empty() || symbols_[0] != kUnkSymbol)
    throw InvalidArgument("Vocab: symbol 0 must be " + std::string(kUnkSymbol));
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (!index_.emplace(symbols_[i], static_cast<int>(i)).second)
      throw InvalidArgument("Vocab: duplicate symbol '" + symbols_[i] + "'");
  }
}

Vocab Vocab::from_texts(std::span<const std::string> texts) {
  std::set<std::string> chars;
  for (const auto& t : texts)
    for (auto& c : utf8_chars(t)) chars.insert(c);
  std::vector<std::string> symbols{kUnkSymbol};
  symbols.insert(symbols.end(), chars.begin(), chars.end());
  return Vocab(std::move(symbols));
}

int Vocab::id(const std::string& symbol) const {
  auto it = index_.find(symbol);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::string> utf8_chars(const std::string& text) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size();) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    len = std::min(len, text.size() - i);
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& c : utf8_chars(text)) ids.push_back(vocab.id(c));
  return ids;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw InvalidArgument("unknown split '" + s + "'");
}

Tensor alignment_matrix(std::span<const int> frame_tokens, std::size_t n_tokens) {
  Tensor a(Shape{frame_tokens.size(), n_tokens}, 0.0);
  auto v = a.mutable_values();
  for (std::size_t t = 0; t < frame_tokens.size(); ++t) {
    if (frame_tokens[t] < 0 || static_cast<std::size_t>(frame_tokens[t]) >= n_tokens)
      throw InvalidInput("alignment_matrix: token index out of range");
    v[t * n_tokens + static_cast<std::size_t>(frame_tokens[t])] = 1.0;
  }
  return a;
}

// ---- speaking speed -----------------------------------------------------------------

void validate(const SpeedStats& stats) {
  if (!(stats.min_ratio > 0.0) || !(stats.max_ratio > stats.min_ratio))
    throw ConfigError("degenerate speed stats: min_ratio=" + std::to_string(stats.min_ratio) +
                      " max_ratio=" + std::to_string(stats.max_ratio));
}

double speaking_speed_target(std::size_t n_mel_frames, std::size_t n_text_tokens, const SpeedStats& stats) {
  if (n_text_tokens < 1) throw InvalidArgument("speaking_speed_target: empty token sequence");
  validate(stats);
  const double ratio = static_cast<double>(n_mel_frames) / static_cast<double>(n_text_tokens);
  return std::clamp((ratio - stats.min_ratio) / (stats.max_ratio - stats.min_ratio), 0.0, 1.0);
}

SpeedStats fit_speed_stats(std::span<const Utterance* const> train_split) {
  if (train_split.size() < 2)
    throw ConfigError("fit_speed_stats: need at least 2 training utterances, got " +
                      std::to_string(train_split.size()));
  SpeedStats s{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const Utterance* u : train_split) {
    if (u->n_tokens() == 0) throw InvalidInput("fit_speed_stats: utterance " + u->id + " has no tokens");
    const double r = static_cast<double>(u->n_frames()) / static_cast<double>(u->n_tokens());
    s.min_ratio = std::min(s.min_ratio, r);
    s.max_ratio = std::max(s.max_ratio, r);
  }
  if (!(s.max_ratio > s.min_ratio)) throw ConfigError("fit_speed_stats: all frame/token ratios are equal");
  return s;
}

std::vector<const Utterance*> Corpus::split(Split s) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances)
    if (u.split == s) out.push_back(&u);
  return out;
}

void Corpus::refit_speed_stats() {
  auto train = split(Split::kTrain);
  speed_stats = fit_speed_stats(train);
}

// ---- synthetic corpus ---------------------------------------------------------------

std::vector<double> token_prototype(int token_id, int n_mels) {
  // Low-order cosine mixture in the log domain; coefficients come from a
  // generator keyed on the token id alone.
  Rng coef(0x5EED0000ull + static_cast<std::uint64_t>(token_id) * 7919ull);
  constexpr int kOrder = 3;
  double amp[kOrder], phase[kOrder];
  for (int j = 0; j < kOrder; ++j) {
    amp[j] = 2.0 * coef.uniform() - 1.0;
    phase[j] = 2.0 * std::numbers::pi * coef.uniform();
  }
  const double level = std::log(0.2 + 0.8 * coef.uniform());
  std::vector<double> proto(static_cast<std::size_t>(n_mels));
  for (int m = 0; m < n_mels; ++m) {
    double s = level;
    for (int j = 0; j < kOrder; ++j)
      s += amp[j] * std::cos(std::numbers::pi * (j + 1) * (m + 0.5) / n_mels + phase[j]);
    proto[static_cast<std::size_t>(m)] = std::exp(s);
  }
  return proto;
}

Vocab synthetic_vocab(int vocab_size) {
  static const std::string kAlphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  if (vocab_size < 4) throw InvalidArgument("synthetic vocabulary needs at least 4 symbols");
  if (vocab_size > static_cast<int>(kAlphabet.size()) + 1)
    throw InvalidArgument("synthetic vocabulary supports at most " + std::to_string(kAlphabet.size() + 1) + " symbols");
  std::vector<std::string> symbols{Vocab::kUnkSymbol};
  for (int i = 1; i < vocab_size; ++i) symbols.emplace_back(1, kAlphabet[static_cast<std::size_t>(i - 1)]);
  return Vocab(std::move(symbols));
}

Corpus make_synthetic_corpus(Rng& rng, int n_utts, int vocab_size, const SyntheticConfig& cfg) {
  if (n_utts < 1) throw InvalidArgument("make_synthetic_corpus: n_utts must be >= 1");
  if (cfg.min_tokens < 1 || cfg.max_tokens < cfg.min_tokens || cfg.min_duration < 1 ||
      cfg.max_duration < cfg.min_duration || cfg.n_mels < 1)
    throw InvalidArgument("make_synthetic_corpus: inconsistent length/duration ranges");

  Corpus corpus;
  corpus.vocab = synthetic_vocab(vocab_size);
  corpus.n_mels = cfg.n_mels;
  const std::size_t M = static_cast<std::size_t>(cfg.n_mels);

  std::vector<std::vector<double>> protos(static_cast<std::size_t>(vocab_size));
  for (int k = 1; k < vocab_size; ++k) protos[static_cast<std::size_t>(k)] = token_prototype(k, cfg.n_mels);

  const int n_valid = n_utts >= 5 ? std::max(1, static_cast<int>(std::lround(n_utts * cfg.valid_fraction))) : 0;
  const int n_test = n_utts >= 5 ? std::max(1, static_cast<int>(std::lround(n_utts * cfg.test_fraction))) : 0;
  const int n_train = n_utts - n_valid - n_test;

  for (int u = 0; u < n_utts; ++u) {
    Utterance utt;
    char name[32];
    std::snprintf(name, sizeof name, "syn%05d", u);
    utt.id = name;
    utt.split = u < n_train ? Split::kTrain : (u < n_train + n_valid ? Split::kValid : Split::kTest);

    const int L = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.min_tokens),
                                                   static_cast<std::uint64_t>(cfg.max_tokens)));
    std::vector<int> frame_tokens;
    for (int l = 0; l < L; ++l) {
      const int tok = static_cast<int>(rng.uniform_int(1, static_cast<std::uint64_t>(vocab_size - 1)));
      utt.tokens.push_back(tok);
      utt.text += corpus.vocab.symbol(tok);
      const int dur = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.min_duration),
                                                       static_cast<std::uint64_t>(cfg.max_duration)));
      frame_tokens.insert(frame_tokens.end(), static_cast<std::size_t>(dur), l);
    }
    const std::size_t T = frame_tokens.size();
    utt.mel.n_frames = T;
    utt.mel.n_mels = M;
    utt.mel.data.resize(T * M);
    for (std::size_t t = 0; t < T; ++t) {
      const auto& proto = protos[static_cast<std::size_t>(utt.tokens[static_cast<std::size_t>(frame_tokens[t])])];
      for (std::size_t m = 0; m < M; ++m) {
        const double v = std::max(proto[m] + cfg.noise_std * rng.normal(), kMelFloor);
        // Stored features are f32; keep the in-memory copy on the same grid.
        utt.mel.data[t * M + m] = static_cast<double>(static_cast<float>(v));
      }
    }
    utt.true_alignment = std::move(frame_tokens);
    corpus.utterances.push_back(std::move(utt));
  }
  if (n_train >= 2) corpus.refit_speed_stats();
  return corpus;
}

// ---- on-disk format ---------------------------------------------------------------------

void write_feature_record(const fs::path& path, const MelSpectrogram& mel) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("VARA", 4);
  write_le<std::uint16_t>(out, kCorpusFormatVersion);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(mel.n_frames));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(mel.n_mels));
  for (double v : mel.data) write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw IoError("write failed for " + path.string());
}

MelSpectrogram read_feature_record(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError(path.string(), "truncated header");
  if (std::memcmp(magic, "VARA", 4) != 0) throw FormatError(path.string(), "bad magic (expected VARA)");
  const auto version = read_le<std::uint16_t>(in, path);
  if (version != kCorpusFormatVersion)
    throw VersionError(path.string(), "feature record version " + std::to_string(version) + ", expected " +
                                          std::to_string(kCorpusFormatVersion));
  MelSpectrogram mel;
  mel.n_frames = read_le<std::uint32_t>(in, path);
  mel.n_mels = read_le<std::uint32_t>(in, path);
  if (mel.n_frames == 0 || mel.n_mels == 0) throw FormatError(path.string(), "empty feature matrix");
  const std::size_t n = mel.n_frames * mel.n_mels;
  std::vector<unsigned char> raw(n * 4);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError(path.string(), "truncated payload: expected " + std::to_string(n) + " f32 values");
  mel.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[i * 4 + b]) << (8 * b);
    mel.data[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return mel;
}

void save_corpus(const Corpus& corpus, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json manifest;
  manifest["format"] = "vara-corpus";
  manifest["version"] = kCorpusFormatVersion;
  manifest["n_mels"] = corpus.n_mels;
  manifest["sample_rate"] = corpus.sample_rate;
  manifest["hop"] = corpus.hop;
  manifest["n_speakers"] = corpus.n_speakers;
  manifest["vocab"] = corpus.vocab.symbols();
  manifest["speed_stats"] = {{"min_ratio", corpus.speed_stats.min_ratio},
                             {"max_ratio", corpus.speed_stats.max_ratio}};
  json utts = json::array();
  for (const auto& u : corpus.utterances) {
    const std::string file = u.id + ".vara";
    write_feature_record(dir / file, u.mel);
    json j{{"id", u.id}, {"file", file}, {"split", split_name(u.split)}, {"text", u.text}, {"tokens", u.tokens}};
    j["speaker"] = u.speaker_id ? json(*u.speaker_id) : json(nullptr);
    if (u.true_alignment) j["alignment"] = *u.true_alignment;
    utts.push_back(std::move(j));
  }
  manifest["utterances"] = std::move(utts);
  std::ofstream out(dir / kManifestName);
  if (!out) throw IoError("cannot write " + (dir / kManifestName).string());
  out << manifest.dump(1) << '\n';
}

Corpus load_corpus(const fs::path& dir) {
  const fs::path mpath = dir / kManifestName;
  std::ifstream in(mpath);
  if (!in) throw IoError("cannot open " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(mpath.string(), std::string("malformed manifest: ") + e.what());
  }
  try {
    if (manifest.value("format", "") != "vara-corpus") throw FormatError(mpath.string(), "not a vara corpus manifest");
    const int version = manifest.at("version").get<int>();
    if (version != kCorpusFormatVersion)
      throw VersionError(mpath.string(), "manifest version " + std::to_string(version) + ", expected " +
                                             std::to_string(kCorpusFormatVersion));
    Corpus c;
    c.n_mels = manifest.at("n_mels").get<int>();
    c.sample_rate = manifest.at("sample_rate").get<int>();
    c.hop = manifest.at("hop").get<int>();
    c.n_speakers = manifest.value("n_speakers", 1);
    c.vocab = Vocab(manifest.at("vocab").get<std::vector<std::string>>());
    c.speed_stats.min_ratio = manifest.at("speed_stats").at("min_ratio").get<double>();
    c.speed_stats.max_ratio = manifest.at("speed_stats").at("max_ratio").get<double>();
    for (const auto& j : manifest.at("utterances")) {
      Utterance u;
      u.id = j.at("id").get<std::string>();
      u.text = j.value("text", "");
      u.split = parse_split(j.at("split").get<std::string>());
      u.tokens = j.at("tokens").get<std::vector<int>>();
      for (int t : u.tokens)
        if (t < 0 || t >= c.vocab.size()) throw FormatError(mpath.string(), "token id out of vocabulary in " + u.id);
      if (!j.at("speaker").is_null()) u.speaker_id = j.at("speaker").get<int>();
      u.mel = read_feature_record(dir / j.at("file").get<std::string>());
      u.mel.sample_rate = c.sample_rate;
      u.mel.hop = c.hop;
      if (u.mel.n_mels != static_cast<std::size_t>(c.n_mels))
        throw FormatError((dir / j.at("file").get<std::string>()).string(), "mel band count disagrees with manifest");
      if (j.contains("alignment")) {
        auto a = j.at("alignment").get<std::vector<int>>();
        if (a.size() != u.mel.n_frames) throw FormatError(mpath.string(), "alignment length mismatch in " + u.id);
        u.true_alignment = std::move(a);
      }
      c.utterances.push_back(std::move(u));
    }
    return c;
  } catch (const json::exception& e) {
    throw FormatError(mpath.string(), std::string("malformed manifest: ") + e.what());
  }
}

Corpus prepare_corpus(const fs::path& metadata, const fs::path& wav_dir, const MelConfig& cfg,
                      double valid_fraction, double test_fraction) {
  std::ifstream in(metadata);
  if (!in) throw IoError("cannot open " + metadata.string());
  struct Row {
    std::string id, text;
    std::optional<int> speaker;
  };
  std::vector<Row> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '|')) fields.push_back(f);
    if (fields.size() < 2) throw FormatError(metadata.string(), "expected id|text[|speaker]: " + line);
    Row r{fields[0], fields[1], std::nullopt};
    if (fields.size() >= 3 && !fields[2].empty()) r.speaker = std::stoi(fields[2]);
    rows.push_back(std::move(r));
  }
  std::vector<std::string> texts;
  for (auto& r : rows) texts.push_back(r.text);

  Corpus c;
  c.vocab = Vocab::from_texts(texts);
  c.n_mels = cfg.n_mels;
  c.sample_rate = cfg.sample_rate;
  c.hop = cfg.hop;
  const int n = static_cast<int>(rows.size());
  const int n_valid = n >= 5 ? std::max(1, static_cast<int>(std::lround(n * valid_fraction))) : 0;
  const int n_test = n >= 5 ? std::max(1, static_cast<int>(std::lround(n * test_fraction))) : 0;
  const int n_train = n - n_valid - n_test;
  int max_speaker = 0;
  for (int i = 0; i < n; ++i) {
    Waveform w = read_wav(wav_dir / (rows[static_cast<std::size_t>(i)].id + ".wav"));
    auto samples = resample_linear(w.samples, w.sample_rate, cfg.sample_rate);
    Utterance u;
    u.id = rows[static_cast<std::size_t>(i)].id;
    u.text = rows[static_cast<std::size_t>(i)].text;
    u.tokens = tokenize(u.text, c.vocab);
    u.speaker_id = rows[static_cast<std::size_t>(i)].speaker;
    if (u.speaker_id) max_speaker = std::max(max_speaker, *u.speaker_id);
    u.mel = compute_mel(samples, cfg.sample_rate, cfg);
    for (auto& v : u.mel.data) v = static_cast<double>(static_cast<float>(v));
    u.split = i < n_train ? Split::kTrain : (i < n_train + n_valid ? Split::kValid : Split::kTest);
    c.utterances.push_back(std::move(u));
  }
  c.n_speakers = max_speaker + 1;
  c.refit_speed_stats();
  return c;
}

}  // namespace vara
