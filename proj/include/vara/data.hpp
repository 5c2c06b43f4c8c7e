#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vara/numerics.hpp"

namespace vara {

inline constexpr double kMelFloor = 1e-5;

struct MelConfig {
  int sample_rate = 24000;
  int window = 1024;
  int hop = 256;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means sample_rate / 2
};

// T x M magnitudes, row-major, every entry >= kMelFloor.
struct MelSpectrogram {
  std::size_t n_frames = 0;
  std::size_t n_mels = 0;
  std::vector<double> data;
  int sample_rate = 24000;
  int hop = 256;

  double at(std::size_t t, std::size_t m) const { return data[t * n_mels + m]; }
  Tensor tensor() const { return Tensor::matrix(n_frames, n_mels, data); }
  static MelSpectrogram from_tensor(const Tensor& t, int sample_rate = 24000, int hop = 256);
};

// Triangular filters on the HTK mel scale, (n_fft / 2 + 1) x n_mels.
std::vector<double> mel_filterbank(const MelConfig& cfg);
double hz_to_mel(double hz);
double mel_to_hz(double mel);
// Centre frequency (Hz) of band m.
double mel_band_center(const MelConfig& cfg, int m);

// Hann-windowed magnitude STFT (no centre padding) projected onto the mel bank.
MelSpectrogram compute_mel(std::span<const double> waveform, int sample_rate, const MelConfig& cfg);

// Linear-interpolation resampler used when ingesting real audio.
std::vector<double> resample_linear(std::span<const double> samples, int from_rate, int to_rate);

struct Waveform {
  std::vector<double> samples;  // mono, [-1, 1]
  int sample_rate = 0;
};
// 16-bit PCM RIFF/WAVE; multi-channel input is averaged to mono.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& wav);

// Character-level vocabulary. Id 0 is reserved for unknown symbols.
class Vocab {
 public:
  static constexpr int kUnk = 0;
  static constexpr const char* kUnkSymbol = "<unk>";

  Vocab();
  explicit Vocab(std::vector<std::string> symbols);  // symbols[0] must be kUnkSymbol
  static Vocab from_texts(std::span<const std::string> texts);

  int size() const { return static_cast<int>(symbols_.size()); }
  int id(const std::string& symbol) const;
  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  bool operator==(const Vocab& other) const { return symbols_ == other.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

// Splits UTF-8 text into code points.
std::vector<std::string> utf8_chars(const std::string& text);
std::vector<int> tokenize(const std::string& text, const Vocab& vocab);

enum class Split { kTrain, kValid, kTest };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct Utterance {
  std::string id;
  std::string text;
  std::vector<int> tokens;
  std::optional<int> speaker_id;
  MelSpectrogram mel;
  // Token index for every mel frame (synthetic corpora only); the one-hot rows
  // of the T x L alignment matrix.
  std::optional<std::vector<int>> true_alignment;
  Split split = Split::kTrain;

  std::size_t n_frames() const { return mel.n_frames; }
  std::size_t n_tokens() const { return tokens.size(); }
};

// T x L one-hot matrix from a frame -> token map.
Tensor alignment_matrix(std::span<const int> frame_tokens, std::size_t n_tokens);

struct SpeedStats {
  double min_ratio = 0.0;
  double max_ratio = 0.0;
  bool operator==(const SpeedStats&) const = default;
};

void validate(const SpeedStats& stats);
// Min-max normalized frames-per-token ratio, clamped to [0, 1].
double speaking_speed_target(std::size_t n_mel_frames, std::size_t n_text_tokens, const SpeedStats& stats);
SpeedStats fit_speed_stats(std::span<const Utterance* const> train_split);

struct Corpus {
  std::vector<Utterance> utterances;
  Vocab vocab;
  SpeedStats speed_stats;
  int n_mels = 80;
  int sample_rate = 24000;
  int hop = 256;
  int n_speakers = 1;

  std::vector<const Utterance*> split(Split s) const;
  // Recomputes speed_stats from the train split.
  void refit_speed_stats();
};

struct SyntheticConfig {
  int n_mels = 80;
  int min_tokens = 8;
  int max_tokens = 32;
  int min_duration = 2;
  int max_duration = 8;
  double noise_std = 0.01;
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
};

// The smooth spectral prototype for a token id; depends only on (id, n_mels).
std::vector<double> token_prototype(int token_id, int n_mels);
// Symbols a, b, c, ... for ids 1..vocab_size-1.
Vocab synthetic_vocab(int vocab_size);
Corpus make_synthetic_corpus(Rng& rng, int n_utts, int vocab_size, const SyntheticConfig& cfg = {});

inline constexpr std::uint16_t kCorpusFormatVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

// Feature record: "VARA", u16 version, u32 T, u32 M, then T*M little-endian f32.
void write_feature_record(const std::filesystem::path& path, const MelSpectrogram& mel);
MelSpectrogram read_feature_record(const std::filesystem::path& path);

// Builds a corpus from "id|text[|speaker]" lines and <wav_dir>/<id>.wav files.
Corpus prepare_corpus(const std::filesystem::path& metadata, const std::filesystem::path& wav_dir,
                      const MelConfig& cfg, double valid_fraction = 0.1, double test_fraction = 0.1);

}  // namespace vara
