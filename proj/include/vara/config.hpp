#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace vara {

struct ModelConfig {
  int n_mels = 80;
  int vocab_size = 64;
  int n_speakers = 1;  // 1 means single-speaker: no speaker table, no FiLM
  int speaker_dim = 64;

  int text_dim = 64;  // embedding, key and value width
  int text_conv_hidden = 16;
  int text_kernel = 5;
  double pe_scale = 1.0;

  int channels = 64;
  int bottleneck = 16;
  int precon_kernel = 11;
  int n_stacks = 3;
  std::vector<int> reductions{1, 2, 2};
  std::vector<int> blocks{2, 2, 2};

  int attn_dim = 64;
  int heads = 4;
  int latent_dim = 8;
  int head_kernel = 3;
  std::vector<double> g_list{0.01, 0.05, 0.1, 0.2};
  double a_prev_gain = 1.0;

  int speed_hidden = 256;
  double speed_dropout = 0.1;
  bool separate_speed = false;

  // Latent layer indices (0 is z0) whose posterior is tied to the prior.
  std::vector<int> pinned_layers;
  // Latent layers whose posterior correction starts at exactly zero.
  std::vector<int> collapsed_init_layers;

  int max_reduction() const;
  // z0 plus one latent per top-down block.
  int n_latent_layers() const;
  void validate() const;
};

struct LossConfig {
  double alpha = 1.0;
  double beta = 1.8;
  double lambda = 1.0;
  double c = 0.5;
  bool printed_gain = false;  // the as-printed gain formula, for comparison only
};

struct TrainConfig {
  int batch_size = 8;
  double max_lr = 1.5e-4;
  int warmup = 10000;
  double adam_b1 = 0.9;
  double adam_b2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;
  int steps = 1000;
  std::uint64_t seed = 1;
  int log_interval = 10;
  int eval_interval = 100;
  int ckpt_interval = 500;

  void validate() const;
};

struct Config {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
  }
};

// Full-scale preset and the desk-scale default.
ModelConfig full_scale_model();
ModelConfig desk_model();

// Dotted key access ("model.n_stacks", "loss.beta", ...).
struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};
const std::vector<ConfigKey>& config_keys();
void set_config_value(Config& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const Config& cfg, const std::string& key);

// "key = value" lines; '#' starts a comment; unknown keys are rejected.
Config parse_config(const std::string& text, const std::string& origin = "<string>");
Config load_config(const std::filesystem::path& path);
std::string format_config(const Config& cfg);
std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin);

// FNV-1a over the canonical model section; identifies parameter layouts.
std::uint64_t config_digest(const ModelConfig& m);

}  // namespace vara
