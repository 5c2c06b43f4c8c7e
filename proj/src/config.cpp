#include "vara/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "vara/errors.hpp"

namespace vara {

int ModelConfig::max_reduction() const {
  int r = 1;
  for (int x : reductions) r *= x;
  return r;
}

int ModelConfig::n_latent_layers() const {
  int n = 1;
  for (int b : blocks) n += b;
  return n;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (n_stacks < 1) fail("n_stacks must be >= 1");
  if (static_cast<int>(reductions.size()) != n_stacks || static_cast<int>(blocks.size()) != n_stacks)
    fail("reductions and blocks must each list n_stacks=" + std::to_string(n_stacks) + " entries");
  for (int r : reductions)
    if (r < 1) fail("reductions must be >= 1");
  for (int b : blocks)
    if (b < 1) fail("every stack needs at least one block");
  if (n_mels < 1 || vocab_size < 2) fail("n_mels and vocab_size must be positive");
  if (n_speakers < 1) fail("n_speakers must be >= 1");
  if (text_dim < 2 || text_dim % 2 != 0) fail("text_dim must be even");
  if (text_kernel % 2 == 0 || head_kernel % 2 == 0 || precon_kernel % 2 == 0) fail("kernel sizes must be odd");
  if (channels < 1 || bottleneck < 1 || text_conv_hidden < 1 || latent_dim < 1 || speed_hidden < 1)
    fail("widths must be positive");
  if (heads < 1 || attn_dim % heads != 0) fail("attn_dim must be a multiple of heads");
  if (g_list.empty()) fail("g_list must not be empty");
  for (double g : g_list)
    if (!(g > 0.0)) fail("g values must be positive");
  if (!(speed_dropout >= 0.0 && speed_dropout < 1.0)) fail("speed_dropout must be in [0, 1)");
  for (int l : pinned_layers)
    if (l < 0 || l >= n_latent_layers()) fail("pinned layer index out of range");
  for (int l : collapsed_init_layers)
    if (l < 0 || l >= n_latent_layers()) fail("collapsed_init layer index out of range");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (warmup < 1) throw ConfigError("train config: warmup must be >= 1");
  if (!(max_lr > 0.0)) throw ConfigError("train config: max_lr must be positive");
  if (steps < 0) throw ConfigError("train config: steps must be >= 0");
  if (log_interval < 1 || eval_interval < 1 || ckpt_interval < 1)
    throw ConfigError("train config: intervals must be >= 1");
}

ModelConfig desk_model() { return ModelConfig{}; }

ModelConfig full_scale_model() {
  ModelConfig m;
  m.n_mels = 80;
  m.vocab_size = 55;
  m.text_dim = 384;
  m.text_conv_hidden = 96;
  m.speaker_dim = 384;
  m.channels = 384;
  m.bottleneck = 96;
  m.n_stacks = 6;
  m.reductions = {1, 2, 2, 2, 2, 1};
  m.blocks = {4, 6, 8, 12, 9, 5};
  m.attn_dim = 384;
  m.heads = 8;
  m.latent_dim = 16;
  return m;
}

// ---- key registry ----------------------------------------------------------------

namespace {

template <class T>
std::string to_text(const T& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class T>
std::string list_text(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + to_text(v[i]);
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& s) {
  long long v = 0;
  const auto t = trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty())
    throw ConfigError("config key " + key + ": expected an integer, got '" + s + "'");
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  const auto t = trim(s);
  try {
    std::size_t used = 0;
    double v = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a number, got '" + s + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  const auto t = trim(s);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key " + key + ": expected true/false, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  const auto t = trim(s);
  if (t.empty()) return out;
  std::stringstream ss(t);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

ConfigKey int_key(std::string name, std::string help, int ModelConfig::*m) {
  return {name, help, [m](const Config& c) { return to_text(c.model.*m); },
          [m, name](Config& c, const std::string& v) { c.model.*m = static_cast<int>(parse_int(name, v)); }};
}
ConfigKey dbl_key(std::string name, std::string help, double ModelConfig::*m) {
  return {name, help, [m](const Config& c) { return to_text(c.model.*m); },
          [m, name](Config& c, const std::string& v) { c.model.*m = parse_double(name, v); }};
}
ConfigKey ints_key(std::string name, std::string help, std::vector<int> ModelConfig::*m) {
  return {name, help, [m](const Config& c) { return list_text(c.model.*m); },
          [m, name](Config& c, const std::string& v) {
            std::vector<int> out;
            for (auto& s : split_list(v)) out.push_back(static_cast<int>(parse_int(name, s)));
            c.model.*m = out;
          }};
}

template <class S, class F>
ConfigKey member_key(std::string name, std::string help, S Config::*section, F S::*m) {
  return {name, help, [section, m](const Config& c) { return to_text(c.*section.*m); },
          [section, m, name](Config& c, const std::string& v) {
            if constexpr (std::is_same_v<F, bool>)
              c.*section.*m = parse_bool(name, v);
            else if constexpr (std::is_floating_point_v<F>)
              c.*section.*m = parse_double(name, v);
            else
              c.*section.*m = static_cast<F>(parse_int(name, v));
          }};
}

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> k;
  k.push_back(int_key("model.n_mels", "mel bands", &ModelConfig::n_mels));
  k.push_back(int_key("model.vocab_size", "token vocabulary size (set from the corpus)", &ModelConfig::vocab_size));
  k.push_back(int_key("model.n_speakers", "speaker count; 1 disables FiLM", &ModelConfig::n_speakers));
  k.push_back(int_key("model.speaker_dim", "speaker embedding width", &ModelConfig::speaker_dim));
  k.push_back(int_key("model.text_dim", "text embedding / key / value width", &ModelConfig::text_dim));
  k.push_back(int_key("model.text_conv_hidden", "text encoder inner conv width", &ModelConfig::text_conv_hidden));
  k.push_back(int_key("model.text_kernel", "text encoder conv kernel", &ModelConfig::text_kernel));
  k.push_back(dbl_key("model.pe_scale", "positional encoding scale", &ModelConfig::pe_scale));
  k.push_back(int_key("model.channels", "residual stream width", &ModelConfig::channels));
  k.push_back(int_key("model.bottleneck", "residual block inner width", &ModelConfig::bottleneck));
  k.push_back(int_key("model.precon_kernel", "mel pre-conv kernel", &ModelConfig::precon_kernel));
  k.push_back(int_key("model.n_stacks", "bottom-up stacks (= top-down groups)", &ModelConfig::n_stacks));
  k.push_back(ints_key("model.reductions", "temporal reduction per stack", &ModelConfig::reductions));
  k.push_back(ints_key("model.blocks", "residual blocks per stack", &ModelConfig::blocks));
  k.push_back(int_key("model.attn_dim", "attention width", &ModelConfig::attn_dim));
  k.push_back(int_key("model.heads", "attention heads", &ModelConfig::heads));
  k.push_back(int_key("model.latent_dim", "latent channels", &ModelConfig::latent_dim));
  k.push_back(int_key("model.head_kernel", "prior/posterior conv kernel", &ModelConfig::head_kernel));
  k.push_back({"model.g_list", "initial alignment bandwidths",
               [](const Config& c) { return list_text(c.model.g_list); },
               [](Config& c, const std::string& v) {
                 std::vector<double> out;
                 for (auto& s : split_list(v)) out.push_back(parse_double("model.g_list", s));
                 c.model.g_list = out;
               }});
  k.push_back(dbl_key("model.a_prev_gain", "scale on the previous alignment inside attention", &ModelConfig::a_prev_gain));
  k.push_back(int_key("model.speed_hidden", "speed predictor hidden width", &ModelConfig::speed_hidden));
  k.push_back(dbl_key("model.speed_dropout", "speed predictor dropout", &ModelConfig::speed_dropout));
  k.push_back(member_key("model.separate_speed", "predict speed from detached text instead of z0", &Config::model,
                         &ModelConfig::separate_speed));
  k.push_back(ints_key("model.pinned_layers", "latent layers with posterior tied to prior", &ModelConfig::pinned_layers));
  k.push_back(ints_key("model.collapsed_init_layers", "latent layers whose posterior correction starts at zero",
                       &ModelConfig::collapsed_init_layers));

  k.push_back(member_key("loss.alpha", "speed loss weight", &Config::loss, &LossConfig::alpha));
  k.push_back(member_key("loss.beta", "KL weight", &Config::loss, &LossConfig::beta));
  k.push_back(member_key("loss.lambda", "detailed KL gain weight", &Config::loss, &LossConfig::lambda));
  k.push_back(member_key("loss.c", "KL reference fraction", &Config::loss, &LossConfig::c));
  k.push_back(member_key("loss.printed_gain", "use the as-printed gain formula", &Config::loss, &LossConfig::printed_gain));

  k.push_back(member_key("train.batch_size", "utterances per step", &Config::train, &TrainConfig::batch_size));
  k.push_back(member_key("train.max_lr", "peak learning rate", &Config::train, &TrainConfig::max_lr));
  k.push_back(member_key("train.warmup", "warmup steps", &Config::train, &TrainConfig::warmup));
  k.push_back(member_key("train.adam_b1", "Adam beta1", &Config::train, &TrainConfig::adam_b1));
  k.push_back(member_key("train.adam_b2", "Adam beta2", &Config::train, &TrainConfig::adam_b2));
  k.push_back(member_key("train.adam_eps", "Adam epsilon", &Config::train, &TrainConfig::adam_eps));
  k.push_back(member_key("train.clip_norm", "global gradient norm clip (0 disables)", &Config::train,
                         &TrainConfig::clip_norm));
  k.push_back(member_key("train.steps", "total optimizer steps", &Config::train, &TrainConfig::steps));
  k.push_back(member_key("train.seed", "run seed", &Config::train, &TrainConfig::seed));
  k.push_back(member_key("train.log_interval", "telemetry row interval", &Config::train, &TrainConfig::log_interval));
  k.push_back(member_key("train.eval_interval", "validation interval", &Config::train, &TrainConfig::eval_interval));
  k.push_back(member_key("train.ckpt_interval", "checkpoint interval", &Config::train, &TrainConfig::ckpt_interval));
  return k;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

namespace {
const ConfigKey& find_key(const std::string& key) {
  for (const auto& k : config_keys())
    if (k.name == key) return k;
  throw ConfigError("unknown config key '" + key + "'");
}
}  // namespace

void set_config_value(Config& cfg, const std::string& key, const std::string& value) {
  find_key(key).set(cfg, value);
}

std::string get_config_value(const Config& cfg, const std::string& key) { return find_key(key).get(cfg); }

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

Config parse_config(const std::string& text, const std::string& origin) {
  Config cfg;
  for (const auto& [k, v] : parse_key_values(text, origin)) {
    try {
      set_config_value(cfg, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ": " + e.what());
    }
  }
  return cfg;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string format_config(const Config& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::uint64_t config_digest(const ModelConfig& m) {
  Config c;
  c.model = m;
  std::string canon;
  for (const auto& k : config_keys())
    if (k.name.rfind("model.", 0) == 0) canon += k.name + "=" + k.get(c) + ";";
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace vara
