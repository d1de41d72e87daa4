#pragma once

// Key=value run configuration shared by every command-line subcommand:
// a fixed key registry with defaults, a plain-text file format and typed
// accessors. Unknown keys and malformed values raise ConfigError.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "minv/diffusion.hpp"
#include "minv/embeddings.hpp"
#include "minv/error.hpp"
#include "minv/inversion.hpp"
#include "minv/model_spec.hpp"

namespace minv {

/// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "MINV_OUT_DIR";

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

inline std::string default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? env : "minv_out";
}

/// Every recognised key, in help order. Paths left empty resolve against
/// out_dir.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"out_dir", "", "output directory (default: $MINV_OUT_DIR, else ./minv_out)"},
      {"spec.image_channels", "3", "video channels"},
      {"spec.base_channels", "32", "channels at full resolution"},
      {"spec.height", "16", "frame height"},
      {"spec.width", "16", "frame width"},
      {"spec.frames", "8", "frames per clip"},
      {"spec.channel_mults", "1,2", "per-level channel multipliers"},
      {"spec.modules_per_level", "1", "temporal modules per level on each path"},
      {"spec.vocab", "4", "number of prompt ids"},
      {"spec.time_dim", "32", "timestep embedding width"},
      {"schedule.steps", "200", "diffusion steps T"},
      {"schedule.beta_start", "0.0001", "first beta"},
      {"schedule.beta_end", "0.02", "last beta"},
      {"synth.appearances", "4", "appearance seeds per corpus script (prompt id = appearance index)"},
      {"synth.reference_seed", "7", "appearance seed of the held-out reference pan"},
      {"synth.reference_speed", "1", "pan speed of the reference, px/frame"},
      {"synth.ppm", "false", "also export reference frames as PPM"},
      {"corpus", "", "corpus index file (default: <out_dir>/corpus.txt)"},
      {"params", "", "denoiser checkpoint (default: <out_dir>/denoiser.mden)"},
      {"pretrain.steps", "6000", "pretraining steps"},
      {"pretrain.lr", "0.002", "pretraining learning rate"},
      {"pretrain.clip_norm", "1", "pretraining gradient clip (<= 0 disables)"},
      {"pretrain.seed", "0", "pretraining seed"},
      {"pretrain.log_every", "100", "progress cadence"},
      {"video", "", "reference video (default: <out_dir>/reference.mvid)"},
      {"embeddings", "", "embedding checkpoint (default: <out_dir>/embeddings.memb)"},
      {"invert.steps", "400", "inversion steps"},
      {"invert.lr", "0.01", "inversion learning rate"},
      {"invert.beta1", "0.9", "first moment coefficient"},
      {"invert.beta2", "0.999", "second moment coefficient"},
      {"invert.clip_norm", "1", "inversion gradient clip (<= 0 disables)"},
      {"invert.seed", "0", "seed of the (t, eps) stream"},
      {"invert.cond", "0", "prompt id of the reference"},
      {"invert.log_every", "50", "progress cadence"},
      {"embed.qk", "one_d", "query-key embedding layout: one_d | two_d"},
      {"embed.v", "two_d", "value embedding layout: one_d | two_d"},
      {"embed.strategy", "differential", "inference strategy: differential | normalize | vanilla"},
      {"generate.use_embeddings", "true", "inject the embedding checkpoint while sampling"},
      {"generate.strategy", "", "override the checkpoint's inference strategy"},
      {"generate.steps", "50", "sampler steps"},
      {"generate.seed", "11", "sampler noise seed"},
      {"generate.cond", "1", "prompt id to generate with"},
      {"generate.ppm", "false", "also export generated frames as PPM"},
      {"output", "", "generated video (default: <out_dir>/generated.mvid)"},
      {"evaluate.reference", "", "reference video (default: the video key)"},
      {"evaluate.generated", "", "generated video (default: the output key)"},
      {"report", "", "metrics report (default: <out_dir>/report.txt)"},
  };
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  static bool known(const std::string& key) { return find(key) != nullptr; }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Applies "key = value" lines; '#' starts a comment, blank lines are ignored.
  void merge_text(std::string_view text, const std::string& origin = "config") {
    std::istringstream in{std::string(text)};
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(no) + ": expected key=value, got '" + t + "'");
      const std::string key = trim(t.substr(0, eq));
      if (!known(key)) throw ConfigError(origin + ":" + std::to_string(no) + ": unknown config key '" + key + "'");
      values_[key] = trim(t.substr(eq + 1));
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
      throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    return v;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  double real(const std::string& key) const {
    const auto& s = str(key);
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
      throw ConfigError(key + ": expected a number, got '" + s + "'");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + s + "'");
  }

  std::vector<std::size_t> sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const std::string t = trim(item);
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
      if (ec != std::errc{} || p != t.data() + t.size() || t.empty())
        throw ConfigError(key + ": expected comma-separated non-negative integers, got '" + str(key) + "'");
      out.push_back(v);
    }
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
    return out;
  }

  std::string out_dir() const {
    const auto& s = str("out_dir");
    return s.empty() ? default_out_dir() : s;
  }

  /// Value of a path key, defaulting to out_dir/fallback when empty.
  std::string path(const std::string& key, const std::string& fallback) const {
    const auto& s = str(key);
    return s.empty() ? out_dir() + "/" + fallback : s;
  }

  DenoiserSpec spec() const {
    DenoiserSpec s;
    s.image_channels = size("spec.image_channels");
    s.base_channels = size("spec.base_channels");
    s.height = size("spec.height");
    s.width = size("spec.width");
    s.frames = size("spec.frames");
    s.channel_mults = sizes("spec.channel_mults");
    s.modules_per_level = size("spec.modules_per_level");
    s.vocab = size("spec.vocab");
    s.time_dim = size("spec.time_dim");
    s.validate();
    return s;
  }

  NoiseSchedule schedule() const {
    return NoiseSchedule::linear(size("schedule.steps"), real("schedule.beta_start"), real("schedule.beta_end"));
  }

  EmbeddingShapeConfig embedding_shape() const {
    EmbeddingShapeConfig c;
    auto qk = parse_spatial_layout(str("embed.qk"));
    auto v = parse_spatial_layout(str("embed.v"));
    auto st = parse_inference_strategy(str("embed.strategy"));
    if (!qk) throw ConfigError("embed.qk: expected one_d or two_d, got '" + str("embed.qk") + "'");
    if (!v) throw ConfigError("embed.v: expected one_d or two_d, got '" + str("embed.v") + "'");
    if (!st) throw ConfigError("embed.strategy: unknown strategy '" + str("embed.strategy") + "'");
    c.qk = *qk;
    c.v = *v;
    c.strategy = *st;
    return c;
  }

  InversionConfig inversion() const {
    InversionConfig c;
    c.steps = size("invert.steps");
    c.lr = real("invert.lr");
    c.beta1 = real("invert.beta1");
    c.beta2 = real("invert.beta2");
    c.clip_norm = real("invert.clip_norm");
    c.seed = u64("invert.seed");
    c.shape = embedding_shape();
    c.log_every = size("invert.log_every");
    c.validate();
    return c;
  }

  PretrainConfig pretraining() const {
    PretrainConfig c;
    c.steps = size("pretrain.steps");
    c.lr = real("pretrain.lr");
    c.clip_norm = real("pretrain.clip_norm");
    c.seed = u64("pretrain.seed");
    c.log_every = size("pretrain.log_every");
    if (!(c.lr > 0)) throw ConfigError("pretrain.lr must be positive");
    return c;
  }

  /// Fully resolved configuration, one "key = value" per line in registry order.
  std::string dump() const {
    std::string out;
    for (const auto& k : config_keys()) {
      std::string v = values_.at(k.name);
      if (k.name == "out_dir") v = out_dir();
      out += k.name + " = " + v + "\n";
    }
    return out;
  }

 private:
  static const ConfigKey* find(const std::string& key) {
    for (const auto& k : config_keys())
      if (k.name == key) return &k;
    return nullptr;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace minv
