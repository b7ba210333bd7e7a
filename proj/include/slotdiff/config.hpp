#pragma once

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slotdiff/scene.hpp"

// Flat `key = value` configuration with documented defaults, strict key
// checking, and environment-variable overrides (SLOTDIFF_SECTION_KEY).

namespace slotdiff {

struct Config {
  // data
  int data_h = 32, data_w = 32, data_l = 5;
  int data_min_objects = 2, data_max_objects = 2;
  int data_train_size = 2000, data_val_size = 200;
  uint64_t data_seed = 1234;
  std::string data_background = "gray";  // gray | gradient
  int data_scale_min = 26, data_scale_max = 90;
  int data_speed_max = 16;
  // encoder
  int encoder_k = 0;  // 0 = auto: max objects + 1 (background slot)
  int encoder_d_slot = 64, encoder_d_feat = 64, encoder_d_key = 64, encoder_iters = 3;
  std::string encoder_variant = "sa";      // sa | isa
  std::string encoder_aggregation = "mean";  // mean | sum
  int encoder_residual_mlp = 0;  // per-iteration MLP after the GRU
  // decoder
  std::string decoder_path = "broadcast";  // broadcast | diffusion
  int decoder_t = 200;
  double decoder_beta_start = 1e-4, decoder_beta_end = 0.04;
  std::string decoder_adapter_blocks = "updown";  // updown | all | up | down
  double decoder_cfg_scale = 1.3;
  double decoder_p_null = 0.1;
  int decoder_latent_mode = 0;
  int decoder_guidance_block = 4;  // 0..4: down1,down2,mid,up1,up2
  int decoder_base_channels = 16;
  int decoder_width = 32;  // broadcast decoder conv width
  // guidance
  std::string guidance_mode = "none";  // none | slot | dm | joint
  double guidance_lambda = 0.1;
  double guidance_warmup_frac = 0.2;
  int guidance_swap_bce = 0;  // reverse BCE argument order (off by default)
  // temporal
  std::string temporal_mode = "off";  // off | v1 | v2
  // train
  int64_t train_steps = 10000;
  double train_lr = 3e-4;
  int train_batch = 4;
  uint64_t train_seed = 1;
  int train_two_phase = 0;
  int train_warmup_steps = 500;
  double train_grad_clip = 1.0;
  int train_threads = 1;
  int train_ae_steps = 2000;  // latent-mode autoencoder pretraining
  // io
  std::string io_out_dir = "out";
  std::string io_data_dir = "data";
  int64_t io_checkpoint_every = 5000;

  int slots() const { return encoder_k > 0 ? encoder_k : data_max_objects + 1; }
  bool video() const { return temporal_mode != "off"; }

  SceneConfig scene() const {
    SceneConfig s;
    s.H = data_h;
    s.W = data_w;
    s.L = data_l;
    s.min_count = data_min_objects;
    s.max_count = data_max_objects;
    s.background = data_background == "gradient" ? BackgroundMode::Gradient : BackgroundMode::Gray;
    s.scale_min_q = data_scale_min;
    s.scale_max_q = data_scale_max;
    s.speed_max_q = data_speed_max;
    return s;
  }
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

inline std::vector<ConfigField>& config_fields() {
  static std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto add_int = [&f](const std::string& k, auto member) {
      f.push_back({k, [member](Config& c, const std::string& v) { c.*member = std::stoll(v); },
                   [member](const Config& c) { return std::to_string(c.*member); }});
    };
    auto add_u64 = [&f](const std::string& k, auto member) {
      f.push_back({k, [member](Config& c, const std::string& v) { c.*member = std::stoull(v); },
                   [member](const Config& c) { return std::to_string(c.*member); }});
    };
    auto add_real = [&f](const std::string& k, auto member) {
      f.push_back({k, [member](Config& c, const std::string& v) { c.*member = std::stod(v); },
                   [member](const Config& c) {
                     std::ostringstream ss;
                     ss << c.*member;
                     return ss.str();
                   }});
    };
    auto add_str = [&f](const std::string& k, auto member) {
      f.push_back({k, [member](Config& c, const std::string& v) { c.*member = v; },
                   [member](const Config& c) { return c.*member; }});
    };
    add_int("data.h", &Config::data_h);
    add_int("data.w", &Config::data_w);
    add_int("data.l", &Config::data_l);
    add_int("data.min_objects", &Config::data_min_objects);
    add_int("data.max_objects", &Config::data_max_objects);
    add_int("data.train_size", &Config::data_train_size);
    add_int("data.val_size", &Config::data_val_size);
    add_u64("data.seed", &Config::data_seed);
    add_str("data.background", &Config::data_background);
    add_int("data.scale_min", &Config::data_scale_min);
    add_int("data.scale_max", &Config::data_scale_max);
    add_int("data.speed_max", &Config::data_speed_max);
    add_int("encoder.k", &Config::encoder_k);
    add_int("encoder.d_slot", &Config::encoder_d_slot);
    add_int("encoder.d_feat", &Config::encoder_d_feat);
    add_int("encoder.d_key", &Config::encoder_d_key);
    add_int("encoder.iters", &Config::encoder_iters);
    add_str("encoder.variant", &Config::encoder_variant);
    add_str("encoder.aggregation", &Config::encoder_aggregation);
    add_int("encoder.residual_mlp", &Config::encoder_residual_mlp);
    add_str("decoder.path", &Config::decoder_path);
    add_int("decoder.t", &Config::decoder_t);
    add_real("decoder.beta_start", &Config::decoder_beta_start);
    add_real("decoder.beta_end", &Config::decoder_beta_end);
    add_str("decoder.adapter_blocks", &Config::decoder_adapter_blocks);
    add_real("decoder.cfg_scale", &Config::decoder_cfg_scale);
    add_real("decoder.p_null", &Config::decoder_p_null);
    add_int("decoder.latent_mode", &Config::decoder_latent_mode);
    add_int("decoder.guidance_block", &Config::decoder_guidance_block);
    add_int("decoder.base_channels", &Config::decoder_base_channels);
    add_int("decoder.width", &Config::decoder_width);
    add_str("guidance.mode", &Config::guidance_mode);
    add_real("guidance.lambda", &Config::guidance_lambda);
    add_real("guidance.warmup_frac", &Config::guidance_warmup_frac);
    add_int("guidance.swap_bce", &Config::guidance_swap_bce);
    add_str("temporal.mode", &Config::temporal_mode);
    add_int("train.steps", &Config::train_steps);
    add_real("train.lr", &Config::train_lr);
    add_int("train.batch", &Config::train_batch);
    add_u64("train.seed", &Config::train_seed);
    add_int("train.two_phase", &Config::train_two_phase);
    add_int("train.warmup_steps", &Config::train_warmup_steps);
    add_real("train.grad_clip", &Config::train_grad_clip);
    add_int("train.threads", &Config::train_threads);
    add_int("train.ae_steps", &Config::train_ae_steps);
    add_str("io.out_dir", &Config::io_out_dir);
    add_str("io.data_dir", &Config::io_data_dir);
    f.push_back({"io.checkpoint_every",
                 [](Config& c, const std::string& v) { c.io_checkpoint_every = std::stoll(v); },
                 [](const Config& c) { return std::to_string(c.io_checkpoint_every); }});
    return f;
  }();
  return fields;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  size_t b = s.find_last_not_of(" \t\r\n");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace detail

inline void config_set(Config& c, const std::string& key, const std::string& value) {
  for (auto& f : detail::config_fields()) {
    if (f.key == key) {
      try {
        f.set(c, value);
      } catch (const std::exception&) {
        throw std::invalid_argument("config: bad value for " + key + ": " + value);
      }
      return;
    }
  }
  throw std::invalid_argument("config: unknown key " + key);
}

inline void config_parse_text(Config& c, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: missing '=' on line " + std::to_string(lineno));
    config_set(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline Config config_load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  Config c;
  config_parse_text(c, ss.str());
  return c;
}

// SLOTDIFF_TRAIN_STEPS=500 overrides train.steps, and so on for every key.
inline void config_apply_env(Config& c) {
  for (auto& f : detail::config_fields()) {
    std::string env = "SLOTDIFF_";
    for (char ch : f.key) env += ch == '.' ? '_' : char(std::toupper(ch));
    if (const char* v = std::getenv(env.c_str())) config_set(c, f.key, v);
  }
}

inline std::string config_serialize(const Config& c) {
  std::string out;
  for (auto& f : detail::config_fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

inline void config_validate(const Config& c) {
  auto one_of = [](const std::string& v, std::initializer_list<const char*> opts,
                   const std::string& key) {
    for (const char* o : opts)
      if (v == o) return;
    throw std::invalid_argument("config: invalid " + key + ": " + v);
  };
  one_of(c.data_background, {"gray", "gradient"}, "data.background");
  one_of(c.encoder_variant, {"sa", "isa"}, "encoder.variant");
  one_of(c.encoder_aggregation, {"mean", "sum"}, "encoder.aggregation");
  one_of(c.decoder_path, {"broadcast", "diffusion"}, "decoder.path");
  one_of(c.decoder_adapter_blocks, {"updown", "all", "up", "down"}, "decoder.adapter_blocks");
  one_of(c.guidance_mode, {"none", "slot", "dm", "joint"}, "guidance.mode");
  one_of(c.temporal_mode, {"off", "v1", "v2"}, "temporal.mode");
  if (c.video() && c.encoder_variant != "isa")
    throw std::invalid_argument("config: video modes require encoder.variant = isa");
  if (c.decoder_guidance_block < 0 || c.decoder_guidance_block > 4)
    throw std::invalid_argument("config: decoder.guidance_block out of range");
}

}  // namespace slotdiff
