#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "llip/encoders.hpp"
#include "llip/mixer.hpp"
#include "llip/training.hpp"

namespace llip {

// Flat experiment configuration. File format: one `key = value` per line,
// `#` comments, dotted section keys. Flags override file values; defaults
// fill the rest. Unknown keys and out-of-range values are all reported at
// once, before any work starts.
struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::string data_dir = "data";
  long data_n = 10000;
  long holdout_n = 2048;

  VitConfig vit;  // image_size 32, patch 8, width 64, depth 4, heads 4, K 16

  long text_context = 16;
  long text_width = 64;
  long text_depth = 2;
  long text_heads = 4;

  long mixer_heads = 4;
  double tau = 5.0;

  std::string variant = "llip";
  long steps = 5000;
  long batch = 64;
  double lr_peak = 3e-4;
  long warmup = 200;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  long eval_every = 500;
  std::string out_dir = "runs/run";

  long eval_samples = 512;

  TextConfig text_config(long vocab_size) const {
    TextConfig t;
    t.vocab_size = vocab_size;
    t.context_length = text_context;
    t.width = text_width;
    t.depth = text_depth;
    t.heads = text_heads;
    return t;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.variant = parse_variant(variant);
    t.steps = steps;
    t.batch = batch;
    t.lr_peak = lr_peak;
    t.warmup_steps = warmup;
    t.weight_decay = weight_decay;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.seed = seed;
    t.eval_every = eval_every;
    return t;
  }
};

namespace detail {

struct KvError {
  std::string key;
  std::string message;
};

inline bool parse_long(const std::string& v, long& out) {
  try {
    std::size_t used = 0;
    out = std::stol(v, &used);
    return used == v.size();
  } catch (const std::logic_error&) {
    return false;
  }
}

inline bool parse_double(const std::string& v, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(v, &used);
    return used == v.size();
  } catch (const std::logic_error&) {
    return false;
  }
}

inline bool parse_u64(const std::string& v, std::uint64_t& out) {
  try {
    std::size_t used = 0;
    out = std::stoull(v, &used);
    return used == v.size();
  } catch (const std::logic_error&) {
    return false;
  }
}

inline bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1") {
    out = true;
    return true;
  }
  if (v == "false" || v == "0") {
    out = false;
    return true;
  }
  return false;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
}

// Applies one key=value pair; returns false for unknown keys.
inline bool apply_key(ExperimentConfig& c, const std::string& key, const std::string& value, std::vector<KvError>& errs) {
  const auto bad = [&](const char* what) {
    errs.push_back({key, std::string("expected ") + what + ", got '" + value + "'"});
    return true;
  };
  const auto set_long = [&](long& dst) { return parse_long(value, dst) ? true : bad("an integer"); };
  const auto set_double = [&](double& dst) { return parse_double(value, dst) ? true : bad("a number"); };

  if (key == "seed") return parse_u64(value, c.seed) ? true : bad("an unsigned integer");
  if (key == "data.dir") {
    c.data_dir = value;
    return true;
  }
  if (key == "data.n") return set_long(c.data_n);
  if (key == "data.holdout") return set_long(c.holdout_n);
  if (key == "model.image_size") return set_long(c.vit.image_size);
  if (key == "model.patch_size") return set_long(c.vit.patch_size);
  if (key == "model.width") return set_long(c.vit.width);
  if (key == "model.depth") return set_long(c.vit.depth);
  if (key == "model.heads") return set_long(c.vit.heads);
  if (key == "model.K" || key == "K") return set_long(c.vit.mixture_tokens);
  if (key == "model.patch_tokens") {
    bool b = false;
    if (!parse_bool(value, b)) return bad("a boolean");
    c.vit.emit_patch_tokens = b;
    return true;
  }
  if (key == "text.context") return set_long(c.text_context);
  if (key == "text.width") return set_long(c.text_width);
  if (key == "text.depth") return set_long(c.text_depth);
  if (key == "text.heads") return set_long(c.text_heads);
  if (key == "mixer.heads" || key == "M") return set_long(c.mixer_heads);
  if (key == "mixer.tau" || key == "tau") return set_double(c.tau);
  if (key == "train.variant" || key == "variant") {
    c.variant = value;
    return true;
  }
  if (key == "train.steps" || key == "steps") return set_long(c.steps);
  if (key == "train.batch" || key == "batch") return set_long(c.batch);
  if (key == "train.lr_peak") return set_double(c.lr_peak);
  if (key == "train.warmup") return set_long(c.warmup);
  if (key == "train.weight_decay") return set_double(c.weight_decay);
  if (key == "train.beta1") return set_double(c.beta1);
  if (key == "train.beta2") return set_double(c.beta2);
  if (key == "train.eval_every") return set_long(c.eval_every);
  if (key == "train.out") {
    c.out_dir = value;
    return true;
  }
  if (key == "eval.samples") return set_long(c.eval_samples);
  return false;
}

}  // namespace detail

// Cross-field validation; throws a config_error listing every offending key.
inline void validate_config(const ExperimentConfig& c, std::vector<detail::KvError> errs = {}) {
  const auto check = [&](bool ok, const char* key, const char* msg) {
    if (!ok) errs.push_back({key, msg});
  };
  check(c.data_n >= 1, "data.n", "must be >= 1");
  check(c.holdout_n >= 1, "data.holdout", "must be >= 1");
  check(c.vit.image_size >= 1 && c.vit.patch_size >= 1 && c.vit.image_size % c.vit.patch_size == 0,
        "model.patch_size", "image size must be a positive multiple of patch size");
  check(c.vit.width >= 1 && c.vit.heads >= 1 && c.vit.width % c.vit.heads == 0, "model.heads",
        "width must be divisible by heads");
  check(c.vit.depth >= 1, "model.depth", "must be >= 1");
  check(c.vit.mixture_tokens >= 1, "model.K", "must be >= 1");
  check(c.text_context >= 3, "text.context", "must be >= 3");
  check(c.text_width >= 1 && c.text_heads >= 1 && c.text_width % c.text_heads == 0, "text.heads",
        "width must be divisible by heads");
  check(c.text_depth >= 1, "text.depth", "must be >= 1");
  check(c.mixer_heads >= 1 && c.vit.width % c.mixer_heads == 0, "mixer.heads", "must divide the model width");
  check(c.tau > 0, "mixer.tau", "must be positive");
  check(c.steps >= 1, "train.steps", "must be >= 1");
  check(c.batch >= 2, "train.batch", "must be >= 2 (in-batch negatives required)");
  check(c.lr_peak > 0, "train.lr_peak", "must be positive");
  check(c.warmup >= 0 && c.warmup < c.steps, "train.warmup", "must lie in [0, steps)");
  check(c.beta1 >= 0 && c.beta1 < 1, "train.beta1", "must lie in [0,1)");
  check(c.beta2 >= 0 && c.beta2 < 1, "train.beta2", "must lie in [0,1)");
  check(c.weight_decay >= 0, "train.weight_decay", "must be >= 0");
  check(c.eval_every >= 1, "train.eval_every", "must be >= 1");
  check(c.eval_samples >= 1, "eval.samples", "must be >= 1");
  try {
    const PoolingVariant v = parse_variant(c.variant);
    if (v == PoolingVariant::siglip_cls && c.vit.mixture_tokens != 1)
      errs.push_back({"model.K", "the siglip variant requires K = 1"});
  } catch (const config_error&) {
    errs.push_back({"train.variant", "unknown variant '" + c.variant + "'"});
  }
  if (!errs.empty()) {
    std::ostringstream os;
    os << "configuration invalid:";
    for (const auto& e : errs) os << "\n  " << e.key << ": " << e.message;
    throw config_error(os.str());
  }
}

// Parses a config document; collects unknown keys and bad values.
inline ExperimentConfig parse_config_text(const std::string& text,
                                          const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  ExperimentConfig cfg;
  std::vector<detail::KvError> errs;
  std::istringstream is(text);
  std::string line;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errs.push_back({"line " + std::to_string(line_no), "expected 'key = value'"});
      continue;
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      errs.push_back({"line " + std::to_string(line_no), "empty key"});
      continue;
    }
    if (!detail::apply_key(cfg, key, value, errs)) errs.push_back({key, "unknown key"});
  }
  for (const auto& [key, value] : overrides) {
    if (!detail::apply_key(cfg, key, value, errs)) errs.push_back({key, "unknown key"});
  }
  validate_config(cfg, std::move(errs));
  return cfg;
}

inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                                    const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  std::string text;
  if (file) {
    std::ifstream f(*file, std::ios::binary);
    if (!f) throw io_error("config: cannot open " + file->string());
    std::stringstream ss;
    ss << f.rdbuf();
    text = ss.str();
  }
  return parse_config_text(text, overrides);
}

}  // namespace llip
