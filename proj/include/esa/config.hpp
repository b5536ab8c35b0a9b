#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "esa/data.hpp"
#include "esa/metrics.hpp"
#include "esa/model.hpp"
#include "esa/trainer.hpp"

namespace esa {

/// Invalid configuration; the message names the offending key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat key=value configuration with dotted keys ("train.lr=0.1").
/// Blank lines and lines starting with '#' are ignored.
class Config {
 public:
  static Config parse(std::istream& is, const std::string& origin = "config") {
    Config c;
    std::size_t line_no = 0;
    for (std::string line; std::getline(is, line);) {
      ++line_no;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      try {
        c.set(line);
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    return c;
  }

  static Config from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    return parse(is, path.string());
  }

  /// Applies one "key=value" assignment; later assignments win.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    const auto key = trim(assignment.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key in '" + assignment + "'");
    values_[key] = trim(assignment.substr(eq + 1));
  }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string text(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string required(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end() || it->second.empty()) throw ConfigError("missing required key " + key);
    return it->second;
  }

  double real(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : to_real(key, it->second);
  }

  std::size_t count(const std::string& key, std::size_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return static_cast<std::size_t>(to_u64(key, it->second));
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : to_u64(key, it->second);
  }

  bool flag(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& v = it->second;
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
  }

  std::vector<double> reals(const std::string& key, std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::stringstream ss(it->second);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(to_real(key, trim(item)));
    return out;
  }

  /// Rejects keys missing from `known`.
  void check_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (!known.count(k)) throw ConfigError("unknown key " + k);
    }
  }

  /// Key=value pairs under "model.".
  KeyValues model_values() const {
    KeyValues kv;
    for (const auto& [k, v] : values_) {
      if (k.rfind("model.", 0) == 0) kv[k] = v;
    }
    return kv;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }
  static double to_real(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  static std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      if (!v.empty() && v[0] != '-') {
        const auto n = std::stoull(v, &pos);
        if (pos == v.size()) return n;
      }
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }

  std::map<std::string, std::string> values_;
};

/// Every key the command-line tool understands.
inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k{
        "seed",
        "synth.n", "synth.height", "synth.width", "synth.max_lanes", "synth.min_lane_count", "synth.max_lane_count",
        "synth.vp_x_jitter", "synth.vp_y", "synth.vp_y_jitter", "synth.lane_start_offset", "synth.base_angles",
        "synth.angle_jitter", "synth.thickness_min", "synth.thickness_max", "synth.curvature_max",
        "synth.occluder_probability", "synth.occluders_min", "synth.occluders_max", "synth.occluder_height_min",
        "synth.occluder_height_max", "synth.occluder_width_min", "synth.occluder_width_max",
        "synth.occluder_intensity_min", "synth.occluder_intensity_max", "synth.brightness_min",
        "synth.brightness_max", "synth.noise_std",
        "train.lr", "train.momentum", "train.weight_decay", "train.batch_size", "train.epochs", "train.max_steps",
        "train.alpha", "train.beta", "train.gamma", "train.lambda", "train.upsilon", "train.lr_schedule",
        "train.poly_power", "train.detach_esa_probability", "train.class_weights", "train.esa_warmup_steps",
        "data.train.format", "data.train.root", "data.train.list",
        "data.test.format", "data.test.root", "data.test.list",
        "eval.protocol", "eval.anchor_step", "eval.batch_size", "eval.lane_threshold", "eval.existence_threshold",
        "eval.tusimple_pixel_threshold", "eval.tusimple_lane_accuracy", "eval.culane_thickness",
        "eval.culane_iou_threshold",
        "ablate.upsilon_values",
        "checkpoint", "visualize.images",
        "gradcheck.points", "gradcheck.eps"};
    for (const auto& [key, v] : to_key_values(ModelConfig{})) k.insert(key);
    return k;
  }();
  return keys;
}

inline SceneDistribution synth_distribution(const Config& c) {
  SceneDistribution d;
  d.height = c.count("synth.height", d.height);
  d.width = c.count("synth.width", d.width);
  d.max_lanes = c.count("synth.max_lanes", d.max_lanes);
  d.min_lane_count = c.count("synth.min_lane_count", d.min_lane_count);
  d.max_lane_count = c.count("synth.max_lane_count", d.max_lane_count);
  d.vp_x_jitter = c.real("synth.vp_x_jitter", d.vp_x_jitter);
  d.vp_y = c.real("synth.vp_y", d.vp_y);
  d.vp_y_jitter = c.real("synth.vp_y_jitter", d.vp_y_jitter);
  d.lane_start_offset = c.real("synth.lane_start_offset", d.lane_start_offset);
  d.base_angles = c.reals("synth.base_angles", d.base_angles);
  d.angle_jitter = c.real("synth.angle_jitter", d.angle_jitter);
  d.thickness_min = c.real("synth.thickness_min", d.thickness_min);
  d.thickness_max = c.real("synth.thickness_max", d.thickness_max);
  d.curvature_max = c.real("synth.curvature_max", d.curvature_max);
  d.occluder_probability = c.real("synth.occluder_probability", d.occluder_probability);
  d.occluders_min = c.count("synth.occluders_min", d.occluders_min);
  d.occluders_max = c.count("synth.occluders_max", d.occluders_max);
  d.occluder_height_min = c.real("synth.occluder_height_min", d.occluder_height_min);
  d.occluder_height_max = c.real("synth.occluder_height_max", d.occluder_height_max);
  d.occluder_width_min = c.real("synth.occluder_width_min", d.occluder_width_min);
  d.occluder_width_max = c.real("synth.occluder_width_max", d.occluder_width_max);
  d.occluder_intensity_min = c.real("synth.occluder_intensity_min", d.occluder_intensity_min);
  d.occluder_intensity_max = c.real("synth.occluder_intensity_max", d.occluder_intensity_max);
  d.brightness_min = c.real("synth.brightness_min", d.brightness_min);
  d.brightness_max = c.real("synth.brightness_max", d.brightness_max);
  d.noise_std = c.real("synth.noise_std", d.noise_std);
  try {
    d.validate();
    // Probe one scene so geometric problems surface as configuration errors.
    Rng rng(0);
    d.sample(rng).validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("synth: ") + e.what());
  }
  return d;
}

inline ModelConfig model_config(const Config& c) {
  try {
    auto m = model_config_from(c.model_values());
    if (!c.has("model.seed")) m.seed = c.u64("seed", m.seed);
    m.validate();
    return m;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

inline TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.lr = c.real("train.lr", t.lr);
  t.momentum = c.real("train.momentum", t.momentum);
  t.weight_decay = c.real("train.weight_decay", t.weight_decay);
  t.batch_size = c.count("train.batch_size", t.batch_size);
  t.epochs = c.count("train.epochs", t.epochs);
  t.max_steps = c.count("train.max_steps", t.max_steps);
  t.seed = c.u64("seed", t.seed);
  auto& w = t.loss.weights;
  w.alpha = c.real("train.alpha", w.alpha);
  w.beta = c.real("train.beta", w.beta);
  w.gamma = c.real("train.gamma", w.gamma);
  w.lambda = c.real("train.lambda", w.lambda);
  w.upsilon = c.real("train.upsilon", w.upsilon);
  const auto sched = c.text("train.lr_schedule", "constant");
  if (sched == "constant") {
    t.lr_schedule = LrSchedule::constant;
  } else if (sched == "polynomial") {
    t.lr_schedule = LrSchedule::polynomial;
  } else {
    throw ConfigError("train.lr_schedule: expected constant or polynomial, got '" + sched + "'");
  }
  t.poly_power = c.real("train.poly_power", t.poly_power);
  t.loss.detach_esa_probability = c.flag("train.detach_esa_probability", false);
  t.loss.class_weights = c.reals("train.class_weights", {});
  t.esa_warmup_steps = c.count("train.esa_warmup_steps", 0);
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return t;
}

inline EvalConfig eval_config(const Config& c) {
  EvalConfig e;
  e.anchor_step = c.count("eval.anchor_step", e.anchor_step);
  e.batch_size = c.count("eval.batch_size", e.batch_size);
  e.decode.prob_threshold = c.real("eval.lane_threshold", e.decode.prob_threshold);
  e.decode.exist_threshold = c.real("eval.existence_threshold", e.decode.exist_threshold);
  e.tusimple.pixel_threshold = c.real("eval.tusimple_pixel_threshold", e.tusimple.pixel_threshold);
  e.tusimple.lane_threshold = c.real("eval.tusimple_lane_accuracy", e.tusimple.lane_threshold);
  e.culane.thickness = c.real("eval.culane_thickness", e.culane.thickness);
  e.culane.iou_threshold = c.real("eval.culane_iou_threshold", e.culane.iou_threshold);
  if (e.anchor_step < 1) throw ConfigError("eval.anchor_step: must be >= 1");
  if (e.batch_size < 1) throw ConfigError("eval.batch_size: must be >= 1");
  return e;
}

inline Protocol protocol_config(const Config& c, const std::string& fallback) {
  const auto p = c.text("eval.protocol", fallback);
  try {
    return protocol_from_string(p);
  } catch (const std::invalid_argument&) {
    throw ConfigError("eval.protocol: unknown protocol '" + p + "' (tusimple, culane or bdd)");
  }
}

}  // namespace esa
