#pragma once

// Synthetic road scenes: straight (optionally bent) lanes radiating from a
// vanishing point, box occluders drawn over them, global brightness and
// sensor noise. Ground truth keeps occluded lane pixels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "esa/lanes.hpp"
#include "esa/tensor.hpp"

namespace esa {

/// Half-open pixel rectangle [y0, y1) x [x0, x1).
struct Rect {
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  bool contains(std::size_t y, std::size_t x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct Occluder {
  Rect rect;
  double intensity = 0.2;
  friend bool operator==(const Occluder&, const Occluder&) = default;
};

struct SceneSpec {
  std::size_t height = 32, width = 64;
  std::size_t max_lanes = 4;  // C
  double vp_x = 31.5, vp_y = 8.0;
  std::size_t lane_count = 4;
  std::vector<double> lane_angles{-1.1, -0.4, 0.4, 1.1};  // from vertical, radians, left to right
  double lane_thickness = 2.0;
  /// First row lanes are drawn on; defaults to the vanishing point row.
  std::optional<double> lane_start;
  /// Quadratic bend: x offset of curvature * (y - vp_y)^2 / height.
  double curvature = 0.0;
  std::vector<Occluder> occluders;
  double brightness = 1.0;
  double noise_std = 0.0;

  void validate() const {
    if (height == 0 || width == 0) throw std::invalid_argument("SceneSpec: empty image");
    if (lane_count < 1 || lane_count > max_lanes) {
      throw std::invalid_argument("SceneSpec.lane_count: " + std::to_string(lane_count) +
                                  " not in 1.." + std::to_string(max_lanes));
    }
    if (lane_angles.size() != lane_count) {
      throw std::invalid_argument("SceneSpec.lane_angles: expected " + std::to_string(lane_count) + " angles");
    }
    for (std::size_t i = 0; i < lane_angles.size(); ++i) {
      if (!(std::abs(lane_angles[i]) < 1.5607963)) {
        throw std::invalid_argument("SceneSpec.lane_angles: angle must be within (-pi/2, pi/2)");
      }
      if (i && !(lane_angles[i] > lane_angles[i - 1])) {
        throw std::invalid_argument("SceneSpec.lane_angles: angles must be strictly increasing");
      }
    }
    if (!(lane_thickness >= 1.0)) throw std::invalid_argument("SceneSpec.lane_thickness: must be >= 1");
    if (!(vp_y >= 0.0 && vp_y < static_cast<double>(height))) {
      throw std::invalid_argument("SceneSpec.vp_y: vanishing point row outside the image");
    }
    if (!(brightness > 0.0 && brightness <= 1.0)) {
      throw std::invalid_argument("SceneSpec.brightness: must lie in (0, 1]");
    }
    if (!(noise_std >= 0.0)) throw std::invalid_argument("SceneSpec.noise_std: must be >= 0");
    for (const auto& o : occluders) {
      if (o.rect.y0 >= o.rect.y1 || o.rect.x0 >= o.rect.x1 || o.rect.y1 > height || o.rect.x1 > width) {
        throw std::invalid_argument("SceneSpec.occluders: rectangle outside image bounds");
      }
      if (!(o.intensity >= 0.0 && o.intensity <= 1.0)) {
        throw std::invalid_argument("SceneSpec.occluders: intensity must lie in [0, 1]");
      }
    }
  }

  double first_row() const { return lane_start.value_or(vp_y); }

  /// Lane centre x at row y for lane i.
  double lane_x(std::size_t i, double y) const {
    const double dy = y - vp_y;
    return vp_x + dy * std::tan(lane_angles[i]) + curvature * dy * dy / static_cast<double>(height);
  }
};

struct Sample {
  Tensor<double> image;               // [3, H, W] in [0, 1]
  Tensor<int> label;                  // [H, W]
  Tensor<double> existence;           // [C] binary; empty for binary-lane datasets
  Tensor<std::uint8_t> occlusion_mask;   // [H, W], lane pixels hidden by an occluder
  Tensor<std::uint8_t> occluder_region;  // [H, W], union of occluder rectangles
  std::vector<LanePoints> lanes;      // ground-truth lane points when known
};

namespace scene_colors {
inline constexpr double sky[3] = {0.55, 0.62, 0.75};
inline constexpr double road[3] = {0.32, 0.32, 0.34};
inline constexpr double lane[3] = {0.95, 0.95, 0.92};
}  // namespace scene_colors

/// Ground-truth lane centres at every integer row inside the image.
inline std::vector<LanePoints> scene_lanes(const SceneSpec& spec) {
  std::vector<LanePoints> lanes;
  const auto start = static_cast<int>(std::ceil(spec.first_row()));
  for (std::size_t i = 0; i < spec.lane_count; ++i) {
    LanePoints lane;
    lane.class_id = static_cast<int>(i + 1);
    for (int y = std::max(start, 0); y < static_cast<int>(spec.height); ++y) {
      const double x = spec.lane_x(i, y);
      if (x >= 0.0 && x <= static_cast<double>(spec.width) - 1.0) lane.points.push_back({x, y});
    }
    lanes.push_back(std::move(lane));
  }
  return lanes;
}

/// Renders a scene. The label marks every lane pixel, including occluded
/// ones; the image paints occluders over lanes, then scales by brightness and
/// adds Gaussian noise drawn from `seed`.
inline Sample generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto h = spec.height, w = spec.width;
  Sample s;

  std::vector<Polyline> polylines;
  const double y0 = std::max(0.0, spec.first_row());
  for (std::size_t i = 0; i < spec.lane_count; ++i) {
    Polyline line;
    // Sampled per row so bends render smoothly; pixels outside the image are clipped.
    const double last = static_cast<double>(h - 1);
    for (double y = y0; y < last; y += 1.0) line.emplace_back(spec.lane_x(i, y), y);
    line.emplace_back(spec.lane_x(i, last), last);
    polylines.push_back(std::move(line));
  }
  s.label = rasterize_lanes(polylines, spec.lane_thickness, h, w, RasterMode::classes, spec.max_lanes);
  s.lanes = scene_lanes(spec);

  s.image = Tensor<double>({3, h, w});
  s.occluder_region = Tensor<std::uint8_t>({h, w});
  s.occlusion_mask = Tensor<std::uint8_t>({h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double* base = static_cast<double>(y) < spec.vp_y ? scene_colors::sky : scene_colors::road;
      const double* col = s.label(y, x) > 0 ? scene_colors::lane : base;
      for (std::size_t c = 0; c < 3; ++c) s.image(c, y, x) = col[c];
    }
  }
  for (const auto& o : spec.occluders) {
    for (auto y = o.rect.y0; y < o.rect.y1; ++y) {
      for (auto x = o.rect.x0; x < o.rect.x1; ++x) {
        for (std::size_t c = 0; c < 3; ++c) s.image(c, y, x) = o.intensity;
        s.occluder_region(y, x) = 1;
        if (s.label(y, x) > 0) s.occlusion_mask(y, x) = 1;
      }
    }
  }
  Rng rng(seed);
  for (auto& v : s.image) {
    v *= spec.brightness;
    if (spec.noise_std > 0.0) v += spec.noise_std * normal(rng);
    v = std::clamp(v, 0.0, 1.0);
  }

  s.existence = Tensor<double>({spec.max_lanes});
  for (int v : s.label) {
    if (v > 0) s.existence[static_cast<std::size_t>(v - 1)] = 1.0;
  }
  return s;
}

/// Parameters of the random scene distribution used for synthetic benchmarks.
struct SceneDistribution {
  std::size_t height = 32, width = 64;
  std::size_t max_lanes = 4;
  std::size_t min_lane_count = 4, max_lane_count = 4;
  double vp_x_jitter = 0.08;   // fraction of width
  double vp_y = 0.25;          // fraction of height
  double vp_y_jitter = 0.04;
  double lane_start_offset = 0.08;  // fraction of height below the vanishing point
  std::vector<double> base_angles{-1.15, -0.45, 0.45, 1.15};
  double angle_jitter = 0.1;
  double thickness_min = 2.0, thickness_max = 2.0;
  double curvature_max = 0.0;
  double occluder_probability = 0.4;
  std::size_t occluders_min = 1, occluders_max = 2;
  double occluder_height_min = 0.2, occluder_height_max = 0.4;  // fractions of height
  double occluder_width_min = 0.15, occluder_width_max = 0.3;   // fractions of width
  double occluder_intensity_min = 0.05, occluder_intensity_max = 0.6;
  double brightness_min = 0.3, brightness_max = 1.0;
  double noise_std = 0.03;

  void validate() const {
    if (min_lane_count < 1 || min_lane_count > max_lane_count || max_lane_count > max_lanes ||
        base_angles.size() < max_lane_count) {
      throw std::invalid_argument("SceneDistribution: inconsistent lane counts");
    }
    if (!(occluder_probability >= 0.0 && occluder_probability <= 1.0)) {
      throw std::invalid_argument("SceneDistribution.occluder_probability: must lie in [0, 1]");
    }
    if (occluders_min > occluders_max) throw std::invalid_argument("SceneDistribution: occluders_min > occluders_max");
    if (!(brightness_min > 0.0 && brightness_min <= brightness_max && brightness_max <= 1.0)) {
      throw std::invalid_argument("SceneDistribution: brightness range must lie in (0, 1]");
    }
  }

  SceneSpec sample(Rng& rng) const {
    SceneSpec s;
    s.height = height;
    s.width = width;
    s.max_lanes = max_lanes;
    const double H = static_cast<double>(height), W = static_cast<double>(width);
    s.vp_x = (W - 1.0) / 2.0 + uniform(rng, -vp_x_jitter, vp_x_jitter) * W;
    s.vp_y = std::clamp((vp_y + uniform(rng, -vp_y_jitter, vp_y_jitter)) * H, 0.0, H - 2.0);
    s.lane_start = s.vp_y + lane_start_offset * H;
    s.lane_count = min_lane_count + uniform_index(rng, max_lane_count - min_lane_count + 1);
    const std::size_t first = uniform_index(rng, base_angles.size() - s.lane_count + 1);
    s.lane_angles.clear();
    for (std::size_t i = 0; i < s.lane_count; ++i) {
      s.lane_angles.push_back(base_angles[first + i] + uniform(rng, -angle_jitter, angle_jitter));
    }
    std::sort(s.lane_angles.begin(), s.lane_angles.end());
    s.lane_thickness = std::round(uniform(rng, thickness_min, thickness_max));
    s.curvature = uniform(rng, -curvature_max, curvature_max);

    const bool occluded = uniform(rng) < occluder_probability;
    if (occluded) {
      const std::size_t count = occluders_min + uniform_index(rng, occluders_max - occluders_min + 1);
      for (std::size_t k = 0; k < count; ++k) {
        // Vehicle-like boxes centred on a lane in the lower part of the road.
        const std::size_t lane = uniform_index(rng, s.lane_count);
        const double oh = uniform(rng, occluder_height_min, occluder_height_max) * H;
        const double ow = uniform(rng, occluder_width_min, occluder_width_max) * W;
        const double start = s.lane_start.value_or(s.vp_y);
        const double cy = uniform(rng, start + 0.3 * (H - start), H - 1.0);
        const double cx = s.lane_x(lane, cy);
        Occluder o;
        o.rect.y0 = static_cast<std::size_t>(std::clamp(std::round(cy - oh / 2), 0.0, H - 1.0));
        o.rect.y1 = static_cast<std::size_t>(std::clamp(std::round(cy + oh / 2), 1.0, H));
        o.rect.x0 = static_cast<std::size_t>(std::clamp(std::round(cx - ow / 2), 0.0, W - 1.0));
        o.rect.x1 = static_cast<std::size_t>(std::clamp(std::round(cx + ow / 2), 1.0, W));
        if (o.rect.y1 <= o.rect.y0) o.rect.y1 = o.rect.y0 + 1;
        if (o.rect.x1 <= o.rect.x0) o.rect.x1 = o.rect.x0 + 1;
        o.intensity = uniform(rng, occluder_intensity_min, occluder_intensity_max);
        s.occluders.push_back(o);
      }
    }
    s.brightness = uniform(rng, brightness_min, brightness_max);
    s.noise_std = noise_std;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Scene spec text form: space-separated key=value pairs on one line.

inline std::string to_text(const SceneSpec& s) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "height=" << s.height << " width=" << s.width << " max_lanes=" << s.max_lanes
     << " vp_x=" << s.vp_x << " vp_y=" << s.vp_y << " lane_count=" << s.lane_count << " lane_angles=";
  for (std::size_t i = 0; i < s.lane_angles.size(); ++i) os << (i ? "," : "") << s.lane_angles[i];
  os << " lane_thickness=" << s.lane_thickness;
  if (s.lane_start) os << " lane_start=" << *s.lane_start;
  os << " curvature=" << s.curvature << " brightness=" << s.brightness << " noise_std=" << s.noise_std
     << " occluders=";
  if (s.occluders.empty()) os << "none";
  for (std::size_t i = 0; i < s.occluders.size(); ++i) {
    const auto& o = s.occluders[i];
    os << (i ? ";" : "") << o.rect.y0 << ',' << o.rect.x0 << ',' << o.rect.y1 << ',' << o.rect.x1 << ','
       << o.intensity;
  }
  return os.str();
}

inline std::map<std::string, std::string> parse_fields(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream is(line);
  for (std::string tok; is >> tok;) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("malformed field '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline SceneSpec scene_from_text(const std::string& line) {
  const auto kv = parse_fields(line);
  const auto need = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::invalid_argument(std::string("scene spec: missing key ") + k);
    return it->second;
  };
  const auto num = [&](const char* k) { return std::stod(need(k)); };
  const auto list = [](const std::string& v, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, sep);) out.push_back(item);
    return out;
  };
  SceneSpec s;
  s.height = static_cast<std::size_t>(num("height"));
  s.width = static_cast<std::size_t>(num("width"));
  s.max_lanes = static_cast<std::size_t>(num("max_lanes"));
  s.vp_x = num("vp_x");
  s.vp_y = num("vp_y");
  s.lane_count = static_cast<std::size_t>(num("lane_count"));
  s.lane_angles.clear();
  for (const auto& a : list(need("lane_angles"), ',')) s.lane_angles.push_back(std::stod(a));
  s.lane_thickness = num("lane_thickness");
  if (kv.count("lane_start")) s.lane_start = num("lane_start");
  s.curvature = num("curvature");
  s.brightness = num("brightness");
  s.noise_std = num("noise_std");
  if (need("occluders") != "none") {
    for (const auto& item : list(need("occluders"), ';')) {
      const auto f = list(item, ',');
      if (f.size() != 5) throw std::invalid_argument("scene spec: malformed occluder '" + item + "'");
      Occluder o;
      o.rect = {std::stoul(f[0]), std::stoul(f[1]), std::stoul(f[2]), std::stoul(f[3])};
      o.intensity = std::stod(f[4]);
      s.occluders.push_back(o);
    }
  }
  return s;
}

struct ManifestEntry {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  SceneSpec spec;
};

struct SyntheticDataset {
  std::vector<ManifestEntry> manifest;
  std::vector<Sample> samples;
};

/// n scenes; scene i uses seed mix_seed(seed, i) for both its spec and its noise.
inline SyntheticDataset generate_dataset(const SceneDistribution& dist, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  dist.validate();
  SyntheticDataset ds;
  ds.manifest.reserve(n);
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = mix_seed(seed, i);
    Rng rng(s);
    ManifestEntry e{i, s, dist.sample(rng)};
    ds.samples.push_back(generate_scene(e.spec, mix_seed(s, 1)));
    ds.manifest.push_back(std::move(e));
  }
  return ds;
}

inline std::uint64_t manifest_hash(const std::vector<ManifestEntry>& manifest) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : manifest) {
    const std::string line = std::to_string(e.index) + " " + std::to_string(e.seed) + " " + to_text(e.spec);
    for (unsigned char c : line) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace esa
