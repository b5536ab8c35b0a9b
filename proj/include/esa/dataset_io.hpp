#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "esa/data.hpp"
#include "esa/image_io.hpp"
#include "esa/lanes.hpp"
#include "esa/metrics.hpp"
#include "esa/trainer.hpp"

namespace esa {

namespace fs = std::filesystem;

/// Malformed dataset annotation (bad record or list line).
class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Receives loader warnings; defaults to stderr.
using WarningSink = std::function<void(const std::string&)>;

inline void default_warning(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

// ---------------------------------------------------------------------------
// Synthetic datasets on disk:
//   manifest.txt                one line per scene: index, seed, file paths, spec fields
//   images/NNNNNN.png           RGB image
//   labels/NNNNNN.png           single-channel class indices
//   occlusion/NNNNNN.png        single-channel occlusion mask (0/1)

inline std::string sample_stem(std::size_t index) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

inline void write_synthetic_dataset(const fs::path& dir, const SyntheticDataset& ds) {
  std::error_code ec;
  for (const char* sub : {"images", "labels", "occlusion"}) {
    fs::create_directories(dir / sub, ec);
    if (ec) throw IoError("cannot create " + (dir / sub).string() + ": " + ec.message());
  }
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.txt").string());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& e = ds.manifest[i];
    const auto& s = ds.samples[i];
    const auto stem = sample_stem(e.index);
    write_png(dir / "images" / (stem + ".png"), from_tensor(s.image));
    write_png(dir / "labels" / (stem + ".png"), label_image(s.label));
    Tensor<int> mask(s.occlusion_mask.shape());
    std::copy(s.occlusion_mask.begin(), s.occlusion_mask.end(), mask.begin());
    write_png(dir / "occlusion" / (stem + ".png"), label_image(mask));
    manifest << "index=" << e.index << " seed=" << e.seed << " image=images/" << stem << ".png label=labels/"
             << stem << ".png occlusion=occlusion/" << stem << ".png " << to_text(e.spec) << '\n';
  }
  if (!manifest) throw IoError("failed writing " + (dir / "manifest.txt").string());
}

/// Reads a directory written by write_synthetic_dataset. Images and labels
/// come from the PNG files; lane points and occluder regions from the spec.
class SyntheticDirectorySource final : public SampleSource {
 public:
  explicit SyntheticDirectorySource(fs::path dir) : dir_(std::move(dir)) {
    std::ifstream is(dir_ / "manifest.txt");
    if (!is) throw IoError("missing manifest: " + (dir_ / "manifest.txt").string());
    std::size_t line_no = 0;
    for (std::string line; std::getline(is, line);) {
      ++line_no;
      if (line.empty()) continue;
      try {
        auto kv = parse_fields(line);
        Entry e;
        e.image = kv.at("image");
        e.label = kv.at("label");
        e.spec = scene_from_text(line);
        e.spec.validate();
        entries_.push_back(std::move(e));
      } catch (const std::exception& ex) {
        throw DataFormatError("manifest line " + std::to_string(line_no) + ": " + ex.what());
      }
    }
  }

  std::size_t size() const override { return entries_.size(); }

  Sample get(std::size_t i) const override {
    const auto& e = entries_.at(i);
    // Geometry-only rendering supplies lanes, existence and occluder masks.
    Sample s = generate_scene(e.spec, 0);
    s.image = to_tensor(read_rgb(dir_ / e.image));
    s.label = label_from_image(read_png(dir_ / e.label));
    if (s.image.dim(1) != e.spec.height || s.image.dim(2) != e.spec.width ||
        s.label.shape() != Shape{e.spec.height, e.spec.width}) {
      throw DataFormatError("sample " + std::to_string(i) + ": image size does not match its manifest spec");
    }
    return s;
  }

  const SceneSpec& spec(std::size_t i) const { return entries_.at(i).spec; }

 private:
  struct Entry {
    std::string image, label;
    SceneSpec spec;
  };
  fs::path dir_;
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Shared helpers for real datasets

namespace detail {

/// Scales lane points and re-quantises rows, keeping rows strictly increasing.
inline LanePoints scale_lane(const LanePoints& lane, double sx, double sy, std::size_t height) {
  LanePoints out;
  out.class_id = lane.class_id;
  for (const auto& p : lane.points) {
    const int y = static_cast<int>(std::lround(p.y * sy));
    if (y < 0 || y >= static_cast<int>(height)) continue;
    if (!out.points.empty() && y <= out.points.back().y) continue;
    out.points.push_back({p.x * sx, y});
  }
  return out;
}

inline std::string strip_leading_slash(std::string p) {
  while (!p.empty() && p.front() == '/') p.erase(p.begin());
  return p;
}

inline Tensor<double> load_resized_image(const fs::path& path, std::size_t h, std::size_t w, double& sx, double& sy) {
  const auto img = read_rgb(path);
  sx = static_cast<double>(w) / static_cast<double>(img.width);
  sy = static_cast<double>(h) / static_cast<double>(img.height);
  return to_tensor(resize_bilinear(img, h, w));
}

/// Existence vector with ones for the first `present` lane slots.
inline Tensor<double> existence_for(std::size_t lanes, std::size_t present) {
  Tensor<double> e({lanes});
  for (std::size_t c = 0; c < std::min(lanes, present); ++c) e[c] = 1.0;
  return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// TuSimple: JSON lines with "lanes", "h_samples" and "raw_file".

struct TusimpleOptions {
  std::size_t height = 368, width = 640;
  double thickness = 8.0;
  std::size_t max_lanes = 4;
};

class TusimpleSource final : public SampleSource {
 public:
  TusimpleSource(fs::path root, const fs::path& label_file, TusimpleOptions opt = {},
                 const WarningSink& warn = default_warning)
      : root_(std::move(root)), opt_(opt) {
    std::ifstream is(label_file);
    if (!is) throw IoError("cannot open label file " + label_file.string());
    std::size_t line_no = 0;
    for (std::string line; std::getline(is, line);) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      Record r;
      try {
        const auto j = nlohmann::json::parse(line);
        r.raw_file = j.at("raw_file").get<std::string>();
        const auto rows = j.at("h_samples").get<std::vector<double>>();
        for (const auto& xs : j.at("lanes")) {
          const auto v = xs.get<std::vector<double>>();
          if (v.size() != rows.size()) throw DataFormatError("lane length differs from h_samples");
          LanePoints lane;
          for (std::size_t k = 0; k < v.size(); ++k) {
            if (v[k] == -2.0) continue;
            const int y = static_cast<int>(std::lround(rows[k]));
            if (!lane.points.empty() && y <= lane.points.back().y) throw DataFormatError("h_samples not increasing");
            lane.points.push_back({v[k], y});
          }
          if (!lane.points.empty()) r.lanes.push_back(std::move(lane));
        }
        if (r.lanes.size() > opt_.max_lanes) throw DataFormatError("more lanes than lane classes");
      } catch (const std::exception& ex) {
        warn(label_file.string() + ":" + std::to_string(line_no) + ": skipping malformed record (" + ex.what() + ")");
        continue;
      }
      const auto image = root_ / detail::strip_leading_slash(r.raw_file);
      if (!fs::exists(image)) throw IoError("missing image: " + image.string());
      records_.push_back(std::move(r));
    }
  }

  std::size_t size() const override { return records_.size(); }

  Sample get(std::size_t i) const override {
    const auto& r = records_.at(i);
    Sample s;
    double sx = 1.0, sy = 1.0;
    s.image = detail::load_resized_image(root_ / detail::strip_leading_slash(r.raw_file), opt_.height, opt_.width, sx, sy);
    std::vector<Polyline> lines;
    std::vector<LanePoints> scaled;
    for (const auto& lane : r.lanes) {
      auto l = detail::scale_lane(lane, sx, sy, opt_.height);
      if (l.points.empty()) continue;
      lines.push_back(to_polyline(l));
      scaled.push_back(std::move(l));
    }
    s.label = rasterize_lanes(lines, opt_.thickness, opt_.height, opt_.width, RasterMode::classes, opt_.max_lanes);
    s.existence = detail::existence_for(opt_.max_lanes, lines.size());
    // Lane points carry the same left-to-right class order as the label.
    std::vector<std::size_t> order(scaled.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      return detail::bottom_intercept(lines[a], static_cast<double>(opt_.height) - 1.0) <
             detail::bottom_intercept(lines[b], static_cast<double>(opt_.height) - 1.0);
    });
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      auto l = scaled[order[rank]];
      l.class_id = static_cast<int>(rank + 1);
      s.lanes.push_back(std::move(l));
    }
    return s;
  }

 private:
  struct Record {
    std::string raw_file;
    std::vector<LanePoints> lanes;
  };
  fs::path root_;
  TusimpleOptions opt_;
  std::vector<Record> records_;
};

// ---------------------------------------------------------------------------
// CULane: list lines "image_path label_path e1 e2 e3 e4".

struct CulaneOptions {
  std::size_t height = 288, width = 800;
  std::size_t lanes = 4;
};

class CulaneSource final : public SampleSource {
 public:
  CulaneSource(fs::path root, const fs::path& list_file, CulaneOptions opt = {})
      : root_(std::move(root)), opt_(opt) {
    std::ifstream is(list_file);
    if (!is) throw IoError("cannot open list file " + list_file.string());
    std::size_t line_no = 0;
    for (std::string line; std::getline(is, line);) {
      ++line_no;
      std::istringstream ls(line);
      std::vector<std::string> tok;
      for (std::string t; ls >> t;) tok.push_back(t);
      if (tok.empty()) continue;
      const auto where = list_file.string() + ":" + std::to_string(line_no);
      if (tok.size() != 2 + opt_.lanes) {
        throw DataFormatError(where + ": expected image, label and " + std::to_string(opt_.lanes) +
                              " existence flags, found " + std::to_string(tok.size() < 2 ? 0 : tok.size() - 2) +
                              " flags");
      }
      Entry e{root_ / detail::strip_leading_slash(tok[0]), root_ / detail::strip_leading_slash(tok[1]), {}};
      for (std::size_t c = 0; c < opt_.lanes; ++c) {
        if (tok[2 + c] != "0" && tok[2 + c] != "1") throw DataFormatError(where + ": existence flags must be 0 or 1");
        e.flags.push_back(tok[2 + c] == "1" ? 1.0 : 0.0);
      }
      for (const auto& p : {e.image, e.label}) {
        if (!fs::exists(p)) throw IoError(where + ": missing file " + p.string());
      }
      entries_.push_back(std::move(e));
    }
  }

  std::size_t size() const override { return entries_.size(); }

  Sample get(std::size_t i) const override {
    const auto& e = entries_.at(i);
    Sample s;
    double sx = 1.0, sy = 1.0;
    s.image = detail::load_resized_image(e.image, opt_.height, opt_.width, sx, sy);
    s.label = label_from_image(resize_nearest(read_png(e.label), opt_.height, opt_.width));
    for (int v : s.label) {
      if (v < 0 || v > static_cast<int>(opt_.lanes)) {
        throw DataFormatError(e.label.string() + ": label value " + std::to_string(v) + " outside 0.." +
                              std::to_string(opt_.lanes));
      }
    }
    s.existence = Tensor<double>({opt_.lanes}, e.flags);
    // Optional point annotations next to the image.
    auto lines = e.image;
    lines.replace_extension(".lines.txt");
    if (fs::exists(lines)) {
      for (const auto& lane : read_lane_file(lines.string())) {
        auto l = detail::scale_lane(lane, sx, sy, opt_.height);
        if (l.points.size() >= 2) s.lanes.push_back(std::move(l));
      }
    }
    return s;
  }

 private:
  struct Entry {
    fs::path image, label;
    std::vector<double> flags;
  };
  fs::path root_;
  CulaneOptions opt_;
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// BDD100K lanes: a JSON array of {"name", "labels": [{"category": "lane",
// "poly2d": [{"vertices": [[x, y], ...]}]}]}, images under root/images.

struct BddOptions {
  std::size_t height = 360, width = 640;
  double thickness = 8.0;
  std::size_t resample_points = 50;
  /// Two boundary lines pair up when their mean horizontal gap (original pixels) is below this.
  double max_pair_gap = 80.0;
};

/// Resamples a polyline to n points evenly spaced in arc length, ordered top to bottom.
inline Polyline resample_arc_length(Polyline line, std::size_t n) {
  if (line.size() < 2 || n < 2) throw std::invalid_argument("resample_arc_length: need >= 2 points");
  if (line.front().second > line.back().second) std::reverse(line.begin(), line.end());
  std::vector<double> cum{0.0};
  for (std::size_t i = 1; i < line.size(); ++i) {
    cum.push_back(cum.back() + std::hypot(line[i].first - line[i - 1].first, line[i].second - line[i - 1].second));
  }
  Polyline out;
  std::size_t seg = 1;
  for (std::size_t k = 0; k < n; ++k) {
    const double s = cum.back() * static_cast<double>(k) / static_cast<double>(n - 1);
    while (seg + 1 < line.size() && cum[seg] < s) ++seg;
    const double len = cum[seg] - cum[seg - 1];
    const double t = len > 0.0 ? std::clamp((s - cum[seg - 1]) / len, 0.0, 1.0) : 0.0;
    out.emplace_back(line[seg - 1].first + t * (line[seg].first - line[seg - 1].first),
                     line[seg - 1].second + t * (line[seg].second - line[seg - 1].second));
  }
  return out;
}

/// Pointwise midpoint of two boundary lines after arc-length resampling.
inline Polyline centerline(const Polyline& a, const Polyline& b, std::size_t n) {
  const auto ra = resample_arc_length(a, n), rb = resample_arc_length(b, n);
  Polyline mid;
  for (std::size_t k = 0; k < n; ++k) {
    mid.emplace_back((ra[k].first + rb[k].first) / 2.0, (ra[k].second + rb[k].second) / 2.0);
  }
  return mid;
}

/// Pairs boundary lines into lanes. Lines are ordered by mean x; neighbours
/// whose mean horizontal gap is below max_gap pair up greedily from the left.
/// Returns centerlines plus the lines that stayed unpaired.
inline std::pair<std::vector<Polyline>, std::vector<Polyline>> pair_boundaries(const std::vector<Polyline>& lines,
                                                                               std::size_t n, double max_gap) {
  std::vector<Polyline> usable;
  for (const auto& l : lines) {
    if (l.size() >= 2) usable.push_back(l);
  }
  const auto mean_x = [n](const Polyline& l) {
    double s = 0.0;
    for (const auto& p : resample_arc_length(l, n)) s += p.first;
    return s / static_cast<double>(n);
  };
  std::vector<double> mx;
  for (const auto& l : usable) mx.push_back(mean_x(l));
  std::vector<std::size_t> order(usable.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mx[a] < mx[b]; });

  std::vector<Polyline> centers, unpaired;
  for (std::size_t k = 0; k < order.size();) {
    if (k + 1 < order.size()) {
      const auto ra = resample_arc_length(usable[order[k]], n), rb = resample_arc_length(usable[order[k + 1]], n);
      double gap = 0.0;
      for (std::size_t q = 0; q < n; ++q) gap += std::abs(ra[q].first - rb[q].first);
      if (gap / static_cast<double>(n) < max_gap) {
        centers.push_back(centerline(usable[order[k]], usable[order[k + 1]], n));
        k += 2;
        continue;
      }
    }
    unpaired.push_back(usable[order[k]]);
    ++k;
  }
  return {centers, unpaired};
}

class BddSource final : public SampleSource {
 public:
  BddSource(fs::path root, const fs::path& label_file, BddOptions opt = {}, WarningSink warn = default_warning)
      : root_(std::move(root)), opt_(opt), warn_(std::move(warn)) {
    std::ifstream is(label_file);
    if (!is) throw IoError("cannot open label file " + label_file.string());
    nlohmann::json j;
    try {
      is >> j;
    } catch (const std::exception& ex) {
      throw DataFormatError(label_file.string() + ": " + ex.what());
    }
    for (const auto& frame : j) {
      Entry e;
      try {
        e.name = frame.at("name").get<std::string>();
        if (frame.contains("labels") && !frame.at("labels").is_null()) {
          for (const auto& lab : frame.at("labels")) {
            if (lab.value("category", std::string()) != "lane" || !lab.contains("poly2d")) continue;
            for (const auto& poly : lab.at("poly2d")) {
              Polyline line;
              for (const auto& v : poly.at("vertices")) line.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
              e.lines.push_back(std::move(line));
            }
          }
        }
      } catch (const std::exception& ex) {
        warn_(label_file.string() + ": skipping malformed frame (" + ex.what() + ")");
        continue;
      }
      const auto image = root_ / "images" / e.name;
      if (!fs::exists(image)) throw IoError("missing image: " + image.string());
      entries_.push_back(std::move(e));
    }
  }

  std::size_t size() const override { return entries_.size(); }
  AnnotationStyle style() const override { return AnnotationStyle::binary_lanes; }

  Sample get(std::size_t i) const override {
    const auto& e = entries_.at(i);
    Sample s;
    double sx = 1.0, sy = 1.0;
    s.image = detail::load_resized_image(root_ / "images" / e.name, opt_.height, opt_.width, sx, sy);
    auto [centers, unpaired] = pair_boundaries(e.lines, opt_.resample_points, opt_.max_pair_gap);
    if (!unpaired.empty()) {
      warn_(e.name + ": " + std::to_string(unpaired.size()) + " unpaired boundary line(s) rasterized as-is");
      centers.insert(centers.end(), unpaired.begin(), unpaired.end());
    }
    for (auto& line : centers) {
      for (auto& [x, y] : line) {
        x *= sx;
        y *= sy;
      }
    }
    s.label = rasterize_lanes(centers, opt_.thickness, opt_.height, opt_.width, RasterMode::binary);
    return s;
  }

 private:
  struct Entry {
    std::string name;
    std::vector<Polyline> lines;
  };
  fs::path root_;
  BddOptions opt_;
  WarningSink warn_;
  std::vector<Entry> entries_;
};

}  // namespace esa
