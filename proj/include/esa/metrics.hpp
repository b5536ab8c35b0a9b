#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "esa/esa_core.hpp"
#include "esa/lanes.hpp"
#include "esa/tensor.hpp"

namespace esa {

enum class Protocol { tusimple, culane, bdd };

inline const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::tusimple: return "tusimple";
    case Protocol::culane: return "culane";
    case Protocol::bdd: return "bdd";
  }
  return "?";
}

inline Protocol protocol_from_string(const std::string& s) {
  if (s == "tusimple") return Protocol::tusimple;
  if (s == "culane") return Protocol::culane;
  if (s == "bdd") return Protocol::bdd;
  throw std::invalid_argument("unknown protocol '" + s + "' (expected tusimple, culane or bdd)");
}

struct MetricReport {
  Protocol protocol = Protocol::culane;
  std::map<std::string, double> values;
  std::uint64_t tp = 0, fp = 0, fn = 0;

  double at(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw std::out_of_range("MetricReport: no value " + key);
    return it->second;
  }

  /// One key=value pair per line.
  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "protocol=" << esa::to_string(protocol) << '\n';
    for (const auto& [k, v] : values) os << k << '=' << v << '\n';
    os << "tp=" << tp << "\nfp=" << fp << "\nfn=" << fn << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["protocol"] = esa::to_string(protocol);
    j["values"] = values;
    j["counts"] = {{"tp", tp}, {"fp", fp}, {"fn", fn}};
    return j;
  }
};

struct F1Score {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

/// Precision, recall and F1; a rate with a zero denominator is 0, and F1 is 0 unless tp > 0.
inline F1Score f1_from_counts(long long tp, long long fp, long long fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw std::invalid_argument("f1_from_counts: negative count");
  F1Score s;
  if (tp + fp > 0) s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (tp > 0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

// ---------------------------------------------------------------------------
// Decoding

struct DecodeConfig {
  double prob_threshold = 0.5;
  double exist_threshold = 0.5;
};

/// Converts lane channel c of image `b` into points: at each anchor row whose
/// maximum exceeds the threshold, x is the probability-weighted centroid of
/// the above-threshold pixels. Lanes with fewer than two points are dropped.
template <typename T>
std::vector<LanePoints> lanes_from_probability(const ProbabilityMap<T>& p, std::size_t b,
                                               std::optional<std::span<const double>> existence,
                                               std::span<const int> row_anchors,
                                               const DecodeConfig& cfg = {}) {
  if (row_anchors.empty()) throw std::invalid_argument("lanes_from_probability: no row anchors");
  if (!(cfg.prob_threshold > 0.0 && cfg.prob_threshold < 1.0) ||
      !(cfg.exist_threshold > 0.0 && cfg.exist_threshold < 1.0)) {
    throw std::invalid_argument("lanes_from_probability: thresholds must lie in (0, 1)");
  }
  const auto lanes = p.lanes(), h = p.height(), w = p.width();
  if (existence && existence->size() != lanes) {
    throw std::invalid_argument("lanes_from_probability: existence length != lane count");
  }
  std::vector<int> anchors(row_anchors.begin(), row_anchors.end());
  std::sort(anchors.begin(), anchors.end());
  anchors.erase(std::unique(anchors.begin(), anchors.end()), anchors.end());
  for (int y : anchors) {
    if (y < 0 || static_cast<std::size_t>(y) >= h) {
      throw std::invalid_argument("lanes_from_probability: anchor row " + std::to_string(y) + " outside image");
    }
  }
  std::vector<LanePoints> out;
  for (std::size_t c = 0; c < lanes; ++c) {
    if (existence && (*existence)[c] < cfg.exist_threshold) continue;
    LanePoints lane;
    lane.class_id = static_cast<int>(c + 1);
    const T* plane = p.values.slice(b, c + 1);
    for (int y : anchors) {
      const T* row = plane + static_cast<std::size_t>(y) * w;
      double mass = 0.0, moment = 0.0;
      for (std::size_t x = 0; x < w; ++x) {
        const double v = static_cast<double>(row[x]);
        if (v > cfg.prob_threshold) {
          mass += v;
          moment += v * static_cast<double>(x);
        }
      }
      if (mass > 0.0) lane.points.push_back({moment / mass, y});
    }
    if (lane.points.size() >= 2) out.push_back(std::move(lane));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assignment

namespace detail {

/// Lexicographic (primary, secondary) score of a one-to-one matching.
template <typename Primary, typename Secondary>
struct MatchScore {
  Primary primary{};
  Secondary secondary{};
  bool operator<(const MatchScore& o) const {
    return primary != o.primary ? primary < o.primary : secondary < o.secondary;
  }
};

/// Best one-to-one partial matching between rows (preds) and columns (gts)
/// by dynamic programming over subsets of columns. `gain(i, j)` returns the
/// score of pairing i with j, or nullopt if the pair is not allowed.
/// Returns the chosen column for each row (-1 = unmatched).
template <typename Score, typename Gain>
std::vector<int> best_matching(std::size_t rows, std::size_t cols, Gain&& gain) {
  if (cols > 20) throw std::invalid_argument("best_matching: too many lanes for exact matching");
  const std::size_t states = std::size_t{1} << cols;
  std::vector<std::vector<Score>> best(rows + 1, std::vector<Score>(states));
  std::vector<std::vector<bool>> reachable(rows + 1, std::vector<bool>(states, false));
  std::vector<std::vector<int>> choice(rows + 1, std::vector<int>(states, -1));
  reachable[0][0] = true;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t m = 0; m < states; ++m) {
      if (!reachable[i][m]) continue;
      const auto relax = [&](std::size_t nm, const Score& s, int c) {
        if (!reachable[i + 1][nm] || best[i + 1][nm] < s) {
          reachable[i + 1][nm] = true;
          best[i + 1][nm] = s;
          choice[i + 1][nm] = c;
        }
      };
      relax(m, best[i][m], -1);
      for (std::size_t j = 0; j < cols; ++j) {
        if (m & (std::size_t{1} << j)) continue;
        if (auto g = gain(i, j)) {
          Score s = best[i][m];
          s.primary += g->primary;
          s.secondary += g->secondary;
          relax(m | (std::size_t{1} << j), s, static_cast<int>(j));
        }
      }
    }
  }
  std::size_t m = 0;
  for (std::size_t k = 1; k < states; ++k) {
    if (reachable[rows][k] && best[rows][m] < best[rows][k]) m = k;
  }
  std::vector<int> assign(rows, -1);
  for (std::size_t i = rows; i-- > 0;) {
    const int c = choice[i + 1][m];
    assign[i] = c;
    if (c >= 0) m &= ~(std::size_t{1} << c);
  }
  return assign;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// TuSimple

struct TusimpleConfig {
  double pixel_threshold = 20.0;  // |x_pred - x_gt| below this counts a point as correct
  double lane_threshold = 0.85;   // per-lane point accuracy for a matched lane
};

/// Per-image TuSimple tallies.
struct TusimpleCounts {
  std::uint64_t correct_points = 0, gt_points = 0;
  std::uint64_t matched = 0, pred_lanes = 0, gt_lanes = 0;
};

/// Correct points of `pred` against `gt` at gt rows.
inline std::uint64_t tusimple_correct_points(const LanePoints& pred, const LanePoints& gt, double threshold) {
  std::uint64_t n = 0;
  for (const auto& g : gt.points) {
    const double x = pred.x_at(g.y);
    if (!std::isnan(x) && std::abs(x - g.x) < threshold) ++n;
  }
  return n;
}

inline TusimpleCounts tusimple_image_counts(const std::vector<LanePoints>& preds,
                                            const std::vector<LanePoints>& gts,
                                            const TusimpleConfig& cfg = {}) {
  std::set<int> anchors;
  for (const auto& g : gts) {
    for (const auto& p : g.points) anchors.insert(p.y);
  }
  if (!gts.empty()) {
    for (const auto& p : preds) {
      for (const auto& pt : p.points) {
        if (!anchors.count(pt.y)) {
          throw std::invalid_argument("tusimple_score: predicted row " + std::to_string(pt.y) +
                                      " is not a ground-truth row anchor");
        }
      }
    }
  }
  TusimpleCounts c;
  c.pred_lanes = preds.size();
  c.gt_lanes = gts.size();
  for (const auto& g : gts) c.gt_points += g.points.size();

  std::vector<std::vector<std::uint64_t>> correct(preds.size(), std::vector<std::uint64_t>(gts.size()));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      correct[i][j] = tusimple_correct_points(preds[i], gts[j], cfg.pixel_threshold);
    }
  }
  const auto good = [&](std::size_t i, std::size_t j) {
    return !gts[j].points.empty() &&
           static_cast<double>(correct[i][j]) / static_cast<double>(gts[j].points.size()) >= cfg.lane_threshold;
  };
  using Score = detail::MatchScore<std::uint64_t, std::uint64_t>;
  const auto assign = detail::best_matching<Score>(preds.size(), gts.size(), [&](std::size_t i, std::size_t j) {
    return std::optional<Score>(Score{correct[i][j], good(i, j) ? 1u : 0u});
  });
  for (std::size_t i = 0; i < assign.size(); ++i) {
    if (assign[i] < 0) continue;
    const auto j = static_cast<std::size_t>(assign[i]);
    c.correct_points += correct[i][j];
    if (good(i, j)) ++c.matched;
  }
  return c;
}

/// Accuracy = correct points / gt points; a predicted lane without a matched
/// gt lane at >= lane_threshold point accuracy is a false positive, and a gt
/// lane without such a match is a false negative. FP and FN are rates over
/// predicted and gt lane counts.
inline MetricReport tusimple_score(const std::vector<std::vector<LanePoints>>& preds,
                                   const std::vector<std::vector<LanePoints>>& gts,
                                   const TusimpleConfig& cfg = {}) {
  if (preds.size() != gts.size()) throw std::invalid_argument("tusimple_score: image count mismatch");
  TusimpleCounts total;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto c = tusimple_image_counts(preds[k], gts[k], cfg);
    total.correct_points += c.correct_points;
    total.gt_points += c.gt_points;
    total.matched += c.matched;
    total.pred_lanes += c.pred_lanes;
    total.gt_lanes += c.gt_lanes;
  }
  MetricReport r;
  r.protocol = Protocol::tusimple;
  r.tp = total.matched;
  r.fp = total.pred_lanes - total.matched;
  r.fn = total.gt_lanes - total.matched;
  const auto ratio = [](std::uint64_t a, std::uint64_t b) {
    return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
  };
  r.values["accuracy"] = ratio(total.correct_points, total.gt_points);
  r.values["fp"] = ratio(r.fp, total.pred_lanes);
  r.values["fn"] = ratio(r.fn, total.gt_lanes);
  return r;
}

// ---------------------------------------------------------------------------
// Masks, CULane and BDD

using Mask = Tensor<std::uint8_t>;

/// |a and b| / |a or b|; 1.0 when both masks are empty.
inline double lane_iou(const Mask& a, const Mask& b) {
  a.require_same_shape(b, "lane_iou");
  std::uint64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

inline Mask lane_mask(const Polyline& lane, double thickness, std::size_t height, std::size_t width) {
  const Tensor<int> l = rasterize_lanes({lane}, thickness, height, width, RasterMode::binary);
  Mask m({height, width});
  for (std::size_t i = 0; i < l.size(); ++i) m[i] = l[i] != 0;
  return m;
}

struct CulaneConfig {
  double thickness = 30.0;
  double iou_threshold = 0.5;
};

struct CulaneImage {
  std::size_t height = 0, width = 0;
  std::vector<Polyline> preds, gts;
};

/// Pairwise IoUs of 30 px (by default) rasterized lanes, [pred][gt].
inline std::vector<std::vector<double>> culane_iou_matrix(const CulaneImage& img, const CulaneConfig& cfg = {}) {
  std::vector<Mask> pm, gm;
  for (const auto& l : img.preds) pm.push_back(lane_mask(l, cfg.thickness, img.height, img.width));
  for (const auto& l : img.gts) gm.push_back(lane_mask(l, cfg.thickness, img.height, img.width));
  std::vector<std::vector<double>> iou(pm.size(), std::vector<double>(gm.size()));
  for (std::size_t i = 0; i < pm.size(); ++i) {
    for (std::size_t j = 0; j < gm.size(); ++j) iou[i][j] = lane_iou(pm[i], gm[j]);
  }
  return iou;
}

/// True positives of the one-to-one matching that maximises the number of
/// pairs with IoU above threshold (ties: larger summed IoU).
inline std::uint64_t culane_true_positives(const std::vector<std::vector<double>>& iou, std::size_t gts,
                                           double threshold = 0.5) {
  using Score = detail::MatchScore<std::uint64_t, double>;
  const auto assign = detail::best_matching<Score>(iou.size(), gts, [&](std::size_t i, std::size_t j) {
    return iou[i][j] > threshold ? std::optional<Score>(Score{1, iou[i][j]}) : std::nullopt;
  });
  return static_cast<std::uint64_t>(std::count_if(assign.begin(), assign.end(), [](int a) { return a >= 0; }));
}

inline MetricReport culane_f1(const std::vector<CulaneImage>& images, const CulaneConfig& cfg = {}) {
  MetricReport r;
  r.protocol = Protocol::culane;
  for (const auto& img : images) {
    const auto iou = culane_iou_matrix(img, cfg);
    const auto tp = culane_true_positives(iou, img.gts.size(), cfg.iou_threshold);
    r.tp += tp;
    r.fp += img.preds.size() - tp;
    r.fn += img.gts.size() - tp;
  }
  const auto s = f1_from_counts(static_cast<long long>(r.tp), static_cast<long long>(r.fp),
                                static_cast<long long>(r.fn));
  r.values["precision"] = s.precision;
  r.values["recall"] = s.recall;
  r.values["f1"] = s.f1;
  return r;
}

/// Pixel tallies for the binary-lane protocol; summed across images.
struct BddCounts {
  std::uint64_t agree = 0, pixels = 0, intersection = 0, union_ = 0;

  void add(const Mask& pred, const Mask& gt) {
    pred.require_same_shape(gt, "bdd_score");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] != 0, g = gt[i] != 0;
      agree += p == g;
      intersection += p && g;
      union_ += p || g;
    }
    pixels += pred.size();
  }

  MetricReport report() const {
    MetricReport r;
    r.protocol = Protocol::bdd;
    r.values["pixel_accuracy"] = pixels ? static_cast<double>(agree) / static_cast<double>(pixels) : 0.0;
    r.values["iou"] = union_ ? static_cast<double>(intersection) / static_cast<double>(union_) : 1.0;
    return r;
  }
};

inline MetricReport bdd_score(const Mask& pred, const Mask& gt) {
  BddCounts c;
  c.add(pred, gt);
  return c.report();
}

// ---------------------------------------------------------------------------
// CULane-style lane files: one lane per line as "x y x y ...".

inline void write_lane_file(const std::string& path, const std::vector<LanePoints>& lanes) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write lane file " + path);
  os << std::setprecision(10);
  for (const auto& lane : lanes) {
    for (std::size_t i = 0; i < lane.points.size(); ++i) {
      os << (i ? " " : "") << lane.points[i].x << ' ' << lane.points[i].y;
    }
    os << '\n';
  }
}

/// Reads a lane file; points are returned sorted by increasing row.
inline std::vector<LanePoints> read_lane_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open lane file " + path);
  std::vector<LanePoints> lanes;
  for (std::string line; std::getline(is, line);) {
    std::istringstream ls(line);
    LanePoints lane;
    double x = 0.0, y = 0.0;
    while (ls >> x >> y) lane.points.push_back({x, static_cast<int>(std::lround(y))});
    if (lane.points.empty()) continue;
    std::sort(lane.points.begin(), lane.points.end(), [](const auto& a, const auto& b) { return a.y < b.y; });
    lanes.push_back(std::move(lane));
  }
  return lanes;
}

}  // namespace esa
