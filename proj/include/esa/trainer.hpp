#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "esa/data.hpp"
#include "esa/losses.hpp"
#include "esa/metrics.hpp"
#include "esa/model.hpp"

namespace esa {

enum class AnnotationStyle { lane_instances, binary_lanes };

/// Random-access view of a dataset; loaders may read samples lazily.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual Sample get(std::size_t i) const = 0;
  virtual AnnotationStyle style() const { return AnnotationStyle::lane_instances; }
};

class InMemorySource final : public SampleSource {
 public:
  explicit InMemorySource(std::vector<Sample> samples,
                          AnnotationStyle style = AnnotationStyle::lane_instances)
      : samples_(std::move(samples)), style_(style) {}
  std::size_t size() const override { return samples_.size(); }
  Sample get(std::size_t i) const override { return samples_.at(i); }
  AnnotationStyle style() const override { return style_; }
  const std::vector<Sample>& samples() const { return samples_; }

 private:
  std::vector<Sample> samples_;
  AnnotationStyle style_;
};

/// Stacked images, labels and existence targets for a list of samples.
template <typename T>
struct Batch {
  Tensor<T> images;           // [N, 3, H, W]
  SegmentationLabel labels;   // [N, H, W]
  Tensor<T> existence;        // [N, C], empty when samples carry none
};

template <typename T>
Batch<T> make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
  const auto& first = samples.front();
  const auto h = first.label.dim(0), w = first.label.dim(1);
  const auto n = samples.size();
  const auto lanes = first.existence.size();
  Batch<T> b{Tensor<T>({n, 3, h, w}), {Tensor<int>({n, h, w})}, lanes ? Tensor<T>({n, lanes}) : Tensor<T>()};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    if (s.image.shape() != Shape{3, h, w} || s.label.shape() != Shape{h, w} || s.existence.size() != lanes) {
      throw std::invalid_argument("make_batch: sample " + std::to_string(i) + " has inconsistent shapes");
    }
    std::transform(s.image.begin(), s.image.end(), b.images.slice(i), [](double v) { return static_cast<T>(v); });
    std::copy(s.label.begin(), s.label.end(), b.labels.values.slice(i));
    for (std::size_t c = 0; c < lanes; ++c) b.existence(i, c) = static_cast<T>(s.existence[c]);
  }
  return b;
}

struct LossOptions {
  LossWeights weights{};
  bool detach_esa_probability = false;
  std::vector<double> class_weights;  // empty = unweighted cross entropy
};

template <typename T>
struct LossAndGradients {
  LossReport report;
  ParameterSet<T> gradients;
};

/// Total objective of one batch; gradients are filled when `with_gradients`.
template <typename T>
LossAndGradients<T> compute_loss(const Model<T>& model, const Batch<T>& batch, const LossOptions& opt,
                                 bool with_gradients = true) {
  const auto& w = opt.weights;
  w.validate();
  const auto fwd = model.train_forward(batch.images);
  const auto probs = softmax_over_channels(fwd.logits);

  OutputGradients<T> og;
  LossParts parts;
  Tensor<T> dseg;
  parts.seg = static_cast<double>(
      segmentation_loss(fwd.logits, batch.labels, with_gradients ? &dseg : nullptr, opt.class_weights));
  if (fwd.existence && !batch.existence.empty()) {
    Tensor<T> dex;
    parts.exist = static_cast<double>(existence_loss(*fwd.existence, batch.existence, with_gradients ? &dex : nullptr).value);
    if (with_gradients) {
      dex *= static_cast<T>(w.beta);
      og.existence = std::move(dex);
    }
  }
  Tensor<T> dprob(probs.values.shape());
  const auto esa_term = [&](const std::optional<EsaMatrix<T>>& m, std::optional<double>& slot,
                            std::optional<Tensor<T>>& dm) {
    if (!m) return;
    EsaLossGradients<T> g;
    slot = static_cast<double>(esa_loss(probs, *m, batch.labels, w, with_gradients ? &g : nullptr));
    if (with_gradients) {
      g.matrix *= static_cast<T>(w.gamma);
      dm = std::move(g.matrix);
      if (!opt.detach_esa_probability) {
        g.probability *= static_cast<T>(w.gamma);
        dprob += g.probability;
      }
    }
  };
  esa_term(fwd.esa_h, parts.esa_h, og.esa_h);
  esa_term(fwd.esa_v, parts.esa_v, og.esa_v);

  LossAndGradients<T> out{total_loss(parts, w), {}};
  if (with_gradients) {
    dseg *= static_cast<T>(w.alpha);
    og.logits = softmax_backward(probs, dprob);
    og.logits += dseg;
    out.gradients = model.backward(fwd, og);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

enum class LrSchedule { constant, polynomial };

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 12;
  std::size_t epochs = 1;
  /// Overrides epochs when non-zero: train for exactly this many SGD steps.
  std::size_t max_steps = 0;
  LossOptions loss{};
  std::uint64_t seed = 0;
  LrSchedule lr_schedule = LrSchedule::constant;
  double poly_power = 0.9;
  /// Steps trained with gamma = 0 before the ESA loss is switched on.
  std::size_t esa_warmup_steps = 0;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig.lr: must be > 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig.batch_size: must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig.momentum: must lie in [0, 1)");
    loss.weights.validate();
  }
};

struct StepRecord {
  std::size_t step = 0, epoch = 0;
  double lr = 0.0;
  LossReport loss;

  std::string to_line() const {
    std::ostringstream os;
    os << std::setprecision(17) << "step=" << step << " epoch=" << epoch << " lr=" << lr << " seg=" << loss.seg
       << " exist=" << loss.exist << " esa_h=" << loss.esa_h << " esa_v=" << loss.esa_v << " total=" << loss.total;
    return os.str();
  }
};

struct TrainResult {
  std::vector<StepRecord> log;
  std::size_t best_epoch = 0;
  double best_epoch_loss = 0.0;
  std::uint64_t steps = 0;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOutputs {
  /// When set: writes train_log.txt, checkpoint_final.bin, checkpoint_best.bin,
  /// and a dump file if a non-finite loss aborts training.
  std::optional<std::filesystem::path> directory;
  /// Called after every step.
  std::function<void(const StepRecord&)> on_step;
};

/// Per-epoch permutation of [0, n) determined by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(mix_seed(seed ^ 0x5eed5eedULL, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  return idx;
}

template <typename T>
TrainResult train(Model<T>& model, const SampleSource& data, const TrainConfig& cfg,
                  const TrainOutputs& outputs = {}) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  const auto steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.max_steps ? cfg.max_steps : steps_per_epoch * cfg.epochs;
  const std::size_t epochs = (total_steps + steps_per_epoch - 1) / steps_per_epoch;

  std::ofstream log_file;
  if (outputs.directory) {
    std::filesystem::create_directories(*outputs.directory);
    log_file.open(*outputs.directory / "train_log.txt");
    if (!log_file) throw std::runtime_error("cannot write " + (*outputs.directory / "train_log.txt").string());
  }
  const auto inference_params = model.parameter_count(Graph::inference);

  ParameterSet<T> velocity = model.parameters().zeros_like();
  TrainResult result;
  std::optional<Model<T>> best;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs && step < total_steps; ++epoch) {
    const auto order = epoch_order(data.size(), cfg.seed, epoch);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size() && step < total_steps; start += cfg.batch_size) {
      std::vector<Sample> samples;
      std::vector<std::size_t> indices;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        indices.push_back(order[k]);
        samples.push_back(data.get(order[k]));
      }
      const auto batch = make_batch<T>(samples);
      LossOptions loss = cfg.loss;
      if (step < cfg.esa_warmup_steps) loss.weights.gamma = 0.0;
      LossAndGradients<T> lg;
      try {
        lg = compute_loss(model, batch, loss);
      } catch (const std::invalid_argument&) {
        // Non-finite logits are rejected by the softmax; report them as a non-finite loss.
        if (!all_finite(batch.images) || !std::all_of(model.parameters().names().begin(),
                                                       model.parameters().names().end(),
                                                       [&](const auto& n) { return all_finite(model.parameters()[n]); })) {
          lg.report.total = std::numeric_limits<double>::quiet_NaN();
        } else {
          throw;
        }
      }

      if (!std::isfinite(lg.report.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step << " (epoch " << epoch << "): "
            << StepRecord{step, epoch, 0.0, lg.report}.to_line() << "; batch samples:";
        for (auto i : indices) msg << ' ' << i;
        if (outputs.directory) {
          std::ofstream dump(*outputs.directory / "nonfinite_dump.txt");
          dump << msg.str() << '\n';
          for (std::size_t i = 0; i < model.parameters().count(); ++i) {
            const auto& t = model.parameters().at(i);
            dump << model.parameters().names()[i] << " finite=" << all_finite(t) << '\n';
          }
        }
        throw NumericalError(msg.str());
      }

      const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
      const double lr = cfg.lr_schedule == LrSchedule::polynomial ? cfg.lr * std::pow(1.0 - progress, cfg.poly_power)
                                                                  : cfg.lr;
      auto& params = model.parameters();
      for (std::size_t p = 0; p < params.count(); ++p) {
        auto& theta = params.at(p);
        auto& v = velocity.at(p);
        const auto& g = lg.gradients.at(p);
        for (std::size_t i = 0; i < theta.size(); ++i) {
          const T grad = g[i] + static_cast<T>(cfg.weight_decay) * theta[i];
          v[i] = static_cast<T>(cfg.momentum) * v[i] + grad;
          theta[i] -= static_cast<T>(lr) * v[i];
        }
      }

      StepRecord rec{step, epoch, lr, lg.report};
      if (log_file) log_file << rec.to_line() << '\n';
      if (outputs.on_step) outputs.on_step(rec);
      result.log.push_back(rec);
      epoch_loss += lg.report.total;
      ++epoch_steps;
      ++step;
    }
    epoch_loss /= static_cast<double>(std::max<std::size_t>(epoch_steps, 1));
    if (!best || epoch_loss < result.best_epoch_loss) {
      result.best_epoch = epoch;
      result.best_epoch_loss = epoch_loss;
      if (outputs.directory) best = model;
    }
  }
  result.steps = step;

  if (model.parameter_count(Graph::inference) != inference_params) {
    throw std::logic_error("train: inference-graph parameter count changed during training");
  }
  if (outputs.directory) {
    save_checkpoint((*outputs.directory / "checkpoint_final.bin").string(), model, {step, {}});
    if (best) {
      save_checkpoint((*outputs.directory / "checkpoint_best.bin").string(), *best,
                      {step, {{"best_epoch", std::to_string(result.best_epoch)}}});
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalConfig {
  DecodeConfig decode{};
  TusimpleConfig tusimple{};
  CulaneConfig culane{};
  /// Spacing of row anchors used to turn probability maps into lane points.
  std::size_t anchor_step = 2;
  std::size_t batch_size = 16;
};

inline std::vector<int> row_anchors(std::size_t height, std::size_t step) {
  std::vector<int> rows;
  for (std::size_t y = step / 2; y < height; y += std::max<std::size_t>(step, 1)) rows.push_back(static_cast<int>(y));
  return rows;
}

/// Keeps only the points on anchor rows; lanes left with < 2 points are dropped.
inline std::vector<LanePoints> restrict_to_anchors(const std::vector<LanePoints>& lanes, std::span<const int> anchors) {
  std::vector<LanePoints> out;
  for (const auto& lane : lanes) {
    LanePoints r;
    r.class_id = lane.class_id;
    for (int y : anchors) {
      const double x = lane.x_at(y);
      if (!std::isnan(x)) r.points.push_back({x, y});
    }
    if (r.points.size() >= 2) out.push_back(std::move(r));
  }
  return out;
}

/// One-hot probability map of a label ([1, C+1, H, W]).
template <typename T>
ProbabilityMap<T> label_probability(const Tensor<int>& label, std::size_t lanes) {
  const auto h = label.dim(0), w = label.dim(1);
  Tensor<T> p({1, lanes + 1, h, w});
  for (std::size_t i = 0; i < h * w; ++i) p.slice(0, static_cast<std::size_t>(label[i]))[i] = T{1};
  return {std::move(p)};
}

/// Runs the inference graph over the dataset and scores it with the given
/// protocol. Samples that carry an occluder region additionally contribute
/// to `pixel_iou` and `occluded_iou` (lane-vs-background IoU over the whole
/// image and restricted to occluder pixels).
template <typename T>
MetricReport evaluate(const Model<T>& model, const SampleSource& data, Protocol protocol, const EvalConfig& cfg = {}) {
  const bool binary = data.style() == AnnotationStyle::binary_lanes;
  if ((protocol == Protocol::bdd) != binary) {
    throw std::invalid_argument(std::string("evaluate: protocol '") + to_string(protocol) +
                                "' does not match a dataset with " +
                                (binary ? "binary lane annotations (use 'bdd')"
                                        : "per-lane annotations (use 'tusimple' or 'culane')"));
  }
  const auto lanes = model.config().lanes;
  const auto h = model.config().height, w = model.config().width;
  const auto anchors = row_anchors(h, cfg.anchor_step);

  std::vector<std::vector<LanePoints>> ts_pred, ts_gt;
  std::vector<CulaneImage> cu;
  BddCounts bdd, whole, occluded;
  bool any_region = false;

  for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
    std::vector<Sample> samples;
    for (std::size_t k = start; k < std::min(data.size(), start + cfg.batch_size); ++k) samples.push_back(data.get(k));
    const auto batch = make_batch<T>(samples);
    const auto out = model.infer_forward(batch.images);
    for (std::size_t b = 0; b < samples.size(); ++b) {
      const auto& s = samples[b];
      Mask pred({h, w}), gt({h, w});
      const T* pb = out.probabilities.values.slice(b);
      for (std::size_t i = 0; i < h * w; ++i) {
        T best = pb[i];
        std::size_t arg = 0;
        for (std::size_t c = 1; c <= lanes; ++c) {
          if (pb[c * h * w + i] > best) {
            best = pb[c * h * w + i];
            arg = c;
          }
        }
        pred[i] = arg != 0;
        gt[i] = s.label[i] != 0;
      }
      if (!s.occluder_region.empty()) {
        any_region = true;
        whole.add(pred, gt);
        Mask pr = pred, gr = gt;
        for (std::size_t i = 0; i < pr.size(); ++i) {
          if (!s.occluder_region[i]) pr[i] = gr[i] = 0;
        }
        occluded.add(pr, gr);
      }
      if (protocol == Protocol::bdd) {
        bdd.add(pred, gt);
        continue;
      }
      std::optional<std::span<const double>> exist;
      std::vector<double> ev;
      if (out.existence) {
        for (std::size_t c = 0; c < lanes; ++c) ev.push_back(static_cast<double>((*out.existence)(b, c)));
        exist = std::span<const double>(ev);
      }
      auto pl = lanes_from_probability(out.probabilities, b, exist, anchors, cfg.decode);
      std::vector<LanePoints> gl;
      if (!s.lanes.empty()) {
        gl = restrict_to_anchors(s.lanes, anchors);
      } else {
        const auto lp = label_probability<double>(s.label, lanes);
        gl = lanes_from_probability(lp, 0, std::nullopt, anchors, cfg.decode);
      }
      if (protocol == Protocol::tusimple) {
        // Predictions are sampled only at rows the ground truth annotates.
        if (!gl.empty()) {
          std::set<int> rows;
          for (const auto& l : gl) {
            for (const auto& p : l.points) rows.insert(p.y);
          }
          for (auto& l : pl) std::erase_if(l.points, [&](const LanePoint& p) { return !rows.count(p.y); });
          std::erase_if(pl, [](const LanePoints& l) { return l.points.empty(); });
        }
        ts_pred.push_back(std::move(pl));
        ts_gt.push_back(std::move(gl));
      } else {
        CulaneImage img{h, w, {}, {}};
        for (const auto& l : pl) img.preds.push_back(to_polyline(l));
        for (const auto& l : gl) img.gts.push_back(to_polyline(l));
        cu.push_back(std::move(img));
      }
    }
  }

  MetricReport r;
  switch (protocol) {
    case Protocol::tusimple: r = tusimple_score(ts_pred, ts_gt, cfg.tusimple); break;
    case Protocol::culane: r = culane_f1(cu, cfg.culane); break;
    case Protocol::bdd: r = bdd.report(); break;
  }
  if (any_region) {
    r.values["pixel_iou"] = whole.report().at("iou");
    r.values["occluded_iou"] = occluded.report().at("iou");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Upsilon ablation

struct AblationResult {
  std::vector<double> upsilon_values;
  std::vector<MetricReport> scores;

  /// Tab-separated table, one row per upsilon value.
  std::string table() const {
    std::set<std::string> keys;
    for (const auto& s : scores) {
      for (const auto& [k, v] : s.values) keys.insert(k);
    }
    std::ostringstream os;
    os << std::setprecision(10) << "upsilon";
    for (const auto& k : keys) os << '\t' << k;
    os << '\n';
    for (std::size_t i = 0; i < scores.size(); ++i) {
      os << upsilon_values[i];
      for (const auto& k : keys) {
        auto it = scores[i].values.find(k);
        os << '\t' << (it == scores[i].values.end() ? std::nan("") : it->second);
      }
      os << '\n';
    }
    return os.str();
  }
};

/// Trains one model per upsilon from identical seeds and evaluates each on `validation`.
template <typename T>
AblationResult ablate_upsilon(const std::function<Model<T>()>& factory, const SampleSource& training,
                              const SampleSource& validation, const std::vector<double>& values,
                              const TrainConfig& cfg, Protocol protocol, const EvalConfig& eval_cfg = {},
                              const std::function<void(double, const TrainResult&, const MetricReport&)>& on_run = {}) {
  if (values.empty()) throw std::invalid_argument("ablate_upsilon: no upsilon values");
  for (double u : values) {
    if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("ablate_upsilon: upsilon values must lie in [0, 1]");
  }
  AblationResult r;
  for (double u : values) {
    Model<T> model = factory();
    TrainConfig c = cfg;
    c.loss.weights.upsilon = u;
    const auto tr = train(model, training, c);
    auto report = evaluate(model, validation, protocol, eval_cfg);
    if (on_run) on_run(u, tr, report);
    r.upsilon_values.push_back(u);
    r.scores.push_back(std::move(report));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradientCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool passed() const { return max_relative_error < tolerance; }
};

struct GradientCheckReport {
  std::vector<GradientCheckEntry> entries;
  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed(); });
  }
  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(4);
    for (const auto& e : entries) {
      os << (e.passed() ? "PASS " : "FAIL ") << e.name << " max_rel_err=" << e.max_relative_error
         << " tol=" << e.tolerance << " coords=" << e.coordinates << '\n';
    }
    return os.str();
  }
};

struct GradientCheckOptions {
  std::size_t points = 3;
  double eps = 1e-5;
  double loss_tolerance = 1e-4;
  double end_to_end_tolerance = 1e-3;
  std::size_t end_to_end_parameters = 20;
  /// Denominator floor of the relative error.
  double floor = 1e-8;
  /// Test hook: modifies analytic gradients before comparison.
  std::function<void(const std::string&, std::vector<double>&)> corrupt;
};

namespace detail {

inline void compare_gradients(GradientCheckEntry& e, const std::vector<double>& analytic,
                              const std::vector<double>& numeric, double floor) {
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    e.max_relative_error = std::max(e.max_relative_error, relative_error(analytic[i], numeric[i], floor));
  }
  e.coordinates += analytic.size();
}

inline SegmentationLabel random_label(Rng& rng, std::size_t n, std::size_t h, std::size_t w, std::size_t lanes) {
  SegmentationLabel l{Tensor<int>({n, h, w})};
  for (auto& v : l.values) v = static_cast<int>(uniform_index(rng, lanes + 1));
  return l;
}

}  // namespace detail

/// Central-difference checks of every loss and of the total objective
/// through a small model, at `points` random instances each.
inline GradientCheckReport gradient_check_suite(std::uint64_t seed, const GradientCheckOptions& opt = {}) {
  using V = std::vector<double>;
  GradientCheckReport report;
  const auto finish = [&](GradientCheckEntry& e, V& analytic, const V& numeric) {
    if (opt.corrupt) opt.corrupt(e.name, analytic);
    detail::compare_gradients(e, analytic, numeric, opt.floor);
  };
  const auto fd = [&](const std::function<double(std::span<const double>)>& f, const V& x) {
    return finite_difference_gradient<double>(f, x, opt.eps);
  };

  {
    GradientCheckEntry e{"segmentation_loss", 0.0, opt.loss_tolerance, 0};
    for (std::size_t k = 0; k < opt.points; ++k) {
      Rng rng(mix_seed(seed, 100 + k));
      const Shape shape{2, 5, 8, 16};
      const auto logits = random_uniform<double>(shape, rng, -3.0, 3.0);
      const auto label = detail::random_label(rng, 2, 8, 16, 4);
      Tensor<double> g;
      segmentation_loss(logits, label, &g);
      V analytic(g.begin(), g.end());
      const auto numeric = fd([&](std::span<const double> x) {
        return segmentation_loss(Tensor<double>(shape, V(x.begin(), x.end())), label);
      }, logits.storage());
      finish(e, analytic, numeric);
    }
    report.entries.push_back(e);
  }
  {
    GradientCheckEntry e{"existence_loss", 0.0, opt.loss_tolerance, 0};
    for (std::size_t k = 0; k < opt.points; ++k) {
      Rng rng(mix_seed(seed, 200 + k));
      const Shape shape{3, 4};
      const auto pred = random_uniform<double>(shape, rng, 0.05, 0.95);
      Tensor<double> gt(shape);
      for (auto& v : gt) v = static_cast<double>(uniform_index(rng, 2));
      Tensor<double> g;
      existence_loss(pred, gt, &g);
      V analytic(g.begin(), g.end());
      const auto numeric = fd([&](std::span<const double> x) {
        return existence_loss(Tensor<double>(shape, V(x.begin(), x.end())), gt).value;
      }, pred.storage());
      finish(e, analytic, numeric);
    }
    report.entries.push_back(e);
  }
  for (Direction d : {Direction::horizontal, Direction::vertical}) {
    // Through softmax on the logits and sigmoid + expansion on the raw confidence.
    GradientCheckEntry e{std::string("esa_loss_") + to_string(d), 0.0, opt.loss_tolerance, 0};
    const std::size_t n = 1, lanes = 2, h = 8, w = 16;
    const std::size_t extent = d == Direction::horizontal ? h : w;
    const Shape lshape{n, lanes + 1, h, w}, cshape{n, lanes, extent};
    for (std::size_t k = 0; k < opt.points; ++k) {
      Rng rng(mix_seed(seed, (d == Direction::horizontal ? 300 : 400) + k));
      const auto logits = random_uniform<double>(lshape, rng, -2.0, 2.0);
      const auto raw = random_uniform<double>(cshape, rng, -2.0, 2.0);
      const auto label = detail::random_label(rng, n, h, w, lanes);
      LossWeights lw;
      lw.lambda = uniform(rng, 0.5, 2.0);
      lw.upsilon = uniform(rng, 0.1, 0.9);
      const auto eval = [&](const Tensor<double>& lg, const Tensor<double>& rc, EsaLossGradients<double>* g,
                            ProbabilityMap<double>* p_out, Tensor<double>* conf_out) {
        auto p = softmax_over_channels(lg);
        Tensor<double> conf = rc;
        for (auto& v : conf) v = nn::sigmoid(v);
        const auto m = expand(ConfidenceVector<double>{d, conf}, d == Direction::horizontal ? w : h);
        const double l = esa_loss(p, m, label, lw, g);
        if (p_out) *p_out = std::move(p);
        if (conf_out) *conf_out = std::move(conf);
        return l;
      };
      EsaLossGradients<double> g;
      ProbabilityMap<double> p;
      Tensor<double> conf;
      eval(logits, raw, &g, &p, &conf);
      const auto dlogits = softmax_backward(p, g.probability);
      auto dconf = expand_backward(d, g.matrix);
      for (std::size_t i = 0; i < dconf.size(); ++i) dconf[i] *= conf[i] * (1.0 - conf[i]);
      V analytic(dlogits.begin(), dlogits.end());
      analytic.insert(analytic.end(), dconf.begin(), dconf.end());
      V x(logits.begin(), logits.end());
      x.insert(x.end(), raw.begin(), raw.end());
      const auto split = logits.size();
      const auto numeric = fd([&](std::span<const double> v) {
        return eval(Tensor<double>(lshape, V(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(split))),
                    Tensor<double>(cshape, V(v.begin() + static_cast<std::ptrdiff_t>(split), v.end())),
                    nullptr, nullptr, nullptr);
      }, x);
      finish(e, analytic, numeric);
    }
    report.entries.push_back(e);
  }
  {
    GradientCheckEntry e{"total_loss_end_to_end", 0.0, opt.end_to_end_tolerance, 0};
    for (std::size_t k = 0; k < opt.points; ++k) {
      Rng rng(mix_seed(seed, 500 + k));
      ModelConfig mc;
      mc.height = 32;
      mc.width = 64;
      mc.lanes = 4;
      mc.stage_widths = {3, 4, 6, 8};
      mc.esa_encoder = {{4, 6, 8}, 12};
      mc.esa_horizontal = mc.esa_vertical = true;
      mc.seed = mix_seed(seed, 600 + k);
      Model<double> model(mc);
      Batch<double> batch{random_uniform<double>({2, 3, 32, 64}, rng, 0.0, 1.0),
                          detail::random_label(rng, 2, 32, 64, 4), Tensor<double>({2, 4})};
      for (auto& v : batch.existence) v = static_cast<double>(uniform_index(rng, 2));
      LossOptions lo;
      const auto lg = compute_loss(model, batch, lo);
      const auto total = model.parameters().scalar_count();
      V analytic, numeric;
      for (std::size_t q = 0; q < opt.end_to_end_parameters; ++q) {
        const auto idx = uniform_index(rng, total);
        analytic.push_back(lg.gradients.scalar(idx));
        Model<double> probe = model;
        const double saved = probe.parameters().scalar(idx);
        probe.parameters().scalar(idx) = saved + opt.eps;
        const double fp = compute_loss(probe, batch, lo, false).report.total;
        probe.parameters().scalar(idx) = saved - opt.eps;
        const double fm = compute_loss(probe, batch, lo, false).report.total;
        numeric.push_back((fp - fm) / (2.0 * opt.eps));
      }
      finish(e, analytic, numeric);
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace esa
