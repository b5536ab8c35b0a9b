#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "esa/esa_core.hpp"
#include "esa/tensor.hpp"

namespace esa {

/// Balance coefficients of the total objective and the ESA regularizer.
struct LossWeights {
  double alpha = 1.0;    // segmentation
  double beta = 0.1;     // existence
  double gamma = 50.0;   // ESA
  double lambda = 1.0;   // ESA regularizer
  double upsilon = 0.8;  // target ratio of weighted to ground-truth lane mass

  void validate() const {
    for (double v : {alpha, beta, gamma, lambda, upsilon}) {
      if (!std::isfinite(v) || v < 0.0) {
        throw std::invalid_argument("LossWeights: weights must be finite and non-negative");
      }
    }
    if (upsilon > 1.0) throw std::invalid_argument("LossWeights: upsilon must lie in [0, 1]");
  }
};

/// Per-pixel class ids, [N, H, W]; 0 is background, 1..C are lanes left to right.
struct SegmentationLabel {
  Tensor<int> values;

  std::size_t batch() const { return values.dim(0); }
  std::size_t height() const { return values.dim(1); }
  std::size_t width() const { return values.dim(2); }
};

inline void validate_label(const SegmentationLabel& label, std::size_t lanes) {
  for (int v : label.values) {
    if (v < 0 || static_cast<std::size_t>(v) > lanes) {
      throw std::invalid_argument("label value " + std::to_string(v) + " outside {0.." +
                                  std::to_string(lanes) + "}");
    }
  }
}

template <typename T>
ProbabilityMap<T> softmax_over_channels(const Tensor<T>& logits) {
  if (logits.rank() != 4 || logits.dim(1) < 2) {
    throw std::invalid_argument("softmax_over_channels: logits must be [N, C+1, H, W], got " +
                                shape_string(logits.shape()));
  }
  if (!all_finite(logits)) {
    throw std::invalid_argument("softmax_over_channels: non-finite logits");
  }
  const auto n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  Tensor<T> p(logits.shape());
  std::vector<T> column(k);
  for (std::size_t b = 0; b < n; ++b) {
    const T* s = logits.slice(b);
    T* out = p.slice(b);
    for (std::size_t i = 0; i < hw; ++i) {
      T mx = s[i];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, s[c * hw + i]);
      T sum{0};
      for (std::size_t c = 0; c < k; ++c) {
        column[c] = std::exp(s[c * hw + i] - mx);
        sum += column[c];
      }
      for (std::size_t c = 0; c < k; ++c) out[c * hw + i] = column[c] / sum;
    }
  }
  return {std::move(p)};
}

/// dS = P * (dP - sum_k P_k dP_k), per pixel.
template <typename T>
Tensor<T> softmax_backward(const ProbabilityMap<T>& p, const Tensor<T>& dp) {
  const auto& pv = p.values;
  const auto n = pv.dim(0), k = pv.dim(1), hw = pv.dim(2) * pv.dim(3);
  Tensor<T> ds(pv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const T* pp = pv.slice(b);
    const T* g = dp.slice(b);
    T* out = ds.slice(b);
    for (std::size_t i = 0; i < hw; ++i) {
      T dot{0};
      for (std::size_t c = 0; c < k; ++c) dot += pp[c * hw + i] * g[c * hw + i];
      for (std::size_t c = 0; c < k; ++c) out[c * hw + i] = pp[c * hw + i] * (g[c * hw + i] - dot);
    }
  }
  return ds;
}

template <typename T>
T spatial_mean(std::span<const T> values) {
  if (values.empty()) throw std::invalid_argument("spatial_mean: empty map");
  T s{0};
  for (T v : values) s += v;
  return s / static_cast<T>(values.size());
}

template <typename T>
T spatial_mean(const Tensor<T>& map) {
  return spatial_mean(map.values());
}

/// Binary [N, C, H, W] map; channel c-1 is set where the label equals lane c.
template <typename T>
Tensor<T> onehot_lane_channels(const SegmentationLabel& label, std::size_t lanes) {
  validate_label(label, lanes);
  const auto n = label.batch(), hw = label.height() * label.width();
  Tensor<T> g({n, lanes, label.height(), label.width()});
  for (std::size_t b = 0; b < n; ++b) {
    const int* l = label.values.slice(b);
    for (std::size_t i = 0; i < hw; ++i) {
      if (l[i] > 0) g.slice(b, static_cast<std::size_t>(l[i] - 1))[i] = T{1};
    }
  }
  return g;
}

/// Mean cross entropy over pixels of the log-softmax of the true class.
/// `class_weights` (length C+1, empty = all ones) gives a weighted mean
/// normalised by the summed weights of the labelled pixels.
template <typename T>
T segmentation_loss(const Tensor<T>& logits, const SegmentationLabel& gt,
                    Tensor<T>* grad = nullptr, std::span<const double> class_weights = {}) {
  if (logits.rank() != 4 || gt.values.rank() != 3 || logits.dim(0) != gt.batch() ||
      logits.dim(2) != gt.height() || logits.dim(3) != gt.width()) {
    throw std::invalid_argument("segmentation_loss: logits " + shape_string(logits.shape()) +
                                " vs label " + shape_string(gt.values.shape()));
  }
  const auto n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (!class_weights.empty() && class_weights.size() != k) {
    throw std::invalid_argument("segmentation_loss: class weight count must equal C+1");
  }
  validate_label(gt, k - 1);
  const auto weight = [&](int c) {
    return class_weights.empty() ? T{1} : static_cast<T>(class_weights[static_cast<std::size_t>(c)]);
  };
  if (grad) *grad = Tensor<T>(logits.shape());
  T total{0}, norm{0};
  std::vector<T> lse_terms(k);
  for (std::size_t b = 0; b < n; ++b) {
    const T* s = logits.slice(b);
    const int* l = gt.values.slice(b);
    for (std::size_t i = 0; i < hw; ++i) {
      T mx = s[i];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, s[c * hw + i]);
      T sum{0};
      for (std::size_t c = 0; c < k; ++c) sum += std::exp(s[c * hw + i] - mx);
      const T lse = mx + std::log(sum);
      const int y = l[i];
      const T w = weight(y);
      total += w * (lse - s[static_cast<std::size_t>(y) * hw + i]);
      norm += w;
    }
  }
  if (norm <= T{0}) return T{0};
  if (grad) {
    for (std::size_t b = 0; b < n; ++b) {
      const T* s = logits.slice(b);
      const int* l = gt.values.slice(b);
      T* g = grad->slice(b);
      for (std::size_t i = 0; i < hw; ++i) {
        T mx = s[i];
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, s[c * hw + i]);
        T sum{0};
        for (std::size_t c = 0; c < k; ++c) {
          lse_terms[c] = std::exp(s[c * hw + i] - mx);
          sum += lse_terms[c];
        }
        const int y = l[i];
        const T scale = weight(y) / norm;
        for (std::size_t c = 0; c < k; ++c) {
          const T onehot = static_cast<int>(c) == y ? T{1} : T{0};
          g[c * hw + i] = scale * (lse_terms[c] / sum - onehot);
        }
      }
    }
  }
  return total / norm;
}

inline constexpr double kProbabilityClamp = 1e-7;

template <typename T>
struct ExistenceLoss {
  T value{0};
  std::size_t clamped = 0;  // predictions that fell outside [eps, 1 - eps]
};

/// Mean binary cross entropy over all entries. `pred` and `gt` are [N, C]
/// (or any equal shapes). Predictions are clamped to [1e-7, 1 - 1e-7].
template <typename T>
ExistenceLoss<T> existence_loss(const Tensor<T>& pred, const Tensor<T>& gt,
                                Tensor<T>* grad = nullptr) {
  if (pred.shape() != gt.shape() || pred.empty()) {
    throw std::invalid_argument("existence_loss: prediction " + shape_string(pred.shape()) +
                                " vs label " + shape_string(gt.shape()));
  }
  const T eps = static_cast<T>(kProbabilityClamp);
  const T count = static_cast<T>(pred.size());
  ExistenceLoss<T> out;
  if (grad) *grad = Tensor<T>(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    T p = pred[i];
    bool clamped = false;
    if (!(p >= eps)) {
      p = eps;
      clamped = true;
    } else if (p > T{1} - eps) {
      p = T{1} - eps;
      clamped = true;
    }
    out.clamped += clamped;
    const T y = gt[i];
    out.value -= y * std::log(p) + (T{1} - y) * std::log(T{1} - p);
    if (grad && !clamped) (*grad)[i] = (-(y / p) + (T{1} - y) / (T{1} - p)) / count;
  }
  out.value /= count;
  return out;
}

template <typename T>
struct EsaLossGradients {
  Tensor<T> probability;  // same shape as P; background channel stays zero
  Tensor<T> matrix;       // same shape as M
};

/// MSE(P[lanes] * M, G * M) + lambda * |mean(P[lanes] * M) - upsilon * mean(G)|,
/// with G the C-channel one-hot ground truth and means over all N*C*H*W entries.
template <typename T>
T esa_loss(const ProbabilityMap<T>& p, const EsaMatrix<T>& m, const SegmentationLabel& gt,
           const LossWeights& w, EsaLossGradients<T>* grads = nullptr) {
  const WeightedMap<T> e = apply_esa_weight(p, m);
  const auto& mv = m.values;
  if (gt.values.rank() != 3 || gt.batch() != mv.dim(0) || gt.height() != mv.dim(2) ||
      gt.width() != mv.dim(3)) {
    throw std::invalid_argument("esa_loss: label " + shape_string(gt.values.shape()) +
                                " does not match ESA matrix " + shape_string(mv.shape()));
  }
  const auto lanes = mv.dim(1);
  const Tensor<T> g = onehot_lane_channels<T>(gt, lanes);
  const T count = static_cast<T>(mv.size());

  T sq{0}, e_sum{0}, g_sum{0};
  for (std::size_t i = 0; i < mv.size(); ++i) {
    const T d = e.values[i] - g[i] * mv[i];
    sq += d * d;
    e_sum += e.values[i];
    g_sum += g[i];
  }
  const T mse = sq / count;
  const T gap = e_sum / count - static_cast<T>(w.upsilon) * (g_sum / count);
  const T loss = mse + static_cast<T>(w.lambda) * std::abs(gap);

  if (grads) {
    const T sign = gap > T{0} ? T{1} : (gap < T{0} ? T{-1} : T{0});
    const T reg = static_cast<T>(w.lambda) * sign / count;
    grads->probability = Tensor<T>(p.values.shape());
    grads->matrix = Tensor<T>(mv.shape());
    const auto n = mv.dim(0), hw = mv.dim(2) * mv.dim(3);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t c = 0; c < lanes; ++c) {
        const T* pp = p.values.slice(b, c + 1);
        const T* mm = mv.slice(b, c);
        const T* gg = g.slice(b, c);
        T* dp = grads->probability.slice(b, c + 1);
        T* dm = grads->matrix.slice(b, c);
        for (std::size_t i = 0; i < hw; ++i) {
          const T diff = pp[i] - gg[i];
          dp[i] = T{2} * mm[i] * mm[i] * diff / count + reg * mm[i];
          dm[i] = T{2} * mm[i] * diff * diff / count + reg * pp[i];
        }
      }
    }
  }
  return loss;
}

/// Sum of the present directional ESA losses.
inline double combined_esa_loss(std::optional<double> horizontal, std::optional<double> vertical) {
  if (!horizontal && !vertical) {
    throw std::invalid_argument("combined_esa_loss: at least one ESA term is required");
  }
  return horizontal.value_or(0.0) + vertical.value_or(0.0);
}

struct LossParts {
  double seg = 0.0;
  std::optional<double> exist;
  std::optional<double> esa_h;
  std::optional<double> esa_v;
};

struct LossReport {
  double seg = 0.0;
  double exist = 0.0;
  double esa_h = 0.0;
  double esa_v = 0.0;
  double total = 0.0;
};

inline LossReport total_loss(const LossParts& parts, const LossWeights& w) {
  LossReport r;
  r.seg = parts.seg;
  r.exist = parts.exist.value_or(0.0);
  r.esa_h = parts.esa_h.value_or(0.0);
  r.esa_v = parts.esa_v.value_or(0.0);
  const double esa = (parts.esa_h || parts.esa_v) ? combined_esa_loss(parts.esa_h, parts.esa_v) : 0.0;
  r.total = w.alpha * r.seg + w.beta * r.exist + w.gamma * esa;
  return r;
}

/// Central differences (f(p + eps e_i) - f(p - eps e_i)) / (2 eps) per coordinate.
template <typename T>
std::vector<T> finite_difference_gradient(const std::function<T(std::span<const T>)>& f,
                                          std::span<const T> params, T eps = T(1e-5)) {
  if (!(eps > T{0})) throw std::invalid_argument("finite_difference_gradient: eps must be > 0");
  std::vector<T> x(params.begin(), params.end());
  std::vector<T> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = saved + eps;
    const T fp = f(x);
    x[i] = saved - eps;
    const T fm = f(x);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::invalid_argument("finite_difference_gradient: non-finite function value at coordinate " +
                                  std::to_string(i));
    }
    grad[i] = (fp - fm) / (T{2} * eps);
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps vanishing gradients from
/// turning rounding noise into large relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace esa
