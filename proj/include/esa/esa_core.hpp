#pragma once

// Expanded Self Attention: per-row (horizontal) or per-column (vertical) lane
// confidence, its expansion to a full-size weighting matrix, and the weighted
// lane probability map. Everything here is only used by the training loss.

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "esa/nn.hpp"
#include "esa/parameters.hpp"
#include "esa/tensor.hpp"

namespace esa {

enum class Direction { horizontal, vertical };

inline const char* to_string(Direction d) {
  return d == Direction::horizontal ? "horizontal" : "vertical";
}

/// Confidence per lane and row (horizontal, [N, C, H]) or per lane and column
/// (vertical, [N, C, W]).
template <typename T>
struct ConfidenceVector {
  Direction direction = Direction::horizontal;
  Tensor<T> values;

  std::size_t batch() const { return values.dim(0); }
  std::size_t lanes() const { return values.dim(1); }
  std::size_t extent() const { return values.dim(2); }
};

/// Expanded confidence, [N, C, H, W]. Row-constant when horizontal,
/// column-constant when vertical.
template <typename T>
struct EsaMatrix {
  Direction direction = Direction::horizontal;
  Tensor<T> values;
};

/// Channel-softmaxed prediction, [N, C+1, H, W]; channel 0 is background and
/// channels 1..C are lanes ordered left to right.
template <typename T>
struct ProbabilityMap {
  Tensor<T> values;

  std::size_t lanes() const { return values.dim(1) - 1; }
  std::size_t height() const { return values.dim(2); }
  std::size_t width() const { return values.dim(3); }
};

/// Lane channels of a probability (or one-hot) map weighted by an ESA matrix, [N, C, H, W].
template <typename T>
struct WeightedMap {
  Tensor<T> values;
};

/// Promotes an unbatched [C, L] grid to [1, C, L].
template <typename T>
ConfidenceVector<T> single_confidence(Direction d, const Tensor<T>& grid) {
  if (grid.rank() != 2) throw std::invalid_argument("single_confidence: expected [C, L]");
  return {d, grid.reshaped({1, grid.dim(0), grid.dim(1)})};
}

/// Broadcast a raw [N, C, H] grid along width. No range restriction.
template <typename T>
Tensor<T> expand_rows(const Tensor<T>& conf, std::size_t width) {
  if (width < 1) throw std::invalid_argument("expand_horizontal: width must be >= 1");
  if (conf.rank() != 3) {
    throw std::invalid_argument("expand_horizontal: confidence must be [N, C, H], got " +
                                shape_string(conf.shape()));
  }
  const auto n = conf.dim(0), c = conf.dim(1), h = conf.dim(2);
  Tensor<T> m({n, c, h, width});
  for (std::size_t r = 0; r < n * c * h; ++r) {
    std::fill(m.data() + r * width, m.data() + (r + 1) * width, conf[r]);
  }
  return m;
}

/// Broadcast a raw [N, C, W] grid along height. No range restriction.
template <typename T>
Tensor<T> expand_columns(const Tensor<T>& conf, std::size_t height) {
  if (height < 1) throw std::invalid_argument("expand_vertical: height must be >= 1");
  if (conf.rank() != 3) {
    throw std::invalid_argument("expand_vertical: confidence must be [N, C, W], got " +
                                shape_string(conf.shape()));
  }
  const auto n = conf.dim(0), c = conf.dim(1), w = conf.dim(2);
  Tensor<T> m({n, c, height, w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = conf.data() + p * w;
    for (std::size_t y = 0; y < height; ++y) {
      std::copy(src, src + w, m.data() + (p * height + y) * w);
    }
  }
  return m;
}

template <typename T>
EsaMatrix<T> expand_horizontal(const ConfidenceVector<T>& conf, std::size_t width) {
  if (conf.direction != Direction::horizontal) {
    throw std::logic_error("expand_horizontal: confidence vector is vertical");
  }
  return {Direction::horizontal, expand_rows(conf.values, width)};
}

template <typename T>
EsaMatrix<T> expand_vertical(const ConfidenceVector<T>& conf, std::size_t height) {
  if (conf.direction != Direction::vertical) {
    throw std::logic_error("expand_vertical: confidence vector is horizontal");
  }
  return {Direction::vertical, expand_columns(conf.values, height)};
}

/// Expands along the direction's broadcast axis; `extent` is W for
/// horizontal and H for vertical.
template <typename T>
EsaMatrix<T> expand(const ConfidenceVector<T>& conf, std::size_t extent) {
  return conf.direction == Direction::horizontal ? expand_horizontal(conf, extent)
                                                 : expand_vertical(conf, extent);
}

/// Adjoint of expand: sums the matrix gradient over the broadcast axis.
template <typename T>
Tensor<T> expand_backward(Direction d, const Tensor<T>& dm) {
  const auto n = dm.dim(0), c = dm.dim(1), h = dm.dim(2), w = dm.dim(3);
  if (d == Direction::horizontal) {
    Tensor<T> dc({n, c, h});
    for (std::size_t r = 0; r < n * c * h; ++r) {
      T s{0};
      for (std::size_t x = 0; x < w; ++x) s += dm.data()[r * w + x];
      dc[r] = s;
    }
    return dc;
  }
  Tensor<T> dc({n, c, w});
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      const T* row = dm.data() + (p * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) dc[p * w + x] += row[x];
    }
  }
  return dc;
}

/// E = P[lanes] * M elementwise; the background channel is dropped.
template <typename T>
WeightedMap<T> apply_esa_weight(const ProbabilityMap<T>& p, const EsaMatrix<T>& m) {
  const auto& pv = p.values;
  const auto& mv = m.values;
  if (pv.rank() != 4 || mv.rank() != 4 || pv.dim(0) != mv.dim(0) ||
      pv.dim(1) != mv.dim(1) + 1 || pv.dim(2) != mv.dim(2) || pv.dim(3) != mv.dim(3)) {
    throw std::invalid_argument("apply_esa_weight: probability map " +
                                shape_string(pv.shape()) + " does not match ESA matrix " +
                                shape_string(mv.shape()));
  }
  const auto n = mv.dim(0), c = mv.dim(1), hw = mv.dim(2) * mv.dim(3);
  Tensor<T> e(mv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = pv.slice(b, ch + 1);
      const T* wt = mv.slice(b, ch);
      T* dst = e.slice(b, ch);
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] * wt[i];
    }
  }
  return {std::move(e)};
}

/// Feature stack for the ESA encoder together with what its backward pass needs.
template <typename T>
struct EsaInput {
  Tensor<T> stack;  // [N, sum(ch_i), h_min, w_min]
  std::array<Shape, 4> tap_shapes;
};

/// Resizes the four taps (bilinear) to the smallest tap's resolution and
/// concatenates them along channels.
template <typename T>
EsaInput<T> build_esa_input(const std::vector<Tensor<T>>& taps) {
  if (taps.size() != 4) {
    throw std::invalid_argument("build_esa_input: expected 4 feature taps, got " +
                                std::to_string(taps.size()));
  }
  std::size_t best = 0;
  std::size_t channels = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    if (taps[i].rank() != 4 || taps[i].dim(0) != taps[0].dim(0)) {
      throw std::invalid_argument("build_esa_input: tap " + std::to_string(i) +
                                  " has shape " + shape_string(taps[i].shape()));
    }
    channels += taps[i].dim(1);
    if (taps[i].dim(2) * taps[i].dim(3) < taps[best].dim(2) * taps[best].dim(3)) best = i;
  }
  const auto n = taps[0].dim(0), h = taps[best].dim(2), w = taps[best].dim(3);
  EsaInput<T> out{Tensor<T>({n, channels, h, w}), {}};
  std::size_t offset = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    out.tap_shapes[i] = taps[i].shape();
    const Tensor<T> r = nn::resize_bilinear(taps[i], h, w);
    const auto block = r.dim(1) * h * w;
    for (std::size_t b = 0; b < n; ++b) {
      std::copy(r.slice(b), r.slice(b) + block, out.stack.slice(b, offset));
    }
    offset += r.dim(1);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> build_esa_input_backward(const EsaInput<T>& in, const Tensor<T>& dstack) {
  const auto n = dstack.dim(0), h = dstack.dim(2), w = dstack.dim(3);
  std::vector<Tensor<T>> dtaps;
  std::size_t offset = 0;
  for (const auto& shape : in.tap_shapes) {
    const auto ch = shape[1];
    Tensor<T> part({n, ch, h, w});
    for (std::size_t b = 0; b < n; ++b) {
      std::copy(dstack.slice(b, offset), dstack.slice(b, offset) + ch * h * w, part.slice(b));
    }
    dtaps.push_back(nn::resize_bilinear_backward(part, shape));
    offset += ch;
  }
  return dtaps;
}

struct EsaEncoderConfig {
  std::array<std::size_t, 3> conv_widths{32, 64, 128};
  std::size_t hidden = 256;
};

/// Three stride-2 3x3 conv + ReLU blocks, global average pooling, a hidden
/// fully connected layer with ReLU and a final fully connected layer to
/// C * extent, squashed by a sigmoid.
template <typename T>
class EsaEncoder {
 public:
  struct Trace {
    std::array<Tensor<T>, 4> conv_in;  // inputs to conv blocks; [3] is the pooled input
    std::array<Tensor<T>, 3> conv_out;
    Tensor<T> pooled, hidden, confidence;
  };

  EsaEncoder(std::string prefix, std::size_t in_channels, Direction direction,
             std::size_t lanes, std::size_t extent, EsaEncoderConfig cfg = {})
      : prefix_(std::move(prefix)),
        in_channels_(in_channels),
        direction_(direction),
        lanes_(lanes),
        extent_(extent),
        cfg_(cfg) {
    if (extent_ == 0) throw std::invalid_argument("EsaEncoder: extent must be positive");
    if (lanes_ == 0) throw std::invalid_argument("EsaEncoder: lane count must be positive");
  }

  Direction direction() const noexcept { return direction_; }
  std::size_t extent() const noexcept { return extent_; }
  const std::string& prefix() const noexcept { return prefix_; }

  void register_parameters(ParameterSet<T>& params, Rng& rng) const {
    std::size_t cin = in_channels_;
    for (std::size_t i = 0; i < 3; ++i) {
      add_layer(params, conv_name(i), {cfg_.conv_widths[i], cin, 3, 3}, rng);
      cin = cfg_.conv_widths[i];
    }
    add_layer(params, prefix_ + ".fc1", {cfg_.hidden, cin}, rng);
    add_layer(params, prefix_ + ".fc2", {lanes_ * extent_, cfg_.hidden}, rng);
  }

  /// Closed-form scalar count of the parameters registered above.
  std::size_t parameter_count() const {
    std::size_t n = 0, cin = in_channels_;
    for (auto cout : cfg_.conv_widths) {
      n += 9 * cin * cout + cout;
      cin = cout;
    }
    n += cfg_.hidden * cin + cfg_.hidden;
    n += lanes_ * extent_ * cfg_.hidden + lanes_ * extent_;
    return n;
  }

  ConfidenceVector<T> forward(const ParameterSet<T>& params, const Tensor<T>& stack,
                              Trace* trace = nullptr) const {
    if (stack.rank() != 4 || stack.dim(1) != in_channels_) {
      throw std::invalid_argument("EsaEncoder: stack " + shape_string(stack.shape()) +
                                  " does not have " + std::to_string(in_channels_) +
                                  " channels");
    }
    Tensor<T> x = stack;
    for (std::size_t i = 0; i < 3; ++i) {
      if (trace) trace->conv_in[i] = x;
      x = nn::conv2d(x, params[conv_name(i) + ".weight"], params[conv_name(i) + ".bias"],
                     kConv);
      nn::relu_inplace(x);
      if (trace) trace->conv_out[i] = x;
    }
    if (trace) trace->conv_in[3] = x;
    Tensor<T> pooled = nn::global_avg_pool(x);
    Tensor<T> hidden = nn::linear(pooled, params[prefix_ + ".fc1.weight"],
                                  params[prefix_ + ".fc1.bias"]);
    nn::relu_inplace(hidden);
    Tensor<T> z = nn::linear(hidden, params[prefix_ + ".fc2.weight"],
                             params[prefix_ + ".fc2.bias"]);
    for (auto& v : z) v = nn::sigmoid(v);
    Tensor<T> conf = z.reshaped({stack.dim(0), lanes_, extent_});
    if (trace) {
      trace->pooled = std::move(pooled);
      trace->hidden = std::move(hidden);
      trace->confidence = conf;
    }
    return {direction_, std::move(conf)};
  }

  /// Accumulates parameter gradients into `grads`; returns the stack gradient.
  Tensor<T> backward(const ParameterSet<T>& params, const Trace& trace,
                     const Tensor<T>& dconf, ParameterSet<T>& grads) const {
    const auto n = dconf.dim(0);
    Tensor<T> dz({n, lanes_ * extent_});
    for (std::size_t i = 0; i < dz.size(); ++i) {
      const T s = trace.confidence[i];
      dz[i] = dconf[i] * s * (T{1} - s);
    }
    Tensor<T> dhidden = nn::linear_backward(trace.hidden, params[prefix_ + ".fc2.weight"], dz,
                                            grads[prefix_ + ".fc2.weight"],
                                            grads[prefix_ + ".fc2.bias"]);
    nn::relu_backward_inplace(trace.hidden, dhidden);
    Tensor<T> dpooled = nn::linear_backward(trace.pooled, params[prefix_ + ".fc1.weight"],
                                            dhidden, grads[prefix_ + ".fc1.weight"],
                                            grads[prefix_ + ".fc1.bias"]);
    Tensor<T> dx = nn::global_avg_pool_backward(dpooled, trace.conv_in[3].shape());
    for (std::size_t i = 3; i-- > 0;) {
      nn::relu_backward_inplace(trace.conv_out[i], dx);
      Tensor<T> dprev;
      nn::conv2d_backward(trace.conv_in[i], params[conv_name(i) + ".weight"], dx, kConv,
                          grads[conv_name(i) + ".weight"], grads[conv_name(i) + ".bias"],
                          &dprev);
      dx = std::move(dprev);
    }
    return dx;
  }

 private:
  static constexpr nn::ConvGeometry kConv{3, 2, 1};

  std::string conv_name(std::size_t i) const { return prefix_ + ".conv" + std::to_string(i); }

  std::string prefix_;
  std::size_t in_channels_;
  Direction direction_;
  std::size_t lanes_;
  std::size_t extent_;
  EsaEncoderConfig cfg_;
};

/// One-shot encoder evaluation with parameters drawn from `seed`
/// (or all zeros when `zero_parameters` is set).
template <typename T>
ConfidenceVector<T> esa_encoder_forward(const Tensor<T>& stack, Direction direction,
                                        std::size_t lanes, long long extent,
                                        std::uint64_t seed = 0, bool zero_parameters = false,
                                        EsaEncoderConfig cfg = {}) {
  if (extent <= 0) throw std::invalid_argument("esa_encoder_forward: extent must be positive");
  EsaEncoder<T> enc("esa", stack.dim(1), direction, lanes, static_cast<std::size_t>(extent), cfg);
  ParameterSet<T> params;
  Rng rng(seed);
  enc.register_parameters(params, rng);
  if (zero_parameters) {
    for (std::size_t i = 0; i < params.count(); ++i) params.at(i).fill(T{0});
  }
  return enc.forward(params, stack);
}

}  // namespace esa
