#pragma once

// Tiny encoder-decoder lane segmentation network. Four stride-2 encoder
// stages provide the feature taps, a nearest-upsampling decoder returns to
// input resolution, an optional existence head sits on the deepest tap, and
// the ESA encoders run only on the training path.

#include <array>
#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "esa/esa_core.hpp"
#include "esa/losses.hpp"
#include "esa/nn.hpp"
#include "esa/parameters.hpp"
#include "esa/tensor.hpp"

namespace esa {

struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 64;
  std::size_t lanes = 4;
  std::array<std::size_t, 4> stage_widths{8, 16, 32, 64};
  bool use_existence = true;
  bool esa_horizontal = false;
  bool esa_vertical = false;
  std::uint64_t seed = 0;
  /// Adds encoder taps to the decoder stages of matching resolution.
  bool skip_connections = true;
  EsaEncoderConfig esa_encoder{};

  void validate() const {
    if (lanes < 1) throw std::invalid_argument("ModelConfig: lanes must be >= 1");
    if (height < 16 || width < 16) {
      throw std::invalid_argument("ModelConfig: input size " + std::to_string(height) + "x" +
                                  std::to_string(width) + " must be at least 16x16");
    }
    for (auto w : stage_widths) {
      if (w == 0) throw std::invalid_argument("ModelConfig: stage widths must be positive");
    }
    for (auto w : esa_encoder.conv_widths) {
      if (w == 0) throw std::invalid_argument("ModelConfig: ESA encoder widths must be positive");
    }
    if (esa_encoder.hidden == 0) throw std::invalid_argument("ModelConfig: ESA hidden width must be positive");
  }

  bool any_esa() const { return esa_horizontal || esa_vertical; }
};

enum class Graph { training, inference };

inline bool is_esa_parameter(const std::string& name) { return name.rfind("esa_", 0) == 0; }

template <typename T>
struct ForwardTrace {
  Tensor<T> images;
  std::array<Tensor<T>, 4> taps;          // post-ReLU encoder outputs
  std::array<Tensor<T>, 4> decoder_in;    // upsampled inputs to decoder convs
  std::array<Tensor<T>, 4> decoder_act;   // post-ReLU decoder conv outputs
  Tensor<T> head_in;
  Tensor<T> exist_pooled;
  std::optional<EsaInput<T>> esa_input;
  std::optional<typename EsaEncoder<T>::Trace> esa_h, esa_v;
};

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;                     // [N, C+1, H, W]
  std::optional<Tensor<T>> existence;   // [N, C], in (0, 1)
  std::vector<Tensor<T>> taps;          // 4 encoder feature maps
  std::optional<EsaMatrix<T>> esa_h, esa_v;
  ForwardTrace<T> trace;
};

template <typename T>
struct InferenceOutput {
  Tensor<T> logits;
  ProbabilityMap<T> probabilities;
  std::optional<Tensor<T>> existence;
};

/// Loss gradients with respect to the network outputs.
template <typename T>
struct OutputGradients {
  Tensor<T> logits;
  std::optional<Tensor<T>> existence;  // w.r.t. existence probabilities
  std::optional<Tensor<T>> esa_h;      // w.r.t. the horizontal ESA matrix
  std::optional<Tensor<T>> esa_v;
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng backbone(mix_seed(cfg_.seed, 0));
    const auto& sw = cfg_.stage_widths;
    std::size_t cin = 3;
    for (std::size_t i = 0; i < 4; ++i) {
      add_layer(params_, "encoder." + std::to_string(i), {sw[i], cin, 3, 3}, backbone);
      cin = sw[i];
    }
    for (std::size_t j = 0; j < 4; ++j) {
      const std::size_t cout = decoder_width(j);
      add_layer(params_, "decoder." + std::to_string(j), {cout, cin, 3, 3}, backbone);
      cin = cout;
    }
    add_layer(params_, "head", {cfg_.lanes + 1, cin, 1, 1}, backbone);
    if (cfg_.use_existence) add_layer(params_, "exist", {cfg_.lanes, sw[3]}, backbone);

    // Separate streams keep backbone initialisation independent of the ESA set.
    if (cfg_.esa_horizontal) {
      Rng rng(mix_seed(cfg_.seed, 1));
      esa_h_.emplace(make_encoder(Direction::horizontal));
      esa_h_->register_parameters(params_, rng);
    }
    if (cfg_.esa_vertical) {
      Rng rng(mix_seed(cfg_.seed, 2));
      esa_v_.emplace(make_encoder(Direction::vertical));
      esa_v_->register_parameters(params_, rng);
    }
  }

  Model(const Model& o) : cfg_(o.cfg_), params_(o.params_), esa_h_(o.esa_h_), esa_v_(o.esa_v_) {}
  Model& operator=(const Model& o) {
    cfg_ = o.cfg_;
    params_ = o.params_;
    esa_h_ = o.esa_h_;
    esa_v_ = o.esa_v_;
    esa_evaluations_.store(0);
    return *this;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }

  /// Number of ESA encoder evaluations performed through this handle.
  std::uint64_t esa_evaluations() const noexcept { return esa_evaluations_.load(); }

  std::size_t parameter_count(Graph graph) const {
    if (graph == Graph::training) return params_.scalar_count();
    return params_.scalar_count([](const std::string& n) { return !is_esa_parameter(n); });
  }

  ForwardOutput<T> train_forward(const Tensor<T>& images) const {
    ForwardOutput<T> out;
    backbone(images, out.logits, out.existence, &out.trace);
    out.taps.assign(out.trace.taps.begin(), out.trace.taps.end());
    if (cfg_.any_esa()) {
      out.trace.esa_input = build_esa_input(out.taps);
      const auto& stack = out.trace.esa_input->stack;
      if (esa_h_) {
        out.trace.esa_h.emplace();
        esa_evaluations_.fetch_add(1);
        auto conf = esa_h_->forward(params_, stack, &*out.trace.esa_h);
        out.esa_h = expand_horizontal(conf, cfg_.width);
      }
      if (esa_v_) {
        out.trace.esa_v.emplace();
        esa_evaluations_.fetch_add(1);
        auto conf = esa_v_->forward(params_, stack, &*out.trace.esa_v);
        out.esa_v = expand_vertical(conf, cfg_.height);
      }
    }
    return out;
  }

  /// Encoder, decoder and existence head only.
  InferenceOutput<T> infer_forward(const Tensor<T>& images) const {
    InferenceOutput<T> out;
    backbone(images, out.logits, out.existence, nullptr);
    out.probabilities = softmax_over_channels(out.logits);
    return out;
  }

  /// Raw ESA confidence vectors for visualisation; empty when the direction is disabled.
  std::optional<ConfidenceVector<T>> confidence(const ForwardOutput<T>& fwd, Direction d) const {
    const auto& trace = d == Direction::horizontal ? fwd.trace.esa_h : fwd.trace.esa_v;
    if (!trace) return std::nullopt;
    return ConfidenceVector<T>{d, trace->confidence};
  }

  /// Gradients of a scalar loss with respect to every parameter, given the
  /// gradients with respect to the forward outputs.
  ParameterSet<T> backward(const ForwardOutput<T>& fwd, const OutputGradients<T>& g) const {
    const auto& tr = fwd.trace;
    ParameterSet<T> grads = params_.zeros_like();
    std::array<Tensor<T>, 4> dtaps;
    for (std::size_t i = 0; i < 4; ++i) dtaps[i] = Tensor<T>(tr.taps[i].shape());

    // Head and decoder.
    Tensor<T> d;
    nn::conv2d_backward(tr.head_in, params_["head.weight"], g.logits, kHead,
                        grads["head.weight"], grads["head.bias"], &d);
    for (std::size_t j = 4; j-- > 0;) {
      if (cfg_.skip_connections && j < 3) dtaps[2 - j] += d;
      nn::relu_backward_inplace(tr.decoder_act[j], d);
      const auto name = "decoder." + std::to_string(j);
      Tensor<T> du;
      nn::conv2d_backward(tr.decoder_in[j], params_[name + ".weight"], d, kSame,
                          grads[name + ".weight"], grads[name + ".bias"], &du);
      d = nn::resize_nearest_backward(du, tr.taps[3 - j].dim(2), tr.taps[3 - j].dim(3));
    }
    dtaps[3] += d;

    if (cfg_.use_existence && g.existence) {
      Tensor<T> dz(g.existence->shape());
      for (std::size_t i = 0; i < dz.size(); ++i) {
        const T p = (*fwd.existence)[i];
        dz[i] = (*g.existence)[i] * p * (T{1} - p);
      }
      Tensor<T> dpool = nn::linear_backward(tr.exist_pooled, params_["exist.weight"], dz,
                                            grads["exist.weight"], grads["exist.bias"]);
      dtaps[3] += nn::global_avg_pool_backward(dpool, tr.taps[3].shape());
    }

    if (tr.esa_input) {
      Tensor<T> dstack(tr.esa_input->stack.shape());
      bool any = false;
      if (esa_h_ && g.esa_h) {
        dstack += esa_h_->backward(params_, *tr.esa_h,
                                   expand_backward(Direction::horizontal, *g.esa_h), grads);
        any = true;
      }
      if (esa_v_ && g.esa_v) {
        dstack += esa_v_->backward(params_, *tr.esa_v,
                                   expand_backward(Direction::vertical, *g.esa_v), grads);
        any = true;
      }
      if (any) {
        auto parts = build_esa_input_backward(*tr.esa_input, dstack);
        for (std::size_t i = 0; i < 4; ++i) dtaps[i] += parts[i];
      }
    }

    // Encoder.
    for (std::size_t i = 4; i-- > 0;) {
      nn::relu_backward_inplace(tr.taps[i], dtaps[i]);
      const auto name = "encoder." + std::to_string(i);
      const Tensor<T>& in = i == 0 ? tr.images : tr.taps[i - 1];
      Tensor<T> din;
      nn::conv2d_backward(in, params_[name + ".weight"], dtaps[i], kDown,
                          grads[name + ".weight"], grads[name + ".bias"], i ? &din : nullptr);
      if (i) dtaps[i - 1] += din;
    }
    return grads;
  }

 private:
  static constexpr nn::ConvGeometry kDown{3, 2, 1};
  static constexpr nn::ConvGeometry kSame{3, 1, 1};
  static constexpr nn::ConvGeometry kHead{1, 1, 0};

  std::size_t decoder_width(std::size_t j) const {
    return j < 3 ? cfg_.stage_widths[2 - j] : cfg_.stage_widths[0];
  }

  EsaEncoder<T> make_encoder(Direction d) const {
    std::size_t channels = 0;
    for (auto w : cfg_.stage_widths) channels += w;
    const std::size_t extent = d == Direction::horizontal ? cfg_.height : cfg_.width;
    return EsaEncoder<T>(d == Direction::horizontal ? "esa_h" : "esa_v", channels, d,
                         cfg_.lanes, extent, cfg_.esa_encoder);
  }

  void backbone(const Tensor<T>& images, Tensor<T>& logits, std::optional<Tensor<T>>& existence,
                ForwardTrace<T>* tr) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.height ||
        images.dim(3) != cfg_.width) {
      throw std::invalid_argument("Model: expected images [N, 3, " + std::to_string(cfg_.height) +
                                  ", " + std::to_string(cfg_.width) + "], got " +
                                  shape_string(images.shape()));
    }
    std::array<Tensor<T>, 4> taps;
    const Tensor<T>* x = &images;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto name = "encoder." + std::to_string(i);
      taps[i] = nn::conv2d(*x, params_[name + ".weight"], params_[name + ".bias"], kDown);
      nn::relu_inplace(taps[i]);
      x = &taps[i];
    }
    Tensor<T> d = taps[3];
    for (std::size_t j = 0; j < 4; ++j) {
      const auto name = "decoder." + std::to_string(j);
      const auto& target = j < 3 ? taps[2 - j] : images;
      Tensor<T> u = nn::resize_nearest(d, target.dim(2), target.dim(3));
      d = nn::conv2d(u, params_[name + ".weight"], params_[name + ".bias"], kSame);
      nn::relu_inplace(d);
      if (tr) {
        tr->decoder_in[j] = std::move(u);
        tr->decoder_act[j] = d;
      }
      if (cfg_.skip_connections && j < 3) d += taps[2 - j];
    }
    logits = nn::conv2d(d, params_["head.weight"], params_["head.bias"], kHead);
    if (cfg_.use_existence) {
      Tensor<T> pooled = nn::global_avg_pool(taps[3]);
      Tensor<T> z = nn::linear(pooled, params_["exist.weight"], params_["exist.bias"]);
      for (auto& v : z) v = nn::sigmoid(v);
      existence = std::move(z);
      if (tr) tr->exist_pooled = std::move(pooled);
    } else {
      existence.reset();
    }
    if (tr) {
      tr->images = images;
      tr->head_in = std::move(d);
      tr->taps = std::move(taps);
    }
  }

  ModelConfig cfg_;
  ParameterSet<T> params_;
  std::optional<EsaEncoder<T>> esa_h_, esa_v_;
  mutable std::atomic<std::uint64_t> esa_evaluations_{0};
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  return Model<T>(cfg);
}

// ---------------------------------------------------------------------------
// Checkpoint archive
//
//   "ESACKPT1"                       8-byte magic
//   u64 manifest length, manifest    key=value lines (config, seed, step)
//   u64 tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank],
//               f64 values (little-endian)

using KeyValues = std::map<std::string, std::string>;

inline KeyValues to_key_values(const ModelConfig& c) {
  const auto arr = [](const auto& a) {
    std::string s;
    for (std::size_t i = 0; i < a.size(); ++i) s += (i ? "," : "") + std::to_string(a[i]);
    return s;
  };
  return {{"model.height", std::to_string(c.height)},
          {"model.width", std::to_string(c.width)},
          {"model.lanes", std::to_string(c.lanes)},
          {"model.stage_widths", arr(c.stage_widths)},
          {"model.use_existence", c.use_existence ? "1" : "0"},
          {"model.esa_horizontal", c.esa_horizontal ? "1" : "0"},
          {"model.esa_vertical", c.esa_vertical ? "1" : "0"},
          {"model.seed", std::to_string(c.seed)},
          {"model.skip_connections", c.skip_connections ? "1" : "0"},
          {"model.esa_conv_widths", arr(c.esa_encoder.conv_widths)},
          {"model.esa_hidden", std::to_string(c.esa_encoder.hidden)}};
}

namespace detail {

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') {
    throw std::invalid_argument(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

template <std::size_t N>
std::array<std::size_t, N> parse_list(const std::string& key, const std::string& v) {
  std::array<std::size_t, N> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == N) break;
    out[i++] = parse_u64(key, item);
  }
  if (i != N || std::getline(ss, item, ',')) {
    throw std::invalid_argument(key + ": expected " + std::to_string(N) + " comma-separated integers");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument(key + ": expected a boolean, got '" + v + "'");
}

}  // namespace detail

/// Reads model.* keys; absent keys keep `base` values.
inline ModelConfig model_config_from(const KeyValues& kv, ModelConfig base = {}) {
  const auto get = [&](const char* key, auto&& apply) {
    if (auto it = kv.find(key); it != kv.end()) apply(it->first, it->second);
  };
  get("model.height", [&](auto& k, auto& v) { base.height = detail::parse_u64(k, v); });
  get("model.width", [&](auto& k, auto& v) { base.width = detail::parse_u64(k, v); });
  get("model.lanes", [&](auto& k, auto& v) { base.lanes = detail::parse_u64(k, v); });
  get("model.stage_widths", [&](auto& k, auto& v) { base.stage_widths = detail::parse_list<4>(k, v); });
  get("model.use_existence", [&](auto& k, auto& v) { base.use_existence = detail::parse_bool(k, v); });
  get("model.esa_horizontal", [&](auto& k, auto& v) { base.esa_horizontal = detail::parse_bool(k, v); });
  get("model.esa_vertical", [&](auto& k, auto& v) { base.esa_vertical = detail::parse_bool(k, v); });
  get("model.seed", [&](auto& k, auto& v) { base.seed = detail::parse_u64(k, v); });
  get("model.skip_connections", [&](auto& k, auto& v) { base.skip_connections = detail::parse_bool(k, v); });
  get("model.esa_conv_widths", [&](auto& k, auto& v) { base.esa_encoder.conv_widths = detail::parse_list<3>(k, v); });
  get("model.esa_hidden", [&](auto& k, auto& v) { base.esa_encoder.hidden = detail::parse_u64(k, v); });
  return base;
}

/// Unreadable, truncated or inconsistent checkpoint archive.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw CheckpointError("checkpoint: truncated archive");
  return v;
}

inline constexpr char kCheckpointMagic[8] = {'E', 'S', 'A', 'C', 'K', 'P', 'T', '1'};

}  // namespace detail

struct CheckpointMeta {
  std::uint64_t step = 0;
  KeyValues extra;
};

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const CheckpointMeta& meta = {}) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  KeyValues manifest = to_key_values(model.config());
  manifest["step"] = std::to_string(meta.step);
  for (const auto& [k, v] : meta.extra) manifest[k] = v;
  std::string text;
  for (const auto& [k, v] : manifest) text += k + "=" + v + "\n";

  os.write(detail::kCheckpointMagic, 8);
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& params = model.parameters();
  detail::write_le<std::uint64_t>(os, params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& name = params.names()[i];
    const auto& t = params.at(i);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::write_le<std::uint64_t>(os, d);
    for (T v : t) detail::write_le<double>(os, static_cast<double>(v));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  KeyValues manifest;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw CheckpointError("checkpoint: bad magic in " + path);
  }
  const auto len = detail::read_le<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  KeyValues manifest;
  std::stringstream ss(text);
  for (std::string line; std::getline(ss, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) manifest[line.substr(0, eq)] = line.substr(eq + 1);
  }
  Model<T> model(model_config_from(manifest));
  auto& params = model.parameters();
  const auto count = detail::read_le<std::uint64_t>(is);
  if (count != params.count()) {
    throw CheckpointError("checkpoint: " + std::to_string(count) + " tensors, config expects " +
                             std::to_string(params.count()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto nlen = detail::read_le<std::uint32_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const auto rank = detail::read_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_le<std::uint64_t>(is);
    if (!params.contains(name) || params[name].shape() != shape) {
      throw CheckpointError("checkpoint: tensor " + name + " " + shape_string(shape) +
                               " does not match the configured model");
    }
    for (auto& v : params[name]) v = static_cast<T>(detail::read_le<double>(is));
  }
  return {std::move(model), std::move(manifest)};
}

}  // namespace esa
