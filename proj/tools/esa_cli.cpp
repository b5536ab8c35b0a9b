// esa: command-line driver for synthetic data generation, training,
// evaluation, upsilon ablation, gradient checks and visualisation.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "esa/config.hpp"
#include "esa/dataset_io.hpp"
#include "esa/image_io.hpp"
#include "esa/model.hpp"
#include "esa/trainer.hpp"

namespace fs = std::filesystem;
using namespace esa;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kIoError = 2, kNumericalError = 3 };

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "key=value configuration file");
  cmd->add_option("--set", o.overrides, "override KEY=VALUE (repeatable)");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--seed", o.seed, "random seed");
}

Config load_config(const CommonOptions& o) {
  Config c = o.config_path.empty() ? Config{} : Config::from_file(o.config_path);
  for (const auto& kv : o.overrides) c.set(kv);
  if (o.seed) c.set("seed", std::to_string(*o.seed));
  c.check_known(known_config_keys());
  return c;
}

fs::path output_dir(const CommonOptions& o) {
  if (o.out_dir.empty()) throw ConfigError("--out: an output directory is required");
  std::error_code ec;
  fs::create_directories(o.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + o.out_dir + ": " + ec.message());
  return o.out_dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

void write_report(const fs::path& dir, const std::string& stem, const MetricReport& r) {
  write_text(dir / (stem + ".txt"), r.to_text());
  write_text(dir / (stem + ".json"), r.to_json().dump(2) + "\n");
}

std::string config_text(const Config& c) {
  std::string s;
  for (const auto& [k, v] : c.values()) s += k + "=" + v + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Datasets

struct DataSpec {
  std::string format;
  std::unique_ptr<SampleSource> source;
};

DataSpec open_source(const Config& c, const std::string& prefix) {
  const auto format = c.text(prefix + ".format", "synthetic");
  const fs::path root = c.required(prefix + ".root");
  if (!fs::exists(root)) throw IoError(prefix + ".root: missing path " + root.string());
  DataSpec d{format, nullptr};
  if (format == "synthetic") {
    d.source = std::make_unique<SyntheticDirectorySource>(root);
  } else if (format == "tusimple") {
    d.source = std::make_unique<TusimpleSource>(root, root / c.required(prefix + ".list"));
  } else if (format == "culane") {
    d.source = std::make_unique<CulaneSource>(root, root / c.required(prefix + ".list"));
  } else if (format == "bdd") {
    d.source = std::make_unique<BddSource>(root, root / c.required(prefix + ".list"));
  } else {
    throw ConfigError(prefix + ".format: expected synthetic, tusimple, culane or bdd, got '" + format + "'");
  }
  if (d.source->size() == 0) throw IoError(prefix + ": dataset at " + root.string() + " is empty");
  return d;
}

std::string default_protocol(const std::string& format) {
  if (format == "tusimple") return "tusimple";
  if (format == "bdd") return "bdd";
  return "culane";
}

/// Model configuration with input size and lane count taken from the data
/// unless set explicitly.
ModelConfig model_for(const Config& c, const SampleSource& data) {
  Config m = c;
  const auto probe = data.get(0);
  if (!c.has("model.height")) m.set("model.height", std::to_string(probe.label.dim(0)));
  if (!c.has("model.width")) m.set("model.width", std::to_string(probe.label.dim(1)));
  if (data.style() == AnnotationStyle::binary_lanes) {
    if (!c.has("model.lanes")) m.set("model.lanes", "1");
    if (!c.has("model.use_existence")) m.set("model.use_existence", "0");
  } else if (!c.has("model.lanes") && !probe.existence.empty()) {
    m.set("model.lanes", std::to_string(probe.existence.size()));
  }
  return model_config(m);
}

EvalConfig eval_for(const Config& c, const ModelConfig& mc) {
  Config e = c;
  // CULane rasterises lanes 30 px thick at 1640 px width; keep that ratio at
  // other widths, with a 4 px floor so thin synthetic lanes stay measurable.
  if (!c.has("eval.culane_thickness")) {
    const double t = std::max(4.0, 30.0 * static_cast<double>(mc.width) / 1640.0);
    std::ostringstream os;
    os << t;
    e.set("eval.culane_thickness", os.str());
  }
  return eval_config(e);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const CommonOptions& o) {
  const auto c = load_config(o);
  const auto dist = synth_distribution(c);
  const auto n = c.count("synth.n", 10);
  if (n < 1) throw ConfigError("synth.n: must be >= 1");
  const auto out = output_dir(o);
  const auto ds = generate_dataset(dist, n, c.u64("seed", 0));
  write_synthetic_dataset(out, ds);
  std::cout << "wrote " << n << " scenes to " << out.string() << '\n';
  return kOk;
}

int cmd_train(const CommonOptions& o) {
  const auto c = load_config(o);
  const auto tc = train_config(c);
  const auto train_data = open_source(c, "data.train");
  const auto mc = model_for(c, *train_data.source);
  const auto out = output_dir(o);
  write_text(out / "config.txt", config_text(c));
  Model<float> model(mc);
  TrainOutputs outputs;
  outputs.directory = out;
  const auto result = train(model, *train_data.source, tc, outputs);
  std::cout << "trained " << result.steps << " steps; final " << result.log.back().to_line() << '\n';
  if (c.has("data.test.root")) {
    const auto test = open_source(c, "data.test");
    const auto report = evaluate(model, *test.source, protocol_config(c, default_protocol(test.format)), eval_for(c, mc));
    write_report(out, "metrics", report);
    std::cout << report.to_text();
  }
  return kOk;
}

int cmd_eval(const CommonOptions& o) {
  const auto c = load_config(o);
  const auto test = open_source(c, "data.test");
  const auto protocol = protocol_config(c, default_protocol(test.format));
  const auto ckpt = load_checkpoint<float>(c.required("checkpoint"));
  const auto report = evaluate(ckpt.model, *test.source, protocol, eval_for(c, ckpt.model.config()));
  const auto out = output_dir(o);
  write_report(out, "metrics", report);
  std::cout << report.to_text();
  return kOk;
}

int cmd_ablate(const CommonOptions& o) {
  const auto c = load_config(o);
  const auto tc = train_config(c);
  const auto train_data = open_source(c, "data.train");
  const auto test = open_source(c, "data.test");
  auto mc = model_for(c, *train_data.source);
  if (!mc.esa_horizontal && !mc.esa_vertical) {
    throw ConfigError("model.esa_horizontal / model.esa_vertical: the ablation needs at least one ESA module");
  }
  const auto values = c.reals("ablate.upsilon_values", {0.0, 0.5, 0.8, 1.0});
  for (double u : values) {
    if (!(u >= 0.0 && u <= 1.0)) throw ConfigError("ablate.upsilon_values: values must lie in [0, 1]");
  }
  const auto out = output_dir(o);
  write_text(out / "config.txt", config_text(c));
  const auto protocol = protocol_config(c, default_protocol(test.format));
  const auto result = ablate_upsilon<float>(
      [&] { return Model<float>(mc); }, *train_data.source, *test.source, values, tc, protocol, eval_for(c, mc),
      [&](double u, const TrainResult&, const MetricReport& r) {
        std::ostringstream stem;
        stem << "metrics_upsilon_" << u;
        write_report(out, stem.str(), r);
        std::cout << "upsilon=" << u << " done\n";
      });
  write_text(out / "ablation.tsv", result.table());
  std::cout << result.table();
  return kOk;
}

int cmd_gradcheck(const CommonOptions& o) {
  const auto c = load_config(o);
  GradientCheckOptions opt;
  opt.points = c.count("gradcheck.points", opt.points);
  opt.eps = c.real("gradcheck.eps", opt.eps);
  const auto report = gradient_check_suite(c.u64("seed", 0), opt);
  std::cout << report.to_text();
  if (!o.out_dir.empty()) write_text(output_dir(o) / "gradcheck.txt", report.to_text());
  return report.passed() ? kOk : kNumericalError;
}

// Lane channel colours in channel order 1..4.
constexpr std::uint8_t kLaneColors[4][3] = {{0, 0, 255}, {0, 255, 0}, {255, 0, 0}, {255, 255, 0}};

/// Blends each lane channel's colour over the image with its probability as alpha.
Image8 overlay(const Image8& img, const ProbabilityMap<double>& p) {
  Image8 out = img;
  const auto lanes = p.lanes();
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = img.at(y, x, ch);
        for (std::size_t c = 0; c < lanes; ++c) {
          const double a = p.values(0, c + 1, y, x);
          v = (1.0 - a) * v + a * kLaneColors[c][ch];
        }
        out.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

/// Line chart of per-lane confidence against position (row or column index).
Image8 confidence_plot(const ConfidenceVector<double>& conf) {
  const std::size_t lanes = conf.values.dim(1), extent = conf.values.dim(2);
  const std::size_t h = 128, w = std::max<std::size_t>(2 * extent, 128), margin = 4;
  Image8 img{h, w, 3, std::vector<std::uint8_t>(h * w * 3, 255)};
  const auto px = [&](std::size_t k) { return margin + k * (w - 2 * margin - 1) / std::max<std::size_t>(extent - 1, 1); };
  const auto py = [&](double v) {
    return static_cast<std::size_t>(std::lround((1.0 - v) * static_cast<double>(h - 2 * margin - 1))) + margin;
  };
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t ch = 0; ch < 3; ++ch) img.at(py(0.0), x, ch) = img.at(py(1.0), x, ch) = 200;
  }
  for (std::size_t c = 0; c < lanes; ++c) {
    for (std::size_t k = 0; k + 1 < extent; ++k) {
      const auto x0 = px(k), x1 = px(k + 1);
      const double v0 = conf.values(0, c, k), v1 = conf.values(0, c, k + 1);
      for (auto x = x0; x <= x1; ++x) {
        const double t = x1 == x0 ? 0.0 : static_cast<double>(x - x0) / static_cast<double>(x1 - x0);
        const auto y = py(v0 + t * (v1 - v0));
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = kLaneColors[c % 4][ch];
      }
    }
  }
  return img;
}

int cmd_visualize(const CommonOptions& o) {
  const auto c = load_config(o);
  const auto ckpt = load_checkpoint<double>(c.required("checkpoint"));
  const auto& mc = ckpt.model.config();
  const auto expected = c.count("model.lanes", mc.lanes);
  if (expected != mc.lanes) {
    throw CheckpointError("checkpoint has " + std::to_string(mc.lanes + 1) + " output channels, config expects " +
                          std::to_string(expected + 1));
  }
  if (mc.lanes > 4) {
    throw CheckpointError("checkpoint has " + std::to_string(mc.lanes) + " lane channels; overlays support at most 4");
  }
  const fs::path images = c.required("visualize.images");
  if (!fs::exists(images)) throw IoError("visualize.images: missing path " + images.string());
  std::vector<fs::path> files;
  if (fs::is_directory(images)) {
    for (const auto& e : fs::directory_iterator(images)) {
      const auto ext = detail::lower_extension(e.path());
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(images);
  }
  const auto out = output_dir(o);
  for (const auto& f : files) {
    const auto rgb = resize_bilinear(read_rgb(f), mc.height, mc.width);
    Tensor<double> batch({1, 3, mc.height, mc.width});
    const auto t = to_tensor(rgb);
    std::copy(t.begin(), t.end(), batch.begin());
    const auto inf = ckpt.model.infer_forward(batch);
    const auto stem = f.stem().string();
    write_png(out / (stem + "_overlay.png"), overlay(rgb, inf.probabilities));
    if (mc.esa_horizontal || mc.esa_vertical) {
      const auto fwd = ckpt.model.train_forward(batch);
      for (Direction d : {Direction::horizontal, Direction::vertical}) {
        if (const auto conf = ckpt.model.confidence(fwd, d)) {
          write_png(out / (stem + "_confidence_" + to_string(d) + ".png"), confidence_plot(*conf));
        }
      }
    }
  }
  std::cout << "wrote overlays for " << files.size() << " image(s) to " << out.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expanded self-attention lane detection"};
  app.require_subcommand(1);
  struct Entry {
    const char* name;
    const char* help;
    int (*run)(const CommonOptions&);
  };
  const Entry commands[] = {
      {"synth", "generate a synthetic occlusion dataset", cmd_synth},
      {"train", "train a model", cmd_train},
      {"eval", "evaluate a checkpoint", cmd_eval},
      {"ablate", "train and evaluate one model per upsilon value", cmd_ablate},
      {"gradcheck", "compare analytic and finite-difference gradients", cmd_gradcheck},
      {"visualize", "write probability overlays and confidence curves", cmd_visualize},
  };
  std::vector<CommonOptions> options(std::size(commands));
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    subs.push_back(app.add_subcommand(commands[i].name, commands[i].help));
    add_common(subs.back(), options[i]);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      return commands[i].run(options[i]);
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kConfigError;
    } catch (const NumericalError& e) {
      std::cerr << "numerical failure: " << e.what() << '\n';
      return kNumericalError;
    } catch (const CheckpointError& e) {
      std::cerr << "invalid checkpoint: " << e.what() << '\n';
      return kIoError;
    } catch (const IoError& e) {
      std::cerr << "i/o error: " << e.what() << '\n';
      return kIoError;
    } catch (const DataFormatError& e) {
      std::cerr << "data error: " << e.what() << '\n';
      return kIoError;
    } catch (const std::invalid_argument& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kConfigError;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kIoError;
    }
  }
  return kConfigError;
}
