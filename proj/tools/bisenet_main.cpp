// bisenet analyze|train|infer|dump-golden|compare
//
// Exit codes: 0 ok, 1 compare difference above tolerance, 2 usage or
// configuration error, 3 numeric failure, 4 checkpoint mismatch.

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bisenet/analysis.hpp"
#include "bisenet/bt2.hpp"
#include "bisenet/image_io.hpp"
#include "bisenet/kernels.hpp"
#include "bisenet/run_config.hpp"
#include "bisenet/text_util.hpp"
#include "bisenet/train.hpp"

namespace fs = std::filesystem;
using namespace bisenet;

namespace {

enum Exit { kOk = 0, kDiff = 1, kConfig = 2, kNumeric = 3, kCheckpoint = 4 };

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

void apply_threads(const RunConfig& cfg) {
  if (cfg.threads > 0) kernels::set_thread_count(cfg.threads);
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + path.string() + "'");
  os << content;
}

template <typename F>
std::string render(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  std::string config;
  std::string input_hw;
  std::string convention = "flops";
  bool grid = false;
  std::string out = "analysis";
};

int cmd_analyze(const AnalyzeArgs& a) {
  RunConfig cfg = config_or_default(a.config);
  int h = cfg.arch.input_h, w = cfg.arch.input_w;
  if (!a.input_hw.empty()) std::tie(h, w) = text::parse_hw(a.input_hw);
  const auto conv = analysis::convention_from_string(a.convention);
  fs::create_directories(a.out);

  ArchConfig arch = cfg.arch;
  arch.boosters.clear();
  arch.input_h = h;
  arch.input_w = w;
  const Graph g = build_graph(arch);
  analysis::CostOptions opt;
  opt.convention = conv;
  const auto report = analysis::count_costs(g, h, w, opt);
  opt.include_head = false;
  const auto trunk = analysis::count_costs(g, h, w, opt);

  const std::string text = render([&](std::ostream& os) {
    analysis::write_report_text(os, report);
    os << "without main head: G" << analysis::to_string(conv) << " "
       << trunk.totals.flops / 1e9 << ", params " << trunk.totals.params << "\n";
  });
  write_file(fs::path(a.out) / "report.txt", text);
  write_file(fs::path(a.out) / "report.csv",
             render([&](std::ostream& os) { analysis::write_report_csv(os, report); }));

  std::vector<analysis::TableRow> rows;
  if (a.grid) {
    rows = analysis::reproduce_tables(cfg.arch, h, w, conv);
  } else {
    rows.push_back(analysis::single_row(cfg.arch, "config", h, w, conv));
  }
  const std::string table = render(
      [&](std::ostream& os) { analysis::write_table_text(os, rows, conv, h, w); });
  write_file(fs::path(a.out) / "table.txt", table);
  write_file(fs::path(a.out) / "table.csv",
             render([&](std::ostream& os) { analysis::write_table_csv(os, rows); }));

  std::cout << "G" << analysis::to_string(conv) << " " << report.totals.flops / 1e9
            << " (without head " << trunk.totals.flops / 1e9 << "), params "
            << report.totals.params << " at " << h << "x" << w << "\n"
            << table << "reports written to " << a.out << "\n";
  return kOk;
}

// ------------------------------------------------------------------ train

int cmd_train(const std::string& config_path) {
  RunConfig cfg = load_run_config(config_path);
  apply_threads(cfg);
  if (cfg.arch.in_channels != 3) {
    throw ConfigError("synthetic training data is RGB; set in_channels = 3");
  }
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  RunConfig recorded = cfg;
  recorded.threads = kernels::thread_count();
  write_file(out / "config.txt", serialize_run_config(recorded));

  const auto& tc = cfg.train;
  Network<float> net = make_network<float>(cfg.arch, tc.seed);
  const auto data = train::synth_dataset(tc.seed, tc.dataset_size,
                                         cfg.arch.num_classes, tc.crop_h, tc.crop_w);
  train::LoopHooks hooks;
  hooks.on_checkpoint = [&](int iter) {
    save_checkpoint(net, cfg.checkpoint_path().string() + "_iter" + std::to_string(iter));
  };
  const auto history = train::train_loop(net, data, tc, hooks);
  save_checkpoint(net, cfg.checkpoint_path());

  std::vector<std::string> aux;
  for (const auto& h : net.graph->aux_heads()) aux.push_back(h.position);
  write_file(out / "history.csv", render([&](std::ostream& os) {
               train::write_history_csv(os, history, aux);
             }));

  std::ostringstream summary;
  summary << "iterations " << history.size() << "\n";
  if (!history.empty()) summary << "final_loss " << history.back().loss << "\n";
  if (cfg.eval_size > 0) {
    const auto eval = train::synth_dataset(tc.seed + 0x5EED, cfg.eval_size,
                                           cfg.arch.num_classes, tc.crop_h, tc.crop_w);
    summary << "heldout_pixel_accuracy " << train::pixel_accuracy(net, eval, tc.ignore_index)
            << "\n";
  }
  write_file(out / "summary.txt", summary.str());
  std::cout << summary.str() << "checkpoint " << cfg.checkpoint_path().string() << "\n";
  return kOk;
}

// ------------------------------------------------------------------ infer

struct InferArgs {
  std::string checkpoint;
  std::string image;
  std::string out = "labels.pgm";
  std::string logits;
  std::string config;
};

int cmd_infer(const InferArgs& a) {
  std::optional<ArchConfig> expected;
  if (!a.config.empty()) expected = load_run_config(a.config).arch;
  Network<float> net = load_checkpoint<float>(a.checkpoint, expected ? &*expected : nullptr);
  const Tensor<float> img = image::read_pnm(a.image);
  if (img.shape().c != net.cfg.in_channels) {
    throw ConfigError("image has " + std::to_string(img.shape().c) +
                      " channel(s) but the network expects " +
                      std::to_string(net.cfg.in_channels));
  }
  if (net.cfg.num_classes > 256) {
    throw ConfigError("label maps hold at most 256 classes");
  }
  const auto r = forward_inference(net, img);
  image::write_label_pgm(a.out, r.labels);
  if (!a.logits.empty()) {
    const Shape& s = img.shape();
    bt2::save(a.logits, ops::resize_nearest(r.logits, s.h, s.w));
  }
  std::cout << "labels " << r.labels.w << "x" << r.labels.h << " written to " << a.out << "\n";
  return kOk;
}

// ------------------------------------------------------------ dump-golden

struct DumpArgs {
  std::string config;
  long long seed = -1;
  std::string taps = "logits";
  std::string out = "golden";
  std::string dtype = "f32";
};

template <typename T>
void dump_taps(const RunConfig& cfg, std::uint64_t seed,
               const std::vector<std::string>& taps, const fs::path& out) {
  Network<T> net = make_network<T>(cfg.arch, seed);
  std::vector<NodeId> ids;
  for (const auto& t : taps) {
    if (!net.graph->has_tap(t)) {
      std::string known;
      for (const auto& [name, id] : net.graph->taps()) known += " " + name;
      throw ConfigError("unknown tap '" + t + "'; known taps:" + known);
    }
    ids.push_back(net.graph->tap(t));
  }
  train::Rng rng(seed);
  Tensor<T> input({1, cfg.arch.in_channels, cfg.arch.input_h, cfg.arch.input_w});
  for (auto& v : input.storage()) v = static_cast<T>(rng.uniform());
  ag::NoGradGuard guard;
  auto values = run_graph(*net.graph, net.weights, ag::Var<T>(input), ops::BnMode::Eval, ids);
  fs::create_directories(out);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    bt2::save(out / (taps[i] + ".bt2"), values[ids[i]].value());
    std::cout << taps[i] << " " << to_string(values[ids[i]].shape()) << "\n";
  }
}

int cmd_dump(const DumpArgs& a) {
  RunConfig cfg = config_or_default(a.config);
  apply_threads(cfg);
  const std::uint64_t seed = a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : cfg.train.seed;
  std::vector<std::string> taps = text::split(a.taps, ',');
  if (a.dtype == "f32") {
    dump_taps<float>(cfg, seed, taps, a.out);
  } else if (a.dtype == "f64") {
    dump_taps<double>(cfg, seed, taps, a.out);
  } else {
    throw ConfigError("dtype must be f32 or f64");
  }
  return kOk;
}

// ---------------------------------------------------------------- compare

struct Diff {
  double max_abs = 0;
  std::size_t index = 0;
  Shape shape;
};

Diff diff_files(const fs::path& a, const fs::path& b) {
  const Tensor<double> x = bt2::load<double>(a);
  const Tensor<double> y = bt2::load<double>(b);
  if (x.shape() != y.shape()) {
    throw ConfigError("shape mismatch: " + a.string() + " " + to_string(x.shape()) +
                      " vs " + b.string() + " " + to_string(y.shape()));
  }
  Diff d;
  d.shape = x.shape();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = std::abs(x[i] - y[i]);
    if (e > d.max_abs || std::isnan(e)) {
      d.max_abs = std::isnan(e) ? INFINITY : e;
      d.index = i;
    }
  }
  return d;
}

int cmd_compare(const std::string& a, const std::string& b, double tol) {
  std::vector<std::pair<fs::path, fs::path>> pairs;
  if (fs::is_directory(a)) {
    if (!fs::is_directory(b)) throw ConfigError("'" + b + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a))
      if (e.path().extension() == ".bt2") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const fs::path other = fs::path(b) / f.filename();
      if (!fs::exists(other)) throw ConfigError("missing '" + other.string() + "'");
      pairs.emplace_back(f, other);
    }
    if (pairs.empty()) throw ConfigError("no .bt2 files in '" + a + "'");
  } else {
    pairs.emplace_back(a, b);
  }
  double worst = 0;
  for (const auto& [x, y] : pairs) {
    const Diff d = diff_files(x, y);
    const Shape& s = d.shape;
    const std::size_t plane = s.plane();
    const std::size_t n = d.index / (s.c * plane);
    const std::size_t c = d.index / plane % s.c;
    const std::size_t hh = d.index % plane / s.w;
    const std::size_t ww = d.index % s.w;
    std::cout << x.filename().string() << ": max_abs_diff " << d.max_abs << " at index "
              << d.index << " (n=" << n << ", c=" << c << ", h=" << hh << ", w=" << ww
              << ")\n";
    worst = std::max(worst, d.max_abs);
  }
  const bool ok = worst <= tol;
  std::cout << (ok ? "within" : "exceeds") << " tolerance " << tol << "\n";
  return ok ? kOk : kDiff;
}

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const CheckpointMismatch& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BiSeNetV2 build, cost analysis, toy training and inference"};
  app.require_subcommand(1);

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "cost report for a configuration");
  analyze->add_option("config", an.config, "run config (defaults when omitted)");
  analyze->add_option("--input-hw", an.input_hw, "input size HxW");
  analyze->add_option("--convention", an.convention, "macs or flops");
  analyze->add_flag("--grid", an.grid, "sweep the ablation grid");
  analyze->add_option("--out", an.out, "output directory");

  std::string train_config;
  auto* trainc = app.add_subcommand("train", "train on synthetic data");
  trainc->add_option("config", train_config, "run config")->required();

  InferArgs in;
  auto* infer = app.add_subcommand("infer", "segment a PGM/PPM image");
  infer->add_option("checkpoint", in.checkpoint, "checkpoint directory")->required();
  infer->add_option("image", in.image, "P5 or P6 image")->required();
  infer->add_option("--out", in.out, "label map (P5)");
  infer->add_option("--logits", in.logits, "optional BT2 logits dump");
  infer->add_option("--config", in.config, "run config whose architecture must match");

  DumpArgs du;
  auto* dump = app.add_subcommand("dump-golden", "dump tap tensors for a seeded input");
  dump->add_option("config", du.config, "run config (defaults when omitted)");
  dump->add_option("--seed", du.seed, "weight and input seed (default: config seed)");
  dump->add_option("--taps", du.taps, "comma-separated tap names");
  dump->add_option("--out", du.out, "output directory");
  dump->add_option("--dtype", du.dtype, "f32 or f64");

  std::string ca, cb;
  double tol = 0;
  auto* compare = app.add_subcommand("compare", "max abs difference of BT2 dumps");
  compare->add_option("a", ca, "file or directory")->required();
  compare->add_option("b", cb, "file or directory")->required();
  compare->add_option("--tol", tol, "tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  if (*analyze) return guarded([&] { return cmd_analyze(an); });
  if (*trainc) return guarded([&] { return cmd_train(train_config); });
  if (*infer) return guarded([&] { return cmd_infer(in); });
  if (*dump) return guarded([&] { return cmd_dump(du); });
  if (*compare) return guarded([&] { return cmd_compare(ca, cb, tol); });
  return kConfig;
}
