// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "bisenet/analysis.hpp"
#include "bisenet/blocks.hpp"
#include "bisenet/bt2.hpp"
#include "bisenet/grad_check.hpp"
#include "bisenet/model.hpp"
#include "bisenet/train.hpp"
#include "oracles.hpp"

using namespace bisenet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using V = ag::Var<double>;
using Vs = std::vector<V>;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int report(int id, const std::string& title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  std::printf("%s %d %s (%.1fs)%s\n", o.pass ? "PASS" : "FAIL", id, title.c_str(),
              seconds_since(t0), o.detail.str().c_str());
  std::fflush(stdout);
  return o.pass ? 0 : 1;
}

// ------------------------------------------------------------------ 1

void shapes(Outcome& o) {
  const auto t0 = Clock::now();
  const Graph g = build_graph(ArchConfig{});
  const auto s = g.infer_shapes({1, 3, 512, 1024});
  const std::pair<const char*, Shape> want[] = {
      {"detail_s1", {1, 64, 256, 512}},   {"detail_s2", {1, 64, 128, 256}},
      {"detail_s3", {1, 128, 64, 128}},   {"sem_stage2", {1, 16, 128, 256}},
      {"sem_stage3", {1, 32, 64, 128}},   {"sem_stage4", {1, 64, 32, 64}},
      {"sem_stage5_5", {1, 128, 16, 32}},
  };
  for (const auto& [tap, shape] : want)
    o.check(s[g.tap(tap)] == shape, std::string(tap) + " = " + to_string(s[g.tap(tap)]));
  const double dt = seconds_since(t0);
  o.check(dt < 1.0, "shape inference took " + std::to_string(dt) + " s");
}

// ------------------------------------------------------------------ 2

void trends(Outcome& o) {
  for (auto conv : {analysis::Convention::FLOPs, analysis::Convention::MACs}) {
    const std::string tag = analysis::to_string(conv) + ": ";
    auto cost = [&](const ArchConfig& c) {
      analysis::CostOptions opt;
      opt.convention = conv;
      return static_cast<double>(
          analysis::count_costs(build_graph(c), 1024, 2048, opt).totals.flops);
    };
    ArchConfig a2;
    a2.alpha = 2.0;
    const double ratio = cost(a2) / cost(ArchConfig{});
    o.detail << " " << tag << "alpha ratio " << ratio;
    o.check(ratio >= 3.6 && ratio <= 4.4, tag + "alpha ratio");

    double prev = 0;
    for (double l : {1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2}) {
      ArchConfig c;
      c.lambda = l;
      const double f = cost(c);
      o.check(f > prev, tag + "lambda order");
      prev = f;
    }
    prev = 0;
    for (int e : {1, 2, 4, 6, 8}) {
      ArchConfig c;
      c.expansion = e;
      const double f = cost(c);
      o.check(f > prev, tag + "expansion order");
      prev = f;
    }

    // Least-squares line through FLOPs(d); residual relative to each value.
    std::vector<double> d{1, 2, 3, 4}, f;
    for (double di : d) {
      ArchConfig c;
      c.depth = static_cast<int>(di);
      f.push_back(cost(c));
    }
    const double dm = 2.5, fm = (f[0] + f[1] + f[2] + f[3]) / 4;
    double sxy = 0, sxx = 0;
    for (int i = 0; i < 4; ++i) {
      sxy += (d[i] - dm) * (f[i] - fm);
      sxx += (d[i] - dm) * (d[i] - dm);
    }
    const double slope = sxy / sxx;
    double worst = 0;
    for (int i = 0; i < 4; ++i)
      worst = std::max(worst, std::abs(f[i] - (fm + slope * (d[i] - dm))) / f[i]);
    o.check(slope > 0 && worst <= 0.10, tag + "depth affine");

    ArchConfig sum, concat;
    sum.aggregation = Aggregation::Sum;
    concat.aggregation = Aggregation::Concat;
    o.check(cost(concat) > cost(ArchConfig{}) && cost(ArchConfig{}) > cost(sum),
            tag + "aggregation order");
  }
}

// ------------------------------------------------------------------ 3

Graph one_block(int c, const std::function<NodeId(GraphBuilder&, NodeId)>& f) {
  GraphBuilder b;
  const NodeId in = b.input(c);
  b.set_main_output(f(b, in));
  return std::move(b).build();
}

double block_error(const Graph& g, const Shape& in, std::uint64_t seed) {
  Weights<double> w;
  w.init(g, seed);
  std::vector<ParamTensor<double>*> params;
  for (auto& [k, p] : w.params) params.push_back(&p);
  const NodeId out = *g.main_output();
  return grad_check_detailed(
             [&](const Vs& xs) {
               return run_graph(g, w, xs[0], ops::BnMode::Train, {out})[out];
             },
             {oracle::random_tensor(in, seed + 1)}, params)
      .max_rel_error;
}

void gradients(Outcome& o) {
  constexpr double kTol = 1e-4;
  auto r = [](Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
    return oracle::random_tensor<double>(s, seed, lo, hi);
  };
  auto off_zero = [&](Shape s, std::uint64_t seed) {
    auto t = r(s, seed);
    for (auto& v : t.storage()) v += v >= 0 ? 0.05 : -0.05;
    return t;
  };
  const V* none = nullptr;
  RunningStats<double> train_stats(3), eval_stats(3);
  eval_stats.mean = {0.2, -0.3, 0.1};
  eval_stats.var = {1.5, 0.5, 2.0};
  const LabelMap labels = [] {
    LabelMap l(2, 4, 4);
    for (std::size_t i = 0; i < l.data.size(); ++i) l.data[i] = static_cast<int>(i % 4 == 3 ? 255 : i % 3);
    return l;
  }();
  train::TrainConfig ce_cfg;
  ce_cfg.ohem = false;

  struct Case {
    std::string name;
    DiffFn fn;
    std::vector<Tensor<double>> in;
  };
  const std::vector<Case> ops_cases = {
      {"conv", [](const Vs& x) { return ag::conv2d(x[0], x[1], &x[2], {1, 1, 1}); },
       {r({2, 3, 6, 6}, 1), r({4, 3, 3, 3}, 2), r({1, 4, 1, 1}, 3)}},
      {"conv_depthwise_s2", [&](const Vs& x) { return ag::conv2d(x[0], x[1], none, {2, 1, 4}); },
       {r({2, 4, 6, 6}, 4), r({4, 1, 3, 3}, 5)}},
      {"batchnorm_train",
       [&](const Vs& x) { return ag::batchnorm2d(x[0], x[1], x[2], train_stats, ops::BnMode::Train); },
       {r({2, 3, 4, 4}, 6, -2, 3), r({1, 3, 1, 1}, 7), r({1, 3, 1, 1}, 8)}},
      {"batchnorm_eval",
       [&](const Vs& x) { return ag::batchnorm2d(x[0], x[1], x[2], eval_stats, ops::BnMode::Eval); },
       {r({2, 3, 4, 4}, 9), r({1, 3, 1, 1}, 10), r({1, 3, 1, 1}, 11)}},
      {"relu", [](const Vs& x) { return ag::relu(x[0]); }, {off_zero({2, 3, 4, 4}, 12)}},
      {"sigmoid", [](const Vs& x) { return ag::sigmoid(x[0]); }, {r({2, 3, 4, 4}, 13, -4, 4)}},
      {"maxpool", [](const Vs& x) { return ag::maxpool2d(x[0], 3, 2, 1); }, {r({2, 2, 8, 8}, 14)}},
      {"avgpool", [](const Vs& x) { return ag::avgpool2d(x[0], 3, 2, 1); }, {r({2, 2, 8, 8}, 15)}},
      {"global_avgpool", [](const Vs& x) { return ag::global_avgpool(x[0]); }, {r({2, 3, 5, 4}, 16)}},
      {"upsample", [](const Vs& x) { return ag::upsample_bilinear(x[0], 4); }, {r({1, 2, 4, 4}, 17)}},
      {"resize", [](const Vs& x) { return ag::resize_bilinear(x[0], 7, 5); }, {r({2, 2, 4, 6}, 18)}},
      {"concat", [](const Vs& x) { return ag::concat_channels<double>({x[0], x[1]}); },
       {r({2, 2, 3, 3}, 19), r({2, 1, 3, 3}, 20)}},
      {"add_broadcast", [](const Vs& x) { return ag::add(x[0], x[1]); },
       {r({2, 3, 4, 4}, 21), r({2, 3, 1, 1}, 22)}},
      {"mul_broadcast", [](const Vs& x) { return ag::mul(x[0], x[1]); },
       {r({2, 3, 4, 4}, 23), r({2, 3, 1, 1}, 24)}},
      {"cross_entropy",
       [&](const Vs& x) { return train::head_loss(x[0], labels, ce_cfg, false); },
       {r({2, 3, 4, 4}, 25, -2, 2)}},
  };
  double worst_op = 0;
  for (const auto& c : ops_cases) {
    const double e = grad_check(c.fn, c.in);
    worst_op = std::max(worst_op, e);
    o.check(e <= kTol, c.name + " " + std::to_string(e));
  }

  namespace bl = blocks;
  const std::vector<std::pair<std::string, double>> block_errs = {
      {"stem", block_error(one_block(3, [](GraphBuilder& b, NodeId x) {
                             return bl::stem_block(b, x, 8, "stem");
                           }),
                           {2, 3, 16, 16}, 30)},
      {"ge_s1", block_error(one_block(4, [](GraphBuilder& b, NodeId x) {
                              return bl::ge_layer_s1(b, x, 2, "ge");
                            }),
                            {2, 4, 8, 8}, 31)},
      {"ge_s2", block_error(one_block(4, [](GraphBuilder& b, NodeId x) {
                              return bl::ge_layer_s2(b, x, 8, 2, "ge");
                            }),
                            {2, 4, 8, 8}, 32)},
      {"context_embedding", block_error(one_block(8, [](GraphBuilder& b, NodeId x) {
                                          return bl::context_embedding(b, x, "ce");
                                        }),
                                        {2, 8, 4, 4}, 33)},
      {"bga", block_error(one_block(8, [](GraphBuilder& b, NodeId x) {
                            return bl::bga_layer(b, x, b.avgpool(x, 4, 4, 0, "down"), "bga");
                          }),
                          {2, 8, 16, 16}, 34)},
      {"seg_head", block_error(one_block(8, [](GraphBuilder& b, NodeId x) {
                                 return bl::seg_head(b, x, 8, 3, 4, "head");
                               }),
                               {2, 8, 4, 4}, 35)},
  };
  double worst_block = 0;
  for (const auto& [name, e] : block_errs) {
    worst_block = std::max(worst_block, e);
    o.check(e <= kTol, name + " " + std::to_string(e));
  }

  // Whole network, every head, loss gradient over the input and sampled weights.
  ArchConfig cfg;
  cfg.alpha = 1.0 / 16;
  cfg.ct_main = 128;
  cfg.ct_aux = 128;
  cfg.num_classes = 3;
  cfg.input_h = 32;
  cfg.input_w = 64;
  auto net = make_network<double>(cfg, 3);
  // Stage outputs and head widths; GE expansion layers stay at 6x by design.
  int widest = 0;
  for (const auto& [tap, id] : net.graph->taps())
    if (tap != "logits") widest = std::max(widest, net.graph->node(id).channels);
  for (const auto& n : net.graph->nodes())
    if (n.name.rfind("head.", 0) == 0) widest = std::max(widest, n.channels);
  o.check(widest <= 8, "tiny network width " + std::to_string(widest));
  std::vector<NodeId> heads{*net.graph->main_output()};
  for (const auto& h : net.graph->aux_heads()) heads.push_back(h.output);
  LabelMap y(2, 32, 64);
  train::Rng rng(5);
  for (auto& v : y.data) v = rng.below(3);
  std::vector<ParamTensor<double>*> params;
  for (auto& [k, p] : net.weights.params) params.push_back(&p);
  GradCheckOptions opt;
  opt.max_coords = 6;
  const auto e2e = grad_check_detailed(
      [&](const Vs& x) {
        const auto vals = run_graph(*net.graph, net.weights, x[0], ops::BnMode::Train, heads);
        std::vector<V> outs;
        for (NodeId h : heads) outs.push_back(vals[h]);
        return train::total_loss(outs, y, ce_cfg);
      },
      {r({2, 3, 32, 64}, 40, 0, 1)}, params, opt);
  o.check(e2e.max_rel_error <= 1e-3, "end-to-end " + std::to_string(e2e.max_rel_error));
  o.detail << " ops " << worst_op << ", blocks " << worst_block << ", end-to-end "
           << e2e.max_rel_error << " over " << e2e.coords_checked << " coords";
}

// ------------------------------------------------------------------ 4

void oracles(Outcome& o) {
  train::Rng rng(2024);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const bool dw = i % 2 == 1;
    const int cin = 1 + rng.below(6);
    const int cout = dw ? cin : 1 + rng.below(6);
    const int k = 1 + 2 * rng.below(3);
    const int stride = 1 + rng.below(2);
    const Shape xs{1 + rng.below(2), cin, k + rng.below(9), k + rng.below(9)};
    const ConvGeometry geo{stride, k / 2, dw ? cin : 1};
    const auto x = oracle::random_tensor<double>(xs, 100 + i);
    const auto w = oracle::random_tensor<double>({cout, cin / geo.groups, k, k}, 200 + i);
    const auto b = oracle::random_tensor<double>({1, cout, 1, 1}, 300 + i);
    const auto got = ops::conv2d(x, w, &b, geo);
    const auto want = oracle::conv2d(x, w, &b.storage(), geo.stride, geo.pad, geo.groups);
    if (got.shape() != want.shape()) {
      o.check(false, "conv shape case " + std::to_string(i));
      continue;
    }
    for (std::size_t j = 0; j < got.size(); ++j) worst = std::max(worst, std::abs(got[j] - want[j]));
  }
  o.check(worst <= 1e-6, "conv max error " + std::to_string(worst));

  std::vector<ArchConfig> cfgs(5);
  cfgs[1].aggregation = Aggregation::Concat;
  cfgs[2].aggregation = Aggregation::Sum;
  cfgs[3].alpha = 1.5;
  cfgs[3].depth = 2;
  cfgs[4].lambda = 0.125;
  cfgs[4].expansion = 4;
  for (const auto& c : cfgs) {
    const Graph g = attach_boosters(build_graph(c), c, c.boosters);
    for (bool head : {true, false}) {
      analysis::CostOptions opt;
      opt.convention = analysis::Convention::MACs;
      opt.include_head = head;
      const auto got = analysis::count_costs(g, 512, 1024, opt);
      const auto want = oracle::cost_oracle(g, 512, 1024, head);
      o.check(got.totals.macs == want.macs, "MACs " + to_string(c.aggregation));
      opt.convention = analysis::Convention::FLOPs;
      const auto flops = analysis::count_costs(g, 512, 1024, opt);
      o.check(flops.totals.flops >= 2 * want.macs + want.conv_bias_outputs, "FLOPs lower bound");
    }
    const Graph plain = build_graph(c);
    o.check(analysis::count_params(plain) == oracle::cost_oracle(plain, 512, 1024).params,
            "params");
  }
  o.detail << " conv max error " << worst;
}

// ------------------------------------------------------------------ 5

void neutrality(Outcome& o) {
  for (double alpha : {0.125, 1.0}) {
    ArchConfig with;
    with.alpha = alpha;
    with.input_h = 64;
    with.input_w = 128;
    ArchConfig without = with;
    without.boosters.clear();
    auto a = make_network<float>(with, 17);
    auto b = make_network<float>(without, 17);
    o.check(a.graph->aux_heads().size() == 4 && b.graph->aux_heads().empty(), "head counts");
    const auto x = oracle::random_tensor<float>({2, 3, 64, 128}, 18, 0, 1);
    o.check(main_logits(a, x) == main_logits(b, x), "logits differ at alpha " + std::to_string(alpha));
  }
}

// ------------------------------------------------------------------ 6

void ohem(Outcome& o) {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    train::Rng rng(seed);
    const int n = 1 + rng.below(2), c = 2 + rng.below(5), h = 2 + rng.below(8), w = 2 + rng.below(8);
    const auto logits = oracle::random_tensor<double>({n, c, h, w}, seed, -5, 5);
    LabelMap labels(n, h, w);
    for (auto& v : labels.data) v = rng.uniform() < 0.1 ? 255 : rng.below(c);
    const auto ce = train::cross_entropy(logits, labels, 255);
    const auto full = train::ohem_cross_entropy(logits, labels, 255, 1.0, 0);
    worst = std::max(worst, std::abs(ce.loss - full.loss));
    const double thr = rng.uniform(0.05, 0.95);
    const int min_kept = rng.below(n * h * w + 4);
    o.check(train::ohem_selection(logits, labels, 255, thr, min_kept) ==
                oracle::ohem_sorted(logits, labels, 255, thr, min_kept),
            "selection seed " + std::to_string(seed));
  }
  o.check(worst <= 1e-7, "threshold-1 loss error " + std::to_string(worst));
  o.detail << " threshold-1 max error " << worst;
}

// ------------------------------------------------------------------ 7-9

struct ToyRun {
  Network<float> net;
  std::vector<train::HistoryRow> history;
  double accuracy = 0;
};

ArchConfig toy_arch(Aggregation agg) {
  ArchConfig a;
  a.alpha = 0.125;
  a.num_classes = 3;
  a.input_h = 64;
  a.input_w = 64;
  a.aggregation = agg;
  return a;
}

ToyRun toy_run(Aggregation agg) {
  const train::TrainConfig tc;  // batch 4, 300 iterations, 64x64 crops
  ToyRun r{make_network<float>(toy_arch(agg), tc.seed), {}, 0};
  const auto data = train::synth_dataset(tc.seed, tc.dataset_size, 3, tc.crop_h, tc.crop_w);
  r.history = train::train_loop(r.net, data, tc);
  const auto held = train::synth_dataset(tc.seed + 0x5EED, 20, 3, tc.crop_h, tc.crop_w);
  r.accuracy = train::pixel_accuracy(r.net, held, tc.ignore_index);
  return r;
}

std::vector<double> window_means(const std::vector<train::HistoryRow>& h, std::size_t win) {
  std::vector<double> out;
  for (std::size_t s = 0; s + win <= h.size(); s += win) {
    double m = 0;
    for (std::size_t i = s; i < s + win; ++i) m += h[i].loss;
    out.push_back(m / win);
  }
  return out;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    if (!fs::exists(b / rel) || file_bytes(e.path()) != file_bytes(b / rel)) return false;
    ++n;
  }
  std::size_t m = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) m += e.is_regular_file() ? 1 : 0;
  return n == m && n > 0;
}

const fs::path kWork = fs::temp_directory_path() / "bisenet_acceptance";

std::optional<ToyRun> g_bga;

void toy_training(Outcome& o) {
  ToyRun a = toy_run(Aggregation::BGA);
  ToyRun b = toy_run(Aggregation::BGA);
  const auto means = window_means(a.history, 50);
  o.detail << " window means";
  for (double m : means) o.detail << " " << m;
  o.detail << ", held-out accuracy " << a.accuracy;
  o.check(a.history.size() == 300, "iterations");
  o.check(means.size() == 6, "window count");
  for (std::size_t i = 1; i < means.size(); ++i)
    o.check(means[i] < means[i - 1], "window " + std::to_string(i) + " not below previous");
  o.check(a.accuracy >= 0.9, "held-out accuracy");
  save_checkpoint(a.net, kWork / "run_a");
  save_checkpoint(b.net, kWork / "run_b");
  o.check(same_tree(kWork / "run_a", kWork / "run_b"), "checkpoints differ between runs");
  g_bga = std::move(a);
}

void aggregation_variants(Outcome& o) {
  for (auto agg : {Aggregation::Sum, Aggregation::Concat, Aggregation::BGA}) {
    // The BGA run of the previous criterion is reused when available.
    const ToyRun run = agg == Aggregation::BGA && g_bga ? *g_bga : toy_run(agg);
    bool finite = run.history.size() == 300;
    for (const auto& h : run.history) finite = finite && std::isfinite(h.loss);
    o.check(finite, to_string(agg) + " losses");
    o.detail << " " << to_string(agg) << " final " << run.history.back().loss << " acc "
             << run.accuracy;
  }
}

void checkpoint_roundtrip(Outcome& o) {
  Network<float> net = g_bga ? g_bga->net : make_network<float>(toy_arch(Aggregation::BGA), 1);
  const fs::path dir = kWork / "roundtrip";
  save_checkpoint(net, dir);
  auto loaded = load_checkpoint<float>(dir);
  const auto img = oracle::random_tensor<float>({1, 3, 96, 80}, 77, 0, 1);
  const auto r1 = forward_inference(net, img);
  const auto r2 = forward_inference(loaded, img);
  bt2::save(kWork / "logits_a.bt2", r1.logits);
  bt2::save(kWork / "logits_b.bt2", r2.logits);
  o.check(file_bytes(kWork / "logits_a.bt2") == file_bytes(kWork / "logits_b.bt2"),
          "logits dumps differ");
  o.check(r1.labels == r2.labels, "labels differ");
}

}  // namespace

int main() {
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  int failed = 0;
  failed += report(1, "shape oracle", shapes);
  failed += report(2, "cost trends", trends);
  failed += report(3, "gradient checks", gradients);
  failed += report(4, "oracle equivalence", oracles);
  failed += report(5, "booster neutrality", neutrality);
  failed += report(6, "OHEM degeneration", ohem);
  failed += report(7, "toy training", toy_training);
  failed += report(8, "aggregation variants train", aggregation_variants);
  failed += report(9, "checkpoint round trip", checkpoint_roundtrip);
  std::printf("%d of 9 criteria failed\n", failed);
  fs::remove_all(kWork);
  return failed == 0 ? 0 : 1;
}
