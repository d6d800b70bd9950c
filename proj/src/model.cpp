#include "bisenet/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "bisenet/bt2.hpp"
#include "bisenet/text_util.hpp"

namespace bisenet {

namespace {

const std::vector<std::pair<Aggregation, std::string>> kAggNames{
    {Aggregation::Sum, "sum"},
    {Aggregation::Concat, "concat"},
    {Aggregation::BGA, "bga"},
    {Aggregation::DetailOnly, "detail_only"},
    {Aggregation::SemanticOnly, "semantic_only"},
};

int booster_scale(const std::string& position) {
  if (position == "stage2") return 4;
  if (position == "stage3") return 8;
  if (position == "stage4") return 16;
  if (position == "stage5_4" || position == "stage5_5") return 32;
  throw ConfigError("unknown booster position '" + position + "'");
}

bool uses_semantic(const ArchConfig& cfg) {
  return cfg.aggregation != Aggregation::DetailOnly;
}

}  // namespace

std::string to_string(Aggregation a) {
  for (const auto& [k, name] : kAggNames)
    if (k == a) return name;
  return "?";
}

Aggregation aggregation_from_string(const std::string& s) {
  for (const auto& [k, name] : kAggNames)
    if (name == s) return k;
  throw ConfigError("unknown aggregation '" + s +
                    "' (expected sum, concat, bga, detail_only, semantic_only)");
}

int round8(double x) {
  const int r = static_cast<int>(std::lround(x / 8.0)) * 8;
  return std::max(r, 8);
}

int round4(double x) {
  const int r = static_cast<int>(std::lround(x / 4.0)) * 4;
  return std::max(r, 4);
}

void ArchConfig::validate() const {
  if (!(lambda > 0 && lambda <= 1)) {
    throw ConfigError("lambda must lie in (0, 1], got " + text::format_double(lambda));
  }
  if (expansion < 1) throw ConfigError("expansion must be >= 1");
  if (!(alpha > 0)) throw ConfigError("alpha must be > 0");
  if (depth < 1) throw ConfigError("depth must be >= 1");
  for (int c : detail_channels)
    if (c < 1) throw ConfigError("detail channels must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (ct_main < 1) throw ConfigError("ct_main must be >= 1");
  if (ct_aux < 0) throw ConfigError("ct_aux must be >= 0");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (input_h % 32 != 0 || input_w % 32 != 0 || input_h < 32 || input_w < 32) {
    throw ConfigError("input size " + std::to_string(input_h) + "x" +
                      std::to_string(input_w) +
                      " must be a positive multiple of 32 in both dimensions");
  }
  if (ge_gather_kernel != 1 && ge_gather_kernel != 3) {
    throw ConfigError("ge_gather_kernel must be 1 or 3");
  }
  std::vector<std::string> seen;
  for (const auto& p : boosters) {
    booster_scale(p);
    if (std::find(seen.begin(), seen.end(), p) != seen.end()) {
      throw ConfigError("duplicate booster position '" + p + "'");
    }
    seen.push_back(p);
  }
  if (!boosters.empty() && !uses_semantic(*this)) {
    throw ConfigError("booster heads need the semantic branch");
  }
}

int ArchConfig::detail_width(int stage) const {
  return round8(alpha * detail_channels.at(stage - 1));
}

int ArchConfig::stem_width() const {
  return round4(lambda * alpha * detail_channels[0]);
}

int ArchConfig::semantic_width(int stage) const {
  switch (stage) {
    case 3:
      return round8(lambda * alpha * detail_channels[2]);
    case 4:
      return round8(alpha * 64);
    case 5:
      return round8(alpha * 128);
  }
  throw ConfigError("semantic stage must be 3, 4 or 5");
}

int ArchConfig::main_head_width() const { return round8(alpha * ct_main); }

int ArchConfig::aux_head_width(int tap_channels) const {
  return ct_aux > 0 ? round8(alpha * ct_aux) : 4 * tap_channels;
}

int ArchConfig::ge_repeats(int stage) const {
  switch (stage) {
    case 3:
    case 4:
      return depth;
    case 5:
      return 3 * depth;
  }
  throw ConfigError("semantic stage must be 3, 4 or 5");
}

std::vector<std::pair<std::string, std::string>> arch_to_pairs(
    const ArchConfig& c) {
  std::string boosters;
  for (std::size_t i = 0; i < c.boosters.size(); ++i)
    boosters += (i ? "," : "") + c.boosters[i];
  if (boosters.empty()) boosters = "none";
  return {
      {"lambda", text::format_double(c.lambda)},
      {"expansion", std::to_string(c.expansion)},
      {"alpha", text::format_double(c.alpha)},
      {"depth", std::to_string(c.depth)},
      {"detail_channels", std::to_string(c.detail_channels[0]) + "," +
                              std::to_string(c.detail_channels[1]) + "," +
                              std::to_string(c.detail_channels[2])},
      {"aggregation", to_string(c.aggregation)},
      {"boosters", boosters},
      {"num_classes", std::to_string(c.num_classes)},
      {"ct_main", std::to_string(c.ct_main)},
      {"ct_aux", std::to_string(c.ct_aux)},
      {"in_channels", std::to_string(c.in_channels)},
      {"input_hw", std::to_string(c.input_h) + "x" + std::to_string(c.input_w)},
      {"context_embedding", c.context_embedding ? "true" : "false"},
      {"ge_gather_kernel", std::to_string(c.ge_gather_kernel)},
      {"ge_double_dw", c.ge_double_dw ? "true" : "false"},
  };
}

bool apply_arch_key(ArchConfig& c, const std::string& key,
                    const std::string& value) {
  auto as_int = [&] { return static_cast<int>(text::parse_int(value)); };
  if (key == "lambda") {
    c.lambda = text::parse_double(value);
  } else if (key == "expansion") {
    c.expansion = as_int();
  } else if (key == "alpha") {
    c.alpha = text::parse_double(value);
  } else if (key == "depth") {
    c.depth = as_int();
  } else if (key == "detail_channels") {
    const auto parts = text::split(value, ',');
    if (parts.size() != 3) throw ConfigError("detail_channels needs three values");
    for (int i = 0; i < 3; ++i)
      c.detail_channels[i] = static_cast<int>(text::parse_int(parts[i]));
  } else if (key == "aggregation") {
    c.aggregation = aggregation_from_string(text::trim(value));
  } else if (key == "boosters") {
    c.boosters.clear();
    const std::string v = text::trim(value);
    if (!v.empty() && v != "none") {
      for (const auto& p : text::split(v, ',')) {
        booster_scale(p);
        c.boosters.push_back(p);
      }
    }
  } else if (key == "num_classes") {
    c.num_classes = as_int();
  } else if (key == "ct_main") {
    c.ct_main = as_int();
  } else if (key == "ct_aux") {
    c.ct_aux = as_int();
  } else if (key == "in_channels") {
    c.in_channels = as_int();
  } else if (key == "input_hw") {
    std::tie(c.input_h, c.input_w) = text::parse_hw(value);
  } else if (key == "context_embedding") {
    c.context_embedding = text::parse_bool(value);
  } else if (key == "ge_gather_kernel") {
    c.ge_gather_kernel = as_int();
  } else if (key == "ge_double_dw") {
    c.ge_double_dw = text::parse_bool(value);
  } else {
    return false;
  }
  return true;
}

std::uint64_t arch_hash(const ArchConfig& cfg) {
  std::string canon;
  for (const auto& [k, v] : arch_to_pairs(cfg)) canon += k + "=" + v + "\n";
  return fnv1a(canon);
}

NodeId build_detail_branch(GraphBuilder& b, NodeId input, const ArchConfig& cfg) {
  if (cfg.input_h % 8 != 0 || cfg.input_w % 8 != 0) {
    throw ConfigError("detail branch needs input divisible by 8");
  }
  NodeId x = input;
  const int repeats[3] = {1, 2, 2};
  for (int stage = 1; stage <= 3; ++stage) {
    const int c = cfg.detail_width(stage);
    const std::string prefix = "detail.s" + std::to_string(stage);
    x = blocks::conv_bn_relu(b, x, c, 3, 2, prefix + ".0");
    for (int r = 1; r <= repeats[stage - 1]; ++r)
      x = blocks::conv_bn_relu(b, x, c, 3, 1, prefix + "." + std::to_string(r));
    b.tap("detail_s" + std::to_string(stage), x);
  }
  b.tap("detail_out", x);
  return x;
}

NodeId build_semantic_branch(GraphBuilder& b, NodeId input,
                             const ArchConfig& cfg) {
  const int stem_c = cfg.stem_width();
  if (stem_c < 1) throw ConfigError("semantic stem width rounds below 1");
  blocks::GeOptions ge;
  ge.gather_kernel = cfg.ge_gather_kernel;
  ge.double_dw = cfg.ge_double_dw;

  NodeId x = blocks::stem_block(b, input, stem_c, "semantic.stem");
  b.tap("sem_stage2", x);
  for (int stage = 3; stage <= 5; ++stage) {
    const int c = cfg.semantic_width(stage);
    const std::string prefix = "semantic.s" + std::to_string(stage);
    x = blocks::ge_layer_s2(b, x, c, cfg.expansion, prefix + ".ge2", ge);
    for (int r = 0; r < cfg.ge_repeats(stage); ++r)
      x = blocks::ge_layer_s1(b, x, cfg.expansion,
                              prefix + ".ge1_" + std::to_string(r), ge);
    b.tap(stage == 5 ? "sem_stage5_4" : "sem_stage" + std::to_string(stage), x);
  }
  if (cfg.context_embedding) x = blocks::context_embedding(b, x, "semantic.ce");
  b.tap("sem_stage5_5", x);
  b.tap("semantic_out", x);
  return x;
}

Graph build_graph(const ArchConfig& cfg) {
  cfg.validate();
  GraphBuilder b;
  const NodeId in = b.input(cfg.in_channels);
  NodeId agg = -1;
  int head_scale = 8;
  switch (cfg.aggregation) {
    case Aggregation::DetailOnly:
      agg = build_detail_branch(b, in, cfg);
      break;
    case Aggregation::SemanticOnly:
      agg = build_semantic_branch(b, in, cfg);
      head_scale = 32;
      break;
    case Aggregation::BGA: {
      const NodeId d = build_detail_branch(b, in, cfg);
      const NodeId s = build_semantic_branch(b, in, cfg);
      agg = blocks::bga_layer(b, d, s, "agg.bga");
      break;
    }
    case Aggregation::Sum:
    case Aggregation::Concat: {
      const NodeId d = build_detail_branch(b, in, cfg);
      const NodeId s = build_semantic_branch(b, in, cfg);
      const int width = cfg.detail_width(3);
      const NodeId dp = blocks::separable_layer(b, d, width, "agg.detail_sep");
      NodeId sp = blocks::separable_layer(b, s, width, "agg.semantic_sep");
      sp = b.upsample(sp, 4, "agg.semantic_sep.upsample");
      agg = cfg.aggregation == Aggregation::Sum ? b.add(dp, sp, "agg.sum")
                                                : b.concat({dp, sp}, "agg.concat");
      break;
    }
  }
  b.tap("agg_out", agg);
  const NodeId logits = blocks::seg_head(b, agg, cfg.main_head_width(),
                                         cfg.num_classes, head_scale, "head.main");
  b.tap("logits", logits);
  b.set_main_output(logits);
  return std::move(b).build();
}

Graph attach_boosters(const Graph& g, const ArchConfig& cfg,
                      const std::vector<std::string>& positions) {
  GraphBuilder b(g);
  std::vector<std::string> seen;
  for (const std::string& pos : positions) {
    const int scale = booster_scale(pos);
    if (std::find(seen.begin(), seen.end(), pos) != seen.end()) {
      throw ConfigError("duplicate booster position '" + pos + "'");
    }
    seen.push_back(pos);
    const NodeId tap = g.tap("sem_" + pos);
    const NodeId out = blocks::seg_head(b, tap, cfg.aux_head_width(b.channels(tap)),
                                        cfg.num_classes, scale, "head.aux." + pos);
    b.add_aux_head({pos, out, scale});
  }
  return std::move(b).build();
}

template <typename T>
Network<T> build_bisenetv2(const ArchConfig& cfg) {
  ArchConfig base = cfg;
  base.boosters.clear();
  auto graph = std::make_shared<const Graph>(build_graph(base));
  Network<T> net{base, graph, Weights<T>::allocate(*graph), 0};
  return net;
}

template <typename T>
Network<T> attach_boosters(const Network<T>& net,
                           const std::vector<std::string>& positions) {
  Network<T> out = net;
  for (const auto& p : positions) out.cfg.boosters.push_back(p);
  out.cfg.validate();
  out.graph = std::make_shared<const Graph>(
      attach_boosters(*net.graph, out.cfg, positions));
  if (net.weights.initialized) {
    Weights<T> fresh;
    fresh.init(*out.graph, net.seed);
    for (auto& [k, v] : fresh.params) out.weights.params.emplace(k, std::move(v));
    for (auto& [k, v] : fresh.buffers) out.weights.buffers.emplace(k, std::move(v));
  } else {
    out.weights.extend(*out.graph);
  }
  return out;
}

template <typename T>
void init_network(Network<T>& net, std::uint64_t seed) {
  net.seed = seed;
  net.weights.init(*net.graph, seed);
}

template <typename T>
Network<T> make_network(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Network<T> net = build_bisenetv2<T>(cfg);
  init_network(net, seed);
  return attach_boosters(net, cfg.boosters);
}

template <typename T>
Tensor<T> main_logits(Network<T>& net, const Tensor<T>& input) {
  if (!net.weights.initialized) {
    throw StateError("network parameters are not initialized");
  }
  ag::NoGradGuard no_grad;
  const NodeId out = *net.graph->main_output();
  auto values = run_graph(*net.graph, net.weights, ag::Var<T>(input),
                          ops::BnMode::Eval, {out});
  return values[out].value();
}

template <typename T>
InferenceResult<T> forward_inference(Network<T>& net, const Tensor<T>& image) {
  if (!net.weights.initialized) {
    throw StateError("network parameters are not initialized");
  }
  const Shape s = image.shape();
  if (s.c != net.cfg.in_channels) {
    throw ConfigError("image has " + std::to_string(s.c) +
                      " channels, network expects " +
                      std::to_string(net.cfg.in_channels));
  }
  Tensor<T> input = (s.h == net.cfg.input_h && s.w == net.cfg.input_w)
                        ? image
                        : ops::resize_bilinear(image, net.cfg.input_h, net.cfg.input_w);
  InferenceResult<T> r;
  r.logits = main_logits(net, input);
  const LabelMap small = ops::argmax_channels(r.logits);
  r.labels = ops::resize_nearest(small, s.h, s.w);
  return r;
}

namespace {

constexpr const char* kManifestHeader = "bisenet-checkpoint 1";

std::string file_name(const std::string& name) { return name + ".bt2"; }

template <typename T>
Tensor<T> stats_tensor(const std::vector<T>& v) {
  return Tensor<T>({1, static_cast<int>(v.size()), 1, 1}, v);
}

}  // namespace

template <typename T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "params");
  fs::create_directories(dir / "buffers");
  std::ostringstream m;
  m << kManifestHeader << '\n';
  m << "dtype " << (bt2::dtype_of<T>() == bt2::DType::F32 ? "f32" : "f64") << '\n';
  m << "seed " << net.seed << '\n';
  m << "arch_hash " << text::hex64(arch_hash(net.cfg)) << '\n';
  m << "[arch]\n";
  for (const auto& [k, v] : arch_to_pairs(net.cfg)) m << k << '=' << v << '\n';
  m << "[topology]\n" << net.graph->topology();
  m << "[params]\n";
  for (const auto& [name, p] : net.weights.params) {
    const Shape s = p.value.shape();
    m << name << ' ' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ' '
      << (p.decay_exempt ? "exempt" : "decay") << '\n';
    bt2::save(dir / "params" / file_name(name), p.value);
  }
  m << "[buffers]\n";
  for (const auto& [name, b] : net.weights.buffers) {
    m << name << ' ' << b.mean.size() << '\n';
    bt2::save(dir / "buffers" / file_name(name + ".mean"), stats_tensor(b.mean));
    bt2::save(dir / "buffers" / file_name(name + ".var"), stats_tensor(b.var));
  }
  m << "[end]\n";
  std::ofstream os(dir / "manifest.txt", std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint manifest in '" + dir.string() + "'");
  os << m.str();
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& dir,
                           const ArchConfig* expected) {
  std::ifstream is(dir / "manifest.txt", std::ios::binary);
  if (!is) throw CheckpointMismatch("no manifest.txt in '" + dir.string() + "'");
  std::string line;
  std::getline(is, line);
  if (line != kManifestHeader) throw CheckpointMismatch("not a checkpoint manifest");

  std::string section;
  std::string hash;
  std::uint64_t seed = 0;
  ArchConfig cfg;
  std::string topology;
  std::vector<std::pair<std::string, Shape>> params;
  std::vector<std::pair<std::string, int>> buffers;
  while (std::getline(is, line)) {
    if (!line.empty() && line.front() == '[') {
      section = line;
      continue;
    }
    if (section.empty()) {
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "arch_hash") ls >> hash;
      if (key == "seed") ls >> seed;
    } else if (section == "[arch]") {
      const auto eq = line.find('=');
      if (eq == std::string::npos ||
          !apply_arch_key(cfg, line.substr(0, eq), line.substr(eq + 1))) {
        throw CheckpointMismatch("bad arch line '" + line + "'");
      }
    } else if (section == "[topology]") {
      topology += line + '\n';
    } else if (section == "[params]") {
      std::istringstream ls(line);
      std::string name, dims, exempt;
      ls >> name >> dims >> exempt;
      const auto d = text::split(dims, ',');
      if (d.size() != 4) throw CheckpointMismatch("bad param line '" + line + "'");
      params.push_back({name,
                        {static_cast<int>(text::parse_int(d[0])),
                         static_cast<int>(text::parse_int(d[1])),
                         static_cast<int>(text::parse_int(d[2])),
                         static_cast<int>(text::parse_int(d[3]))}});
    } else if (section == "[buffers]") {
      std::istringstream ls(line);
      std::string name;
      int c = 0;
      ls >> name >> c;
      buffers.push_back({name, c});
    }
  }

  if (hash != text::hex64(arch_hash(cfg))) {
    throw CheckpointMismatch("architecture hash " + hash +
                             " does not match recorded architecture " +
                             text::hex64(arch_hash(cfg)));
  }
  if (expected && arch_hash(*expected) != arch_hash(cfg)) {
    throw CheckpointMismatch("checkpoint architecture " + hash +
                             " differs from the requested one " +
                             text::hex64(arch_hash(*expected)));
  }

  Network<T> net = attach_boosters(build_bisenetv2<T>(cfg), cfg.boosters);
  net.seed = seed;
  if (net.graph->topology() != topology) {
    throw CheckpointMismatch("checkpoint topology differs from the rebuilt network");
  }
  if (params.size() != net.weights.params.size() ||
      buffers.size() != net.weights.buffers.size()) {
    throw CheckpointMismatch("checkpoint parameter registry size differs");
  }
  for (const auto& [name, shape] : params) {
    auto it = net.weights.params.find(name);
    if (it == net.weights.params.end()) {
      throw CheckpointMismatch("unexpected parameter '" + name + "'");
    }
    Tensor<T> v = bt2::load<T>(dir / "params" / file_name(name));
    if (v.shape() != shape || v.shape() != it->second.value.shape()) {
      throw CheckpointMismatch("parameter '" + name + "' has shape " +
                               to_string(v.shape()) + ", expected " +
                               to_string(it->second.value.shape()));
    }
    it->second.value = std::move(v);
  }
  for (const auto& [name, c] : buffers) {
    auto it = net.weights.buffers.find(name);
    if (it == net.weights.buffers.end() ||
        static_cast<int>(it->second.mean.size()) != c) {
      throw CheckpointMismatch("unexpected running statistics '" + name + "'");
    }
    const Tensor<T> mean = bt2::load<T>(dir / "buffers" / file_name(name + ".mean"));
    const Tensor<T> var = bt2::load<T>(dir / "buffers" / file_name(name + ".var"));
    if (mean.size() != static_cast<std::size_t>(c) || var.size() != static_cast<std::size_t>(c)) {
      throw CheckpointMismatch("running statistics '" + name + "' have the wrong size");
    }
    it->second.mean = mean.storage();
    it->second.var = var.storage();
    it->second.initialized = true;
  }
  net.weights.initialized = true;
  return net;
}

#define BISENET_INSTANTIATE(T)                                                 \
  template Network<T> build_bisenetv2<T>(const ArchConfig&);                   \
  template Network<T> attach_boosters<T>(const Network<T>&,                    \
                                         const std::vector<std::string>&);     \
  template Network<T> make_network<T>(const ArchConfig&, std::uint64_t);       \
  template void init_network<T>(Network<T>&, std::uint64_t);                   \
  template Tensor<T> main_logits<T>(Network<T>&, const Tensor<T>&);            \
  template InferenceResult<T> forward_inference<T>(Network<T>&,                \
                                                   const Tensor<T>&);          \
  template void save_checkpoint<T>(const Network<T>&,                          \
                                   const std::filesystem::path&);              \
  template Network<T> load_checkpoint<T>(const std::filesystem::path&,         \
                                         const ArchConfig*);

BISENET_INSTANTIATE(float)
BISENET_INSTANTIATE(double)
#undef BISENET_INSTANTIATE

}  // namespace bisenet
