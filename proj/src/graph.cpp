#include "bisenet/graph.hpp"

#include <array>
#include <set>
#include <sstream>

#include "bisenet/kernels.hpp"
#include "bisenet/ops.hpp"

namespace bisenet {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 12> kKindNames{{
    {LayerKind::Input, "input"},
    {LayerKind::Conv, "conv"},
    {LayerKind::BatchNorm, "batchnorm"},
    {LayerKind::ReLU, "relu"},
    {LayerKind::Sigmoid, "sigmoid"},
    {LayerKind::MaxPool, "maxpool"},
    {LayerKind::AvgPool, "avgpool"},
    {LayerKind::GlobalAvgPool, "gap"},
    {LayerKind::Upsample, "upsample"},
    {LayerKind::Concat, "concat"},
    {LayerKind::Add, "add"},
    {LayerKind::Mul, "mul"},
}};

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "?";
}

LayerKind layer_kind_from_string(std::string_view s) {
  for (const auto& [k, name] : kKindNames)
    if (name == s) return k;
  throw ConfigError("unknown layer kind '" + std::string(s) + "'");
}

NodeId Graph::tap(const std::string& name) const {
  auto it = taps_.find(name);
  if (it == taps_.end()) throw ConfigError("unknown tap '" + name + "'");
  return it->second;
}

std::vector<Shape> Graph::infer_shapes(const Shape& input) const {
  std::vector<Shape> shapes(nodes_.size());
  for (const LayerNode& n : nodes_) {
    try {
      auto in = [&](std::size_t i) { return shapes.at(n.inputs.at(i)); };
      switch (n.kind) {
        case LayerKind::Input:
          if (input.c != n.channels) {
            throw ConfigError("expected " + std::to_string(n.channels) +
                              " input channels, got " + to_string(input));
          }
          if (!input.valid()) throw ConfigError("invalid input " + to_string(input));
          shapes[n.id] = input;
          break;
        case LayerKind::Conv: {
          const Shape x = in(0);
          const Shape w{n.channels, x.c / n.groups, n.kernel, n.kernel};
          shapes[n.id] = conv2d_output_shape(
              x, w, ConvGeometry{n.stride, n.pad, n.groups});
          break;
        }
        case LayerKind::BatchNorm:
        case LayerKind::ReLU:
        case LayerKind::Sigmoid:
          shapes[n.id] = in(0);
          break;
        case LayerKind::MaxPool:
        case LayerKind::AvgPool:
          shapes[n.id] = pool_output_shape(in(0), n.kernel, n.stride, n.pad);
          break;
        case LayerKind::GlobalAvgPool: {
          const Shape x = in(0);
          shapes[n.id] = {x.n, x.c, 1, 1};
          break;
        }
        case LayerKind::Upsample: {
          const Shape x = in(0);
          shapes[n.id] = {x.n, x.c, x.h * n.scale, x.w * n.scale};
          break;
        }
        case LayerKind::Concat: {
          Shape out = in(0);
          out.c = 0;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const Shape s = in(i);
            if (s.n != out.n || s.h != out.h || s.w != out.w) {
              throw ConfigError("concat: incompatible shapes " +
                                to_string(in(0)) + " and " + to_string(s));
            }
            out.c += s.c;
          }
          shapes[n.id] = out;
          break;
        }
        case LayerKind::Add:
        case LayerKind::Mul: {
          const Shape a = in(0);
          const Shape b = in(1);
          if (ops::broadcastable(a, b)) {
            shapes[n.id] = a;
          } else if (ops::broadcastable(b, a)) {
            shapes[n.id] = b;
          } else {
            throw ConfigError(std::string(to_string(n.kind)) +
                              ": incompatible shapes " + to_string(a) +
                              " and " + to_string(b));
          }
          break;
        }
      }
    } catch (const ConfigError& e) {
      throw ConfigError("node '" + n.name + "': " + e.what());
    }
  }
  return shapes;
}

std::vector<bool> Graph::ancestors(const std::vector<NodeId>& outputs) const {
  std::vector<bool> keep(nodes_.size(), false);
  for (NodeId o : outputs) keep.at(o) = true;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!keep[it->id]) continue;
    for (NodeId p : it->inputs) keep[p] = true;
  }
  return keep;
}

std::string Graph::topology() const {
  std::ostringstream os;
  for (const LayerNode& n : nodes_) {
    os << n.id << ' ' << to_string(n.kind) << ' ' << n.name << " in=";
    for (std::size_t i = 0; i < n.inputs.size(); ++i)
      os << (i ? "," : "") << n.inputs[i];
    os << " c=" << n.channels;
    if (n.kind == LayerKind::Conv || n.kind == LayerKind::MaxPool ||
        n.kind == LayerKind::AvgPool) {
      os << " k=" << n.kernel << " s=" << n.stride << " p=" << n.pad;
    }
    if (n.kind == LayerKind::Conv) {
      os << " g=" << n.groups << " bias=" << (n.bias.empty() ? 0 : 1);
    }
    if (n.kind == LayerKind::Upsample) os << " x" << n.scale;
    os << '\n';
  }
  for (const auto& [name, id] : taps_) os << "tap " << name << ' ' << id << '\n';
  if (main_) os << "main " << *main_ << '\n';
  for (const AuxHead& a : aux_)
    os << "aux " << a.position << ' ' << a.output << " x" << a.scale << '\n';
  return os.str();
}

NodeId GraphBuilder::push(LayerNode node) {
  for (NodeId i : node.inputs) {
    if (i < 0 || i >= static_cast<NodeId>(g_.nodes_.size())) {
      throw ConfigError("node '" + node.name + "' references unknown input " +
                        std::to_string(i));
    }
  }
  for (const LayerNode& n : g_.nodes_) {
    if (n.name == node.name) {
      throw ConfigError("duplicate node name '" + node.name + "'");
    }
  }
  node.id = static_cast<NodeId>(g_.nodes_.size());
  g_.nodes_.push_back(std::move(node));
  return g_.nodes_.back().id;
}

void GraphBuilder::add_param(ParamSpec spec) { g_.params_.push_back(std::move(spec)); }

NodeId GraphBuilder::input(int channels, std::string name) {
  if (g_.input_ >= 0) throw ConfigError("graph already has an input");
  if (channels < 1) throw ConfigError("input channels must be >= 1");
  LayerNode n;
  n.kind = LayerKind::Input;
  n.name = std::move(name);
  n.channels = channels;
  g_.input_ = push(std::move(n));
  return g_.input_;
}

NodeId GraphBuilder::conv(NodeId x, int out_channels, int kernel, int stride,
                          int groups, bool bias, const std::string& name) {
  const int c_in = channels(x);
  if (out_channels < 1 || kernel < 1 || stride < 1 || groups < 1) {
    throw ConfigError("conv '" + name + "': invalid hyperparameters");
  }
  if (c_in % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv '" + name + "': channels " + std::to_string(c_in) +
                      "->" + std::to_string(out_channels) +
                      " not divisible by groups " + std::to_string(groups));
  }
  LayerNode n;
  n.kind = LayerKind::Conv;
  n.name = name;
  n.inputs = {x};
  n.channels = out_channels;
  n.kernel = kernel;
  n.stride = stride;
  n.pad = kernel / 2;
  n.groups = groups;
  n.weight = name + ".weight";
  const int fan_in = c_in / groups * kernel * kernel;
  add_param({n.weight, {out_channels, c_in / groups, kernel, kernel}, false,
             ParamInit::KaimingNormal, fan_in});
  if (bias) {
    n.bias = name + ".bias";
    add_param({n.bias, {1, out_channels, 1, 1}, true, ParamInit::Zeros, fan_in});
  }
  return push(std::move(n));
}

NodeId GraphBuilder::batchnorm(NodeId x, const std::string& name) {
  LayerNode n;
  n.kind = LayerKind::BatchNorm;
  n.name = name;
  n.inputs = {x};
  n.channels = channels(x);
  n.gamma = name + ".gamma";
  n.beta = name + ".beta";
  n.stats = name + ".running";
  add_param({n.gamma, {1, n.channels, 1, 1}, true, ParamInit::Ones, 1});
  add_param({n.beta, {1, n.channels, 1, 1}, true, ParamInit::Zeros, 1});
  g_.buffers_.push_back({n.stats, n.channels});
  return push(std::move(n));
}

namespace {
LayerNode unary(LayerKind kind, NodeId x, int channels, const std::string& name) {
  LayerNode n;
  n.kind = kind;
  n.name = name;
  n.inputs = {x};
  n.channels = channels;
  return n;
}
}  // namespace

NodeId GraphBuilder::relu(NodeId x, const std::string& name) {
  return push(unary(LayerKind::ReLU, x, channels(x), name));
}

NodeId GraphBuilder::sigmoid(NodeId x, const std::string& name) {
  return push(unary(LayerKind::Sigmoid, x, channels(x), name));
}

NodeId GraphBuilder::maxpool(NodeId x, int kernel, int stride, int pad,
                             const std::string& name) {
  LayerNode n = unary(LayerKind::MaxPool, x, channels(x), name);
  n.kernel = kernel;
  n.stride = stride;
  n.pad = pad;
  return push(std::move(n));
}

NodeId GraphBuilder::avgpool(NodeId x, int kernel, int stride, int pad,
                             const std::string& name) {
  LayerNode n = unary(LayerKind::AvgPool, x, channels(x), name);
  n.kernel = kernel;
  n.stride = stride;
  n.pad = pad;
  return push(std::move(n));
}

NodeId GraphBuilder::global_avgpool(NodeId x, const std::string& name) {
  return push(unary(LayerKind::GlobalAvgPool, x, channels(x), name));
}

NodeId GraphBuilder::upsample(NodeId x, int scale, const std::string& name) {
  if (scale < 1) throw ConfigError("upsample '" + name + "': scale must be >= 1");
  LayerNode n = unary(LayerKind::Upsample, x, channels(x), name);
  n.scale = scale;
  return push(std::move(n));
}

NodeId GraphBuilder::concat(const std::vector<NodeId>& xs,
                            const std::string& name) {
  if (xs.empty()) throw ConfigError("concat '" + name + "': no inputs");
  LayerNode n;
  n.kind = LayerKind::Concat;
  n.name = name;
  n.inputs = xs;
  for (NodeId x : xs) n.channels += channels(x);
  return push(std::move(n));
}

NodeId GraphBuilder::add(NodeId x, NodeId y, const std::string& name) {
  LayerNode n;
  n.kind = LayerKind::Add;
  n.name = name;
  n.inputs = {x, y};
  if (channels(x) != channels(y)) {
    throw ConfigError("add '" + name + "': channel mismatch " +
                      std::to_string(channels(x)) + " vs " +
                      std::to_string(channels(y)));
  }
  n.channels = channels(x);
  return push(std::move(n));
}

NodeId GraphBuilder::mul(NodeId x, NodeId y, const std::string& name) {
  LayerNode n;
  n.kind = LayerKind::Mul;
  n.name = name;
  n.inputs = {x, y};
  if (channels(x) != channels(y)) {
    throw ConfigError("mul '" + name + "': channel mismatch " +
                      std::to_string(channels(x)) + " vs " +
                      std::to_string(channels(y)));
  }
  n.channels = channels(x);
  return push(std::move(n));
}

void GraphBuilder::tap(const std::string& name, NodeId id) {
  if (!g_.taps_.emplace(name, id).second) {
    throw ConfigError("duplicate tap '" + name + "'");
  }
}

void GraphBuilder::set_main_output(NodeId id) { g_.main_ = id; }

void GraphBuilder::add_aux_head(AuxHead head) {
  for (const AuxHead& a : g_.aux_) {
    if (a.position == head.position) {
      throw ConfigError("duplicate booster position '" + head.position + "'");
    }
  }
  g_.aux_.push_back(std::move(head));
}

Graph GraphBuilder::build() && {
  if (g_.input_ < 0) throw ConfigError("graph has no input node");
  return std::move(g_);
}

}  // namespace bisenet
