#pragma once

// Layer graph: an immutable DAG of typed nodes. Nodes are stored in
// topological order (every input id is smaller than the node's own id), carry
// their hyperparameters and the names of the parameters they read, and know
// nothing about element type or spatial size. Spatial shapes are resolved on
// demand for a concrete input size.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bisenet/tensor.hpp"

namespace bisenet {

using NodeId = int;

enum class LayerKind {
  Input,
  Conv,
  BatchNorm,
  ReLU,
  Sigmoid,
  MaxPool,
  AvgPool,
  GlobalAvgPool,
  Upsample,
  Concat,
  Add,
  Mul,
};

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view s);

struct LayerNode {
  NodeId id = 0;
  LayerKind kind = LayerKind::Input;
  std::string name;
  std::vector<NodeId> inputs;
  int channels = 0;  // output channels

  // Conv / pooling geometry.
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  int groups = 1;
  // Upsample factor.
  int scale = 1;

  // Parameter and buffer names in the registry.
  std::string weight;
  std::string bias;
  std::string gamma;
  std::string beta;
  std::string stats;
};

enum class ParamInit { KaimingNormal, Zeros, Ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  bool decay_exempt = false;
  ParamInit init = ParamInit::Zeros;
  int fan_in = 1;
};

struct BufferSpec {
  std::string name;
  int channels = 0;
};

/// Auxiliary (booster) head hung off a named tap.
struct AuxHead {
  std::string position;
  NodeId output = -1;
  int scale = 1;
};

class Graph {
 public:
  const std::vector<LayerNode>& nodes() const { return nodes_; }
  const LayerNode& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<ParamSpec>& params() const { return params_; }
  const std::vector<BufferSpec>& buffers() const { return buffers_; }
  const std::map<std::string, NodeId>& taps() const { return taps_; }
  NodeId tap(const std::string& name) const;
  bool has_tap(const std::string& name) const { return taps_.count(name) != 0; }
  NodeId input() const { return input_; }
  int in_channels() const { return nodes_.at(input_).channels; }
  std::optional<NodeId> main_output() const { return main_; }
  const std::vector<AuxHead>& aux_heads() const { return aux_; }

  /// Spatial shapes of every node for an (n, in_channels, h, w) input.
  /// Throws ConfigError naming the first node whose shape cannot be formed.
  std::vector<Shape> infer_shapes(const Shape& input) const;

  /// Marks every node needed to compute `outputs`.
  std::vector<bool> ancestors(const std::vector<NodeId>& outputs) const;

  /// One line per node; stable textual form of the topology.
  std::string topology() const;

 private:
  friend class GraphBuilder;
  std::vector<LayerNode> nodes_;
  std::vector<ParamSpec> params_;
  std::vector<BufferSpec> buffers_;
  std::map<std::string, NodeId> taps_;
  NodeId input_ = -1;
  std::optional<NodeId> main_;
  std::vector<AuxHead> aux_;
};

/// Appends nodes and registers their parameters. Names must be unique.
class GraphBuilder {
 public:
  GraphBuilder() = default;
  /// Continues building on top of an existing graph.
  explicit GraphBuilder(Graph base) : g_(std::move(base)) {}

  NodeId input(int channels, std::string name = "input");
  NodeId conv(NodeId x, int out_channels, int kernel, int stride, int groups,
              bool bias, const std::string& name);
  NodeId batchnorm(NodeId x, const std::string& name);
  NodeId relu(NodeId x, const std::string& name);
  NodeId sigmoid(NodeId x, const std::string& name);
  NodeId maxpool(NodeId x, int kernel, int stride, int pad,
                 const std::string& name);
  NodeId avgpool(NodeId x, int kernel, int stride, int pad,
                 const std::string& name);
  NodeId global_avgpool(NodeId x, const std::string& name);
  NodeId upsample(NodeId x, int scale, const std::string& name);
  NodeId concat(const std::vector<NodeId>& xs, const std::string& name);
  NodeId add(NodeId x, NodeId y, const std::string& name);
  NodeId mul(NodeId x, NodeId y, const std::string& name);

  int channels(NodeId id) const { return g_.nodes_.at(id).channels; }
  const Graph& graph() const { return g_; }

  void tap(const std::string& name, NodeId id);
  void set_main_output(NodeId id);
  void add_aux_head(AuxHead head);

  Graph build() &&;

 private:
  NodeId push(LayerNode node);
  void add_param(ParamSpec spec);
  Graph g_;
};

}  // namespace bisenet
