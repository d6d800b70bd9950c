#pragma once

// Architectural blocks of the two-branch network, appended to a GraphBuilder
// as named subgraphs. Each function returns the id of the block's output node;
// `name` becomes the prefix of every node and parameter the block creates.

#include <string>

#include "bisenet/graph.hpp"

namespace bisenet::blocks {

enum class BlockKind { Stem, ContextEmbedding, GE1, GE2, BGA, SegHead };

/// Hyperparameters of one block instance.
struct BlockSpec {
  BlockKind kind = BlockKind::Stem;
  int c_in = 0;
  int c_out = 0;
  int expansion = 6;     // GE only
  int mid_channels = 0;  // SegHead only
  int classes = 0;       // SegHead only
  int scale = 8;         // SegHead only
};

/// Throws ConfigError when `spec` violates its kind's invariants.
void validate(const BlockSpec& spec);

/// Gather-and-expansion ablation knobs; defaults are the proposed design.
struct GeOptions {
  int gather_kernel = 3;    // 1 replaces the 3x3 gather conv by a 1x1
  bool double_dw = true;    // false: a single 5x5 depthwise conv when s=2
};

/// conv (no bias) -> BN
NodeId conv_bn(GraphBuilder& b, NodeId x, int c_out, int kernel, int stride,
               int groups, const std::string& name);
/// conv (no bias) -> BN -> ReLU
NodeId conv_bn_relu(GraphBuilder& b, NodeId x, int c_out, int kernel,
                    int stride, const std::string& name);

/// Two-way stride-4 entry block; `channels` must be even.
NodeId stem_block(GraphBuilder& b, NodeId x, int channels,
                  const std::string& name);

/// GAP -> BN -> 1x1 conv-BN-ReLU, broadcast-added to x, then a 3x3 conv.
NodeId context_embedding(GraphBuilder& b, NodeId x, const std::string& name);

/// Stride-1 GE layer with identity shortcut.
NodeId ge_layer_s1(GraphBuilder& b, NodeId x, int expansion,
                   const std::string& name, const GeOptions& opt = {});

/// Stride-2 GE layer with a separable-convolution shortcut.
NodeId ge_layer_s2(GraphBuilder& b, NodeId x, int c_out, int expansion,
                   const std::string& name, const GeOptions& opt = {});

/// Bilateral guided aggregation of a 1/8-scale detail map and a 1/32-scale
/// semantic map with the same channel count.
NodeId bga_layer(GraphBuilder& b, NodeId detail, NodeId semantic,
                 const std::string& name);

/// Depthwise 3x3 + BN followed by 1x1 conv + BN + ReLU.
NodeId separable_layer(GraphBuilder& b, NodeId x, int c_out,
                       const std::string& name);

/// 3x3 conv-BN-ReLU to `mid_channels`, 1x1 conv with bias to `classes`,
/// bilinear upsampling by `scale`.
NodeId seg_head(GraphBuilder& b, NodeId x, int mid_channels, int classes,
                int scale, const std::string& name);

/// Dispatches on spec.kind. `second` is the semantic input for BGA.
NodeId append_block(GraphBuilder& b, const BlockSpec& spec, NodeId x,
                    const std::string& name, NodeId second = -1);

}  // namespace bisenet::blocks
