#include "bisenet/blocks.hpp"

namespace bisenet::blocks {

namespace {
bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }
}  // namespace

void validate(const BlockSpec& s) {
  if (s.c_in < 1) throw ConfigError("block: c_in must be >= 1");
  switch (s.kind) {
    case BlockKind::Stem:
      if (s.c_out < 1 || s.c_out % 2 != 0) {
        throw ConfigError("stem: channel count " + std::to_string(s.c_out) +
                          " must be even and positive");
      }
      break;
    case BlockKind::ContextEmbedding:
      if (s.c_out != s.c_in) {
        throw ConfigError("context embedding preserves channels: c_in " +
                          std::to_string(s.c_in) + " != c_out " +
                          std::to_string(s.c_out));
      }
      break;
    case BlockKind::GE1:
      if (s.c_out != s.c_in) {
        throw ConfigError("GE stride-1 layer needs c_in == c_out, got " +
                          std::to_string(s.c_in) + " -> " +
                          std::to_string(s.c_out));
      }
      [[fallthrough]];
    case BlockKind::GE2:
      if (s.expansion < 1) {
        throw ConfigError("GE expansion ratio must be an integer >= 1, got " +
                          std::to_string(s.expansion));
      }
      if (s.c_out < 1) throw ConfigError("GE: c_out must be >= 1");
      break;
    case BlockKind::BGA:
      if (s.c_out != s.c_in) {
        throw ConfigError("BGA preserves channels: c_in " +
                          std::to_string(s.c_in) + " != c_out " +
                          std::to_string(s.c_out));
      }
      break;
    case BlockKind::SegHead:
      if (s.mid_channels < 1 || s.classes < 1) {
        throw ConfigError("segmentation head needs mid_channels >= 1 and classes >= 1");
      }
      if (!is_power_of_two(s.scale) || s.scale < 4 || s.scale > 64) {
        throw ConfigError("segmentation head scale " + std::to_string(s.scale) +
                          " must be a power of two in [4, 64]");
      }
      break;
  }
}

NodeId conv_bn(GraphBuilder& b, NodeId x, int c_out, int kernel, int stride,
               int groups, const std::string& name) {
  const NodeId c = b.conv(x, c_out, kernel, stride, groups, false, name + ".conv");
  return b.batchnorm(c, name + ".bn");
}

NodeId conv_bn_relu(GraphBuilder& b, NodeId x, int c_out, int kernel,
                    int stride, const std::string& name) {
  return b.relu(conv_bn(b, x, c_out, kernel, stride, 1, name), name + ".relu");
}

NodeId stem_block(GraphBuilder& b, NodeId x, int channels,
                  const std::string& name) {
  validate({BlockKind::Stem, b.channels(x), channels});
  const NodeId head = conv_bn_relu(b, x, channels, 3, 2, name + ".conv");
  NodeId left = conv_bn_relu(b, head, channels / 2, 1, 1, name + ".left.0");
  left = conv_bn_relu(b, left, channels, 3, 2, name + ".left.1");
  const NodeId right = b.maxpool(head, 3, 2, 1, name + ".right.pool");
  const NodeId cat = b.concat({left, right}, name + ".concat");
  return conv_bn_relu(b, cat, channels, 3, 1, name + ".fuse");
}

NodeId context_embedding(GraphBuilder& b, NodeId x, const std::string& name) {
  const int c = b.channels(x);
  NodeId g = b.global_avgpool(x, name + ".gap");
  g = b.batchnorm(g, name + ".gap.bn");
  g = conv_bn_relu(b, g, c, 1, 1, name + ".gap.conv");
  const NodeId sum = b.add(x, g, name + ".add");
  return b.conv(sum, c, 3, 1, 1, false, name + ".last.conv");
}

NodeId ge_layer_s1(GraphBuilder& b, NodeId x, int expansion,
                   const std::string& name, const GeOptions& opt) {
  const int c = b.channels(x);
  validate({BlockKind::GE1, c, c, expansion});
  const int mid = c * expansion;
  NodeId y = conv_bn_relu(b, x, mid, opt.gather_kernel, 1, name + ".gather");
  y = conv_bn(b, y, mid, 3, 1, mid, name + ".dw");
  y = conv_bn(b, y, c, 1, 1, 1, name + ".project");
  y = b.add(y, x, name + ".add");
  return b.relu(y, name + ".relu");
}

NodeId ge_layer_s2(GraphBuilder& b, NodeId x, int c_out, int expansion,
                   const std::string& name, const GeOptions& opt) {
  const int c = b.channels(x);
  validate({BlockKind::GE2, c, c_out, expansion});
  const int mid = c * expansion;
  NodeId y = conv_bn_relu(b, x, mid, opt.gather_kernel, 1, name + ".gather");
  if (opt.double_dw) {
    y = conv_bn(b, y, mid, 3, 2, mid, name + ".dw1");
    y = conv_bn(b, y, mid, 3, 1, mid, name + ".dw2");
  } else {
    y = conv_bn(b, y, mid, 5, 2, mid, name + ".dw5");
  }
  y = conv_bn(b, y, c_out, 1, 1, 1, name + ".project");
  NodeId sc = conv_bn(b, x, c, 3, 2, c, name + ".shortcut.dw");
  sc = conv_bn(b, sc, c_out, 1, 1, 1, name + ".shortcut.pw");
  y = b.add(y, sc, name + ".add");
  return b.relu(y, name + ".relu");
}

NodeId bga_layer(GraphBuilder& b, NodeId detail, NodeId semantic,
                 const std::string& name) {
  const int c = b.channels(detail);
  if (b.channels(semantic) != c) {
    throw ConfigError("bga: detail has " + std::to_string(c) +
                      " channels but semantic has " +
                      std::to_string(b.channels(semantic)));
  }
  validate({BlockKind::BGA, c, c});
  // Detail side.
  NodeId d1 = conv_bn(b, detail, c, 3, 1, c, name + ".detail_keep.dw");
  d1 = b.conv(d1, c, 1, 1, 1, false, name + ".detail_keep.pw");
  NodeId d2 = conv_bn(b, detail, c, 3, 2, 1, name + ".detail_down");
  d2 = b.avgpool(d2, 3, 2, 1, name + ".detail_down.pool");
  // Semantic side.
  NodeId s1 = conv_bn(b, semantic, c, 3, 1, 1, name + ".semantic_up");
  s1 = b.upsample(s1, 4, name + ".semantic_up.upsample");
  s1 = b.sigmoid(s1, name + ".semantic_up.sigmoid");
  NodeId s2 = conv_bn(b, semantic, c, 3, 1, c, name + ".semantic_keep.dw");
  s2 = b.conv(s2, c, 1, 1, 1, false, name + ".semantic_keep.pw");
  s2 = b.sigmoid(s2, name + ".semantic_keep.sigmoid");
  // Fusion.
  const NodeId left = b.mul(d1, s1, name + ".left");
  NodeId right = b.mul(d2, s2, name + ".right");
  right = b.upsample(right, 4, name + ".right.upsample");
  const NodeId sum = b.add(left, right, name + ".sum");
  return conv_bn(b, sum, c, 3, 1, 1, name + ".out");
}

NodeId separable_layer(GraphBuilder& b, NodeId x, int c_out,
                       const std::string& name) {
  const int c = b.channels(x);
  const NodeId dw = conv_bn(b, x, c, 3, 1, c, name + ".dw");
  return conv_bn_relu(b, dw, c_out, 1, 1, name + ".pw");
}

NodeId seg_head(GraphBuilder& b, NodeId x, int mid_channels, int classes,
                int scale, const std::string& name) {
  BlockSpec spec{BlockKind::SegHead, b.channels(x), classes};
  spec.mid_channels = mid_channels;
  spec.classes = classes;
  spec.scale = scale;
  validate(spec);
  const NodeId mid = conv_bn_relu(b, x, mid_channels, 3, 1, name + ".mid");
  const NodeId logits = b.conv(mid, classes, 1, 1, 1, true, name + ".cls");
  return b.upsample(logits, scale, name + ".upsample");
}

NodeId append_block(GraphBuilder& b, const BlockSpec& spec, NodeId x,
                    const std::string& name, NodeId second) {
  validate(spec);
  if (b.channels(x) != spec.c_in) {
    throw ConfigError(name + ": input has " + std::to_string(b.channels(x)) +
                      " channels, spec expects " + std::to_string(spec.c_in));
  }
  switch (spec.kind) {
    case BlockKind::Stem:
      return stem_block(b, x, spec.c_out, name);
    case BlockKind::ContextEmbedding:
      return context_embedding(b, x, name);
    case BlockKind::GE1:
      return ge_layer_s1(b, x, spec.expansion, name);
    case BlockKind::GE2:
      return ge_layer_s2(b, x, spec.c_out, spec.expansion, name);
    case BlockKind::BGA:
      if (second < 0) throw ConfigError(name + ": BGA needs a semantic input");
      return bga_layer(b, x, second, name);
    case BlockKind::SegHead:
      return seg_head(b, x, spec.mid_channels, spec.classes, spec.scale, name);
  }
  throw ConfigError(name + ": unknown block kind");
}

}  // namespace bisenet::blocks
