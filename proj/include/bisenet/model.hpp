#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bisenet/blocks.hpp"
#include "bisenet/graph.hpp"
#include "bisenet/runtime.hpp"

namespace bisenet {

enum class Aggregation { Sum, Concat, BGA, DetailOnly, SemanticOnly };

std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

/// Booster tap positions, in network order.
inline const std::array<std::string, 5> kBoosterPositions{
    "stage2", "stage3", "stage4", "stage5_4", "stage5_5"};

/// Architecture knobs. Defaults are the configuration the network was
/// designed around (lambda 1/4, expansion 6, alpha 1, depth 1, BGA).
struct ArchConfig {
  double lambda = 0.25;  // semantic/detail channel ratio for the first stages
  int expansion = 6;     // GE expansion ratio
  double alpha = 1.0;    // width multiplier
  int depth = 1;         // multiplies stride-1 GE repeats
  std::array<int, 3> detail_channels{64, 64, 128};
  Aggregation aggregation = Aggregation::BGA;
  std::vector<std::string> boosters{"stage2", "stage3", "stage4", "stage5_4"};
  int num_classes = 19;
  int ct_main = 1024;  // main head width at alpha = 1
  int ct_aux = 0;      // aux head width at alpha = 1; 0 = 4x the tap width
  int in_channels = 3;
  int input_h = 512;
  int input_w = 1024;
  // Gather-and-expansion / semantic-branch ablations.
  bool context_embedding = true;
  int ge_gather_kernel = 3;
  bool ge_double_dw = true;

  /// Throws ConfigError on the first violated invariant.
  void validate() const;

  int detail_width(int stage) const;  // stage in {1,2,3}
  int stem_width() const;
  int semantic_width(int stage) const;  // stage in {3,4,5}
  int main_head_width() const;
  int aux_head_width(int tap_channels) const;
  /// Stride-1 GE repeats for semantic stage 3, 4 or 5.
  int ge_repeats(int stage) const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Nearest multiple of 8, at least 8.
int round8(double x);
/// Nearest multiple of 4, at least 4.
int round4(double x);

/// Ordered key=value lines describing the architecture.
std::vector<std::pair<std::string, std::string>> arch_to_pairs(const ArchConfig& cfg);
/// Applies one key; returns false when `key` is not an architecture key.
bool apply_arch_key(ArchConfig& cfg, const std::string& key,
                    const std::string& value);
/// Stable hash of the architecture keys.
std::uint64_t arch_hash(const ArchConfig& cfg);

/// Graph plus its parameter registry.
template <typename T>
struct Network {
  ArchConfig cfg;
  std::shared_ptr<const Graph> graph;
  Weights<T> weights;
  std::uint64_t seed = 0;

  template <typename U>
  Network<U> cast() const {
    return Network<U>{cfg, graph, weights.template cast<U>(), seed};
  }
};

/// Appends the detail branch to `b`; taps detail_s1..detail_s3 (= detail_out).
NodeId build_detail_branch(GraphBuilder& b, NodeId input, const ArchConfig& cfg);

/// Appends the semantic branch; taps sem_stage2 (stem) .. sem_stage5_5.
NodeId build_semantic_branch(GraphBuilder& b, NodeId input,
                             const ArchConfig& cfg);

/// Both branches, aggregation and main head; no booster heads.
Graph build_graph(const ArchConfig& cfg);

/// Returns a copy of `g` with one auxiliary head per entry of `positions`.
Graph attach_boosters(const Graph& g, const ArchConfig& cfg,
                      const std::vector<std::string>& positions);

/// Main network with uninitialized (zero) weights.
template <typename T>
Network<T> build_bisenetv2(const ArchConfig& cfg);

/// Adds the configured booster heads. Existing weights are kept; new heads
/// are initialized from the network's seed when the network is initialized.
template <typename T>
Network<T> attach_boosters(const Network<T>& net, const std::vector<std::string>& positions);

/// build_bisenetv2 + attach_boosters(cfg.boosters) + init(seed).
template <typename T>
Network<T> make_network(const ArchConfig& cfg, std::uint64_t seed);

template <typename T>
void init_network(Network<T>& net, std::uint64_t seed);

template <typename T>
struct InferenceResult {
  LabelMap labels;   // at the input image's resolution
  Tensor<T> logits;  // at the inference resolution
};

/// Resizes `image` (bilinear) to the configured input size, runs the main
/// head with eval-mode batch norm, takes the class argmax and resizes the label
/// map back with nearest neighbour.
template <typename T>
InferenceResult<T> forward_inference(Network<T>& net, const Tensor<T>& image);

/// Main-head logits at the network's own resolution, eval mode.
template <typename T>
Tensor<T> main_logits(Network<T>& net, const Tensor<T>& input);

/// Writes manifest.txt plus one BT2 file per parameter and running statistic.
template <typename T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& dir);

/// Rebuilds the network from the manifest and loads every tensor. Throws
/// CheckpointMismatch when topology, hash or tensor shapes disagree, and when
/// `expected` is given and its hash differs from the manifest's.
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& dir,
                           const ArchConfig* expected = nullptr);

}  // namespace bisenet
