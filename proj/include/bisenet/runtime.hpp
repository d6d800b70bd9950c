#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bisenet/autograd.hpp"
#include "bisenet/graph.hpp"

namespace bisenet {

/// Parameter and running-statistics registry for one graph.
template <typename T>
struct Weights {
  std::map<std::string, ParamTensor<T>> params;
  std::map<std::string, RunningStats<T>> buffers;
  bool initialized = false;

  /// Zero-filled registry shaped after `g`. Not yet usable for inference.
  static Weights allocate(const Graph& g);

  /// Kaiming-normal conv kernels (std = sqrt(2 / fan_in)), zero biases,
  /// gamma = 1, beta = 0, running mean 0 / var 1. Each parameter draws from
  /// its own stream keyed by (seed, name), so adding nodes elsewhere in the
  /// graph never changes existing values.
  void init(const Graph& g, std::uint64_t seed);

  /// Adds zero-initialized entries for any parameters of `g` not yet present.
  void extend(const Graph& g);

  ParamTensor<T>& param(const std::string& name);
  const ParamTensor<T>& param(const std::string& name) const;

  void zero_grad();
  std::size_t parameter_count() const;

  template <typename U>
  Weights<U> cast() const;

  friend bool operator==(const Weights& a, const Weights& b) {
    if (a.params.size() != b.params.size() || a.buffers.size() != b.buffers.size())
      return false;
    for (const auto& [k, v] : a.params) {
      auto it = b.params.find(k);
      if (it == b.params.end() || !(it->second.value == v.value) ||
          it->second.decay_exempt != v.decay_exempt)
        return false;
    }
    for (const auto& [k, v] : a.buffers) {
      auto it = b.buffers.find(k);
      if (it == b.buffers.end() || it->second.mean != v.mean ||
          it->second.var != v.var)
        return false;
    }
    return true;
  }
};

/// 64-bit FNV-1a, used for seeding and checkpoint hashes.
std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL);

/// Evaluates the nodes needed for `outputs`. Entries of the returned vector
/// for nodes outside that set stay undefined. Errors are reported with the
/// offending node's name.
template <typename T>
std::vector<ag::Var<T>> run_graph(const Graph& g, Weights<T>& w,
                                  const ag::Var<T>& input, ops::BnMode mode,
                                  const std::vector<NodeId>& outputs);

}  // namespace bisenet
