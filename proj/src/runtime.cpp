#include "bisenet/runtime.hpp"

#include <cmath>
#include <random>

namespace bisenet {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
Weights<T> Weights<T>::allocate(const Graph& g) {
  Weights w;
  w.extend(g);
  return w;
}

template <typename T>
void Weights<T>::extend(const Graph& g) {
  for (const ParamSpec& p : g.params()) {
    if (!params.count(p.name))
      params.emplace(p.name, ParamTensor<T>(Tensor<T>(p.shape), p.decay_exempt));
  }
  for (const BufferSpec& b : g.buffers()) {
    if (!buffers.count(b.name)) buffers.emplace(b.name, RunningStats<T>(b.channels));
  }
}

template <typename T>
void Weights<T>::init(const Graph& g, std::uint64_t seed) {
  extend(g);
  for (const ParamSpec& spec : g.params()) {
    ParamTensor<T>& p = params.at(spec.name);
    p.zero_grad();
    switch (spec.init) {
      case ParamInit::Zeros:
        p.value.fill(T(0));
        break;
      case ParamInit::Ones:
        p.value.fill(T(1));
        break;
      case ParamInit::KaimingNormal: {
        std::mt19937_64 rng(fnv1a(spec.name, seed * 0x9E3779B97F4A7C15ULL + 1));
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / spec.fan_in));
        for (T& v : p.value.span()) v = static_cast<T>(dist(rng));
        break;
      }
    }
  }
  for (const BufferSpec& b : g.buffers()) buffers.at(b.name) = RunningStats<T>(b.channels);
  initialized = true;
}

template <typename T>
ParamTensor<T>& Weights<T>::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
const ParamTensor<T>& Weights<T>::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
void Weights<T>::zero_grad() {
  for (auto& [_, p] : params) p.zero_grad();
}

template <typename T>
std::size_t Weights<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params) n += p.value.size();
  return n;
}

template <typename T>
template <typename U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out;
  for (const auto& [k, p] : params)
    out.params.emplace(k, ParamTensor<U>(p.value.template cast<U>(), p.decay_exempt));
  for (const auto& [k, b] : buffers) {
    RunningStats<U> s;
    s.mean.assign(b.mean.begin(), b.mean.end());
    s.var.assign(b.var.begin(), b.var.end());
    s.initialized = b.initialized;
    out.buffers.emplace(k, std::move(s));
  }
  out.initialized = initialized;
  return out;
}

template <typename T>
std::vector<ag::Var<T>> run_graph(const Graph& g, Weights<T>& w,
                                  const ag::Var<T>& input, ops::BnMode mode,
                                  const std::vector<NodeId>& outputs) {
  const std::vector<bool> needed = g.ancestors(outputs);
  std::vector<ag::Var<T>> values(g.nodes().size());
  for (const LayerNode& n : g.nodes()) {
    if (!needed[n.id]) continue;
    try {
      auto in = [&](std::size_t i) -> const ag::Var<T>& {
        return values[n.inputs.at(i)];
      };
      ag::Var<T> out;
      switch (n.kind) {
        case LayerKind::Input:
          if (input.shape().c != n.channels) {
            throw ConfigError("expected " + std::to_string(n.channels) +
                              " input channels, got " + to_string(input.shape()));
          }
          out = input;
          break;
        case LayerKind::Conv: {
          ag::Var<T> weight = ag::Var<T>::param(w.param(n.weight), n.weight);
          ConvGeometry geo{n.stride, n.pad, n.groups};
          if (n.bias.empty()) {
            out = ag::conv2d(in(0), weight, static_cast<const ag::Var<T>*>(nullptr), geo);
          } else {
            ag::Var<T> bias = ag::Var<T>::param(w.param(n.bias), n.bias);
            out = ag::conv2d(in(0), weight, &bias, geo);
          }
          break;
        }
        case LayerKind::BatchNorm: {
          auto it = w.buffers.find(n.stats);
          if (it == w.buffers.end()) {
            throw ConfigError("missing running statistics '" + n.stats + "'");
          }
          out = ag::batchnorm2d(in(0), ag::Var<T>::param(w.param(n.gamma), n.gamma),
                                ag::Var<T>::param(w.param(n.beta), n.beta),
                                it->second, mode);
          break;
        }
        case LayerKind::ReLU:
          out = ag::relu(in(0));
          break;
        case LayerKind::Sigmoid:
          out = ag::sigmoid(in(0));
          break;
        case LayerKind::MaxPool:
          out = ag::maxpool2d(in(0), n.kernel, n.stride, n.pad);
          break;
        case LayerKind::AvgPool:
          out = ag::avgpool2d(in(0), n.kernel, n.stride, n.pad);
          break;
        case LayerKind::GlobalAvgPool:
          out = ag::global_avgpool(in(0));
          break;
        case LayerKind::Upsample:
          out = ag::upsample_bilinear(in(0), n.scale);
          break;
        case LayerKind::Concat: {
          std::vector<ag::Var<T>> xs;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) xs.push_back(in(i));
          out = ag::concat_channels(xs);
          break;
        }
        case LayerKind::Add:
          out = ag::add(in(0), in(1));
          break;
        case LayerKind::Mul:
          out = ag::mul(in(0), in(1));
          break;
      }
      if (out.node()) out.node()->label = n.name;
      values[n.id] = std::move(out);
    } catch (const ConfigError& e) {
      throw ConfigError("node '" + n.name + "': " + e.what());
    } catch (const StateError& e) {
      throw StateError("node '" + n.name + "': " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("node '" + n.name + "': " + e.what());
    }
  }
  return values;
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<float> Weights<float>::cast<float>() const;
template Weights<double> Weights<double>::cast<double>() const;
template std::vector<ag::Var<float>> run_graph<float>(
    const Graph&, Weights<float>&, const ag::Var<float>&, ops::BnMode,
    const std::vector<NodeId>&);
template std::vector<ag::Var<double>> run_graph<double>(
    const Graph&, Weights<double>&, const ag::Var<double>&, ops::BnMode,
    const std::vector<NodeId>&);

}  // namespace bisenet
