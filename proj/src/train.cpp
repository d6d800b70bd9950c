#include "bisenet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "bisenet/text_util.hpp"

namespace bisenet::train {

void TrainConfig::validate() const {
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(base_lr >= 0)) throw ConfigError("base_lr must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(power > 0)) throw ConfigError("power must be > 0");
  if (max_iter < 0) throw ConfigError("max_iter must be >= 0");
  if (!(ohem_threshold > 0 && ohem_threshold <= 1)) {
    throw ConfigError("ohem_threshold must lie in (0, 1]");
  }
  if (ohem_min_kept < 0) throw ConfigError("ohem_min_kept must be >= 0");
  if (scales.empty()) throw ConfigError("scales must not be empty");
  for (double s : scales)
    if (!(s > 0)) throw ConfigError("scales must be positive");
  if (!(flip_prob >= 0 && flip_prob <= 1)) throw ConfigError("flip_prob must lie in [0, 1]");
  if (crop_h < 1 || crop_w < 1) throw ConfigError("crop size must be positive");
  if (dataset_size < 1) throw ConfigError("dataset_size must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

int TrainConfig::min_kept() const {
  if (ohem_min_kept > 0) return ohem_min_kept;
  return std::max(1, batch * crop_h * crop_w / 16);
}

double poly_lr(int iter, const TrainConfig& cfg) {
  if (cfg.max_iter <= 0) return cfg.base_lr;
  const int it = std::clamp(iter, 0, cfg.max_iter);
  return cfg.base_lr *
         std::pow(1.0 - static_cast<double>(it) / cfg.max_iter, cfg.power);
}

template <typename T>
void sgd_step(std::map<std::string, ParamTensor<T>>& params, SgdState<T>& state,
              double lr, double momentum, double weight_decay) {
  for (auto& [name, p] : params) {
    auto [it, fresh] = state.velocity.try_emplace(name, p.value.shape());
    Tensor<T>& v = it->second;
    const double wd = p.decay_exempt ? 0.0 : weight_decay;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double vi = momentum * v[i] + p.grad[i] + wd * p.value[i];
      v[i] = static_cast<T>(vi);
      p.value[i] = static_cast<T>(p.value[i] - lr * vi);
    }
    p.zero_grad();
  }
}

namespace {

void check_labels(const Shape& s, const LabelMap& labels, int ignore_index) {
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w) {
    throw ConfigError("labels (" + std::to_string(labels.n) + "," +
                      std::to_string(labels.h) + "," + std::to_string(labels.w) +
                      ") do not match logits " + to_string(s));
  }
  for (std::int32_t y : labels.data) {
    if (y != ignore_index && (y < 0 || y >= s.c)) {
      throw ConfigError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(s.c) + ") and not ignore_index");
    }
  }
}

// Per-pixel log-sum-exp and correct-class log-probability.
template <typename T>
void pixel_stats(const Tensor<T>& logits, std::size_t flat, int label,
                 double& lse, double& logp) {
  const Shape& s = logits.shape();
  const std::size_t plane = s.plane();
  const std::size_t n = flat / plane;
  const std::size_t pix = flat % plane;
  const T* base = logits.data() + n * s.c * plane + pix;
  double mx = base[0];
  for (int c = 1; c < s.c; ++c) mx = std::max(mx, static_cast<double>(base[c * plane]));
  double z = 0;
  for (int c = 0; c < s.c; ++c) z += std::exp(base[c * plane] - mx);
  lse = mx + std::log(z);
  logp = base[static_cast<std::size_t>(label) * plane] - lse;
}

template <typename T>
LossResult masked_ce(const Tensor<T>& logits, const LabelMap& labels,
                     const std::vector<std::size_t>& keep) {
  LossResult r;
  const Shape& s = logits.shape();
  r.grad = Tensor<double>(s);
  r.kept = keep.size();
  if (keep.empty()) return r;
  const std::size_t plane = s.plane();
  const double inv = 1.0 / static_cast<double>(keep.size());
  double total = 0;
  for (std::size_t flat : keep) {
    const int y = labels.data[flat];
    double lse = 0, logp = 0;
    pixel_stats(logits, flat, y, lse, logp);
    total -= logp;
    const std::size_t n = flat / plane;
    const std::size_t pix = flat % plane;
    for (int c = 0; c < s.c; ++c) {
      const std::size_t idx = (n * s.c + c) * plane + pix;
      r.grad[idx] = (std::exp(logits[idx] - lse) - (c == y ? 1.0 : 0.0)) * inv;
    }
  }
  r.loss = total * inv;
  return r;
}

std::vector<std::size_t> valid_pixels(const LabelMap& labels, int ignore_index) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.data.size(); ++i)
    if (labels.data[i] != ignore_index) out.push_back(i);
  return out;
}

}  // namespace

template <typename T>
LossResult cross_entropy(const Tensor<T>& logits, const LabelMap& labels,
                         int ignore_index) {
  check_labels(logits.shape(), labels, ignore_index);
  return masked_ce(logits, labels, valid_pixels(labels, ignore_index));
}

template <typename T>
std::vector<std::size_t> ohem_selection(const Tensor<T>& logits,
                                        const LabelMap& labels, int ignore_index,
                                        double threshold, int min_kept) {
  check_labels(logits.shape(), labels, ignore_index);
  std::vector<std::size_t> valid = valid_pixels(labels, ignore_index);
  if (threshold >= 1.0) return valid;

  std::vector<std::pair<double, std::size_t>> prob;
  prob.reserve(valid.size());
  std::vector<std::size_t> hard;
  for (std::size_t flat : valid) {
    double lse = 0, logp = 0;
    pixel_stats(logits, flat, labels.data[flat], lse, logp);
    const double p = std::exp(logp);
    prob.emplace_back(p, flat);
    if (p < threshold) hard.push_back(flat);
  }
  const std::size_t k = std::min<std::size_t>(std::max(min_kept, 0), valid.size());
  if (hard.size() >= k) return hard;

  std::partial_sort(prob.begin(), prob.begin() + static_cast<std::ptrdiff_t>(k),
                    prob.end());
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(prob[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

template <typename T>
LossResult ohem_cross_entropy(const Tensor<T>& logits, const LabelMap& labels,
                              int ignore_index, double threshold, int min_kept) {
  return masked_ce(logits, labels,
                   ohem_selection(logits, labels, ignore_index, threshold, min_kept));
}

template <typename T>
ag::Var<T> head_loss(const ag::Var<T>& logits, const LabelMap& labels,
                     const TrainConfig& cfg, bool aux, double* value) {
  const bool ohem = cfg.ohem && (!aux || cfg.ohem_aux);
  LossResult r = ohem ? ohem_cross_entropy(logits.value(), labels, cfg.ignore_index,
                                           cfg.ohem_threshold, cfg.min_kept())
                      : cross_entropy(logits.value(), labels, cfg.ignore_index);
  if (value) *value = r.loss;
  auto grad = std::make_shared<Tensor<double>>(std::move(r.grad));
  return ag::Var<T>::make(
      Tensor<T>({1, 1, 1, 1}, static_cast<T>(r.loss)), {logits},
      [grad](ag::Node<T>& self) {
        ag::Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        const double g = self.grad[0];
        Tensor<T> dx(grad->shape());
        for (std::size_t i = 0; i < dx.size(); ++i)
          dx[i] = static_cast<T>(g * (*grad)[i]);
        p.accumulate(dx);
      },
      aux ? "aux_loss" : "main_loss");
}

template <typename T>
ag::Var<T> total_loss(const std::vector<ag::Var<T>>& heads,
                      const LabelMap& labels, const TrainConfig& cfg,
                      TotalLoss* parts) {
  if (heads.empty()) throw ConfigError("total_loss needs at least the main head");
  std::vector<ag::Var<T>> terms;
  TotalLoss local;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    double v = 0;
    terms.push_back(head_loss(heads[i], labels, cfg, i > 0, &v));
    if (i == 0) {
      local.main = v;
    } else {
      local.aux.push_back(v);
    }
    local.total += v;
  }
  if (parts) *parts = local;
  return ag::weighted_sum(terms, std::vector<double>(terms.size(), 1.0));
}

namespace {

std::uint64_t splitmix(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed ^ (stream * 0xD1B54A32D192ED03ULL);
  return splitmix(x);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : state_(seed) {}

std::uint64_t Rng::next() { return splitmix(state_); }

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::below(int n) {
  if (n <= 0) throw ConfigError("Rng::below needs n >= 1");
  return static_cast<int>(next() % static_cast<std::uint64_t>(n));
}

SynthSample flip_horizontal(const SynthSample& s) {
  SynthSample out = s;
  const Shape& sh = s.image.shape();
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c)
      for (int y = 0; y < sh.h; ++y)
        for (int x = 0; x < sh.w; ++x)
          out.image.at(n, c, y, x) = s.image.at(n, c, y, sh.w - 1 - x);
  for (int n = 0; n < s.label.n; ++n)
    for (int y = 0; y < s.label.h; ++y)
      for (int x = 0; x < s.label.w; ++x)
        out.label.at(n, y, x) = s.label.at(n, y, s.label.w - 1 - x);
  return out;
}

SynthSample augment(const SynthSample& s, const TrainConfig& cfg, Rng& rng) {
  const bool flip = rng.uniform() < cfg.flip_prob;
  const double scale = cfg.scales[static_cast<std::size_t>(
      rng.below(static_cast<int>(cfg.scales.size())))];
  SynthSample cur = flip ? flip_horizontal(s) : s;

  const Shape& sh = cur.image.shape();
  const int h = std::max(1, static_cast<int>(std::lround(sh.h * scale)));
  const int w = std::max(1, static_cast<int>(std::lround(sh.w * scale)));
  if (h != sh.h || w != sh.w) {
    cur.image = ops::resize_bilinear(cur.image, h, w);
    cur.label = ops::resize_nearest(cur.label, h, w);
  }

  const int y0 = h > cfg.crop_h ? rng.below(h - cfg.crop_h + 1) : 0;
  const int x0 = w > cfg.crop_w ? rng.below(w - cfg.crop_w + 1) : 0;
  SynthSample out;
  out.image = Tensor<float>({sh.n, sh.c, cfg.crop_h, cfg.crop_w});
  out.label = LabelMap(sh.n, cfg.crop_h, cfg.crop_w, cfg.ignore_index);
  const int ch = std::min(cfg.crop_h, h - y0);
  const int cw = std::min(cfg.crop_w, w - x0);
  for (int n = 0; n < sh.n; ++n) {
    for (int y = 0; y < ch; ++y) {
      for (int x = 0; x < cw; ++x) {
        for (int c = 0; c < sh.c; ++c)
          out.image.at(n, c, y, x) = cur.image.at(n, c, y0 + y, x0 + x);
        out.label.at(n, y, x) = cur.label.at(n, y0 + y, x0 + x);
      }
    }
  }
  return out;
}

namespace {

constexpr double kRectW[2] = {0.5, 0.9};
constexpr double kRectH[2] = {0.3, 0.7};
constexpr double kDiskR[2] = {0.3, 0.45};

const double kPalette[][3] = {
    {0.85, 0.15, 0.15}, {0.15, 0.30, 0.90}, {0.15, 0.80, 0.20},
    {0.90, 0.80, 0.10}, {0.70, 0.20, 0.80}, {0.10, 0.80, 0.80},
};

int strip_begin(int k, int strips, int w) { return k * w / strips; }

}  // namespace

std::vector<double> synth_coverage_targets(int num_classes, int h, int w) {
  if (num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  const int strips = num_classes - 1;
  std::vector<double> cov(num_classes, 0.0);
  double fg = 0;
  for (int k = 1; k < num_classes; ++k) {
    const int sw = strip_begin(k, strips, w) - strip_begin(k - 1, strips, w);
    double area = 0;
    if (k % 2 == 1) {
      area = (kRectW[0] + kRectW[1]) / 2 * sw * (kRectH[0] + kRectH[1]) / 2 * h;
    } else {
      const double m = std::min(sw, h);
      const double er2 = (kDiskR[0] * kDiskR[0] + kDiskR[0] * kDiskR[1] +
                          kDiskR[1] * kDiskR[1]) / 3.0;
      area = std::numbers::pi * er2 * m * m;
    }
    cov[k] = area / (static_cast<double>(h) * w);
    fg += cov[k];
  }
  cov[0] = 1.0 - fg;
  return cov;
}

std::vector<SynthSample> synth_dataset(std::uint64_t seed, int n_samples,
                                       int num_classes, int h, int w) {
  if (num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (n_samples < 0 || h < 1 || w < 1) throw ConfigError("invalid synthetic dataset size");
  const int strips = num_classes - 1;
  if (w < strips) throw ConfigError("image too narrow for the requested classes");
  std::vector<SynthSample> out;
  out.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i) {
    Rng rng(stream_seed(seed, static_cast<std::uint64_t>(i)));
    SynthSample s;
    s.image = Tensor<float>({1, 3, h, w});
    s.label = LabelMap(1, h, w, 0);

    const double fx = rng.uniform(0.2, 0.6);
    const double fy = rng.uniform(0.2, 0.6);
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double t = 0.5 + 0.12 * std::sin(fx * x + fy * y + phase);
        for (int c = 0; c < 3; ++c)
          s.image.at(0, c, y, x) =
              static_cast<float>(t + rng.uniform(-0.08, 0.08) + (c == 1 ? 0.03 : 0.0));
      }
    }

    std::vector<int> slot(strips);
    for (int k = 0; k < strips; ++k) slot[k] = k;
    for (int k = strips - 1; k > 0; --k) std::swap(slot[k], slot[rng.below(k + 1)]);

    for (int cls = 1; cls < num_classes; ++cls) {
      const int size_ref = cls - 1;
      const int sx0 = strip_begin(slot[cls - 1], strips, w);
      const int sw = strip_begin(slot[cls - 1] + 1, strips, w) - sx0;
      const int ref_w =
          strip_begin(size_ref + 1, strips, w) - strip_begin(size_ref, strips, w);
      const double* col = kPalette[(cls - 1) % 6];
      const double shade = 1.0 - 0.15 * ((cls - 1) / 6);
      auto paint = [&](int y, int x) {
        s.label.at(0, y, x) = cls;
        for (int c = 0; c < 3; ++c)
          s.image.at(0, c, y, x) =
              static_cast<float>(std::clamp(col[c] * shade + rng.uniform(-0.05, 0.05), 0.0, 1.0));
      };
      const int bw = std::min(sw, ref_w);
      if (cls % 2 == 1) {
        const int rw = std::clamp(static_cast<int>(std::lround(rng.uniform(kRectW[0], kRectW[1]) * bw)), 1, sw);
        const int rh = std::clamp(static_cast<int>(std::lround(rng.uniform(kRectH[0], kRectH[1]) * h)), 1, h);
        const int x0 = sx0 + rng.below(sw - rw + 1);
        const int y0 = rng.below(h - rh + 1);
        for (int y = y0; y < y0 + rh; ++y)
          for (int x = x0; x < x0 + rw; ++x) paint(y, x);
      } else {
        const double m = std::min(bw, h);
        const double r = rng.uniform(kDiskR[0], kDiskR[1]) * m;
        const double cx = sx0 + rng.uniform(r, sw - r);
        const double cy = rng.uniform(r, h - r);
        for (int y = 0; y < h; ++y) {
          for (int x = sx0; x < sx0 + sw; ++x) {
            const double dx = x + 0.5 - cx;
            const double dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= r * r) paint(y, x);
          }
        }
      }
    }
    for (float& v : s.image.storage()) v = std::clamp(v, 0.0f, 1.0f);
    out.push_back(std::move(s));
  }
  return out;
}

void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& rows,
                       const std::vector<std::string>& aux_names) {
  os << "iter,lr,loss,loss_main";
  for (const auto& a : aux_names) os << ",loss_aux_" << a;
  os << '\n';
  for (const auto& r : rows) {
    os << r.iter << ',' << text::format_double(r.lr) << ','
       << text::format_double(r.loss) << ',' << text::format_double(r.loss_main);
    for (double v : r.loss_aux) os << ',' << text::format_double(v);
    os << '\n';
  }
}

namespace {

void first_non_finite(const Graph& g, const std::vector<ag::Var<float>>& values,
                      int iter) {
  for (const LayerNode& n : g.nodes()) {
    const auto& v = values[n.id];
    if (v.defined() && !v.value().all_finite()) {
      throw NumericError("non-finite loss at iteration " + std::to_string(iter) +
                         "; first non-finite node '" + n.name + "'");
    }
  }
  throw NumericError("non-finite loss at iteration " + std::to_string(iter) +
                     "; all node outputs finite, loss evaluation overflowed");
}

}  // namespace

std::vector<HistoryRow> train_loop(Network<float>& net,
                                   const std::vector<SynthSample>& dataset,
                                   const TrainConfig& cfg, const LoopHooks& hooks) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  if (!net.weights.initialized) throw StateError("network parameters are not initialized");
  if (cfg.crop_h % 32 != 0 || cfg.crop_w % 32 != 0) {
    throw ConfigError("crop size must be a multiple of 32");
  }
  const Graph& g = *net.graph;
  std::vector<NodeId> outputs{*g.main_output()};
  for (const auto& a : g.aux_heads()) outputs.push_back(a.output);

  SgdState<float> sgd;
  std::vector<HistoryRow> history;
  history.reserve(cfg.max_iter);
  const int c = dataset.front().image.shape().c;
  for (int it = 0; it < cfg.max_iter; ++it) {
    Tensor<float> images({cfg.batch, c, cfg.crop_h, cfg.crop_w});
    LabelMap labels(cfg.batch, cfg.crop_h, cfg.crop_w);
    const std::size_t img_sz = images.size() / cfg.batch;
    const std::size_t lab_sz = labels.data.size() / cfg.batch;
    for (int b = 0; b < cfg.batch; ++b) {
      Rng rng(stream_seed(cfg.seed ^ 0xA5A5A5A5ULL,
                          static_cast<std::uint64_t>(it) * cfg.batch + b));
      const SynthSample& src =
          dataset[static_cast<std::size_t>(rng.below(static_cast<int>(dataset.size())))];
      const SynthSample aug = augment(src, cfg, rng);
      std::copy(aug.image.storage().begin(), aug.image.storage().end(),
                images.storage().begin() + static_cast<std::ptrdiff_t>(b * img_sz));
      std::copy(aug.label.data.begin(), aug.label.data.end(),
                labels.data.begin() + static_cast<std::ptrdiff_t>(b * lab_sz));
    }

    auto values = run_graph(g, net.weights, ag::Var<float>(images),
                            ops::BnMode::Train, outputs);
    std::vector<ag::Var<float>> heads;
    for (NodeId id : outputs) heads.push_back(values[id]);
    TotalLoss parts;
    ag::Var<float> loss = total_loss(heads, labels, cfg, &parts);
    if (!std::isfinite(parts.total)) first_non_finite(g, values, it);

    const double lr = poly_lr(it, cfg);
    ag::backward(loss);
    sgd_step(net.weights.params, sgd, lr, cfg.momentum, cfg.weight_decay);
    history.push_back({it, lr, parts.total, parts.main, parts.aux});

    if (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 &&
        hooks.on_checkpoint) {
      hooks.on_checkpoint(it + 1);
    }
  }
  return history;
}

double pixel_accuracy(Network<float>& net, const std::vector<SynthSample>& data,
                      int ignore_index) {
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const auto& s : data) {
    const LabelMap pred = ops::argmax_channels(main_logits(net, s.image));
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      if (s.label.data[i] == ignore_index) continue;
      ++total;
      if (pred.data[i] == s.label.data[i]) ++correct;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

#define BISENET_INSTANTIATE(T)                                                  \
  template void sgd_step<T>(std::map<std::string, ParamTensor<T>>&,             \
                            SgdState<T>&, double, double, double);              \
  template LossResult cross_entropy<T>(const Tensor<T>&, const LabelMap&, int); \
  template LossResult ohem_cross_entropy<T>(const Tensor<T>&, const LabelMap&,  \
                                            int, double, int);                  \
  template std::vector<std::size_t> ohem_selection<T>(                          \
      const Tensor<T>&, const LabelMap&, int, double, int);                     \
  template ag::Var<T> head_loss<T>(const ag::Var<T>&, const LabelMap&,          \
                                   const TrainConfig&, bool, double*);          \
  template ag::Var<T> total_loss<T>(const std::vector<ag::Var<T>>&,             \
                                    const LabelMap&, const TrainConfig&,        \
                                    TotalLoss*);

BISENET_INSTANTIATE(float)
BISENET_INSTANTIATE(double)
#undef BISENET_INSTANTIATE

}  // namespace bisenet::train
