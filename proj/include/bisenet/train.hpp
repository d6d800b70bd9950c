#pragma once

// Toy-scale training stack: poly learning rate, momentum SGD, per-head
// cross-entropy with optional online hard example mining, augmentation and a
// synthetic segmentation dataset.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "bisenet/model.hpp"

namespace bisenet::train {

struct TrainConfig {
  int batch = 4;
  double base_lr = 5e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double power = 0.9;
  int max_iter = 300;
  bool ohem = true;
  double ohem_threshold = 0.7;
  int ohem_min_kept = 0;  // 0 = batch * crop area / 16
  bool ohem_aux = true;   // apply OHEM to booster heads as well
  std::vector<double> scales{0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  double flip_prob = 0.5;
  int crop_h = 64;
  int crop_w = 64;
  int ignore_index = 255;
  std::uint64_t seed = 1;
  int dataset_size = 64;
  int checkpoint_every = 0;  // 0 = only the final checkpoint

  void validate() const;
  int min_kept() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// base_lr * (1 - iter / max_iter)^power
double poly_lr(int iter, const TrainConfig& cfg);

/// Momentum buffers keyed by parameter name.
template <typename T>
struct SgdState {
  std::map<std::string, Tensor<T>> velocity;
};

/// v = momentum * v + g + wd * w (no decay on exempt params); w -= lr * v;
/// gradients are zeroed.
template <typename T>
void sgd_step(std::map<std::string, ParamTensor<T>>& params, SgdState<T>& state,
              double lr, double momentum, double weight_decay);

struct LossResult {
  double loss = 0;
  Tensor<double> grad;  // d loss / d logits
  std::size_t kept = 0;  // pixels contributing to the mean
};

/// Mean softmax cross-entropy over non-ignored pixels. All-ignored gives
/// zero loss and a zero gradient.
template <typename T>
LossResult cross_entropy(const Tensor<T>& logits, const LabelMap& labels,
                         int ignore_index);

/// Keeps pixels whose correct-class probability is below `threshold`; when
/// fewer than `min_kept` qualify, keeps the `min_kept` lowest-probability
/// pixels instead (ties by lowest flat (n, h, w) index). threshold >= 1
/// keeps everything.
template <typename T>
LossResult ohem_cross_entropy(const Tensor<T>& logits, const LabelMap& labels,
                              int ignore_index, double threshold, int min_kept);

/// Flat (n, h, w) indices the OHEM rule keeps, ascending.
template <typename T>
std::vector<std::size_t> ohem_selection(const Tensor<T>& logits,
                                        const LabelMap& labels, int ignore_index,
                                        double threshold, int min_kept);

/// Differentiable scalar loss of one head.
template <typename T>
ag::Var<T> head_loss(const ag::Var<T>& logits, const LabelMap& labels,
                     const TrainConfig& cfg, bool aux, double* value = nullptr);

struct TotalLoss {
  double total = 0;
  double main = 0;
  std::vector<double> aux;
};

/// Main loss plus every aux loss, each weighted 1. heads[0] is the main head.
template <typename T>
ag::Var<T> total_loss(const std::vector<ag::Var<T>>& heads,
                      const LabelMap& labels, const TrainConfig& cfg,
                      TotalLoss* parts = nullptr);

struct SynthSample {
  Tensor<float> image;  // (1, 3, h, w) in [0, 1]
  LabelMap label;       // (1, h, w)
};

/// Deterministic 64-bit generator with portable uniform draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  int below(int n);  // [0, n)

 private:
  std::uint64_t state_;
};

/// Flip (p = flip_prob), rescale by a factor drawn from cfg.scales, random
/// crop to crop_h x crop_w with zero / ignore_index padding.
SynthSample augment(const SynthSample& s, const TrainConfig& cfg, Rng& rng);

/// Horizontal mirror of image and label.
SynthSample flip_horizontal(const SynthSample& s);

/// Expected fraction of pixels of each class (index = class) for h x w scenes.
std::vector<double> synth_coverage_targets(int num_classes, int h, int w);

/// Scenes of one shape per foreground class on a textured background.
/// Class k >= 1 is a rectangle for odd k and a disk for even k, each with its
/// own colour; class 0 is background.
std::vector<SynthSample> synth_dataset(std::uint64_t seed, int n_samples,
                                       int num_classes, int h, int w);

struct HistoryRow {
  int iter = 0;
  double lr = 0;
  double loss = 0;
  double loss_main = 0;
  std::vector<double> loss_aux;
};

void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& rows,
                       const std::vector<std::string>& aux_names);

struct LoopHooks {
  /// Called after the update of iteration `iter` (1-based) when
  /// cfg.checkpoint_every divides it.
  std::function<void(int iter)> on_checkpoint;
};

/// Runs cfg.max_iter SGD iterations. Throws NumericError naming the first
/// node with a non-finite value when the loss is not finite.
std::vector<HistoryRow> train_loop(Network<float>& net,
                                   const std::vector<SynthSample>& dataset,
                                   const TrainConfig& cfg,
                                   const LoopHooks& hooks = {});

/// Fraction of non-ignored pixels whose argmax matches the label.
double pixel_accuracy(Network<float>& net, const std::vector<SynthSample>& data,
                      int ignore_index = 255);

}  // namespace bisenet::train
