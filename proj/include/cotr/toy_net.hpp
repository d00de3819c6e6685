// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// A miniature hybrid CNN / deformable-transformer segmentation network.
//
//   stem       Conv-IN-ReLU, stride (1,2,2)                  -> (D, H/2, W/2)
//   stage l    residual block, stride 2, width base * 2^l    -> (D/2^l, H/2^(l+1), W/2^(l+1))
//   proj l     1x1x1 conv to the common token width C
//   encoder    positional encoding + L_D DeTrans layers over the flattened levels
//   decoder    transposed-conv upsampling, skip summation, residual refinement
//              and a 1x1x1 auxiliary head per scale; a final (1,2,2) linear
//              upsampling and 1x1x1 head restore the input resolution.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cotr/detrans.hpp"
#include "cotr/ops.hpp"
#include "cotr/positional_encoding.hpp"

namespace cotr {

enum class LrSchedule { constant, poly };

struct ToyConfig {
  Dims3 input{16, 48, 48};
  int base_channels = 8;
  int token_channels = 24;
  int levels = 2;
  int encoder_layers = 2;
  int heads = 2;
  int points = 4;
  int ffn_width = 96;
  int classes = 2;
  double learning_rate = 0.01;
  double momentum = 0.99;
  int iterations = 300;
  std::uint64_t seed = 0;
  /// Final scale first, then auxiliary heads from finest to coarsest. Empty
  /// means one per scale. Normalized to sum to one.
  std::vector<double> ds_weights;
  bool multi_scale = true;
  double dropout = 0.0;
  double dice_eps = 1e-5;
  LrSchedule lr_schedule = LrSchedule::poly;
  double grad_clip = 12.0;  // global L2 norm; 0 disables
  double noise = 0.3;       // synthetic task background noise

  void validate() const;
  /// Feature-pyramid dims (D/2^l, H/2^(l+1), W/2^(l+1)) for l = 1..L.
  std::vector<Dims3> level_dims() const;
  Dims3 stem_dims() const;
  int stage_channels(int stage) const { return base_channels << (stage + 1); }
  /// Number of supervised outputs (final + auxiliary).
  int scale_count() const { return levels + 1; }
  std::vector<double> normalized_ds_weights() const;
};

/// Integer class labels on a grid, row-major (d, h, w).
struct LabelVolume {
  Dims3 dims{0, 0, 0};
  std::vector<int> labels;

  LabelVolume() = default;
  explicit LabelVolume(Dims3 d, int fill = 0) : dims(d), labels(d.count(), fill) {}
  int& at(int d, int h, int w) { return labels[(static_cast<std::size_t>(d) * dims.h + h) * dims.w + w]; }
  int at(int d, int h, int w) const {
    return labels[(static_cast<std::size_t>(d) * dims.h + h) * dims.w + w];
  }
};

template <typename T>
Volume<T> one_hot(const LabelVolume& labels, int classes);

/// Nearest-neighbour downsampling by integer factors (centre sample).
LabelVolume downsample_labels(const LabelVolume& labels, Dims3 target);

LabelVolume argmax_labels(const Volume<double>& logits);
LabelVolume argmax_labels(const Volume<float>& logits);

/// 2|P & T| / (|P| + |T|) for one class, 1 when both are empty.
double dice_score(const LabelVolume& pred, const LabelVolume& target, int cls);

/// Mean Dice over classes 1..classes-1.
double mean_foreground_dice(const LabelVolume& pred, const LabelVolume& target, int classes);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
struct LossValue {
  T loss = T{0};
  T dice_term = T{0};  // (1/c) sum_n -soft_dice_n
  T ce_term = T{0};    // (1/c) sum_n -E[y_n log p_n]
};

template <typename T>
struct LossResult : LossValue<T> {
  Volume<T> grad;  // d loss / d logits
};

/// L = (1/c) sum_n { -(2 sum p_n y_n + eps) / (sum (p_n + y_n) + eps) - E[y_n log p_n] }
/// with terms where y = 0 contributing nothing to the cross-entropy.
template <typename T>
LossValue<T> dice_ce_from_probs(const Volume<T>& probs, const Volume<T>& target, T eps);

/// Softmax over channels, then the joint loss and its gradient w.r.t. logits.
template <typename T>
LossResult<T> dice_ce_loss(const Volume<T>& logits, const Volume<T>& target, T eps);

template <typename T>
Volume<T> channel_softmax(const Volume<T>& logits);

/// Throws InputError unless every voxel is a one-hot class vector.
template <typename T>
void check_one_hot(const Volume<T>& target);

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

template <typename T>
struct ConvLayer {
  ConvGeometry geo;
  Param<T> weight;
  Param<T> bias;  // empty when followed by a norm
  bool transposed = false;
};

template <typename T>
struct NormLayer {
  Param<T> gain;
  Param<T> bias;
};

template <typename T>
struct ConvNormRelu {
  ConvLayer<T> conv;
  NormLayer<T> norm;
};

template <typename T>
struct ResBlock {
  ConvLayer<T> conv1;
  NormLayer<T> norm1;
  ConvLayer<T> conv2;
  NormLayer<T> norm2;
  bool has_shortcut = false;
  ConvLayer<T> shortcut;
  NormLayer<T> shortcut_norm;
};

template <typename T>
struct UpStage {
  ConvLayer<T> up;
  ResBlock<T> refine;
  ConvLayer<T> head;
};

template <typename T>
struct SegOutput {
  Volume<T> final_logits;            // c x D x H x W
  std::vector<Volume<T>> auxiliary;  // finest first
};

template <typename T>
struct ConvNormReluCache {
  Volume<T> input;
  InstanceNormCache<T> norm;
  Volume<T> output;
};

template <typename T>
struct ResBlockCache {
  Volume<T> input;
  InstanceNormCache<T> norm1;
  Volume<T> hidden;
  InstanceNormCache<T> norm2;
  InstanceNormCache<T> shortcut_norm;
  Volume<T> output;
};

template <typename T>
struct ToyWorkspace {
  bool valid = false;
  ConvNormReluCache<T> stem;
  std::vector<ResBlockCache<T>> stages;
  std::vector<Volume<T>> stage_out;  // projection inputs
  std::vector<Volume<T>> features;   // projected levels f_l
  LevelLayout token_layout;
  EncoderWorkspace<T> encoder;
  std::vector<Volume<T>> decoder_in;    // transposed-conv inputs, per level stage
  std::vector<ResBlockCache<T>> refine;  // per level stage
  std::vector<Volume<T>> refined;        // refined outputs, head inputs
  Volume<T> stem_up_in;
  ResBlockCache<T> stem_refine;
  Volume<T> stem_refined;
  Volume<T> final_up;  // final head input
};

template <typename T>
class ToyNetwork {
 public:
  ToyNetwork() = default;
  ToyNetwork(const ToyConfig& config, Rng& rng);

  const ToyConfig& config() const { return config_; }

  /// Feature levels produced by the CNN encoder (after projection to C).
  std::vector<Volume<T>> encode(const Volume<T>& image) const;

  SegOutput<T> forward(const Volume<T>& image, ToyWorkspace<T>* workspace = nullptr,
                       Rng* dropout_rng = nullptr) const;

  /// Gradients of the final logits and each auxiliary output; accumulates
  /// parameter gradients and returns d/dimage.
  Volume<T> backward(const ToyWorkspace<T>& workspace, const Volume<T>& dfinal,
                     const std::vector<Volume<T>>& dauxiliary);

  void visit(const std::function<void(const std::string&, Param<T>&)>& f);
  void zero_grad();
  std::size_t parameter_count();

  // Components, exposed for inspection and tests.
  ConvNormRelu<T> stem;
  std::vector<ResBlock<T>> stages;
  std::vector<ConvLayer<T>> projections;
  EncoderParams<T> encoder;
  std::vector<UpStage<T>> up_stages;  // index j upsamples level j+1 onto level j
  ConvLayer<T> stem_up;
  ResBlock<T> stem_refine;
  ConvLayer<T> stem_head;
  ConvLayer<T> final_head;

 private:
  ToyConfig config_;
};

// Building blocks (also used by the compositional tests).
template <typename T>
Volume<T> apply_conv(const ConvLayer<T>& layer, const Volume<T>& x);
template <typename T>
Volume<T> apply_conv_backward(ConvLayer<T>& layer, const Volume<T>& x, const Volume<T>& dy);
template <typename T>
Volume<T> conv_norm_relu(const ConvNormRelu<T>& block, const Volume<T>& x,
                         ConvNormReluCache<T>* cache = nullptr);
template <typename T>
Volume<T> res_block(const ResBlock<T>& block, const Volume<T>& x,
                    ResBlockCache<T>* cache = nullptr);
template <typename T>
Volume<T> res_block_backward(ResBlock<T>& block, const ResBlockCache<T>& cache,
                             const Volume<T>& dy);

/// Weighted deep-supervision loss over all outputs; fills per-output grads.
template <typename T>
struct SupervisedLoss {
  T total = T{0};
  std::vector<T> per_scale;  // final first, then auxiliary (finest first)
  Volume<T> dfinal;
  std::vector<Volume<T>> dauxiliary;
};

template <typename T>
SupervisedLoss<T> deep_supervision_loss(const SegOutput<T>& output, const LabelVolume& labels,
                                        const ToyConfig& config);

// ---------------------------------------------------------------------------
// Synthetic task and training
// ---------------------------------------------------------------------------

template <typename T>
struct SegmentationSample {
  Volume<T> image;  // 1 x D x H x W
  LabelVolume labels;
};

/// Random spheres (and sometimes a box) of class 1 over Gaussian noise.
template <typename T>
SegmentationSample<T> make_sphere_task(Dims3 dims, std::uint64_t seed, double noise);

/// The task instance used by training demos, sweeps and acceptance runs:
/// drawn from a stream derived from config.seed, distinct from the one that
/// initializes the weights.
template <typename T>
SegmentationSample<T> sphere_task_for(const ToyConfig& config);

struct TraceRow {
  int iteration;
  double loss;
  double dice;
};

template <typename T>
struct TrainResult {
  std::vector<TraceRow> trace;
  ToyNetwork<T> network;
  LabelVolume prediction;
  double final_dice = 0.0;
  double final_loss = 0.0;
};

template <typename T>
TrainResult<T> train_toy(const ToyConfig& config, const SegmentationSample<T>& sample,
                         const std::function<void(const TraceRow&)>& on_step = {});

}  // namespace cotr
