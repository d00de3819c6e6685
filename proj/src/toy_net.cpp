// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/toy_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cotr {

namespace {
constexpr Dims3 kFinalUpsample{1, 2, 2};
}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ToyConfig::validate() const {
  if (!input.positive()) throw ConfigError("toy: input dims must be positive");
  if (levels < 1) throw ConfigError("toy: need at least one feature level");
  if (base_channels < 1) throw ConfigError("toy: base_channels must be positive");
  if (token_channels <= 0 || token_channels % 6 != 0) {
    throw ConfigError("toy: token_channels must be a positive multiple of 6");
  }
  if (heads <= 0 || token_channels % heads != 0) {
    throw ConfigError("toy: token_channels must be divisible by heads");
  }
  if (points < 1) throw ConfigError("toy: points must be positive");
  if (encoder_layers < 0) throw ConfigError("toy: encoder_layers must be non-negative");
  if (ffn_width < 1) throw ConfigError("toy: ffn_width must be positive");
  if (classes < 2) throw ConfigError("toy: need at least two classes");
  if (!(learning_rate >= 0.0)) throw ConfigError("toy: learning rate must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("toy: momentum must be in [0, 1)");
  if (iterations < 0) throw ConfigError("toy: iterations must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("toy: dropout must be in [0, 1)");
  if (!(dice_eps > 0.0)) throw ConfigError("toy: dice_eps must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("toy: grad_clip must be non-negative");
  if (!(noise >= 0.0)) throw ConfigError("toy: noise must be non-negative");
  const int fd = 1 << levels;
  const int fhw = 1 << (levels + 1);
  if (input.d % fd != 0 || input.h % fhw != 0 || input.w % fhw != 0) {
    throw ConfigError("toy: input " + to_string(input) + " must be divisible by (" +
                      std::to_string(fd) + "," + std::to_string(fhw) + "," +
                      std::to_string(fhw) + ") for " + std::to_string(levels) + " levels");
  }
  if (!ds_weights.empty()) {
    if (static_cast<int>(ds_weights.size()) != scale_count()) {
      throw ConfigError("toy: ds_weights needs " + std::to_string(scale_count()) +
                        " entries, got " + std::to_string(ds_weights.size()));
    }
    double sum = 0.0;
    for (double w : ds_weights) {
      if (!(w >= 0.0)) throw ConfigError("toy: ds_weights must be non-negative");
      sum += w;
    }
    if (!(sum > 0.0)) throw ConfigError("toy: ds_weights must not all be zero");
  }
}

std::vector<Dims3> ToyConfig::level_dims() const {
  std::vector<Dims3> out;
  for (int l = 1; l <= levels; ++l) {
    out.push_back({input.d >> l, input.h >> (l + 1), input.w >> (l + 1)});
  }
  return out;
}

Dims3 ToyConfig::stem_dims() const { return {input.d, input.h / 2, input.w / 2}; }

std::vector<double> ToyConfig::normalized_ds_weights() const {
  std::vector<double> w = ds_weights.empty() ? std::vector<double>(scale_count(), 1.0) : ds_weights;
  double sum = 0.0;
  for (double v : w) sum += v;
  for (double& v : w) v /= sum;
  return w;
}

// ---------------------------------------------------------------------------
// Labels and metrics
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> one_hot(const LabelVolume& labels, int classes) {
  Volume<T> out(classes, labels.dims);
  for (std::size_t v = 0; v < labels.labels.size(); ++v) {
    const int c = labels.labels[v];
    if (c < 0 || c >= classes) {
      throw InputError("one_hot: label " + std::to_string(c) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    out.channel(c)[v] = T{1};
  }
  return out;
}

LabelVolume downsample_labels(const LabelVolume& labels, Dims3 target) {
  const Dims3 src = labels.dims;
  if (!target.positive() || src.d % target.d != 0 || src.h % target.h != 0 ||
      src.w % target.w != 0) {
    throw DimensionError("downsample_labels: " + to_string(src) + " is not an integer multiple of " +
                         to_string(target));
  }
  const Dims3 f{src.d / target.d, src.h / target.h, src.w / target.w};
  LabelVolume out(target);
  for (int d = 0; d < target.d; ++d) {
    for (int h = 0; h < target.h; ++h) {
      for (int w = 0; w < target.w; ++w) {
        out.at(d, h, w) = labels.at(d * f.d + f.d / 2, h * f.h + f.h / 2, w * f.w + f.w / 2);
      }
    }
  }
  return out;
}

namespace {

template <typename T>
LabelVolume argmax_impl(const Volume<T>& logits) {
  LabelVolume out(logits.dims());
  for (std::size_t v = 0; v < logits.spatial(); ++v) {
    int best = 0;
    for (int c = 1; c < logits.channels(); ++c) {
      if (logits.channel(c)[v] > logits.channel(best)[v]) best = c;
    }
    out.labels[v] = best;
  }
  return out;
}

}  // namespace

LabelVolume argmax_labels(const Volume<double>& logits) { return argmax_impl(logits); }
LabelVolume argmax_labels(const Volume<float>& logits) { return argmax_impl(logits); }

double dice_score(const LabelVolume& pred, const LabelVolume& target, int cls) {
  if (pred.dims != target.dims) throw DimensionError("dice_score: shape mismatch");
  std::size_t both = 0;
  std::size_t p = 0;
  std::size_t t = 0;
  for (std::size_t v = 0; v < pred.labels.size(); ++v) {
    const bool a = pred.labels[v] == cls;
    const bool b = target.labels[v] == cls;
    both += a && b;
    p += a;
    t += b;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

double mean_foreground_dice(const LabelVolume& pred, const LabelVolume& target, int classes) {
  double sum = 0.0;
  for (int c = 1; c < classes; ++c) sum += dice_score(pred, target, c);
  return sum / (classes - 1);
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
void check_one_hot(const Volume<T>& target) {
  for (std::size_t v = 0; v < target.spatial(); ++v) {
    T sum{0};
    for (int c = 0; c < target.channels(); ++c) {
      const T y = target.channel(c)[v];
      if (y != T{0} && y != T{1}) {
        throw InputError("loss: target is not one-hot at voxel " + std::to_string(v));
      }
      sum += y;
    }
    if (sum != T{1}) throw InputError("loss: target is not one-hot at voxel " + std::to_string(v));
  }
}

template <typename T>
Volume<T> channel_softmax(const Volume<T>& logits) {
  Volume<T> p(logits.channels(), logits.dims());
  const int c = logits.channels();
  std::vector<T> buf(c);
  for (std::size_t v = 0; v < logits.spatial(); ++v) {
    for (int n = 0; n < c; ++n) buf[n] = logits.channel(n)[v];
    softmax_inplace<T>(buf);
    for (int n = 0; n < c; ++n) p.channel(n)[v] = buf[n];
  }
  return p;
}

namespace {

template <typename T>
void check_loss_shapes(const Volume<T>& pred, const Volume<T>& target) {
  if (!pred.same_shape(target)) {
    throw DimensionError("loss: prediction and target shapes differ");
  }
  if (pred.channels() < 1 || pred.spatial() == 0) throw DimensionError("loss: empty input");
}

}  // namespace

template <typename T>
LossValue<T> dice_ce_from_probs(const Volume<T>& probs, const Volume<T>& target, T eps) {
  check_loss_shapes(probs, target);
  check_one_hot(target);
  const int c = probs.channels();
  const double vox = static_cast<double>(probs.spatial());
  double dice = 0.0;
  double ce = 0.0;
  for (int n = 0; n < c; ++n) {
    auto p = probs.channel(n);
    auto y = target.channel(n);
    double inter = 0.0;
    double uni = 0.0;
    double log_lik = 0.0;
    for (std::size_t v = 0; v < p.size(); ++v) {
      inter += static_cast<double>(p[v]) * y[v];
      uni += static_cast<double>(p[v]) + y[v];
      if (y[v] != T{0}) log_lik += static_cast<double>(y[v]) * std::log(static_cast<double>(p[v]));
    }
    dice -= (2.0 * inter + eps) / (uni + eps);
    ce -= log_lik / vox;
  }
  LossValue<T> out;
  out.dice_term = static_cast<T>(dice / c);
  out.ce_term = static_cast<T>(ce / c);
  out.loss = static_cast<T>((dice + ce) / c);
  return out;
}

template <typename T>
LossResult<T> dice_ce_loss(const Volume<T>& logits, const Volume<T>& target, T eps) {
  check_loss_shapes(logits, target);
  check_one_hot(target);
  const int c = logits.channels();
  const std::size_t nv = logits.spatial();
  const double vox = static_cast<double>(nv);
  const Volume<T> probs = channel_softmax(logits);

  // Log-probabilities of the true class through log-sum-exp.
  double ce = 0.0;
  for (std::size_t v = 0; v < nv; ++v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int n = 0; n < c; ++n) mx = std::max(mx, static_cast<double>(logits.channel(n)[v]));
    double z = 0.0;
    for (int n = 0; n < c; ++n) z += std::exp(static_cast<double>(logits.channel(n)[v]) - mx);
    const double lse = mx + std::log(z);
    for (int n = 0; n < c; ++n) {
      const T y = target.channel(n)[v];
      if (y != T{0}) ce -= static_cast<double>(y) * (logits.channel(n)[v] - lse);
    }
  }
  ce /= vox;

  // d(-soft dice)/dp per class, pushed through the per-voxel softmax; the
  // cross-entropy term has the closed form (p - y) / (c V).
  LossResult<T> out;
  out.grad = Volume<T>(c, logits.dims());
  Volume<T> dprob(c, logits.dims());
  double dice = 0.0;
  for (int n = 0; n < c; ++n) {
    auto p = probs.channel(n);
    auto y = target.channel(n);
    double inter = 0.0;
    double uni = 0.0;
    for (std::size_t v = 0; v < nv; ++v) {
      inter += static_cast<double>(p[v]) * y[v];
      uni += static_cast<double>(p[v]) + y[v];
    }
    const double num = 2.0 * inter + eps;
    const double den = uni + eps;
    dice -= num / den;
    auto dp = dprob.channel(n);
    for (std::size_t v = 0; v < nv; ++v) {
      const double dd = (2.0 * y[v] * den - num) / (den * den);
      dp[v] = static_cast<T>(-dd / c);
    }
  }
  for (std::size_t v = 0; v < nv; ++v) {
    double s = 0.0;
    for (int n = 0; n < c; ++n) s += static_cast<double>(probs.channel(n)[v]) * dprob.channel(n)[v];
    for (int n = 0; n < c; ++n) {
      const double p = probs.channel(n)[v];
      const double g_dice = p * (dprob.channel(n)[v] - s);
      const double g_ce = (p - target.channel(n)[v]) / (c * vox);
      out.grad.channel(n)[v] = static_cast<T>(g_dice + g_ce);
    }
  }
  out.dice_term = static_cast<T>(dice / c);
  out.ce_term = static_cast<T>(ce / c);
  out.loss = static_cast<T>((dice + ce) / c);
  return out;
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> apply_conv(const ConvLayer<T>& layer, const Volume<T>& x) {
  return layer.transposed ? transposed_conv3d<T>(x, layer.weight.value, layer.bias.value, layer.geo)
                          : conv3d<T>(x, layer.weight.value, layer.bias.value, layer.geo);
}

template <typename T>
Volume<T> apply_conv_backward(ConvLayer<T>& layer, const Volume<T>& x, const Volume<T>& dy) {
  return layer.transposed
             ? transposed_conv3d_backward<T>(x, layer.weight.value, layer.geo, dy,
                                             layer.weight.grad, layer.bias.grad)
             : conv3d_backward<T>(x, layer.weight.value, layer.geo, dy, layer.weight.grad,
                                  layer.bias.grad);
}

template <typename T>
Volume<T> conv_norm_relu(const ConvNormRelu<T>& block, const Volume<T>& x,
                         ConvNormReluCache<T>* cache) {
  Volume<T> c = apply_conv(block.conv, x);
  Volume<T> y = relu(instance_norm<T>(c, block.norm.gain.value, block.norm.bias.value, T(kNormEps),
                                      cache != nullptr ? &cache->norm : nullptr));
  if (cache != nullptr) {
    cache->input = x;
    cache->output = y;
  }
  return y;
}

namespace {

template <typename T>
Volume<T> conv_norm_relu_backward(ConvNormRelu<T>& block, const ConvNormReluCache<T>& cache,
                                  const Volume<T>& dy) {
  Volume<T> dn = relu_backward(cache.output, dy);
  Volume<T> dc = instance_norm_backward<T>(cache.norm, block.norm.gain.value, dn,
                                           block.norm.gain.grad, block.norm.bias.grad);
  return apply_conv_backward(block.conv, cache.input, dc);
}

template <typename T>
Volume<T> norm(const NormLayer<T>& n, const Volume<T>& x, InstanceNormCache<T>* cache) {
  return instance_norm<T>(x, n.gain.value, n.bias.value, T(kNormEps), cache);
}

template <typename T>
Volume<T> norm_backward(NormLayer<T>& n, const InstanceNormCache<T>& cache, const Volume<T>& dy) {
  return instance_norm_backward<T>(cache, n.gain.value, dy, n.gain.grad, n.bias.grad);
}

}  // namespace

template <typename T>
Volume<T> res_block(const ResBlock<T>& block, const Volume<T>& x, ResBlockCache<T>* cache) {
  InstanceNormCache<T>* n1 = cache != nullptr ? &cache->norm1 : nullptr;
  InstanceNormCache<T>* n2 = cache != nullptr ? &cache->norm2 : nullptr;
  InstanceNormCache<T>* ns = cache != nullptr ? &cache->shortcut_norm : nullptr;
  Volume<T> hidden = relu(norm(block.norm1, apply_conv(block.conv1, x), n1));
  Volume<T> y = norm(block.norm2, apply_conv(block.conv2, hidden), n2);
  if (block.has_shortcut) {
    add_inplace(y, norm(block.shortcut_norm, apply_conv(block.shortcut, x), ns));
  } else {
    add_inplace(y, x);
  }
  y = relu(y);
  if (cache != nullptr) {
    cache->input = x;
    cache->hidden = std::move(hidden);
    cache->output = y;
  }
  return y;
}

template <typename T>
Volume<T> res_block_backward(ResBlock<T>& block, const ResBlockCache<T>& cache,
                             const Volume<T>& dy) {
  const Volume<T> dz = relu_backward(cache.output, dy);
  Volume<T> dh = apply_conv_backward(block.conv2, cache.hidden, norm_backward(block.norm2, cache.norm2, dz));
  dh = relu_backward(cache.hidden, dh);
  Volume<T> dx = apply_conv_backward(block.conv1, cache.input, norm_backward(block.norm1, cache.norm1, dh));
  if (block.has_shortcut) {
    add_inplace(dx, apply_conv_backward(block.shortcut, cache.input,
                                         norm_backward(block.shortcut_norm, cache.shortcut_norm, dz)));
  } else {
    add_inplace(dx, dz);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

// He-normal weights for layers feeding a norm/ReLU, std sqrt(1 / fan_in) for
// linear heads.
template <typename T>
ConvLayer<T> make_conv(int in, int out, Dims3 kernel, Dims3 stride, Dims3 padding, bool bias,
                       bool transposed, double gain, Rng& rng) {
  ConvLayer<T> layer;
  layer.geo = ConvGeometry{in, out, kernel, stride, padding};
  layer.geo.validate();
  layer.transposed = transposed;
  layer.weight = Param<T>({layer.geo.weight_size()});
  layer.bias = Param<T>({bias ? static_cast<std::size_t>(out) : 0});
  double fan_in = static_cast<double>(in) * kernel.count();
  if (transposed) fan_in /= static_cast<double>(stride.count());
  rng.fill_normal<T>(layer.weight.value, 0.0, std::sqrt(gain / std::max(fan_in, 1.0)));
  return layer;
}

template <typename T>
NormLayer<T> make_norm(int channels) {
  const auto c = static_cast<std::size_t>(channels);
  return {Param<T>({c}, T{1}), Param<T>({c})};
}

template <typename T>
ResBlock<T> make_res_block(int in, int out, int stride, Rng& rng) {
  ResBlock<T> b;
  const Dims3 s{stride, stride, stride};
  b.conv1 = make_conv<T>(in, out, {3, 3, 3}, s, {1, 1, 1}, false, false, 2.0, rng);
  b.norm1 = make_norm<T>(out);
  b.conv2 = make_conv<T>(out, out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, false, false, 2.0, rng);
  b.norm2 = make_norm<T>(out);
  b.has_shortcut = in != out || stride != 1;
  if (b.has_shortcut) {
    b.shortcut = make_conv<T>(in, out, {1, 1, 1}, s, {0, 0, 0}, false, false, 2.0, rng);
    b.shortcut_norm = make_norm<T>(out);
  }
  return b;
}

template <typename T, typename F>
void visit_conv(ConvLayer<T>& c, const std::string& name, F& f) {
  f(name + ".weight", c.weight);
  if (c.bias.size() > 0) f(name + ".bias", c.bias);
}

template <typename T, typename F>
void visit_norm(NormLayer<T>& n, const std::string& name, F& f) {
  f(name + ".gain", n.gain);
  f(name + ".bias", n.bias);
}

template <typename T, typename F>
void visit_block(ResBlock<T>& b, const std::string& name, F& f) {
  visit_conv(b.conv1, name + ".conv1", f);
  visit_norm(b.norm1, name + ".norm1", f);
  visit_conv(b.conv2, name + ".conv2", f);
  visit_norm(b.norm2, name + ".norm2", f);
  if (b.has_shortcut) {
    visit_conv(b.shortcut, name + ".shortcut", f);
    visit_norm(b.shortcut_norm, name + ".shortcut_norm", f);
  }
}

}  // namespace

template <typename T>
ToyNetwork<T>::ToyNetwork(const ToyConfig& config, Rng& rng) : config_(config) {
  config.validate();
  const int b = config.base_channels;
  const int c = config.token_channels;
  const int L = config.levels;
  stem.conv = make_conv<T>(1, b, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}, false, false, 2.0, rng);
  stem.norm = make_norm<T>(b);
  int width = b;
  for (int l = 0; l < L; ++l) {
    const int next = config.stage_channels(l);
    stages.push_back(make_res_block<T>(width, next, 2, rng));
    projections.push_back(make_conv<T>(next, c, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, false, 1.0, rng));
    width = next;
  }
  const int token_levels = config.multi_scale ? L : 1;
  encoder = init_encoder<T>(config.encoder_layers, c, config.heads, token_levels, config.points,
                            config.ffn_width, rng);
  for (auto& layer : encoder.layers) layer.ffn.dropout = config.dropout;
  for (int j = 0; j + 1 < L; ++j) {
    UpStage<T> up;
    up.up = make_conv<T>(c, c, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}, true, true, 1.0, rng);
    up.refine = make_res_block<T>(c, c, 1, rng);
    up.head = make_conv<T>(c, config.classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, false, 1.0, rng);
    up_stages.push_back(std::move(up));
  }
  stem_up = make_conv<T>(c, b, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}, true, true, 1.0, rng);
  stem_refine = make_res_block<T>(b, b, 1, rng);
  stem_head = make_conv<T>(b, config.classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, false, 1.0, rng);
  final_head =
      make_conv<T>(b, config.classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, false, 1.0, rng);
}

template <typename T>
void ToyNetwork<T>::visit(const std::function<void(const std::string&, Param<T>&)>& f) {
  auto g = f;
  visit_conv(stem.conv, "stem.conv", g);
  visit_norm(stem.norm, "stem.norm", g);
  for (std::size_t l = 0; l < stages.size(); ++l) {
    visit_block(stages[l], "stage" + std::to_string(l), g);
    visit_conv(projections[l], "proj" + std::to_string(l), g);
  }
  encoder.visit(g, "encoder.");
  for (std::size_t j = 0; j < up_stages.size(); ++j) {
    const std::string n = "up" + std::to_string(j);
    visit_conv(up_stages[j].up, n + ".up", g);
    visit_block(up_stages[j].refine, n + ".refine", g);
    visit_conv(up_stages[j].head, n + ".head", g);
  }
  visit_conv(stem_up, "stem_up", g);
  visit_block(stem_refine, "stem_refine", g);
  visit_conv(stem_head, "stem_head", g);
  visit_conv(final_head, "final_head", g);
}

template <typename T>
void ToyNetwork<T>::zero_grad() {
  visit([](const std::string&, Param<T>& p) { p.zero_grad(); });
}

template <typename T>
std::size_t ToyNetwork<T>::parameter_count() {
  std::size_t n = 0;
  visit([&](const std::string&, Param<T>& p) { n += p.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_image(const Volume<T>& image, const ToyConfig& config) {
  if (image.channels() != 1 || image.dims() != config.input) {
    throw DimensionError("toy: expected a 1 x " + to_string(config.input) + " image, got " +
                         std::to_string(image.channels()) + " x " + to_string(image.dims()));
  }
}

}  // namespace

template <typename T>
std::vector<Volume<T>> ToyNetwork<T>::encode(const Volume<T>& image) const {
  check_image(image, config_);
  Volume<T> e = conv_norm_relu(stem, image);
  std::vector<Volume<T>> out;
  for (std::size_t l = 0; l < stages.size(); ++l) {
    e = res_block(stages[l], e);
    out.push_back(apply_conv(projections[l], e));
  }
  return out;
}

template <typename T>
SegOutput<T> ToyNetwork<T>::forward(const Volume<T>& image, ToyWorkspace<T>* workspace,
                                    Rng* dropout_rng) const {
  check_image(image, config_);
  ToyWorkspace<T> local;
  ToyWorkspace<T>& ws = workspace != nullptr ? *workspace : local;
  ws = ToyWorkspace<T>{};
  const int L = config_.levels;

  const Volume<T> s0 = conv_norm_relu(stem, image, &ws.stem);
  ws.stages.resize(L);
  Volume<T> e = s0;
  for (int l = 0; l < L; ++l) {
    e = res_block(stages[l], e, &ws.stages[l]);
    ws.stage_out.push_back(e);
    ws.features.push_back(apply_conv(projections[l], e));
  }

  // Token path: all levels, or only the coarsest one in single-scale mode.
  std::vector<Volume<T>> g = ws.features;
  std::vector<Volume<T>> token_levels;
  if (config_.multi_scale) {
    token_levels = ws.features;
  } else {
    token_levels = {ws.features.back()};
  }
  TokenSequence<T> seq = flatten_levels(token_levels);
  ws.token_layout = seq.layout;
  seq = add_pe(seq, build_pe<T>(seq.layout, config_.token_channels));
  const ReferencePoints<T> refs = reference_points<T>(seq.layout);
  EncoderOutput<T> enc = encoder_forward(seq, refs, encoder, &ws.encoder, dropout_rng);
  std::vector<Volume<T>> decoded = unflatten(enc.output);
  if (config_.multi_scale) {
    g = std::move(decoded);
  } else {
    g.back() = std::move(decoded.front());
  }

  SegOutput<T> out;
  out.auxiliary.resize(L);
  ws.decoder_in.resize(L - 1);
  ws.refine.resize(L - 1);
  ws.refined.resize(L - 1);
  Volume<T> u = g[L - 1];
  for (int j = L - 2; j >= 0; --j) {
    ws.decoder_in[j] = u;
    u = apply_conv(up_stages[j].up, u);
    add_inplace(u, g[j]);
    u = res_block(up_stages[j].refine, u, &ws.refine[j]);
    ws.refined[j] = u;
    out.auxiliary[j + 1] = apply_conv(up_stages[j].head, u);
  }
  ws.stem_up_in = u;
  u = apply_conv(stem_up, u);
  add_inplace(u, s0);
  u = res_block(stem_refine, u, &ws.stem_refine);
  ws.stem_refined = u;
  out.auxiliary[0] = apply_conv(stem_head, u);
  ws.final_up = upsample_linear(u, kFinalUpsample);
  out.final_logits = apply_conv(final_head, ws.final_up);
  ws.valid = true;
  return out;
}

template <typename T>
Volume<T> ToyNetwork<T>::backward(const ToyWorkspace<T>& ws, const Volume<T>& dfinal,
                                  const std::vector<Volume<T>>& dauxiliary) {
  if (!ws.valid) throw StateError("toy backward: workspace holds no forward pass");
  const int L = config_.levels;
  if (static_cast<int>(dauxiliary.size()) != L) {
    throw DimensionError("toy backward: expected " + std::to_string(L) + " auxiliary gradients");
  }

  Volume<T> du = apply_conv_backward(final_head, ws.final_up, dfinal);
  du = upsample_linear_backward(ws.stem_refined.dims(), kFinalUpsample, du);
  add_inplace(du, apply_conv_backward(stem_head, ws.stem_refined, dauxiliary[0]));
  du = res_block_backward(stem_refine, ws.stem_refine, du);
  Volume<T> ds0 = du;
  du = apply_conv_backward(stem_up, ws.stem_up_in, du);
  std::vector<Volume<T>> dg(L);
  for (int j = 0; j + 1 < L; ++j) {
    add_inplace(du, apply_conv_backward(up_stages[j].head, ws.refined[j], dauxiliary[j + 1]));
    du = res_block_backward(up_stages[j].refine, ws.refine[j], du);
    dg[j] = du;
    du = apply_conv_backward(up_stages[j].up, ws.decoder_in[j], du);
  }
  dg[L - 1] = std::move(du);

  // Through the encoder; positional encoding is additive and passes through.
  std::vector<Volume<T>> df = dg;
  if (config_.multi_scale) {
    TokenSequence<T> dseq = flatten_levels(dg);
    dseq.tokens = encoder_backward(ws.encoder, dseq.tokens, encoder);
    df = unflatten(dseq);
  } else {
    TokenSequence<T> dseq = flatten_levels(std::vector<Volume<T>>{dg.back()});
    dseq.tokens = encoder_backward(ws.encoder, dseq.tokens, encoder);
    df.back() = std::move(unflatten(dseq).front());
  }

  Volume<T> de;
  for (int l = L - 1; l >= 0; --l) {
    Volume<T> dp = apply_conv_backward(projections[l], ws.stage_out[l], df[l]);
    if (l == L - 1) {
      de = std::move(dp);
    } else {
      add_inplace(de, dp);
    }
    de = res_block_backward(stages[l], ws.stages[l], de);
  }
  add_inplace(ds0, de);
  return conv_norm_relu_backward(stem, ws.stem, ds0);
}

// ---------------------------------------------------------------------------
// Deep supervision
// ---------------------------------------------------------------------------

template <typename T>
SupervisedLoss<T> deep_supervision_loss(const SegOutput<T>& output, const LabelVolume& labels,
                                        const ToyConfig& config) {
  const std::vector<double> w = config.normalized_ds_weights();
  if (output.auxiliary.size() + 1 != w.size()) {
    throw DimensionError("deep supervision: output count does not match the config");
  }
  if (labels.dims != output.final_logits.dims()) {
    throw DimensionError("deep supervision: labels " + to_string(labels.dims) +
                         " do not match logits " + to_string(output.final_logits.dims()));
  }
  SupervisedLoss<T> out;
  const T eps = static_cast<T>(config.dice_eps);
  auto one = [&](const Volume<T>& logits, const LabelVolume& lab, double weight) {
    LossResult<T> r = dice_ce_loss(logits, one_hot<T>(lab, logits.channels()), eps);
    out.per_scale.push_back(r.loss);
    if (weight > 0.0) {
      out.total += static_cast<T>(weight) * r.loss;
      for (auto& g : r.grad.data()) g *= static_cast<T>(weight);
    } else {
      std::fill(r.grad.data().begin(), r.grad.data().end(), T{0});
    }
    return std::move(r.grad);
  };
  out.dfinal = one(output.final_logits, labels, w[0]);
  for (std::size_t s = 0; s < output.auxiliary.size(); ++s) {
    const Volume<T>& aux = output.auxiliary[s];
    out.dauxiliary.push_back(one(aux, downsample_labels(labels, aux.dims()), w[s + 1]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

template <typename T>
SegmentationSample<T> make_sphere_task(Dims3 dims, std::uint64_t seed, double noise) {
  if (!dims.positive()) throw DimensionError("sphere task: dims must be positive");
  if (!(noise >= 0.0)) throw ConfigError("sphere task: noise must be non-negative");
  Rng rng(seed);
  // Physical coordinates with the depth axis stretched so the volume is
  // roughly isotropic (anisotropic voxel spacing, as in CT).
  const double sd = static_cast<double>(std::max(dims.h, dims.w)) / dims.d;
  const double extent = std::min(dims.h, dims.w);
  struct Sphere {
    double z, y, x, r;
  };
  std::vector<Sphere> spheres;
  const int count = 1 + static_cast<int>(rng.index(2));
  for (int s = 0; s < count; ++s) {
    const double r = extent * rng.uniform(0.15, 0.25);
    const double zr = std::min(r, dims.d * sd / 2.0);
    spheres.push_back({rng.uniform(zr, dims.d * sd - zr), rng.uniform(r, dims.h - r),
                       rng.uniform(r, dims.w - r), r});
  }
  const bool with_box = rng.uniform() < 0.5;
  double box[6] = {0, 0, 0, 0, 0, 0};  // lo/hi per axis in voxels
  if (with_box) {
    const Dims3 half{std::max(1, static_cast<int>(dims.d * rng.uniform(0.1, 0.2))),
                     std::max(1, static_cast<int>(dims.h * rng.uniform(0.1, 0.2))),
                     std::max(1, static_cast<int>(dims.w * rng.uniform(0.1, 0.2)))};
    const int n[3] = {dims.d, dims.h, dims.w};
    const int hs[3] = {half.d, half.h, half.w};
    for (int a = 0; a < 3; ++a) {
      const double c = rng.uniform(0.0, n[a]);
      box[2 * a] = c - hs[a];
      box[2 * a + 1] = c + hs[a];
    }
  }
  SegmentationSample<T> out{Volume<T>(1, dims), LabelVolume(dims)};
  for (int d = 0; d < dims.d; ++d) {
    for (int h = 0; h < dims.h; ++h) {
      for (int w = 0; w < dims.w; ++w) {
        const double z = (d + 0.5) * sd;
        const double y = h + 0.5;
        const double x = w + 0.5;
        bool fg = false;
        for (const auto& s : spheres) {
          const double q = (z - s.z) * (z - s.z) + (y - s.y) * (y - s.y) + (x - s.x) * (x - s.x);
          fg = fg || q <= s.r * s.r;
        }
        if (with_box) {
          fg = fg || (d + 0.5 >= box[0] && d + 0.5 <= box[1] && y >= box[2] && y <= box[3] &&
                      x >= box[4] && x <= box[5]);
        }
        out.labels.at(d, h, w) = fg ? 1 : 0;
        out.image.at(0, d, h, w) = static_cast<T>((fg ? 1.0 : 0.0) + rng.normal(0.0, noise));
      }
    }
  }
  return out;
}

template <typename T>
SegmentationSample<T> sphere_task_for(const ToyConfig& config) {
  return make_sphere_task<T>(config.input, config.seed ^ 0x7461736bULL, config.noise);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

template <typename T>
TrainResult<T> train_toy(const ToyConfig& config, const SegmentationSample<T>& sample,
                         const std::function<void(const TraceRow&)>& on_step) {
  config.validate();
  check_image(sample.image, config);
  if (sample.labels.dims != config.input) {
    throw DimensionError("train: label dims " + to_string(sample.labels.dims) +
                         " do not match input " + to_string(config.input));
  }
  Rng init_rng(config.seed);
  Rng dropout_rng(config.seed ^ 0x5bd1e995ULL);
  TrainResult<T> result;
  result.network = ToyNetwork<T>(config, init_rng);
  ToyNetwork<T>& net = result.network;

  std::vector<Param<T>*> params;
  net.visit([&](const std::string&, Param<T>& p) { params.push_back(&p); });
  std::vector<std::vector<T>> velocity;
  for (auto* p : params) velocity.emplace_back(p->size(), T{0});

  Rng* drop = config.dropout > 0.0 ? &dropout_rng : nullptr;
  for (int it = 0; it < config.iterations; ++it) {
    ToyWorkspace<T> ws;
    const SegOutput<T> out = net.forward(sample.image, &ws, drop);
    SupervisedLoss<T> loss = deep_supervision_loss(out, sample.labels, config);
    if (!std::isfinite(static_cast<double>(loss.total))) {
      throw DivergenceError("train: non-finite loss at iteration " + std::to_string(it));
    }
    const double dice =
        mean_foreground_dice(argmax_labels(out.final_logits), sample.labels, config.classes);

    net.zero_grad();
    net.backward(ws, loss.dfinal, loss.dauxiliary);
    double norm2 = 0.0;
    for (auto* p : params) {
      for (T g : p->grad) norm2 += static_cast<double>(g) * g;
    }
    if (!std::isfinite(norm2)) {
      throw DivergenceError("train: non-finite gradient at iteration " + std::to_string(it));
    }
    const double norm = std::sqrt(norm2);
    const double clip = config.grad_clip > 0.0 && norm > config.grad_clip ? config.grad_clip / norm : 1.0;
    double lr = config.learning_rate;
    if (config.lr_schedule == LrSchedule::poly) {
      lr *= std::pow(1.0 - static_cast<double>(it) / config.iterations, 0.9);
    }
    const T mu = static_cast<T>(config.momentum);
    const T step = static_cast<T>(lr);
    const T scale = static_cast<T>(clip);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& v = velocity[i];
      auto& p = *params[i];
      for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = mu * v[k] + scale * p.grad[k];
        p.value[k] -= step * v[k];
      }
    }
    const TraceRow row{it, static_cast<double>(loss.total), dice};
    result.trace.push_back(row);
    if (on_step) on_step(row);
  }

  const SegOutput<T> out = net.forward(sample.image);
  const SupervisedLoss<T> loss = deep_supervision_loss(out, sample.labels, config);
  result.final_loss = static_cast<double>(loss.total);
  if (!std::isfinite(result.final_loss)) throw DivergenceError("train: non-finite final loss");
  result.prediction = argmax_labels(out.final_logits);
  result.final_dice = mean_foreground_dice(result.prediction, sample.labels, config.classes);
  return result;
}

#define COTR_INSTANTIATE_TOY(T)                                                                  \
  template Volume<T> one_hot<T>(const LabelVolume&, int);                                        \
  template void check_one_hot(const Volume<T>&);                                                 \
  template Volume<T> channel_softmax(const Volume<T>&);                                          \
  template LossValue<T> dice_ce_from_probs(const Volume<T>&, const Volume<T>&, T);              \
  template LossResult<T> dice_ce_loss(const Volume<T>&, const Volume<T>&, T);                   \
  template Volume<T> apply_conv(const ConvLayer<T>&, const Volume<T>&);                          \
  template Volume<T> apply_conv_backward(ConvLayer<T>&, const Volume<T>&, const Volume<T>&);     \
  template Volume<T> conv_norm_relu(const ConvNormRelu<T>&, const Volume<T>&,                    \
                                    ConvNormReluCache<T>*);                                      \
  template Volume<T> res_block(const ResBlock<T>&, const Volume<T>&, ResBlockCache<T>*);         \
  template Volume<T> res_block_backward(ResBlock<T>&, const ResBlockCache<T>&, const Volume<T>&); \
  template class ToyNetwork<T>;                                                                  \
  template SupervisedLoss<T> deep_supervision_loss(const SegOutput<T>&, const LabelVolume&,      \
                                                   const ToyConfig&);                            \
  template SegmentationSample<T> make_sphere_task<T>(Dims3, std::uint64_t, double);              \
  template SegmentationSample<T> sphere_task_for<T>(const ToyConfig&);                           \
  template TrainResult<T> train_toy(const ToyConfig&, const SegmentationSample<T>&,              \
                                    const std::function<void(const TraceRow&)>&);

COTR_INSTANTIATE_TOY(float)
COTR_INSTANTIATE_TOY(double)

}  // namespace cotr
