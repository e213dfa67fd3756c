#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "clims/types.hpp"

namespace clims {

/// Overflow-safe logistic function, exact branch for either sign. The result
/// is pinned to the nearest representable values inside (0,1), so saturated
/// logits never round to exactly 0 or 1.
template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  Scalar v;
  if (x >= Scalar(0)) {
    const Scalar e = std::exp(-x);
    v = Scalar(1) / (Scalar(1) + e);
  } else {
    const Scalar e = std::exp(x);
    v = e / (Scalar(1) + e);
  }
  if (v >= Scalar(1)) v = std::nextafter(Scalar(1), Scalar(0));
  if (v <= Scalar(0)) v = std::numeric_limits<Scalar>::denorm_min();
  return v;
}

/// log(1+e^x) without overflow; linear for large x.
template <typename Scalar>
Scalar softplus(Scalar x) {
  if (x > Scalar(30)) return x;
  if (x < Scalar(-30)) return std::exp(x);
  return std::log1p(std::exp(x));
}

/// log(sigmoid(x)), always finite.
template <typename Scalar>
Scalar log_sigmoid(Scalar x) {
  return -softplus(-x);
}

// ---------------------------------------------------------------------------
// Bilinear resampling (half-pixel-center convention, no corner alignment).
// ---------------------------------------------------------------------------

/// Per-output-index source pair and interpolation weight for one axis.
struct ResampleAxis {
  std::vector<int> lo, hi;
  std::vector<real> t;  // weight of hi sample
};

ResampleAxis make_resample_axis(int src_size, int dst_size);

/// Bilinear upsampling of every plane to (dst_h, dst_w). Target must be at
/// least as large as the source on both axes. Values stay within the source
/// plane's range; linear (hence differentiable) in the inputs.
PlaneStack upsample_maps(const PlaneStack& src, int dst_h, int dst_w);

/// Adjoint of upsample_maps: scatters an upstream gradient over the target
/// grid back onto the source grid.
Mat upsample_maps_adjoint(const Mat& dst_grad, int src_h, int src_w, int dst_h, int dst_w);

// ---------------------------------------------------------------------------
// Desk-scale backbone: four 3x3 convolutions, softplus after the first three,
// linear output. Layer table (64x64 input):
//   conv1  3->16  stride 1  64x64   softplus
//   conv2 16->32  stride 2  32x32   softplus
//   conv3 32->32  stride 2  16x16   softplus
//   conv4 32->32  stride 1  16x16   linear
// Spatial downsampling factor 4, feature channels C = 32.
// ---------------------------------------------------------------------------

struct Conv2dLayer {
  Mat weight;  // out_channels x (in_channels*9), column index = (ky*3 + kx)*c_in + c
  Vec bias;    // out_channels
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
};

struct BackboneParams {
  std::vector<Conv2dLayer> convs;
  ClassWeights head;  // C x K, used by both the sigmoid head and the GAP baseline

  bool initialized() const { return !convs.empty() && head.size() > 0; }
  int feature_channels() const { return convs.empty() ? 0 : convs.back().out_channels; }
  int class_count() const { return static_cast<int>(head.cols()); }
};

/// Gradient (or optimizer-state) buffers shaped like BackboneParams.
struct BackboneTensors {
  std::vector<Mat> conv_weight;
  std::vector<Vec> conv_bias;
  Mat head;
};

BackboneTensors zeros_like(const BackboneParams& params);

/// Seeded He-style initialization; the class head starts at zero so the
/// initial activation maps sit at sigmoid(0) = 0.5 everywhere.
BackboneParams init_backbone(int class_count, std::uint64_t seed);

constexpr int kBackboneDownsample = 4;
constexpr int kMinInputSize = 8;

/// Saved intermediates of one forward pass, consumed by backward_features.
struct ForwardCache {
  std::vector<Mat> col_buffers;  // im2col input of each conv
  std::vector<Mat> preact;       // pre-activation output of each conv
  std::vector<int> in_h, in_w, out_h, out_w;
};

/// Deterministic feature extraction. Errors on images below the minimum
/// receptive size. Pass a cache pointer when gradients are needed later.
FeatureMap forward_features(const BackboneParams& params, const Image& image,
                            ForwardCache* cache = nullptr);

/// Backpropagates dL/dZ through the convolution stack, accumulating parameter
/// gradients into `grads` (image-pixel gradients are not needed and not formed).
void backward_features(const BackboneParams& params, const ForwardCache& cache,
                       const Mat& feature_grad, BackboneTensors& grads);

// ---------------------------------------------------------------------------
// Heads.
// ---------------------------------------------------------------------------

/// Per-position class logits A_k(p) = W_k . Z(p). This is also the
/// conventional CAM (raw, unbounded).
ActivationMaps head_logits(const FeatureMap& features, const ClassWeights& weights);

/// Sigmoid activation head: P_k(p) = sigmoid(W_k . Z(p)), strictly in (0,1).
ActivationMaps activation_head(const FeatureMap& features, const ClassWeights& weights);

/// Raw per-class maps without nonlinearity (identical surface to head_logits,
/// kept as the baseline's named operation).
ActivationMaps conventional_cam(const FeatureMap& features, const ClassWeights& weights);

/// GAP + 1x1 convolution logits of the conventional baseline.
ClassLogits baseline_logits(const FeatureMap& features, const ClassWeights& weights);

/// Multi-label sigmoid cross entropy, summed over classes.
real baseline_bce_loss(const ClassLogits& logits, const LabelVector& labels);

/// d(bce)/d(logits); paired with baseline_bce_loss.
Vec baseline_bce_grad(const ClassLogits& logits, const LabelVector& labels);

/// Splits dL/dA into dL/dW (accumulated into head_grad) and dL/dZ (returned).
Mat head_backward(const FeatureMap& features, const ClassWeights& weights,
                  const Mat& logit_grad, Mat& head_grad);

/// Chains a gradient on upsampled sigmoid maps back to the head logits:
/// adjoint of the upsample, then the sigmoid derivative at P_feat.
Mat map_grad_to_logit_grad(const Mat& upsampled_grad, const ActivationMaps& feature_res_probs,
                           int dst_h, int dst_w);

}  // namespace clims
