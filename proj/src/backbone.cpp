#include "clims/backbone.hpp"

#include "clims/rng.hpp"

namespace clims {

ResampleAxis make_resample_axis(int src_size, int dst_size) {
  require(dst_size >= src_size, "upsample: target size smaller than source");
  ResampleAxis ax;
  ax.lo.resize(static_cast<std::size_t>(dst_size));
  ax.hi.resize(static_cast<std::size_t>(dst_size));
  ax.t.resize(static_cast<std::size_t>(dst_size));
  const real scale = static_cast<real>(src_size) / static_cast<real>(dst_size);
  for (int d = 0; d < dst_size; ++d) {
    real s = (static_cast<real>(d) + 0.5) * scale - 0.5;
    if (s < 0) s = 0;
    if (s > static_cast<real>(src_size - 1)) s = static_cast<real>(src_size - 1);
    const int lo = static_cast<int>(std::floor(s));
    const int hi = std::min(lo + 1, src_size - 1);
    ax.lo[static_cast<std::size_t>(d)] = lo;
    ax.hi[static_cast<std::size_t>(d)] = hi;
    ax.t[static_cast<std::size_t>(d)] = s - static_cast<real>(lo);
  }
  return ax;
}

PlaneStack upsample_maps(const PlaneStack& src, int dst_h, int dst_w) {
  const ResampleAxis ay = make_resample_axis(src.height, dst_h);
  const ResampleAxis ax = make_resample_axis(src.width, dst_w);
  PlaneStack out = make_planes<real>(src.planes(), dst_h, dst_w);
  for (int y = 0; y < dst_h; ++y) {
    const int y0 = ay.lo[static_cast<std::size_t>(y)], y1 = ay.hi[static_cast<std::size_t>(y)];
    const real ty = ay.t[static_cast<std::size_t>(y)];
    for (int x = 0; x < dst_w; ++x) {
      const int x0 = ax.lo[static_cast<std::size_t>(x)], x1 = ax.hi[static_cast<std::size_t>(x)];
      const real tx = ax.t[static_cast<std::size_t>(x)];
      out.values.col(y * dst_w + x) =
          (1 - ty) * (1 - tx) * src.values.col(y0 * src.width + x0) +
          (1 - ty) * tx * src.values.col(y0 * src.width + x1) +
          ty * (1 - tx) * src.values.col(y1 * src.width + x0) +
          ty * tx * src.values.col(y1 * src.width + x1);
    }
  }
  return out;
}

Mat upsample_maps_adjoint(const Mat& dst_grad, int src_h, int src_w, int dst_h, int dst_w) {
  const ResampleAxis ay = make_resample_axis(src_h, dst_h);
  const ResampleAxis ax = make_resample_axis(src_w, dst_w);
  Mat out = Mat::Zero(dst_grad.rows(), static_cast<Eigen::Index>(src_h) * src_w);
  for (int y = 0; y < dst_h; ++y) {
    const int y0 = ay.lo[static_cast<std::size_t>(y)], y1 = ay.hi[static_cast<std::size_t>(y)];
    const real ty = ay.t[static_cast<std::size_t>(y)];
    for (int x = 0; x < dst_w; ++x) {
      const int x0 = ax.lo[static_cast<std::size_t>(x)], x1 = ax.hi[static_cast<std::size_t>(x)];
      const real tx = ax.t[static_cast<std::size_t>(x)];
      const auto g = dst_grad.col(y * dst_w + x);
      out.col(y0 * src_w + x0) += (1 - ty) * (1 - tx) * g;
      out.col(y0 * src_w + x1) += (1 - ty) * tx * g;
      out.col(y1 * src_w + x0) += ty * (1 - tx) * g;
      out.col(y1 * src_w + x1) += ty * tx * g;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution stack.
// ---------------------------------------------------------------------------

namespace {

int conv_out_size(int in, int stride) { return (in + 2 - 3) / stride + 1; }  // 3x3, pad 1

// input: C x (H*W) -> columns (C*9) x (OH*OW)
Mat im2col(const Mat& input, int h, int w, int stride, int out_h, int out_w) {
  const int c_in = static_cast<int>(input.rows());
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(c_in) * 9, static_cast<Eigen::Index>(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Eigen::Index col = static_cast<Eigen::Index>(oy) * out_w + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= w) continue;
          cols.block(static_cast<Eigen::Index>(ky * 3 + kx) * c_in, col, c_in, 1) =
              input.col(static_cast<Eigen::Index>(iy) * w + ix);
        }
      }
    }
  }
  return cols;
}

// adjoint of im2col: scatter column gradients back to the input grid
Mat col2im(const Mat& col_grad, int c_in, int h, int w, int stride, int out_h, int out_w) {
  Mat out = Mat::Zero(c_in, static_cast<Eigen::Index>(h) * w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Eigen::Index col = static_cast<Eigen::Index>(oy) * out_w + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= w) continue;
          out.col(static_cast<Eigen::Index>(iy) * w + ix) +=
              col_grad.block(static_cast<Eigen::Index>(ky * 3 + kx) * c_in, col, c_in, 1);
        }
      }
    }
  }
  return out;
}

// Note: weight layout expected by im2col products is out_c x (9*c_in) with
// kernel-major blocks of c_in, i.e. column index = (ky*3+kx)*c_in + c.
Conv2dLayer make_layer(int c_in, int c_out, int stride, Rng& rng) {
  Conv2dLayer layer;
  layer.in_channels = c_in;
  layer.out_channels = c_out;
  layer.stride = stride;
  const real scale = std::sqrt(2.0 / (9.0 * static_cast<real>(c_in)));
  layer.weight.resize(c_out, static_cast<Eigen::Index>(c_in) * 9);
  for (Eigen::Index i = 0; i < layer.weight.rows(); ++i)
    for (Eigen::Index j = 0; j < layer.weight.cols(); ++j)
      layer.weight(i, j) = scale * rng.normal();
  layer.bias = Vec::Zero(c_out);
  return layer;
}

}  // namespace

BackboneTensors zeros_like(const BackboneParams& params) {
  BackboneTensors t;
  for (const auto& layer : params.convs) {
    t.conv_weight.push_back(Mat::Zero(layer.weight.rows(), layer.weight.cols()));
    t.conv_bias.push_back(Vec::Zero(layer.bias.size()));
  }
  t.head = Mat::Zero(params.head.rows(), params.head.cols());
  return t;
}

BackboneParams init_backbone(int class_count, std::uint64_t seed) {
  require(class_count >= 1, "backbone: class_count must be >= 1");
  Rng rng(splitmix64(seed ^ 0xb4c0ffeeULL));
  BackboneParams p;
  p.convs.push_back(make_layer(3, 16, 1, rng));
  p.convs.push_back(make_layer(16, 32, 2, rng));
  p.convs.push_back(make_layer(32, 32, 2, rng));
  p.convs.push_back(make_layer(32, 32, 1, rng));
  p.head = Mat::Zero(32, class_count);
  return p;
}

FeatureMap forward_features(const BackboneParams& params, const Image& image,
                            ForwardCache* cache) {
  require(params.initialized(), "backbone: parameters not initialized");
  validate_image(image);
  require(image.height >= kMinInputSize && image.width >= kMinInputSize,
          "backbone: image below minimum receptive size");

  Mat current = image.rgb.transpose();  // 3 x (H*W)
  int h = image.height, w = image.width;
  if (cache) {
    cache->col_buffers.clear();
    cache->preact.clear();
    cache->in_h.clear();
    cache->in_w.clear();
    cache->out_h.clear();
    cache->out_w.clear();
  }

  const std::size_t last = params.convs.size() - 1;
  for (std::size_t li = 0; li < params.convs.size(); ++li) {
    const auto& layer = params.convs[li];
    require(layer.in_channels == current.rows(), "backbone: layer channel mismatch");
    const int oh = conv_out_size(h, layer.stride);
    const int ow = conv_out_size(w, layer.stride);
    Mat cols = im2col(current, h, w, layer.stride, oh, ow);
    Mat pre = layer.weight * cols;
    pre.colwise() += layer.bias;
    if (cache) {
      cache->col_buffers.push_back(std::move(cols));
      cache->preact.push_back(pre);
      cache->in_h.push_back(h);
      cache->in_w.push_back(w);
      cache->out_h.push_back(oh);
      cache->out_w.push_back(ow);
    }
    if (li != last) {
      current = pre.unaryExpr([](real v) { return softplus(v); });
    } else {
      current = std::move(pre);  // final layer is linear
    }
    h = oh;
    w = ow;
  }

  FeatureMap features;
  features.values = std::move(current);
  features.height = h;
  features.width = w;
  return features;
}

void backward_features(const BackboneParams& params, const ForwardCache& cache,
                       const Mat& feature_grad, BackboneTensors& grads) {
  require(cache.preact.size() == params.convs.size(), "backbone: cache does not match parameters");
  Mat upstream = feature_grad;  // dL/d(layer output), starting at the linear top
  for (std::size_t li = params.convs.size(); li-- > 0;) {
    const auto& layer = params.convs[li];
    Mat dpre;
    if (li == params.convs.size() - 1) {
      dpre = std::move(upstream);
    } else {
      // softplus'(x) = sigmoid(x)
      dpre = upstream.array() *
             cache.preact[li].unaryExpr([](real v) { return stable_sigmoid(v); }).array();
    }
    grads.conv_weight[li].noalias() += dpre * cache.col_buffers[li].transpose();
    grads.conv_bias[li] += dpre.rowwise().sum();
    if (li > 0) {
      Mat dcols = layer.weight.transpose() * dpre;
      upstream = col2im(dcols, layer.in_channels, cache.in_h[li], cache.in_w[li], layer.stride,
                        cache.out_h[li], cache.out_w[li]);
    }
  }
}

ActivationMaps head_logits(const FeatureMap& features, const ClassWeights& weights) {
  require(weights.rows() == features.values.rows(),
          "head: weight channel count does not match feature channels");
  ActivationMaps maps;
  maps.height = features.height;
  maps.width = features.width;
  maps.values = weights.transpose() * features.values;
  return maps;
}

ActivationMaps activation_head(const FeatureMap& features, const ClassWeights& weights) {
  ActivationMaps maps = head_logits(features, weights);
  maps.values = maps.values.unaryExpr([](real v) { return stable_sigmoid(v); });
  return maps;
}

ActivationMaps conventional_cam(const FeatureMap& features, const ClassWeights& weights) {
  return head_logits(features, weights);
}

ClassLogits baseline_logits(const FeatureMap& features, const ClassWeights& weights) {
  require(weights.rows() == features.values.rows(),
          "head: weight channel count does not match feature channels");
  const Vec pooled = features.values.rowwise().mean();
  return weights.transpose() * pooled;
}

real baseline_bce_loss(const ClassLogits& logits, const LabelVector& labels) {
  require(logits.size() == labels.size(), "bce: logits and labels differ in length");
  validate_labels(labels);
  real loss = 0;
  for (Eigen::Index k = 0; k < logits.size(); ++k) {
    const real z = logits[k];
    loss -= labels[k] == 1 ? log_sigmoid(z) : log_sigmoid(-z);
  }
  return loss;
}

Vec baseline_bce_grad(const ClassLogits& logits, const LabelVector& labels) {
  require(logits.size() == labels.size(), "bce: logits and labels differ in length");
  Vec grad(logits.size());
  for (Eigen::Index k = 0; k < logits.size(); ++k)
    grad[k] = stable_sigmoid(logits[k]) - static_cast<real>(labels[k]);
  return grad;
}

Mat head_backward(const FeatureMap& features, const ClassWeights& weights,
                  const Mat& logit_grad, Mat& head_grad) {
  head_grad.noalias() += features.values * logit_grad.transpose();
  return weights * logit_grad;
}

Mat map_grad_to_logit_grad(const Mat& upsampled_grad, const ActivationMaps& feature_res_probs,
                           int dst_h, int dst_w) {
  Mat d_feat = upsample_maps_adjoint(upsampled_grad, feature_res_probs.height,
                                     feature_res_probs.width, dst_h, dst_w);
  return d_feat.array() * (feature_res_probs.values.array() *
                           (1.0 - feature_res_probs.values.array()));
}

}  // namespace clims
