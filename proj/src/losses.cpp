#include "clims/losses.hpp"

#include <cmath>

#include "clims/backbone.hpp"
#include "clims/parallel.hpp"

namespace clims {

Image mask_out(const Image& image, const Vec& map_values) {
  require(map_values.size() == image.pixel_count(), "mask_out: map size does not match image");
  require((map_values.array() >= 0).all() && (map_values.array() <= 1).all(),
          "mask_out: map values must lie in [0,1]");
  Image out = image;
  out.rgb.array().colwise() *= map_values.array();
  return out;
}

real clamp_similarity(real s, real eps) {
  require(eps > 0 && eps < 0.5, "clamp_similarity: eps must lie in (0, 0.5)");
  return std::min(std::max(s, eps), 1.0 - eps);
}

real otm_loss(const Vec& s_oo, const LabelVector& labels) {
  require(s_oo.size() == labels.size(), "otm_loss: length mismatch");
  real loss = 0;
  for (Eigen::Index k = 0; k < labels.size(); ++k)
    if (labels[k] == 1) loss -= std::log(s_oo[k]);
  return loss;
}

real btm_loss(const Vec& s_bo, const LabelVector& labels) {
  require(s_bo.size() == labels.size(), "btm_loss: length mismatch");
  real loss = 0;
  for (Eigen::Index k = 0; k < labels.size(); ++k)
    if (labels[k] == 1) loss -= std::log(1.0 - s_bo[k]);
  return loss;
}

real cbs_loss(const Mat& s_ob, const LabelVector& labels, const std::vector<int>& background_counts) {
  require(s_ob.rows() == labels.size(), "cbs_loss: row count mismatch");
  require(background_counts.size() == static_cast<std::size_t>(labels.size()),
          "cbs_loss: background count list mismatch");
  real loss = 0;
  for (Eigen::Index k = 0; k < labels.size(); ++k) {
    if (labels[k] != 1) continue;
    const int count = background_counts[static_cast<std::size_t>(k)];
    require(count <= s_ob.cols(), "cbs_loss: background count exceeds similarity columns");
    for (int l = 0; l < count; ++l) loss -= std::log(1.0 - s_ob(k, l));
  }
  return loss;
}

std::pair<real, Vec> area_regularization(const ActivationMaps& maps) {
  require((maps.values.array() >= 0).all() && (maps.values.array() <= 1).all(),
          "area_regularization: map values must lie in [0,1]");
  Vec areas = maps.values.rowwise().mean();
  return {areas.mean(), areas};
}

real total_loss(real otm, real btm, real cbs, real reg, const LossWeights& weights) {
  return weights.alpha * otm + weights.beta * btm + weights.gamma * cbs + weights.delta * reg;
}

PromptEmbeddings embed_prompts(const PromptBook& book, const SyntheticMatcher& matcher) {
  PromptEmbeddings out;
  out.object_coeff.reserve(static_cast<std::size_t>(book.class_count()));
  out.background_coeff.resize(static_cast<std::size_t>(book.class_count()));
  for (int k = 0; k < book.class_count(); ++k) {
    out.object_coeff.push_back(matcher.text_coefficients(book.object_prompts[static_cast<std::size_t>(k)]));
    for (const auto& prompt : book.background_prompts[static_cast<std::size_t>(k)])
      out.background_coeff[static_cast<std::size_t>(k)].push_back(matcher.text_coefficients(prompt));
  }
  return out;
}

namespace {

// Similarity of one region-coverage vector against a text coefficient vector,
// plus its gradient with respect to the coverage. On the null branch (coverage
// below the matcher threshold) the similarity is exactly zero with no gradient,
// matching the designated null embedding being orthogonal to every concept.
struct CoverageSimilarity {
  real value = 0;
  Vec grad;  // d value / d coverage
  bool null_branch = false;
};

CoverageSimilarity coverage_similarity(const Vec& coverage, const Vec& text_coeff) {
  CoverageSimilarity out;
  const real norm = coverage.norm();
  if (norm < SyntheticMatcher::kNullThreshold) {
    out.grad = Vec::Zero(coverage.size());
    out.null_branch = true;
    return out;
  }
  const Vec unit = coverage / norm;
  out.value = text_coeff.dot(unit);
  out.grad = (text_coeff - out.value * unit) / norm;
  return out;
}

struct ImageLossSlot {
  LossBreakdown breakdown;
  SimilarityBundle bundle;
  Mat map_grad;
};

}  // namespace

BatchLossResult clims_batch_loss(const std::vector<Image>& images,
                                 const std::vector<LabelVector>& labels,
                                 const std::vector<ActivationMaps>& maps,
                                 const PromptBook& book, const SyntheticMatcher& matcher,
                                 const LossWeights& weights, real clamp_eps,
                                 std::vector<Mat>* map_grads,
                                 const std::vector<const Mat*>* density_cache) {
  const int batch = static_cast<int>(images.size());
  require(batch > 0, "clims_batch_loss: empty batch");
  require(labels.size() == images.size() && maps.size() == images.size(),
          "clims_batch_loss: images, labels and maps must have equal length");
  const int class_count = book.class_count();
  validate_loss_weights(weights);

  int max_bg = 0;
  std::vector<int> bg_counts(static_cast<std::size_t>(class_count));
  for (int k = 0; k < class_count; ++k) {
    bg_counts[static_cast<std::size_t>(k)] = book.background_count(k);
    max_bg = std::max(max_bg, bg_counts[static_cast<std::size_t>(k)]);
  }

  const PromptEmbeddings prompts = embed_prompts(book, matcher);
  const real inv_batch = 1.0 / static_cast<real>(batch);

  std::vector<ImageLossSlot> slots(static_cast<std::size_t>(batch));
  parallel_for(batch, [&](int i) {
    const Image& image = images[static_cast<std::size_t>(i)];
    const LabelVector& y = labels[static_cast<std::size_t>(i)];
    const ActivationMaps& P = maps[static_cast<std::size_t>(i)];
    require(y.size() == class_count,
            "clims_batch_loss: prompt book does not cover the label vector");
    require(P.planes() == class_count, "clims_batch_loss: map plane count mismatch");
    require(P.height == image.height && P.width == image.width,
            "clims_batch_loss: maps must be at image resolution");
    validate_labels(y);

    ImageLossSlot& slot = slots[static_cast<std::size_t>(i)];
    slot.bundle.s_oo = Vec::Zero(class_count);
    slot.bundle.s_bo = Vec::Zero(class_count);
    slot.bundle.s_ob = Mat::Zero(class_count, max_bg);
    slot.bundle.background_counts = bg_counts;
    if (map_grads) slot.map_grad = Mat::Zero(class_count, P.pixel_count());

    Mat local_density;
    const Mat* density = nullptr;
    if (density_cache) {
      density = (*density_cache)[static_cast<std::size_t>(i)];
    }
    if (!density) {
      local_density = matcher.concept_density(image);
      density = &local_density;
    }
    const Vec density_total = density->rowwise().sum();

    Vec s_oo_clamped = Vec::Zero(class_count);
    Vec s_bo_clamped = Vec::Zero(class_count);
    Mat s_ob_clamped = Mat::Zero(class_count, max_bg);

    for (int k = 0; k < class_count; ++k) {
      if (y[k] != 1) continue;
      const Vec mask = P.values.row(k).transpose();
      require((mask.array() >= 0).all() && (mask.array() <= 1).all(),
              "clims_batch_loss: map values must lie in [0,1]");
      const Vec w_fg = (*density) * mask;
      const Vec w_bg = density_total - w_fg;  // density * (1 - mask)

      const CoverageSimilarity fg_obj =
          coverage_similarity(w_fg, prompts.object_coeff[static_cast<std::size_t>(k)]);
      const CoverageSimilarity bg_obj =
          coverage_similarity(w_bg, prompts.object_coeff[static_cast<std::size_t>(k)]);

      slot.bundle.s_oo[k] = fg_obj.value;
      slot.bundle.s_bo[k] = bg_obj.value;
      s_oo_clamped[k] = clamp_similarity(fg_obj.value, clamp_eps);
      s_bo_clamped[k] = clamp_similarity(bg_obj.value, clamp_eps);

      if (map_grads) {
        // OTM: -log(s_oo); gradient gated off where the clamp is active.
        if (fg_obj.value > clamp_eps && fg_obj.value < 1.0 - clamp_eps) {
          const real coef = -weights.alpha * inv_batch / s_oo_clamped[k];
          slot.map_grad.row(k) += coef * (density->transpose() * fg_obj.grad).transpose();
        }
        // BTM: -log(1 - s_bo); region uses the complement mask.
        if (bg_obj.value > clamp_eps && bg_obj.value < 1.0 - clamp_eps) {
          const real coef = weights.beta * inv_batch / (1.0 - s_bo_clamped[k]);
          slot.map_grad.row(k) -= coef * (density->transpose() * bg_obj.grad).transpose();
        }
      }

      for (int l = 0; l < bg_counts[static_cast<std::size_t>(k)]; ++l) {
        const CoverageSimilarity fg_bg = coverage_similarity(
            w_fg, prompts.background_coeff[static_cast<std::size_t>(k)][static_cast<std::size_t>(l)]);
        slot.bundle.s_ob(k, l) = fg_bg.value;
        s_ob_clamped(k, l) = clamp_similarity(fg_bg.value, clamp_eps);
        if (map_grads && fg_bg.value > clamp_eps && fg_bg.value < 1.0 - clamp_eps) {
          const real coef = weights.gamma * inv_batch / (1.0 - s_ob_clamped(k, l));
          slot.map_grad.row(k) += coef * (density->transpose() * fg_bg.grad).transpose();
        }
      }
    }

    slot.breakdown.otm = otm_loss(s_oo_clamped, y);
    slot.breakdown.btm = btm_loss(s_bo_clamped, y);
    slot.breakdown.cbs = cbs_loss(s_ob_clamped, y, bg_counts);
    const auto [reg, areas] = area_regularization(P);
    slot.breakdown.reg = reg;
    slot.breakdown.area = areas;
    slot.breakdown.total = total_loss(slot.breakdown.otm, slot.breakdown.btm, slot.breakdown.cbs,
                                      slot.breakdown.reg, weights);
    if (map_grads) {
      const real reg_coef =
          weights.delta * inv_batch / (static_cast<real>(class_count) * P.pixel_count());
      slot.map_grad.array() += reg_coef;
    }
  });

  BatchLossResult result;
  result.breakdown.area = Vec::Zero(class_count);
  result.per_image.reserve(static_cast<std::size_t>(batch));
  if (map_grads) map_grads->resize(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    ImageLossSlot& slot = slots[static_cast<std::size_t>(i)];
    result.breakdown.otm += slot.breakdown.otm * inv_batch;
    result.breakdown.btm += slot.breakdown.btm * inv_batch;
    result.breakdown.cbs += slot.breakdown.cbs * inv_batch;
    result.breakdown.reg += slot.breakdown.reg * inv_batch;
    result.breakdown.area += slot.breakdown.area * inv_batch;
    result.per_image.push_back(std::move(slot.bundle));
    if (map_grads) (*map_grads)[static_cast<std::size_t>(i)] = std::move(slot.map_grad);
  }
  result.breakdown.total = total_loss(result.breakdown.otm, result.breakdown.btm,
                                      result.breakdown.cbs, result.breakdown.reg, weights);
  return result;
}

LossBreakdown clims_loss_from_logits(const ActivationMaps& logits, const Image& image,
                                     const LabelVector& labels, const PromptBook& book,
                                     const SyntheticMatcher& matcher, const LossWeights& weights,
                                     real clamp_eps, Mat* logit_grad) {
  ActivationMaps probs = logits;
  probs.values = logits.values.unaryExpr([](real v) { return stable_sigmoid(v); });
  ActivationMaps up = upsample_maps(probs, image.height, image.width);

  std::vector<Mat> map_grads;
  const BatchLossResult result =
      clims_batch_loss({image}, {labels}, {up}, book, matcher, weights, clamp_eps,
                       logit_grad ? &map_grads : nullptr);
  if (logit_grad)
    *logit_grad = map_grad_to_logit_grad(map_grads[0], probs, image.height, image.width);
  return result.breakdown;
}

}  // namespace clims
