#pragma once

#include <vector>

#include "clims/config.hpp"
#include "clims/matcher.hpp"
#include "clims/types.hpp"

namespace clims {

/// Raw cosine similarities of one image against the prompt book.
/// s_ob row k is valid only for columns l < background_counts[k].
struct SimilarityBundle {
  Vec s_oo;  // object region <-> object text, per class
  Vec s_bo;  // background region <-> object text, per class
  Mat s_ob;  // object region <-> background texts, K x max_L
  std::vector<int> background_counts;
};

struct LossBreakdown {
  real otm = 0, btm = 0, cbs = 0, reg = 0, total = 0;
  Vec area;  // per-class mean activation S_k
};

/// Elementwise product of the image with one soft map at image resolution.
/// Foreground regions use the map itself, background regions its complement.
Image mask_out(const Image& image, const Vec& map_values);

/// Clamps a similarity into [eps, 1-eps] before it reaches a logarithm.
real clamp_similarity(real s, real eps);

// The four objectives. The matching losses expect already-clamped
// similarities; classes with label 0 contribute exactly zero.
real otm_loss(const Vec& s_oo, const LabelVector& labels);
real btm_loss(const Vec& s_bo, const LabelVector& labels);
real cbs_loss(const Mat& s_ob, const LabelVector& labels, const std::vector<int>& background_counts);

/// Mean activated area: S_k = mean_p P_k(p); returns (mean_k S_k, S).
/// Averages over every class regardless of the labels.
std::pair<real, Vec> area_regularization(const ActivationMaps& maps);

real total_loss(real otm, real btm, real cbs, real reg, const LossWeights& weights);

/// Text embeddings of a prompt book in concept-coefficient space, computed
/// once per run.
struct PromptEmbeddings {
  std::vector<Vec> object_coeff;                    // per class
  std::vector<std::vector<Vec>> background_coeff;   // per class, per background prompt
};

PromptEmbeddings embed_prompts(const PromptBook& book, const SyntheticMatcher& matcher);

struct BatchLossResult {
  LossBreakdown breakdown;                  // batch means
  std::vector<SimilarityBundle> per_image;  // raw similarities
};

/// The combined objective over a batch. `maps` hold per-class soft masks at
/// image resolution. When `map_grads` is given it receives
/// d(weighted total)/d(map) for every image, same shape as maps[i].values.
/// `density_cache` may supply precomputed matcher concept densities per image.
BatchLossResult clims_batch_loss(const std::vector<Image>& images,
                                 const std::vector<LabelVector>& labels,
                                 const std::vector<ActivationMaps>& maps,
                                 const PromptBook& book, const SyntheticMatcher& matcher,
                                 const LossWeights& weights, real clamp_eps,
                                 std::vector<Mat>* map_grads = nullptr,
                                 const std::vector<const Mat*>* density_cache = nullptr);

/// Single-image convenience used by gradient checks: feature-resolution class
/// logits -> sigmoid -> bilinear upsample -> combined loss. When `logit_grad`
/// is given it receives d(weighted total)/d(logits).
LossBreakdown clims_loss_from_logits(const ActivationMaps& logits, const Image& image,
                                     const LabelVector& labels, const PromptBook& book,
                                     const SyntheticMatcher& matcher, const LossWeights& weights,
                                     real clamp_eps, Mat* logit_grad = nullptr);

}  // namespace clims
