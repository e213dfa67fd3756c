#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clims/backbone.hpp"
#include "clims/config.hpp"
#include "clims/matcher.hpp"
#include "clims/synthgen.hpp"
#include "clims/types.hpp"

namespace clims {

/// Hard per-pixel labels: 0 = background, v in {1..K} = class v-1.
using PseudoMask = MaskGrid;

/// Sigmoid-head activation maps at image resolution, averaged with the
/// horizontally flipped pass and zeroed for classes absent from `labels`.
ActivationMaps extract_cams(const BackboneParams& params, const Image& image,
                            const LabelVector& labels, bool flip_average = true);

/// Conventional CAMs for the classifier baseline: raw 1x1-conv maps,
/// flip-averaged, ReLU'd and normalized by the per-class maximum, gated like
/// extract_cams. Output lies in [0,1].
ActivationMaps extract_conventional_cams(const BackboneParams& params, const Image& image,
                                         const LabelVector& labels, bool flip_average = true);

/// Pixel label = argmax_k cams_k (+1) when the max reaches bg_threshold,
/// else background; argmax ties go to the lowest class index.
PseudoMask to_pseudo_mask(const ActivationMaps& cams, real bg_threshold);

struct IoUReport {
  Vec iou;                        // class_count+1 entries, index 0 = background
  std::vector<bool> defined;      // union > 0; undefined classes are excluded from the mean
  std::vector<long> intersection; // pixel counts per class value
  std::vector<long> union_count;
  real miou = 0;
};

/// Per-class intersection/union pixel counts over mask values 0..class_count.
IoUReport iou_report(const PseudoMask& pred, const MaskGrid& gt, int class_count);

/// Streaming pixel counts across a dataset; integer arithmetic, so the
/// aggregate is independent of accumulation order.
class IoUAccumulator {
 public:
  explicit IoUAccumulator(int class_count);
  void add(const PseudoMask& pred, const MaskGrid& gt);
  IoUReport report() const;
  long gt_pixels(int value) const { return gt_count_[static_cast<std::size_t>(value)]; }
  long intersection(int value) const { return intersection_[static_cast<std::size_t>(value)]; }

 private:
  int class_count_;
  std::vector<long> intersection_, union_, gt_count_;
};

struct ThresholdSweep {
  real best_threshold = 0;
  std::vector<real> thresholds;
  std::vector<real> miou;
};

/// Evaluates to_pseudo_mask + dataset-aggregated mIoU on every grid value;
/// ties resolve to the lower threshold.
ThresholdSweep sweep_background_threshold(const std::vector<ActivationMaps>& cams,
                                          const std::vector<MaskGrid>& gt,
                                          const std::vector<real>& grid);

std::vector<real> default_threshold_grid();  // 0.05 .. 0.95 step 0.05

enum class CamMode { sigmoid_head, conventional };

struct EvalSummary {
  real miou = 0;
  real best_threshold = 0;
  Vec class_iou;             // class_count+1, index 0 = background
  std::vector<bool> defined;
  real foreground_recall = 0;  // mean_k intersection_k / gt_k over classes present in gt
  real mean_area = 0;          // mean over images of mean_k map activation
  ThresholdSweep sweep;
};

/// Full evaluation of a model over a labeled dataset (masks required).
/// fixed_threshold <= 0 runs the sweep; otherwise the given value is used.
EvalSummary evaluate_dataset(const BackboneParams& params, const SceneDataset& data, CamMode mode,
                             const std::vector<real>& grid, real fixed_threshold = -1);

/// One 16-bit grayscale PNG per class plus a JSON sidecar (class names,
/// threshold, config hash). Returns the sidecar path.
std::string export_cam_pngs(const ActivationMaps& cams, const std::vector<std::string>& class_names,
                            real threshold, std::uint64_t config_hash, const std::string& out_dir,
                            int image_index);

// ---------------------------------------------------------------------------
// Ablation harness.
// ---------------------------------------------------------------------------

/// Canonical variant names accepted by ablation_run.
std::vector<std::string> ablation_variant_names();  // otm, otm+btm, otm+btm+reg, otm+btm+cbs, otm+btm+reg+cbs, cls

struct AblationRow {
  std::string variant;
  real miou = 0;
  Vec class_iou;  // class_count+1
  real foreground_recall = 0;
  real mean_area = 0;
  real best_threshold = 0;
  real final_epoch_mean_loss = 0;
};

struct AblationReport {
  std::vector<std::string> class_names;
  std::vector<AblationRow> rows;
  std::uint64_t seed = 0;
};

/// Trains every requested variant with identical seed and data, evaluates on
/// the held-out split, and returns one row per variant.
AblationReport ablation_run(const TrainConfig& config, const SceneDataset& train_data,
                            const SceneDataset& eval_data, const PromptBook& book,
                            const SyntheticMatcher& matcher,
                            const std::vector<std::string>& variants, const std::string& out_dir);

std::string render_ablation_table(const AblationReport& report);
std::string ablation_report_json(const AblationReport& report);

}  // namespace clims
