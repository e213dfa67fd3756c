#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clims/backbone.hpp"
#include "clims/config.hpp"
#include "clims/losses.hpp"
#include "clims/matcher.hpp"
#include "clims/rng.hpp"
#include "clims/synthgen.hpp"

namespace clims {

/// Which objective a run optimizes: the text-matching composite, or the
/// GAP+BCE classifier baseline (evaluated later with conventional CAMs).
struct TrainObjective {
  enum class Kind { text_matching, classifier };
  Kind kind = Kind::text_matching;
  LossWeights weights;  // effective weights; ablations zero out terms

  static TrainObjective text_matching_with(const LossWeights& w) { return {Kind::text_matching, w}; }
  static TrainObjective classifier() { return {Kind::classifier, {0, 0, 0, 0}}; }
};

struct TrainState {
  BackboneParams params;
  BackboneTensors velocity;
  int epoch = 0;
  std::int64_t step = 0;
  Rng rng;
  std::uint64_t config_hash = 0;
};

TrainState init_train_state(const TrainConfig& config, int class_count);

constexpr real kSgdMomentum = 0.9;

/// Cosine annealing: lr0 * 0.5 * (1 + cos(pi * step/total_steps)).
real lr_at(std::int64_t step, std::int64_t total_steps, real lr0);

struct StepResult {
  LossBreakdown breakdown;
  real learning_rate = 0;
};

/// One SGD step (momentum 0.9, decoupled weight decay) on a prepared batch.
/// Aborts with a diagnostic dump if the loss turns non-finite.
StepResult train_step(TrainState& state, const std::vector<Image>& images,
                      const std::vector<LabelVector>& labels, const PromptBook& book,
                      const SyntheticMatcher& matcher, const TrainConfig& config,
                      const TrainObjective& objective, std::int64_t total_steps,
                      const std::vector<int>* batch_indices = nullptr);

struct TrainResult {
  std::string final_checkpoint;
  std::vector<std::string> checkpoints;  // one per epoch boundary, element 0 = initial state
  std::vector<real> epoch_mean_total;    // mean total loss per completed epoch
};

/// Full training run: seeded shuffling, random crop + horizontal flip
/// augmentation, per-step cosine schedule, one checkpoint per epoch and a
/// JSON-lines loss log under out_dir. Pass `resume` to continue a run from a
/// saved state (remaining epochs of the same config are executed).
TrainResult train(const TrainConfig& config, const SceneDataset& data, const PromptBook& book,
                  const SyntheticMatcher& matcher, const std::string& out_dir,
                  const TrainObjective& objective,
                  const std::optional<TrainState>& resume = std::nullopt);

void save_checkpoint(const TrainState& state, const std::string& path);

struct CheckpointLoadResult {
  TrainState state;
  std::string warning;  // nonempty when the stored config hash mismatches
};

/// Loads a checkpoint. A config-hash mismatch is reported as a warning while
/// the load still proceeds; format and version problems throw.
CheckpointLoadResult load_checkpoint(const std::string& path,
                                     std::optional<std::uint64_t> expected_config_hash = std::nullopt);

/// Order-stable FNV-1a over every parameter byte; used by determinism checks.
std::uint64_t params_checksum(const BackboneParams& params);

}  // namespace clims
