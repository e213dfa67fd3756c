#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "clims/types.hpp"

namespace clims {

/// Weights of the four training objectives in the combined loss.
struct LossWeights {
  real alpha = 10.0;   // object-region / object-text matching
  real beta = 25.0;    // background-region / object-text matching
  real gamma = 29.5;   // co-occurring background suppression
  real delta = 1.15;   // activated-area regularization
};

void validate_loss_weights(const LossWeights& w);

struct TrainConfig {
  real learning_rate = 0.00025;
  real weight_decay = 0.0001;
  int epochs = 10;
  int batch_size = 16;
  int crop_size = 64;
  std::uint64_t seed = 0;
  real similarity_clamp_epsilon = 1e-4;
  LossWeights loss_weights;
};

void validate_config(const TrainConfig& cfg);

/// Flat JSON object; loss weights appear as top-level keys alpha..delta.
/// Absent keys keep their defaults, unknown keys are rejected by name.
TrainConfig load_config(const std::string& path);
TrainConfig parse_config(const std::string& json_text);
std::string serialize_config(const TrainConfig& cfg);
void save_config(const TrainConfig& cfg, const std::string& path);

/// FNV-1a of the canonical serialized form; stored in checkpoints.
std::uint64_t config_hash(const TrainConfig& cfg);

/// Object prompt per class plus an optional list of co-occurring background
/// prompts, all instantiated from one single-placeholder template.
struct PromptBook {
  std::string template_text;
  std::vector<std::string> class_names;
  std::vector<std::string> object_prompts;
  std::vector<std::vector<std::string>> background_prompts;

  int class_count() const { return static_cast<int>(class_names.size()); }
  int background_count(int k) const { return static_cast<int>(background_prompts[static_cast<std::size_t>(k)].size()); }
};

std::string instantiate_template(const std::string& template_text, const std::string& name);

PromptBook build_prompt_book(const std::vector<std::string>& class_names,
                             const std::map<std::string, std::vector<std::string>>& background_map,
                             const std::string& template_text = "a photo of {}");

PromptBook load_prompt_book(const std::string& path);
void save_prompt_book(const PromptBook& book, const std::string& path);

/// Versioned default background sets; covers only the classes with
/// pre-defined co-occurring backgrounds, all other classes map to empty lists.
std::map<std::string, std::vector<std::string>> default_background_map();

/// Background map for the bundled synthetic benchmark classes.
std::map<std::string, std::vector<std::string>> synthetic_background_map();

}  // namespace clims
