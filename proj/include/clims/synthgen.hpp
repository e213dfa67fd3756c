#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clims/types.hpp"

namespace clims {

struct SceneConcept {
  std::string name;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  std::string role;                                    // "object" or "background"
  Eigen::Vector3d accent_color = Eigen::Vector3d::Zero();  // objects only; zero = no accent
};

/// Declarative recipe for the synthetic benchmark scenes.
struct SceneSpec {
  int canvas_height = 64;
  int canvas_width = 64;
  std::vector<SceneConcept> concepts;
  /// cooccurrence(o, b): probability that background b appears in a scene
  /// containing object o. Indices follow the order of objects/backgrounds
  /// within `concepts`.
  Mat cooccurrence;
  int min_objects = 1;
  int max_objects = 1;
  real object_fraction_min = 0.02;
  real object_fraction_max = 0.25;
  real canvas_noise = 0.03;  // luminance-only, keeps the canvas chromaticity-neutral
  std::uint64_t seed = 0;

  std::vector<int> object_indices() const;
  std::vector<int> background_indices() const;
  std::vector<std::string> class_names() const;  // object names, class k = position
};

void validate_scene_spec(const SceneSpec& spec);

SceneSpec load_scene_spec(const std::string& path);
std::string serialize_scene_spec(const SceneSpec& spec);
void save_scene_spec(const SceneSpec& spec, const std::string& path);
std::uint64_t scene_spec_hash(const SceneSpec& spec);

/// The acceptance benchmark: 64x64 canvas, toy-train/toy-boat objects,
/// railroad/river background textures, co-occurrence 0.9.
SceneSpec default_scene_spec(std::uint64_t seed = 0);

/// One generated sample. gt_mask value 0 is background, value k+1 marks
/// pixels of class k. The mask exists for evaluation only; training reads
/// just image + labels.
struct Scene {
  Image image;
  LabelVector labels;
  MaskGrid gt_mask;
};

/// Deterministic in (spec.seed, index). Pixel values are quantized to the
/// 8-bit grid so that in-memory scenes and PNG round-trips agree exactly.
Scene generate_scene(const SceneSpec& spec, int index);

struct DatasetManifestEntry {
  std::string image_path;
  std::string mask_path;
  std::vector<int> labels;
};

/// Writes scenes [first_index, first_index+n) as PNG pairs plus manifest.json
/// (a JSON array of {image_path, mask_path, labels}) and scene_spec.json
/// (spec, class names, spec hash). Returns the manifest entries.
std::vector<DatasetManifestEntry> generate_dataset(const SceneSpec& spec, int n,
                                                   const std::string& out_dir,
                                                   int first_index = 0);

struct SceneDataset {
  std::vector<Image> images;
  std::vector<LabelVector> labels;
  std::vector<MaskGrid> masks;  // populated only in evaluation mode
  std::vector<std::string> class_names;
  int height = 0;
  int width = 0;
  std::uint64_t spec_hash = 0;

  int size() const { return static_cast<int>(images.size()); }
  int class_count() const { return static_cast<int>(class_names.size()); }
};

/// Loads a generated dataset directory. Ground-truth masks are returned only
/// when `evaluation_mode` is set; the training path never sees them.
SceneDataset load_dataset(const std::string& dir, bool evaluation_mode);

}  // namespace clims
