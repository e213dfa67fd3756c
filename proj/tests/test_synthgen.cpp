#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "clims/matcher.hpp"
#include "clims/palette.hpp"
#include "clims/synthgen.hpp"
#include "testutil.hpp"

using namespace clims;

TEST_CASE("scenes are deterministic in (seed, index)") {
  const SceneSpec spec = default_scene_spec(42);
  const Scene a = generate_scene(spec, 7);
  const Scene b = generate_scene(spec, 7);
  CHECK((a.image.rgb - b.image.rgb).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.gt_mask - b.gt_mask).cwiseAbs().maxCoeff() == 0);
  CHECK(a.labels == b.labels);

  const Scene c = generate_scene(spec, 8);
  CHECK((a.image.rgb - c.image.rgb).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("labels match the ground-truth mask contents") {
  const SceneSpec spec = default_scene_spec(3);
  for (int index = 0; index < 40; ++index) {
    const Scene scene = generate_scene(spec, index);
    for (int k = 0; k < scene.labels.size(); ++k) {
      const bool present = (scene.gt_mask.array() == k + 1).any();
      CHECK(scene.labels[k] == (present ? 1 : 0));
    }
    CHECK(scene.labels.sum() >= spec.min_objects);
  }
}

TEST_CASE("object pixel fraction stays within the configured range") {
  const SceneSpec spec = default_scene_spec(11);
  for (int index = 0; index < 40; ++index) {
    const Scene scene = generate_scene(spec, index);
    const real fraction = static_cast<real>((scene.gt_mask.array() > 0).count()) /
                          static_cast<real>(scene.gt_mask.size());
    CHECK(fraction >= spec.object_fraction_min);
    CHECK(fraction <= spec.object_fraction_max);
  }
}

TEST_CASE("certain co-occurrence puts the background texture in every scene") {
  SceneSpec spec = default_scene_spec(5);
  spec.cooccurrence(0, 0) = 1.0;
  spec.cooccurrence(1, 1) = 1.0;
  const SyntheticMatcher matcher(default_concept_table());
  for (int index = 0; index < 20; ++index) {
    const Scene scene = generate_scene(spec, index);
    const Vec coverage = matcher.coverage(scene.image);
    if (scene.labels[0] == 1) CHECK(coverage[2] > 1.0);  // railroad texture present
    if (scene.labels[1] == 1) CHECK(coverage[3] > 1.0);  // river texture present
  }
}

TEST_CASE("zero co-occurrence leaves a plain canvas outside the object") {
  SceneSpec spec = default_scene_spec(9);
  spec.cooccurrence.setZero();
  spec.canvas_noise = 0.0;
  const real canvas = std::round(palette::canvas_gray() * 255.0) / 255.0;
  for (int index = 0; index < 10; ++index) {
    const Scene scene = generate_scene(spec, index);
    for (int p = 0; p < scene.gt_mask.size(); ++p) {
      if (scene.gt_mask[p] != 0) continue;
      for (int c = 0; c < 3; ++c) CHECK(scene.image.rgb(p, c) == canvas);
    }
  }
}

TEST_CASE("the object rests on its band: object pixels directly above band rows") {
  const SceneSpec spec = default_scene_spec(17);
  const SyntheticMatcher matcher(default_concept_table());
  int scenes_with_band = 0;
  for (int index = 0; index < 30; ++index) {
    const Scene scene = generate_scene(spec, index);
    if (matcher.coverage(scene.image).tail(2).maxCoeff() > 1.0) ++scenes_with_band;
  }
  CHECK(scenes_with_band > 15);  // co-occurrence 0.9
}

TEST_CASE("scene spec JSON round trip and hash stability") {
  const SceneSpec spec = default_scene_spec(123);
  const auto dir = testutil::scratch_dir("scenespec");
  save_scene_spec(spec, dir + "/spec.json");
  const SceneSpec loaded = load_scene_spec(dir + "/spec.json");
  CHECK(serialize_scene_spec(loaded) == serialize_scene_spec(spec));
  CHECK(scene_spec_hash(loaded) == scene_spec_hash(spec));
  const Scene a = generate_scene(spec, 4);
  const Scene b = generate_scene(loaded, 4);
  CHECK((a.image.rgb - b.image.rgb).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("scene spec validation") {
  SceneSpec spec = default_scene_spec();
  spec.cooccurrence(0, 0) = 1.5;
  CHECK_THROWS_AS(validate_scene_spec(spec), ValidationError);
  spec = default_scene_spec();
  spec.concepts[0].role = "prop";
  CHECK_THROWS_AS(validate_scene_spec(spec), ValidationError);
  spec = default_scene_spec();
  spec.max_objects = 5;
  CHECK_THROWS_AS(validate_scene_spec(spec), ValidationError);
  spec = default_scene_spec();
  spec.concepts.erase(spec.concepts.begin(), spec.concepts.begin() + 2);  // objects gone
  CHECK_THROWS_AS(validate_scene_spec(spec), ValidationError);
}

TEST_CASE("canvas too small for the requested object count") {
  SceneSpec spec = default_scene_spec();
  spec.canvas_height = 40;
  spec.canvas_width = 40;
  spec.min_objects = 2;
  spec.max_objects = 2;
  // 40/2 = 20 rows per slot, below the minimum slot height
  CHECK_THROWS_AS(generate_scene(spec, 0), ValidationError);
}

TEST_CASE("two-object scenes keep objects in disjoint slots") {
  SceneSpec spec = default_scene_spec(31);
  spec.min_objects = 2;
  spec.max_objects = 2;
  const Scene scene = generate_scene(spec, 2);
  CHECK(scene.labels.sum() == 2);
  CHECK((scene.gt_mask.array() == 1).any());
  CHECK((scene.gt_mask.array() == 2).any());
}

TEST_CASE("generate_dataset: n=0 writes an empty manifest and no image files") {
  const auto dir = testutil::scratch_dir("dataset_empty");
  const auto entries = generate_dataset(default_scene_spec(), 0, dir);
  CHECK(entries.empty());
  std::ifstream manifest(dir + "/manifest.json");
  const std::string text((std::istreambuf_iterator<char>(manifest)),
                         std::istreambuf_iterator<char>());
  CHECK(text.find('[') != std::string::npos);
  int pngs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".png") ++pngs;
  CHECK(pngs == 0);
}

TEST_CASE("generate_dataset round trip reproduces in-memory scenes exactly") {
  const auto dir = testutil::scratch_dir("dataset_rt");
  SceneSpec spec = default_scene_spec(77);
  generate_dataset(spec, 12, dir);
  const SceneDataset ds = load_dataset(dir, true);
  REQUIRE(ds.size() == 12);
  CHECK(ds.class_names == spec.class_names());
  CHECK(ds.spec_hash == scene_spec_hash(spec));
  for (int i = 0; i < 12; ++i) {
    const Scene scene = generate_scene(spec, i);
    CHECK((ds.images[i].rgb - scene.image.rgb).cwiseAbs().maxCoeff() == 0.0);
    CHECK((ds.masks[i] - scene.gt_mask).cwiseAbs().maxCoeff() == 0);
    CHECK(ds.labels[i] == scene.labels);
  }
}

TEST_CASE("manifest label counts equal per-class scene counts from masks") {
  const auto dir = testutil::scratch_dir("dataset_counts");
  generate_dataset(default_scene_spec(99), 25, dir);
  const SceneDataset ds = load_dataset(dir, true);
  Eigen::VectorXi label_counts = Eigen::VectorXi::Zero(ds.class_count());
  Eigen::VectorXi mask_counts = Eigen::VectorXi::Zero(ds.class_count());
  for (int i = 0; i < ds.size(); ++i) {
    for (int k = 0; k < ds.class_count(); ++k) {
      label_counts[k] += ds.labels[i][k];
      bool found = false;
      for (Eigen::Index p = 0; p < ds.masks[i].size(); ++p)
        if (ds.masks[i][p] == k + 1) found = true;
      mask_counts[k] += found ? 1 : 0;
    }
  }
  CHECK(label_counts == mask_counts);
}

TEST_CASE("training-mode loading withholds the masks") {
  const auto dir = testutil::scratch_dir("dataset_trainmode");
  generate_dataset(default_scene_spec(1), 3, dir);
  const SceneDataset train_view = load_dataset(dir, false);
  CHECK(train_view.masks.empty());
  CHECK(train_view.size() == 3);
  const SceneDataset eval_view = load_dataset(dir, true);
  CHECK(eval_view.masks.size() == 3);
}

TEST_CASE("dataset files are byte-identical across runs") {
  const auto dir_a = testutil::scratch_dir("dataset_bytes_a");
  const auto dir_b = testutil::scratch_dir("dataset_bytes_b");
  generate_dataset(default_scene_spec(5), 4, dir_a);
  generate_dataset(default_scene_spec(5), 4, dir_b);
  for (const auto& name : {"scene_00000.png", "mask_00003.png", "manifest.json"}) {
    std::ifstream fa(dir_a + "/" + name, std::ios::binary);
    std::ifstream fb(dir_b + "/" + name, std::ios::binary);
    const std::string a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(a == b);
    CHECK(!a.empty());
  }
}
