#include "clims/synthgen.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "clims/palette.hpp"
#include "clims/png_io.hpp"
#include "clims/rng.hpp"

namespace clims {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> SceneSpec::object_indices() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(concepts.size()); ++i)
    if (concepts[static_cast<std::size_t>(i)].role == "object") out.push_back(i);
  return out;
}

std::vector<int> SceneSpec::background_indices() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(concepts.size()); ++i)
    if (concepts[static_cast<std::size_t>(i)].role == "background") out.push_back(i);
  return out;
}

std::vector<std::string> SceneSpec::class_names() const {
  std::vector<std::string> out;
  for (int i : object_indices()) out.push_back(concepts[static_cast<std::size_t>(i)].name);
  return out;
}

void validate_scene_spec(const SceneSpec& spec) {
  require(spec.canvas_height >= 16 && spec.canvas_width >= 16, "scene spec: canvas must be >= 16x16");
  const auto objects = spec.object_indices();
  const auto backgrounds = spec.background_indices();
  require(!objects.empty(), "scene spec: need at least one object concept");
  for (const auto& c : spec.concepts) {
    require(!c.name.empty(), "scene spec: empty concept name");
    require(c.role == "object" || c.role == "background",
            "scene spec: role must be \"object\" or \"background\" (got \"" + c.role + "\")");
    require(c.color.allFinite() && (c.color.array() >= 0).all() && (c.color.array() <= 1).all(),
            "scene spec: colors must lie in [0,1]");
  }
  for (std::size_t i = 0; i < spec.concepts.size(); ++i)
    for (std::size_t j = i + 1; j < spec.concepts.size(); ++j)
      require(spec.concepts[i].name != spec.concepts[j].name,
              "scene spec: duplicate concept name \"" + spec.concepts[i].name + "\"");
  require(spec.min_objects >= 1 && spec.max_objects >= spec.min_objects &&
              spec.max_objects <= static_cast<int>(objects.size()),
          "scene spec: invalid object count range");
  require(spec.cooccurrence.rows() == static_cast<Eigen::Index>(objects.size()) &&
              spec.cooccurrence.cols() == static_cast<Eigen::Index>(backgrounds.size()),
          "scene spec: cooccurrence table shape must be objects x backgrounds");
  require((spec.cooccurrence.array() >= 0).all() && (spec.cooccurrence.array() <= 1).all(),
          "scene spec: cooccurrence probabilities must lie in [0,1]");
  require(spec.object_fraction_min > 0 && spec.object_fraction_max > spec.object_fraction_min &&
              spec.object_fraction_max <= 0.5,
          "scene spec: invalid object fraction range");
  require(spec.canvas_noise >= 0 && spec.canvas_noise < 0.5, "scene spec: invalid canvas noise");
}

namespace {

json vec3_to_json(const Eigen::Vector3d& v) { return json::array({v[0], v[1], v[2]}); }

Eigen::Vector3d vec3_from_json(const json& j) {
  require(j.is_array() && j.size() == 3, "scene spec: color must be a 3-element array");
  return {j[0].get<real>(), j[1].get<real>(), j[2].get<real>()};
}

}  // namespace

std::string serialize_scene_spec(const SceneSpec& spec) {
  json j;
  j["canvas_height"] = spec.canvas_height;
  j["canvas_width"] = spec.canvas_width;
  j["concepts"] = json::array();
  for (const auto& c : spec.concepts) {
    json cj;
    cj["name"] = c.name;
    cj["role"] = c.role;
    cj["color"] = vec3_to_json(c.color);
    if (c.role == "object") cj["accent_color"] = vec3_to_json(c.accent_color);
    j["concepts"].push_back(cj);
  }
  const auto objects = spec.object_indices();
  const auto backgrounds = spec.background_indices();
  json co = json::object();
  for (std::size_t o = 0; o < objects.size(); ++o) {
    json row = json::object();
    for (std::size_t b = 0; b < backgrounds.size(); ++b) {
      const real p = spec.cooccurrence(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(b));
      if (p > 0) row[spec.concepts[static_cast<std::size_t>(backgrounds[b])].name] = p;
    }
    co[spec.concepts[static_cast<std::size_t>(objects[o])].name] = row;
  }
  j["cooccurrence"] = co;
  j["min_objects"] = spec.min_objects;
  j["max_objects"] = spec.max_objects;
  j["object_fraction_min"] = spec.object_fraction_min;
  j["object_fraction_max"] = spec.object_fraction_max;
  j["canvas_noise"] = spec.canvas_noise;
  j["seed"] = spec.seed;
  return j.dump(2);
}

SceneSpec load_scene_spec(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "scene spec: cannot open \"" + path + "\"");
  json j = json::parse(in);
  SceneSpec spec;
  spec.canvas_height = j.at("canvas_height").get<int>();
  spec.canvas_width = j.at("canvas_width").get<int>();
  for (const auto& cj : j.at("concepts")) {
    SceneConcept c;
    c.name = cj.at("name").get<std::string>();
    c.role = cj.at("role").get<std::string>();
    c.color = vec3_from_json(cj.at("color"));
    if (cj.contains("accent_color")) c.accent_color = vec3_from_json(cj["accent_color"]);
    spec.concepts.push_back(std::move(c));
  }
  const auto objects = spec.object_indices();
  const auto backgrounds = spec.background_indices();
  spec.cooccurrence = Mat::Zero(static_cast<Eigen::Index>(objects.size()),
                                static_cast<Eigen::Index>(backgrounds.size()));
  if (j.contains("cooccurrence"))
    for (const auto& row : j["cooccurrence"].items()) {
      Eigen::Index o = -1;
      for (std::size_t i = 0; i < objects.size(); ++i)
        if (spec.concepts[static_cast<std::size_t>(objects[i])].name == row.key())
          o = static_cast<Eigen::Index>(i);
      require(o >= 0, "scene spec: cooccurrence row for unknown object \"" + row.key() + "\"");
      for (const auto& cell : row.value().items()) {
        Eigen::Index b = -1;
        for (std::size_t i = 0; i < backgrounds.size(); ++i)
          if (spec.concepts[static_cast<std::size_t>(backgrounds[i])].name == cell.key())
            b = static_cast<Eigen::Index>(i);
        require(b >= 0, "scene spec: cooccurrence entry for unknown background \"" + cell.key() + "\"");
        spec.cooccurrence(o, b) = cell.value().get<real>();
      }
    }
  if (j.contains("min_objects")) spec.min_objects = j["min_objects"].get<int>();
  if (j.contains("max_objects")) spec.max_objects = j["max_objects"].get<int>();
  if (j.contains("object_fraction_min")) spec.object_fraction_min = j["object_fraction_min"].get<real>();
  if (j.contains("object_fraction_max")) spec.object_fraction_max = j["object_fraction_max"].get<real>();
  if (j.contains("canvas_noise")) spec.canvas_noise = j["canvas_noise"].get<real>();
  if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
  validate_scene_spec(spec);
  return spec;
}

void save_scene_spec(const SceneSpec& spec, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "scene spec: cannot write \"" + path + "\"");
  out << serialize_scene_spec(spec) << '\n';
}

std::uint64_t scene_spec_hash(const SceneSpec& spec) { return fnv1a64(serialize_scene_spec(spec)); }

SceneSpec default_scene_spec(std::uint64_t seed) {
  SceneSpec spec;
  spec.canvas_height = 64;
  spec.canvas_width = 64;
  spec.concepts.resize(4);
  spec.concepts[0] = {"toy-train", palette::train_body(), "object", palette::train_cab()};
  spec.concepts[1] = {"toy-boat", palette::boat_hull(), "object", palette::boat_sail()};
  spec.concepts[2] = {"railroad", palette::railroad(), "background", Eigen::Vector3d::Zero()};
  spec.concepts[3] = {"river", palette::river(), "background", Eigen::Vector3d::Zero()};
  spec.cooccurrence = Mat::Zero(2, 2);
  spec.cooccurrence(0, 0) = 0.9;  // railroad given toy-train
  spec.cooccurrence(1, 1) = 0.9;  // river given toy-boat
  spec.min_objects = 1;
  spec.max_objects = 1;
  spec.object_fraction_min = 0.03;
  spec.object_fraction_max = 0.10;
  spec.canvas_noise = 0.03;
  spec.seed = seed;
  return spec;
}

namespace {

real band_texture_factor(int style, int x, int y) {
  if (style % 2 == 0) return (x % 5 < 2) ? 0.55 : 1.0;  // sleeper stripes
  return 0.75 + 0.25 * std::sin(2.0 * M_PI * x / 8.0 + 0.7 * y);  // waves
}

void paint_rect(Image& img, int y0, int x0, int h, int w, const Eigen::Vector3d& color) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) img.rgb.row(y * img.width + x) = color.transpose();
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, int index) {
  validate_scene_spec(spec);
  require(index >= 0, "generate_scene: index must be nonnegative");
  const int H = spec.canvas_height, W = spec.canvas_width;
  Rng rng = stream_rng(spec.seed, static_cast<std::uint64_t>(index));

  Scene scene;
  scene.image = make_image<real>(H, W);
  for (int p = 0; p < H * W; ++p) {
    const real lum = palette::canvas_gray() * (1.0 + spec.canvas_noise * rng.uniform(-1.0, 1.0));
    scene.image.rgb.row(p).setConstant(lum);
  }
  scene.gt_mask = MaskGrid::Zero(H * W);

  const auto objects = spec.object_indices();
  const auto backgrounds = spec.background_indices();
  scene.labels = LabelVector::Zero(static_cast<Eigen::Index>(objects.size()));

  const int count = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));
  const int slot_h = H / std::max(count, 1);
  require(slot_h >= 24 && W >= 16, "generate_scene: canvas too small for requested object count");

  std::vector<int> order(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  std::vector<int> chosen(order.begin(), order.begin() + count);
  std::sort(chosen.begin(), chosen.end());

  for (int slot = 0; slot < count; ++slot) {
    const int class_idx = chosen[static_cast<std::size_t>(slot)];
    const auto& obj = spec.concepts[static_cast<std::size_t>(objects[static_cast<std::size_t>(class_idx)])];
    const int slot_top = slot * slot_h;

    std::vector<int> present_bands;
    for (std::size_t b = 0; b < backgrounds.size(); ++b)
      if (rng.bernoulli(spec.cooccurrence(class_idx, static_cast<Eigen::Index>(b))))
        present_bands.push_back(static_cast<int>(b));

    // object size from the per-scene fraction budget
    const real frac = rng.uniform(spec.object_fraction_min, spec.object_fraction_max);
    const real target_area = frac * H * W / count;
    int h = static_cast<int>(rng.uniform_int(9, 12));
    int w = std::max(6, std::min(W - 6, static_cast<int>(std::lround(target_area / h))));
    const real lo = spec.object_fraction_min * H * W / count;
    const real hi = spec.object_fraction_max * H * W / count;
    for (int guard = 0; guard < 64 && w * h < lo; ++guard) (w < W - 6) ? ++w : ++h;
    for (int guard = 0; guard < 64 && w * h > hi; ++guard) (w > 6) ? --w : --h;
    require(w * h >= lo && w * h <= hi,
            "generate_scene: cannot place an object within the configured fraction range");

    const int band_h = static_cast<int>(rng.uniform_int(7, 9));
    int y0;
    if (!present_bands.empty()) {
      // primary band near the slot bottom; the object sits on it with a
      // two-row overlap
      const int band_top = slot_top + slot_h - band_h - static_cast<int>(rng.uniform_int(2, 5));
      const int b0 = present_bands.front();
      const auto& bg = spec.concepts[static_cast<std::size_t>(backgrounds[static_cast<std::size_t>(b0)])];
      for (int y = band_top; y < band_top + band_h; ++y)
        for (int x = 0; x < W; ++x)
          scene.image.rgb.row(y * W + x) = (bg.color * band_texture_factor(b0, x, y)).transpose();
      // any further co-occurring bands stack above the slot's upper area
      int next_top = slot_top + 1;
      for (std::size_t extra = 1; extra < present_bands.size(); ++extra) {
        const int b = present_bands[extra];
        const auto& bg2 = spec.concepts[static_cast<std::size_t>(backgrounds[static_cast<std::size_t>(b)])];
        if (next_top + band_h >= band_top - h) break;  // no room left above the object
        for (int y = next_top; y < next_top + band_h; ++y)
          for (int x = 0; x < W; ++x)
            scene.image.rgb.row(y * W + x) = (bg2.color * band_texture_factor(b, x, y)).transpose();
        next_top += band_h + 1;
      }
      y0 = band_top + 2 - h;  // bottom of the object overlaps the band's top rows
    } else {
      y0 = slot_top + static_cast<int>(rng.uniform_int(1, std::max(1, slot_h - h - 1)));
    }
    y0 = std::max(slot_top, std::min(y0, slot_top + slot_h - h));
    const int x0 = static_cast<int>(rng.uniform_int(2, std::max(2, W - 2 - w)));

    const bool has_accent = obj.accent_color.sum() > 0;
    const int accent_rows = has_accent ? std::max(1, h / 3) : 0;
    if (accent_rows > 0) paint_rect(scene.image, y0, x0, accent_rows, w, obj.accent_color);
    paint_rect(scene.image, y0 + accent_rows, x0, h - accent_rows, w, obj.color);
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) scene.gt_mask[y * W + x] = class_idx + 1;
    scene.labels[class_idx] = 1;
  }

  // snap to the 8-bit grid so PNG round-trips reproduce scenes exactly
  scene.image.rgb = scene.image.rgb.unaryExpr(
      [](real v) { return std::round(std::min(std::max(v, real(0)), real(1)) * 255.0) / 255.0; });
  return scene;
}

std::vector<DatasetManifestEntry> generate_dataset(const SceneSpec& spec, int n,
                                                   const std::string& out_dir, int first_index) {
  require(n >= 0, "generate_dataset: n must be nonnegative");
  validate_scene_spec(spec);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("generate_dataset: cannot create \"" + out_dir + "\": " + ec.message());

  std::vector<DatasetManifestEntry> entries;
  entries.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int idx = first_index + i;
    const Scene scene = generate_scene(spec, idx);
    char image_name[32], mask_name[32];
    std::snprintf(image_name, sizeof image_name, "scene_%05d.png", idx);
    std::snprintf(mask_name, sizeof mask_name, "mask_%05d.png", idx);
    write_png_rgb8((fs::path(out_dir) / image_name).string(), scene.image);
    write_png_gray8((fs::path(out_dir) / mask_name).string(), scene.gt_mask, scene.image.height,
                    scene.image.width);
    DatasetManifestEntry entry;
    entry.image_path = image_name;
    entry.mask_path = mask_name;
    entry.labels.assign(scene.labels.data(), scene.labels.data() + scene.labels.size());
    entries.push_back(std::move(entry));
  }

  json manifest = json::array();
  for (const auto& e : entries)
    manifest.push_back({{"image_path", e.image_path}, {"mask_path", e.mask_path}, {"labels", e.labels}});
  {
    std::ofstream out(fs::path(out_dir) / "manifest.json");
    if (!out.good()) throw std::runtime_error("generate_dataset: cannot write manifest in \"" + out_dir + "\"");
    out << manifest.dump(2) << '\n';
  }
  {
    json meta;
    meta["spec"] = json::parse(serialize_scene_spec(spec));
    meta["classes"] = spec.class_names();
    char hash_hex[24];
    std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                  static_cast<unsigned long long>(scene_spec_hash(spec)));
    meta["spec_hash"] = hash_hex;
    std::ofstream out(fs::path(out_dir) / "scene_spec.json");
    if (!out.good())
      throw std::runtime_error("generate_dataset: cannot write scene_spec.json in \"" + out_dir + "\"");
    out << meta.dump(2) << '\n';
  }
  return entries;
}

SceneDataset load_dataset(const std::string& dir, bool evaluation_mode) {
  std::ifstream manifest_in(fs::path(dir) / "manifest.json");
  require(manifest_in.good(), "load_dataset: cannot open manifest.json in \"" + dir + "\"");
  json manifest = json::parse(manifest_in);
  require(manifest.is_array(), "load_dataset: manifest.json must be a JSON array");

  SceneDataset ds;
  std::ifstream meta_in(fs::path(dir) / "scene_spec.json");
  require(meta_in.good(), "load_dataset: cannot open scene_spec.json in \"" + dir + "\"");
  json meta = json::parse(meta_in);
  ds.class_names = meta.at("classes").get<std::vector<std::string>>();
  ds.spec_hash = std::stoull(meta.at("spec_hash").get<std::string>(), nullptr, 16);

  for (const auto& entry : manifest) {
    Image img = read_png_rgb8((fs::path(dir) / entry.at("image_path").get<std::string>()).string());
    if (ds.size() == 0) {
      ds.height = img.height;
      ds.width = img.width;
    }
    require(img.height == ds.height && img.width == ds.width, "load_dataset: inconsistent image sizes");
    const auto labels = entry.at("labels").get<std::vector<int>>();
    require(labels.size() == ds.class_names.size(), "load_dataset: label length mismatch");
    LabelVector y(static_cast<Eigen::Index>(labels.size()));
    for (std::size_t k = 0; k < labels.size(); ++k) y[static_cast<Eigen::Index>(k)] = labels[k];
    validate_labels(y);
    if (evaluation_mode) {
      int mh = 0, mw = 0;
      MaskGrid mask = read_png_gray8((fs::path(dir) / entry.at("mask_path").get<std::string>()).string(), mh, mw);
      require(mh == img.height && mw == img.width, "load_dataset: mask size mismatch");
      ds.masks.push_back(std::move(mask));
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(std::move(y));
  }
  return ds;
}

}  // namespace clims
