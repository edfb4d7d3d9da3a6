#include "sarjepa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "sarjepa/errors.hpp"
#include "sarjepa/rng.hpp"

namespace sarjepa {

namespace fs = std::filesystem;

LabeledDataset generate_corpus(const SceneSpec& base, int count, std::uint64_t seed, int classes) {
  require(count >= 1, "corpus size must be >= 1");
  require(classes >= 1 && classes <= kNumShapeClasses, "class count out of range");
  LabeledDataset data;
  for (int c = 0; c < classes; ++c) data.class_names.emplace_back(shape_class_name(c));
  data.images.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    SceneSpec spec = base;
    spec.class_id = i % classes;
    Scene scene = generate_scene(spec, derive_seed(seed, static_cast<std::uint64_t>(i), stream::scene));
    data.images.push_back(std::move(scene.image));
    data.labels.push_back(scene.label);
  }
  return data;
}

LabeledDataset take_fraction(const LabeledDataset& data, double fraction) {
  require(fraction > 0.0 && fraction <= 1.0, "dataset fraction must be in (0, 1]");
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * data.size())));
  LabeledDataset out;
  out.class_names = data.class_names;
  out.images.assign(data.images.begin(), data.images.begin() + static_cast<std::ptrdiff_t>(n));
  out.labels.assign(data.labels.begin(), data.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

void write_dataset(const fs::path& root, const std::string& split, const LabeledDataset& data,
                   const std::string& ext, bool unlabeled) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string cls =
        unlabeled ? "unlabeled" : data.class_names.at(static_cast<std::size_t>(data.labels[i]));
    const fs::path dir = root / split / cls;
    fs::create_directories(dir);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu", i);
    write_image(dir / (std::string(name) + ext), data.images[i]);
  }
}

LabeledDataset read_dataset(const fs::path& root, const std::string& split) {
  const fs::path base = root / split;
  require(fs::is_directory(base), "dataset split not found: " + base.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(base))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  require(!class_dirs.empty(), "no class folders under " + base.string());

  LabeledDataset data;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    data.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      const auto ext = e.path().extension();
      if (e.is_regular_file() && (ext == ".png" || ext == ".f32")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      data.images.push_back(read_image(f));
      data.labels.push_back(static_cast<int>(c));
    }
  }
  require(!data.images.empty(), "no images under " + base.string());
  return data;
}

namespace {

template <typename V>
void read_scene_key(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("config key '") + key + "' has the wrong type");
  }
}

const char* const kSceneKeys[] = {"image_size", "target_reflectivity", "clutter_reflectivity", "looks",
                                  "size_min",   "size_max",            "aspect_min",           "aspect_max"};

}  // namespace

nlohmann::json to_json(const SceneSpec& s) {
  return {{"image_size", s.image_size},          {"target_reflectivity", s.target_reflectivity},
          {"clutter_reflectivity", s.clutter_reflectivity}, {"looks", s.looks},
          {"size_min", s.size_range.first},      {"size_max", s.size_range.second},
          {"aspect_min", s.aspect_range.first},  {"aspect_max", s.aspect_range.second}};
}

SceneSpec scene_spec_from_json(const nlohmann::json& j, SceneSpec s) {
  read_scene_key(j, "image_size", s.image_size);
  read_scene_key(j, "target_reflectivity", s.target_reflectivity);
  read_scene_key(j, "clutter_reflectivity", s.clutter_reflectivity);
  read_scene_key(j, "looks", s.looks);
  read_scene_key(j, "size_min", s.size_range.first);
  read_scene_key(j, "size_max", s.size_range.second);
  read_scene_key(j, "aspect_min", s.aspect_range.first);
  read_scene_key(j, "aspect_max", s.aspect_range.second);
  s.validate();
  return s;
}

bool is_scene_key(const std::string& key) {
  return std::find(std::begin(kSceneKeys), std::end(kSceneKeys), key) != std::end(kSceneKeys);
}

LabeledDataset synthetic_pretrain_corpus(const SceneSpec& scene, int count, std::uint64_t seed) {
  return generate_corpus(scene, count, derive_seed(seed, 1, stream::scene));
}

LabeledDataset synthetic_probe_set(const SceneSpec& scene, int per_class, std::uint64_t seed) {
  require(per_class >= 1, "probe set needs at least one image per class");
  return generate_corpus(scene, per_class * kNumShapeClasses, derive_seed(seed, 2, stream::scene));
}

}  // namespace sarjepa
