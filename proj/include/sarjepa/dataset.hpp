#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "sarjepa/image.hpp"
#include "sarjepa/imagery.hpp"

namespace sarjepa {

struct LabeledDataset {
  std::vector<SarImage> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
};

/// `count` scenes with class i % classes; scene i uses derive_seed(seed, i).
LabeledDataset generate_corpus(const SceneSpec& base, int count, std::uint64_t seed,
                               int classes = kNumShapeClasses);

/// The first round(fraction * size) items. Class balance is kept when items
/// cycle through classes, as generate_corpus does.
LabeledDataset take_fraction(const LabeledDataset& data, double fraction);

/// Writes `<root>/<split>/<class_name>/img_NNNNN<ext>`. With `unlabeled`, all
/// images go to a single `unlabeled/` folder.
void write_dataset(const std::filesystem::path& root, const std::string& split, const LabeledDataset& data,
                   const std::string& ext = ".f32", bool unlabeled = false);

/// Reads `<root>/<split>/<class>/*.{png,f32}`. Classes are the sorted folder
/// names; files are read in sorted order.
LabeledDataset read_dataset(const std::filesystem::path& root, const std::string& split);

/// Scene keys: image_size, target_reflectivity, clutter_reflectivity, looks,
/// size_min, size_max, aspect_min, aspect_max.
nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const nlohmann::json& j, SceneSpec base = {});
bool is_scene_key(const std::string& key);

/// Synthetic unlabeled-use pretraining corpus for a run seed.
LabeledDataset synthetic_pretrain_corpus(const SceneSpec& scene, int count, std::uint64_t seed);
/// Synthetic labeled evaluation set (per_class images per class) for a run
/// seed. Never overlaps the pretraining corpus stream.
LabeledDataset synthetic_probe_set(const SceneSpec& scene, int per_class, std::uint64_t seed);

}  // namespace sarjepa
