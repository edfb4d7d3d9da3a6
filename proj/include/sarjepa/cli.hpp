#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "sarjepa/eval.hpp"
#include "sarjepa/model.hpp"
#include "sarjepa/trainer.hpp"

namespace sarjepa {

/// Lowercase hex SHA-1 of `"blob <size>\0" + bytes`, as git computes it.
std::string git_blob_hash(const std::string& bytes);
/// Blob hash of a file. For a directory, the blob hash of the sorted listing
/// of `<relative path> <blob hash>` lines over every regular file below it.
std::string content_hash(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  /// name -> content hash of every input file or directory.
  nlohmann::json inputs = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  std::string started_at;
  std::string finished_at;
  std::string status = "ok";

  /// Blob hash over the sorted `name hash` lines of `inputs` plus the
  /// resolved config.
  std::string input_hash() const;
  nlohmann::json to_json() const;
  /// Writes `<dir>/run_manifest.json`.
  void write(const std::filesystem::path& dir) const;
};

/// UTC time as YYYY-MM-DDTHH:MM:SSZ.
std::string utc_timestamp();

/// Named encoder sizes used by the sweep: tiny, small, desk.
ModelConfig model_preset(const std::string& name);

struct SweepPoint {
  double dataset_fraction = 1.0;
  std::string model_size = "config";  ///< "config" keeps the model from the pretrain section
  int epochs = 0;
};

struct SweepRow {
  int point = 0;
  SweepPoint axes;
  std::size_t corpus_size = 0;
  int shots = 0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  std::string status;
  std::string message;
};

/// Cartesian product of the axes in the order dataset_fraction, model_size,
/// epochs. Throws ValidationError on unknown or empty axes.
std::vector<SweepPoint> sweep_grid(const nlohmann::json& axes, const PretrainConfig& base);

/// Runs the CLI; returns the process exit code (0 ok, 1 validation, 2 divergence).
int run_cli(const std::vector<std::string>& args);

}  // namespace sarjepa
