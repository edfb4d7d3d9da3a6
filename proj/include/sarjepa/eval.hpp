#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sarjepa/dataset.hpp"
#include "sarjepa/model.hpp"

namespace sarjepa {

struct FewShotSplit {
  int shots = 0;
  std::vector<std::size_t> train;  ///< ascending
  std::vector<std::size_t> test;   ///< ascending
  std::uint64_t seed = 0;
};

/// Exactly `shots` items per class drawn without replacement; the rest is
/// the test set. Throws ValidationError naming a class with <= shots items.
FewShotSplit make_few_shot_split(const LabeledDataset& data, int shots, std::uint64_t seed);

enum class ProbeMode { Linear, Finetune };
ProbeMode parse_probe_mode(const std::string& s);
std::string probe_mode_name(ProbeMode m);

struct ProbeConfig {
  ProbeMode mode = ProbeMode::Linear;
  double lr = 1e-3;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch_size = 50;
  int epochs = 40;
  int warmup_epochs = 2;
  double warmup_lr = 1e-5;
  /// Start the classifier at zero instead of a small random init.
  bool zero_init = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Mean-pooled output of the last encoder block with every patch visible and
/// the whole patch grid as one sequence.
Eigen::VectorXf encode_image_features(const ModelState<float>& state, const SarImage& img);
/// One row per image; images are encoded in chunks.
Mat<float> encode_features(const ModelState<float>& state, const std::vector<SarImage>& images);

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<int> predictions;  ///< for split.test, in order
};

/// Trains a classifier on split.train and scores split.test. In linear mode
/// the encoder is frozen and `features` (one row per dataset item) are used;
/// finetune mode ignores them and updates a private copy of the encoder.
ProbeResult probe(const ModelState<float>& state, const FewShotSplit& split, const ProbeConfig& cfg,
                  const LabeledDataset& data);
ProbeResult probe_features(const Mat<float>& features, const std::vector<int>& labels, int num_classes,
                           const FewShotSplit& split, const ProbeConfig& cfg);

/// Index of the largest entry; ties go to the lowest index.
int argmax_lowest(const Eigen::Ref<const Eigen::VectorXf>& v);

struct FewShotRun {
  int shots = 0;
  int repeat = 0;
  std::uint64_t seed = 0;
  ProbeMode mode = ProbeMode::Linear;
  double accuracy = 0.0;
};

struct FewShotSummary {
  int shots = 0;
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation; 0 for a single repeat
};

struct FewShotTable {
  std::vector<FewShotRun> runs;
  std::vector<FewShotSummary> summary;

  /// `shots,repeat,seed,mode,accuracy`.
  void write_csv(const std::filesystem::path& path) const;
};

/// Split seed for (shots, repeat) under a base seed.
std::uint64_t split_seed(std::uint64_t seed, int shots, int repeat);

FewShotTable evaluate_few_shot(const ModelState<float>& state, const LabeledDataset& data,
                               const std::vector<int>& shots, int repeats, const ProbeConfig& cfg);

FewShotSummary summarize(int shots, const std::vector<double>& accuracies);

/// Attention-weighted mean distance in pixels between query patch centers and
/// key patch centers for one (query x key) attention matrix over a
/// rows x cols patch grid, averaged over queries.
double mean_attention_distance(const Eigen::Ref<const Eigen::MatrixXd>& attn, int rows, int cols, int patch);

struct AttentionDistance {
  int layer = 0;
  int head = 0;
  double mean_distance_px = 0.0;
};

/// Per encoder block and head, averaged over images. Whole-grid sequences,
/// nothing masked.
std::vector<AttentionDistance> attention_distance(const ModelState<float>& state,
                                                  const std::vector<SarImage>& images);

/// `layer,head,mean_distance_px`.
void write_attention_csv(const std::filesystem::path& path, const std::vector<AttentionDistance>& rows);

}  // namespace sarjepa
