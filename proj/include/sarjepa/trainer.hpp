#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "sarjepa/features.hpp"
#include "sarjepa/image.hpp"
#include "sarjepa/imagery.hpp"
#include "sarjepa/masking.hpp"
#include "sarjepa/model.hpp"

namespace sarjepa {

struct PretrainConfig {
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  int batch_size = 32;
  int epochs = 50;
  int warmup_epochs = 5;
  FeatureKind feature = FeatureKind::GrLin;
  RoaKernelBank bank;
  MaskMode mask_mode = MaskMode::Local;
  double mask_ratio = 0.75;
  int windows_per_image = 4;
  /// Local window side in patches. Global mode always uses the full grid.
  int window_side = 4;
  AugConfig aug;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;
  /// Switches to 200 epochs, 20 warmup epochs and batch 300.
  bool paper_faithful = false;

  /// lr = base_lr * batch_size / 256.
  double peak_lr() const { return base_lr * batch_size / 256.0; }
  PretrainConfig resolved() const;
  void validate() const;
};

nlohmann::json to_json(const PretrainConfig& cfg);
/// Flat keys mirroring the field names. Keys it does not know are ignored so
/// one file can also carry ModelConfig keys.
PretrainConfig pretrain_config_from_json(const nlohmann::json& j, PretrainConfig base = {});

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  double pred_variance = 0.0;
  bool collapse_flag = false;
};

struct RunLog {
  std::vector<EpochRecord> epochs;

  /// `epoch,loss,lr,seconds,pred_variance`.
  void write_csv(const std::filesystem::path& path) const;
};

/// Per-image standardized pixels, one p*p row per patch in raster order.
/// With `log_input` the log of the amplitude (floored at 1e-3 of the image
/// mean) is standardized instead.
Mat<float> patchify(const SarImage& img, int patch, bool log_input = false);

/// Everything the model needs for one image: token pixels, patch targets and
/// mask flags for every window position, windows in plan order.
struct PreparedSample {
  Mat<float> pixels;
  Mat<float> targets;
  std::vector<bool> masked;
  MaskPlan plan;
};

/// Model config with target_dim and window derived from the pretraining
/// setup and the image size.
ModelConfig resolve_model_config(ModelConfig model, const PretrainConfig& cfg, int image_size);

/// Augment, compute targets on the augmented image, sample windows and masks.
PreparedSample prepare_sample(const SarImage& img, const PretrainConfig& cfg, const ModelConfig& model,
                              std::uint64_t sample_seed, bool augment_image = true);

/// Stacks samples that share a window shape.
struct Batch {
  Mat<float> pixels, targets;
  std::vector<bool> masked;
  SeqLayout layout;
  int windows_per_image = 0;
};
Batch make_batch(const std::vector<PreparedSample>& samples);

/// Mean over target dimensions of the variance of predictions across the
/// masked tokens of the batch (all tokens when nothing is masked).
double collapse_diagnostic(const ModelState<float>& state, const Batch& probe);
inline constexpr double kCollapseThreshold = 1e-4;

/// Per-image losses for one batch (mean over that image's windows).
std::vector<double> per_image_losses(const ModelState<float>& state, const Batch& batch, bool all_positions);

struct PretrainResult {
  ModelState<float> state;
  RunLog log;
  std::int64_t steps = 0;
};

struct PretrainOptions {
  /// When set: runlog.csv, checkpoints/epoch_NNNN and checkpoint/ go here.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Full masked-feature-prediction pretraining run. Deterministic for a fixed
/// seed on one platform. Throws DivergenceError on a non-finite loss after
/// writing divergence.json to the output directory.
PretrainResult pretrain(const std::vector<SarImage>& corpus, const PretrainConfig& cfg, const ModelConfig& model,
                        const PretrainOptions& opts = {});

}  // namespace sarjepa
