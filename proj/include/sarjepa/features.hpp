#pragma once

#include <Eigen/Core>
#include <string>
#include <string_view>
#include <vector>

#include "sarjepa/image.hpp"

namespace sarjepa {

enum class KernelKind { Linear, Gaussian };

/// Multi-scale ratio-of-averages kernel bank. Each half-size r gives a full
/// square kernel of side 2r + 1.
struct RoaKernelBank {
  std::vector<int> scales{5, 9, 13, 17};
  KernelKind kind = KernelKind::Linear;
  double epsilon = 1e-2;

  /// Gaussian standard deviation tied to the kernel half-size.
  static double sigma(int r) { return 0.3 * (r - 1) + 0.8; }
  int max_scale() const;
  void validate() const;
};

struct RoaRatios {
  Plane r1;  ///< right / left half-window means
  Plane r3;  ///< below / above half-window means
};

struct GradientField {
  Plane g_h;
  Plane g_v;
  Plane g_m;
};

/// Per-pixel (cell == 1) or per-cell (cell > 1) multi-channel feature raster.
/// For per-cell features each plane has height/cell rows.
struct TargetFeature {
  std::vector<Plane> channels;
  int cell = 1;

  int num_channels() const { return static_cast<int>(channels.size()); }
  /// Size of the source image in pixels.
  Eigen::Index height() const { return channels.empty() ? 0 : channels.front().rows() * cell; }
  Eigen::Index width() const { return channels.empty() ? 0 : channels.front().cols() * cell; }
};

/// One row per patch in raster order over the patch grid.
struct PatchTargets {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vectors;
  int grid_rows = 0;
  int grid_cols = 0;
};

/// Reflect-101 index into [0, n): -1 -> 1, n -> n - 2.
inline Eigen::Index reflect_index(Eigen::Index i, Eigen::Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

/// Ratio of half-window means on `img + epsilon`, mirror-padded at borders.
/// Half-windows exclude the center row (R3) or column (R1).
RoaRatios roa_ratios(const SarImage& img, int r, KernelKind kind, double epsilon);

/// Log-ratio gradients and their magnitude at one scale.
GradientField gr_single_scale(const SarImage& img, int r, KernelKind kind, double epsilon);

/// Channel k is the gradient magnitude at bank.scales[k] (ascending order).
TargetFeature multi_scale_target(const SarImage& img, const RoaKernelBank& bank);

/// Centered differences I(x+1) - I(x-1) with mirror padding.
GradientField differential_gradient(const SarImage& img);

enum class GradientKind { Differential, Ratio };

/// Per-cell orientation histograms over [0, pi) with linear bin interpolation,
/// each histogram L2-normalized (norm floored at 1e-6). The ratio kind emits
/// one histogram per bank scale, channel index = scale * bins + bin.
TargetFeature hog_target(const SarImage& img, int cell, int bins, GradientKind kind,
                         const RoaKernelBank& bank = {});

/// Ideal radial low-pass: zeroes frequencies whose radius exceeds
/// cutoff_fraction of the diagonal Nyquist radius.
TargetFeature lpf_target(const SarImage& img, double cutoff_fraction = 0.5);

TargetFeature pixel_target(const SarImage& img);

/// Standardizes each patch-channel block of a per-pixel feature and flattens
/// channel-major. Per-cell features (cell == p) pass through unchanged, one
/// C-vector per patch.
PatchTargets patch_targets(const TargetFeature& tf, int p);

enum class FeatureKind { Pixel, Lpf, Hog, SarHog, GrLin, GrGau };

FeatureKind parse_feature_kind(std::string_view name);
std::string_view feature_kind_name(FeatureKind kind);

/// Builds the configured prediction target for one image.
TargetFeature compute_target(const SarImage& img, FeatureKind kind, const RoaKernelBank& bank, int patch);

/// Length of one patch target vector for the given feature.
int target_dim(FeatureKind kind, const RoaKernelBank& bank, int patch, int hog_bins = 9);

}  // namespace sarjepa
