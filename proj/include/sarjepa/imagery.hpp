#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <string_view>
#include <utility>

#include "sarjepa/image.hpp"
#include "sarjepa/rng.hpp"

namespace sarjepa {

enum class ShapeClass : int { Rectangle = 0, Ellipse = 1, Cross = 2, LShape = 3, TwoBlob = 4 };
inline constexpr int kNumShapeClasses = 5;
std::string_view shape_class_name(int class_id);

/// Parameters of one synthetic scene: a single shape over homogeneous clutter.
struct SceneSpec {
  int image_size = 64;
  int class_id = 0;
  double target_reflectivity = 4.0;
  double clutter_reflectivity = 1.0;
  int looks = 1;
  /// Characteristic shape extent in pixels (full length of the long axis).
  std::pair<double, double> size_range{18.0, 36.0};
  /// Minor/major axis ratio for rectangles and ellipses.
  std::pair<double, double> aspect_range{0.35, 0.7};
  /// Orientation in radians.
  std::pair<double, double> angle_range{0.0, 3.141592653589793};
  int max_retries = 100;

  void validate() const;
};

struct Scene {
  SarImage image;
  int label = 0;
  /// 1 inside the shape, 0 in clutter.
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask;
};

/// Renders one shape of `spec.class_id` over clutter and speckles it.
/// Deterministic in (spec, seed). Throws ValidationError when no sampled pose
/// fits within the image after `spec.max_retries` attempts.
Scene generate_scene(const SceneSpec& spec, std::uint64_t seed);

/// L-look multiplicative speckle: a = sqrt(r^2 * n), n ~ Gamma(L, 1/L) i.i.d.
/// The noise field depends only on the seed and the raster size.
SarImage apply_speckle(const SarImage& reflectivity, int looks, std::uint64_t seed);

/// Draws n ~ Gamma(L, 1/L) per pixel in raster order.
Plane gamma_field(Eigen::Index height, Eigen::Index width, int looks, std::uint64_t seed);

struct AugConfig {
  std::pair<double, double> crop_scale_range{0.2, 1.0};
  double hflip_prob = 0.5;
  std::pair<double, double> contrast_range{0.5, 1.5};

  void validate() const;
  static AugConfig identity() { return {{1.0, 1.0}, 0.0, {1.0, 1.0}}; }
};

/// Crop rectangle chosen by the resized-crop stage (rows/cols in pixels).
struct CropBox {
  Eigen::Index top = 0, left = 0, height = 0, width = 0;
};

/// Samples a crop box the way torchvision's RandomResizedCrop does, with
/// aspect ratio log-uniform in [3/4, 4/3] and a centered fallback.
CropBox sample_crop(Eigen::Index height, Eigen::Index width, std::pair<double, double> scale_range,
                    Rng& rng);

/// Bilinear resample of `box` in `img` back to the image's own size.
Plane resize_crop(const Plane& img, const CropBox& box);

/// Random resized crop, horizontal flip, then mean-preserving contrast with
/// clamping at zero. Deterministic in (img, cfg, seed).
SarImage augment(const SarImage& img, const AugConfig& cfg, std::uint64_t seed);

/// out = max(0, mean + f * (img - mean)). f == 1 returns the input unchanged.
Plane adjust_contrast(const Plane& img, double factor);

}  // namespace sarjepa
