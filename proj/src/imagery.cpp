#include "sarjepa/imagery.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "sarjepa/errors.hpp"

namespace sarjepa {

std::string_view shape_class_name(int class_id) {
  static constexpr std::array<std::string_view, kNumShapeClasses> names = {
      "rectangle", "ellipse", "cross", "lshape", "twoblob"};
  require(class_id >= 0 && class_id < kNumShapeClasses, "class id out of range");
  return names[static_cast<std::size_t>(class_id)];
}

void SceneSpec::validate() const {
  require(image_size >= 8, "image_size must be >= 8");
  require(class_id >= 0 && class_id < kNumShapeClasses, "class_id out of range");
  require(clutter_reflectivity > 0.0, "clutter_reflectivity must be > 0");
  require(target_reflectivity > clutter_reflectivity,
          "target_reflectivity must exceed clutter_reflectivity");
  require(looks >= 1, "looks must be >= 1");
  require(size_range.first > 0 && size_range.first <= size_range.second, "bad size_range");
  // A rotated shape spans up to sqrt(2) times its size.
  require(size_range.second * std::sqrt(2.0) <= image_size - 1.0, "size_max too large for image_size");
  require(aspect_range.first > 0 && aspect_range.first <= aspect_range.second &&
              aspect_range.second <= 1.0,
          "bad aspect_range");
  require(angle_range.first <= angle_range.second, "bad angle_range");
  require(max_retries >= 1, "max_retries must be >= 1");
}

namespace {

struct Pose {
  double cx, cy, half, aspect, angle;
};

// Membership test in the shape frame, where the shape fits in |u|,|v| <= half.
bool inside_shape(ShapeClass cls, double u, double v, double half, double aspect) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case ShapeClass::Rectangle:
      return au <= half && av <= half * aspect;
    case ShapeClass::Ellipse: {
      const double b = half * aspect;
      return (u * u) / (half * half) + (v * v) / (b * b) <= 1.0;
    }
    case ShapeClass::Cross: {
      const double t = 0.3 * half;
      return (au <= half && av <= t) || (au <= t && av <= half);
    }
    case ShapeClass::LShape: {
      const double t = 0.6 * half;
      return (au <= half && v >= half - t && v <= half) || (u >= -half && u <= -half + t && av <= half);
    }
    case ShapeClass::TwoBlob: {
      const double rad = 0.45 * half, off = 0.55 * half;
      const double d1 = (u - off) * (u - off) + v * v;
      const double d2 = (u + off) * (u + off) + v * v;
      return d1 <= rad * rad || d2 <= rad * rad;
    }
  }
  return false;
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(derive_seed(seed, 0, stream::scene));
  const double n = spec.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](std::pair<double, double> r) { return r.first + (r.second - r.first) * unit(rng); };

  Pose pose{};
  bool fits = false;
  for (int attempt = 0; attempt < spec.max_retries && !fits; ++attempt) {
    pose.half = 0.5 * draw(spec.size_range);
    pose.aspect = draw(spec.aspect_range);
    pose.angle = draw(spec.angle_range);
    pose.cx = n * unit(rng);
    pose.cy = n * unit(rng);
    // The shape lies in the rotated square |u|,|v| <= half.
    const double extent = pose.half * (std::abs(std::cos(pose.angle)) + std::abs(std::sin(pose.angle)));
    fits = pose.cx - extent >= 0.0 && pose.cx + extent <= n - 1.0 && pose.cy - extent >= 0.0 &&
           pose.cy + extent <= n - 1.0;
  }
  if (!fits) throw ValidationError("shape does not fit inside image bounds");

  const auto cls = static_cast<ShapeClass>(spec.class_id);
  const double c = std::cos(pose.angle), s = std::sin(pose.angle);
  Scene scene;
  scene.label = spec.class_id;
  scene.mask.setZero(spec.image_size, spec.image_size);
  SarImage refl(spec.image_size, spec.image_size, spec.clutter_reflectivity);
  for (int y = 0; y < spec.image_size; ++y) {
    for (int x = 0; x < spec.image_size; ++x) {
      const double dx = x - pose.cx, dy = y - pose.cy;
      const double u = c * dx + s * dy;
      const double v = -s * dx + c * dy;
      if (inside_shape(cls, u, v, pose.half, pose.aspect)) {
        scene.mask(y, x) = 1;
        refl.data(y, x) = spec.target_reflectivity;
      }
    }
  }
  scene.image = apply_speckle(refl, spec.looks, derive_seed(seed, 0, stream::speckle));
  return scene;
}

Plane gamma_field(Eigen::Index height, Eigen::Index width, int looks, std::uint64_t seed) {
  require(looks >= 1, "looks must be >= 1");
  Rng rng = make_rng(seed);
  std::gamma_distribution<double> gamma(static_cast<double>(looks), 1.0 / looks);
  Plane n(height, width);
  for (Eigen::Index i = 0; i < n.size(); ++i) n.data()[i] = gamma(rng);
  return n;
}

SarImage apply_speckle(const SarImage& reflectivity, int looks, std::uint64_t seed) {
  reflectivity.validate();
  const Plane n = gamma_field(reflectivity.height(), reflectivity.width(), looks, seed);
  // sqrt(r^2 n) written as r sqrt(n) so that scaling r scales the output exactly.
  return SarImage(Plane(reflectivity.data * n.sqrt()));
}

void AugConfig::validate() const {
  require(crop_scale_range.first > 0.0 && crop_scale_range.first <= crop_scale_range.second &&
              crop_scale_range.second <= 1.0,
          "crop_scale_range must satisfy 0 < min <= max <= 1");
  require(hflip_prob >= 0.0 && hflip_prob <= 1.0, "hflip_prob must be in [0, 1]");
  require(contrast_range.first > 0.0 && contrast_range.first <= contrast_range.second,
          "contrast_range must satisfy 0 < min <= max");
}

CropBox sample_crop(Eigen::Index height, Eigen::Index width, std::pair<double, double> scale_range,
                    Rng& rng) {
  // An area fraction of exactly 1 admits only the full image.
  if (scale_range.first >= 1.0) return {0, 0, height, width};
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * (scale_range.first + (scale_range.second - scale_range.first) * unit(rng));
    const double ratio = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
    const auto w = static_cast<Eigen::Index>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<Eigen::Index>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && w <= width && h > 0 && h <= height) {
      std::uniform_int_distribution<Eigen::Index> top(0, height - h), left(0, width - w);
      const auto t = top(rng);
      const auto l = left(rng);
      return {t, l, h, w};
    }
  }
  // Centered fallback clamped to the aspect-ratio range.
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  Eigen::Index w = width, h = height;
  if (in_ratio < 3.0 / 4.0) {
    h = std::min(height, static_cast<Eigen::Index>(std::lround(w / (3.0 / 4.0))));
  } else if (in_ratio > 4.0 / 3.0) {
    w = std::min(width, static_cast<Eigen::Index>(std::lround(h * (4.0 / 3.0))));
  }
  return {(height - h) / 2, (width - w) / 2, h, w};
}

Plane resize_crop(const Plane& img, const CropBox& box) {
  const Eigen::Index H = img.rows(), W = img.cols();
  if (box.top == 0 && box.left == 0 && box.height == H && box.width == W) return img;
  Plane out(H, W);
  const double sy = static_cast<double>(box.height) / H, sx = static_cast<double>(box.width) / W;
  for (Eigen::Index y = 0; y < H; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(box.height - 1));
    const auto y0 = static_cast<Eigen::Index>(std::floor(fy));
    const auto y1 = std::min(y0 + 1, box.height - 1);
    const double wy = fy - y0;
    for (Eigen::Index x = 0; x < W; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(box.width - 1));
      const auto x0 = static_cast<Eigen::Index>(std::floor(fx));
      const auto x1 = std::min(x0 + 1, box.width - 1);
      const double wx = fx - x0;
      const double a = img(box.top + y0, box.left + x0), b = img(box.top + y0, box.left + x1);
      const double c = img(box.top + y1, box.left + x0), d = img(box.top + y1, box.left + x1);
      out(y, x) = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d);
    }
  }
  return out;
}

Plane adjust_contrast(const Plane& img, double factor) {
  if (factor == 1.0) return img;
  const double mean = img.mean();
  return (mean + factor * (img - mean)).max(0.0);
}

SarImage augment(const SarImage& img, const AugConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  img.validate();
  Rng rng = make_rng(derive_seed(seed, 0, stream::augment));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const CropBox box = sample_crop(img.height(), img.width(), cfg.crop_scale_range, rng);
  Plane out = resize_crop(img.data, box);

  if (unit(rng) < cfg.hflip_prob) out = out.rowwise().reverse().eval();

  const auto [lo, hi] = cfg.contrast_range;
  const double f = lo + (hi - lo) * unit(rng);
  return SarImage(adjust_contrast(out, f));
}

}  // namespace sarjepa
