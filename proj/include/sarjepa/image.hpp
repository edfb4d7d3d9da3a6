#pragma once

#include <Eigen/Core>
#include <filesystem>

namespace sarjepa {

/// Row-major double raster; rows are image rows (y), columns are x.
using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Single-channel non-negative amplitude image.
struct SarImage {
  Plane data;

  SarImage() = default;
  explicit SarImage(Plane d) : data(std::move(d)) {}
  SarImage(Eigen::Index height, Eigen::Index width, double fill = 0.0)
      : data(Plane::Constant(height, width, fill)) {}

  Eigen::Index height() const { return data.rows(); }
  Eigen::Index width() const { return data.cols(); }

  /// Throws ValidationError unless every value is finite and >= 0.
  void validate() const;
};

/// Raw little-endian float32 raster plus `<stem>.json` sidecar {height,width,scale}.
/// Stored values are amplitude / scale.
void write_f32(const std::filesystem::path& path, const SarImage& img, double scale = 1.0);
SarImage read_f32(const std::filesystem::path& path);

/// 16-bit grayscale PNG. Amplitude = code * scale; the scale is stored in a
/// tEXt chunk keyed "scale". A non-positive scale picks max / 65535.
void write_png16(const std::filesystem::path& path, const SarImage& img, double scale = 0.0);
SarImage read_png16(const std::filesystem::path& path);

/// Dispatch on extension (.png or .f32).
SarImage read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const SarImage& img);

/// Little-endian float32 helpers shared by image, feature and checkpoint files.
void write_le_floats(std::ostream& os, const float* data, std::size_t n);
void read_le_floats(std::istream& is, float* data, std::size_t n);

}  // namespace sarjepa
