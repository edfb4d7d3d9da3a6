#include <png.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <vector>

#include "sarjepa/errors.hpp"
#include "sarjepa/image.hpp"

namespace sarjepa {

namespace fs = std::filesystem;

void SarImage::validate() const {
  require(data.size() > 0, "image is empty");
  require(data.allFinite(), "image contains non-finite values");
  require((data >= 0.0).all(), "image contains negative values");
}

void write_le_floats(std::ostream& os, const float* data, std::size_t n) {
  static_assert(sizeof(float) == 4);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      char b[4] = {char(bits), char(bits >> 8), char(bits >> 16), char(bits >> 24)};
      os.write(b, 4);
    }
  }
  if (!os) throw std::runtime_error("write failed");
}

void read_le_floats(std::istream& is, float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      unsigned char b[4];
      is.read(reinterpret_cast<char*>(b), 4);
      std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t(b[3]) << 24);
      data[i] = std::bit_cast<float>(bits);
    }
  }
  if (!is) throw ValidationError("truncated float32 data");
}

static fs::path sidecar_of(const fs::path& path) {
  auto side = path;
  side.replace_extension(".json");
  return side;
}

void write_f32(const fs::path& path, const SarImage& img, double scale) {
  require(scale > 0.0, "f32 scale must be positive");
  std::vector<float> buf(static_cast<std::size_t>(img.data.size()));
  for (Eigen::Index i = 0; i < img.data.size(); ++i)
    buf[static_cast<std::size_t>(i)] = static_cast<float>(img.data.data()[i] / scale);
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string());
    write_le_floats(os, buf.data(), buf.size());
  }
  nlohmann::json meta = {{"height", img.height()}, {"width", img.width()}, {"scale", scale}};
  std::ofstream js(sidecar_of(path));
  js << meta.dump(2) << "\n";
}

SarImage read_f32(const fs::path& path) {
  std::ifstream js(sidecar_of(path));
  require(bool(js), "missing sidecar " + sidecar_of(path).string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad sidecar " + sidecar_of(path).string() + ": " + e.what());
  }
  const auto h = meta.at("height").get<Eigen::Index>();
  const auto w = meta.at("width").get<Eigen::Index>();
  const double scale = meta.value("scale", 1.0);
  require(h > 0 && w > 0 && scale > 0, "bad sidecar dimensions or scale");
  std::vector<float> buf(static_cast<std::size_t>(h * w));
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "cannot open " + path.string());
  read_le_floats(is, buf.data(), buf.size());
  SarImage img(h, w);
  for (Eigen::Index i = 0; i < h * w; ++i)
    img.data.data()[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]) * scale;
  img.validate();
  return img;
}

namespace {

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, &info); }
};

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct FileCloser {
  void operator()(FILE* f) const { std::fclose(f); }
};

}  // namespace

void write_png16(const fs::path& path, const SarImage& img, double scale) {
  img.validate();
  if (scale <= 0.0) {
    const double mx = img.data.maxCoeff();
    scale = mx > 0.0 ? mx / 65535.0 : 1.0;
  }
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open " + path.string());

  PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  g.info = png_create_info_struct(g.png);
  if (!g.png || !g.info) throw std::runtime_error("libpng init failed");
  if (setjmp(png_jmpbuf(g.png))) throw std::runtime_error("libpng write failed");

  png_init_io(g.png, fp.get());
  const auto h = static_cast<png_uint_32>(img.height());
  const auto w = static_cast<png_uint_32>(img.width());
  png_set_IHDR(g.png, g.info, w, h, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  char key[] = "scale";
  char value[64];
  std::snprintf(value, sizeof(value), "%.17g", scale);
  png_text text{};
  text.compression = PNG_TEXT_COMPRESSION_NONE;
  text.key = key;
  text.text = value;
  png_set_text(g.png, g.info, &text, 1);
  png_write_info(g.png, g.info);

  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 2);
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      const double q = std::round(img.data(y, x) / scale);
      const auto code = static_cast<std::uint16_t>(std::clamp(q, 0.0, 65535.0));
      row[2 * x] = static_cast<unsigned char>(code >> 8);  // PNG is big-endian
      row[2 * x + 1] = static_cast<unsigned char>(code & 0xff);
    }
    png_write_row(g.png, row.data());
  }
  png_write_end(g.png, nullptr);
}

SarImage read_png16(const fs::path& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  require(bool(fp), "cannot open " + path.string());

  PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  g.info = png_create_info_struct(g.png);
  if (!g.png || !g.info) throw std::runtime_error("libpng init failed");
  if (setjmp(png_jmpbuf(g.png))) throw ValidationError("malformed PNG " + path.string());

  png_init_io(g.png, fp.get());
  png_read_info(g.png, g.info);
  const auto w = png_get_image_width(g.png, g.info);
  const auto h = png_get_image_height(g.png, g.info);
  const int depth = png_get_bit_depth(g.png, g.info);
  const int color = png_get_color_type(g.png, g.info);
  if (color != PNG_COLOR_TYPE_GRAY) throw ValidationError("expected grayscale PNG " + path.string());

  double scale = 1.0;
  png_textp texts = nullptr;
  int ntext = 0;
  png_get_text(g.png, g.info, &texts, &ntext);
  for (int i = 0; i < ntext; ++i)
    if (std::strcmp(texts[i].key, "scale") == 0) scale = std::strtod(texts[i].text, nullptr);

  if (depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
  png_read_update_info(g.png, g.info);
  const auto rowbytes = png_get_rowbytes(g.png, g.info);
  std::vector<unsigned char> row(rowbytes);
  SarImage img(h, w);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(g.png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x) {
      const double code = depth == 16 ? double((row[2 * x] << 8) | row[2 * x + 1]) : double(row[x]);
      img.data(y, x) = code * scale;
    }
  }
  png_read_end(g.png, nullptr);
  return img;
}

SarImage read_image(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png") return read_png16(path);
  if (ext == ".f32") return read_f32(path);
  throw ValidationError("unsupported image extension: " + path.string());
}

void write_image(const fs::path& path, const SarImage& img) {
  const auto ext = path.extension().string();
  if (ext == ".png") return write_png16(path, img);
  if (ext == ".f32") return write_f32(path, img);
  throw ValidationError("unsupported image extension: " + path.string());
}

}  // namespace sarjepa
