#include "sarjepa/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <unsupported/Eigen/FFT>

#include "sarjepa/errors.hpp"

namespace sarjepa {

int RoaKernelBank::max_scale() const {
  return scales.empty() ? 0 : *std::max_element(scales.begin(), scales.end());
}

void RoaKernelBank::validate() const {
  require(!scales.empty(), "kernel bank needs at least one scale");
  require(std::all_of(scales.begin(), scales.end(), [](int r) { return r >= 1; }),
          "every kernel scale must be >= 1");
  require(std::is_sorted(scales.begin(), scales.end()), "kernel scales must be ascending");
  require(epsilon >= 0.0 && std::isfinite(epsilon), "epsilon must be finite and >= 0");
}

namespace {

// Weights for offsets -r..r (index d + r).
Eigen::ArrayXd kernel_weights(int r, KernelKind kind) {
  Eigen::ArrayXd w(2 * r + 1);
  if (kind == KernelKind::Linear) {
    w.setOnes();
  } else {
    const double s = RoaKernelBank::sigma(r);
    for (int d = -r; d <= r; ++d) w(d + r) = std::exp(-0.5 * d * d / (s * s));
  }
  return w;
}

Plane mirror_pad(const Plane& img, int r) {
  const Eigen::Index H = img.rows(), W = img.cols();
  Plane p(H + 2 * r, W + 2 * r);
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      p(i, j) = img(reflect_index(i - r, H), reflect_index(j - r, W));
  return p;
}

}  // namespace

RoaRatios roa_ratios(const SarImage& img, int r, KernelKind kind, double epsilon) {
  require(r >= 1, "kernel half-size must be >= 1");
  require(epsilon >= 0.0, "epsilon must be >= 0");
  const Eigen::Index H = img.height(), W = img.width();
  if (H < 2 * r + 1 || W < 2 * r + 1) throw ValidationError("scale too large for image");
  require((img.data >= 0.0).all(), "image must be non-negative");

  const Plane padded = mirror_pad(img.data + epsilon, r);
  const Eigen::ArrayXd w = kernel_weights(r, kind);
  const double full_sum = w.sum();
  const double half_sum = w.tail(r).sum();

  // Full-window smoothing along one axis, kept at padded size on the other.
  Plane vsmooth = Plane::Zero(H, W + 2 * r);
  Plane hsmooth = Plane::Zero(H + 2 * r, W);
  for (int d = 0; d <= 2 * r; ++d) {
    vsmooth += w(d) * padded.block(d, 0, H, W + 2 * r);
    hsmooth += w(d) * padded.block(0, d, H + 2 * r, W);
  }
  vsmooth /= full_sum;
  hsmooth /= full_sum;

  Plane right = Plane::Zero(H, W), left = Plane::Zero(H, W);
  Plane below = Plane::Zero(H, W), above = Plane::Zero(H, W);
  for (int d = 1; d <= r; ++d) {
    const double wd = w(r + d);
    right += wd * vsmooth.block(0, r + d, H, W);
    left += wd * vsmooth.block(0, r - d, H, W);
    below += wd * hsmooth.block(r + d, 0, H, W);
    above += wd * hsmooth.block(r - d, 0, H, W);
  }
  // The half normalizers cancel in the ratio but keep M a weighted mean.
  right /= half_sum;
  left /= half_sum;
  below /= half_sum;
  above /= half_sum;

  return {right / left, below / above};
}

GradientField gr_single_scale(const SarImage& img, int r, KernelKind kind, double epsilon) {
  const RoaRatios ratios = roa_ratios(img, r, kind, epsilon);
  GradientField g;
  g.g_h = ratios.r1.log();
  g.g_v = ratios.r3.log();
  g.g_m = (g.g_h.square() + g.g_v.square()).sqrt();
  if (!g.g_m.allFinite())
    throw ValidationError("non-finite ratio gradient (zero half-window mean; use epsilon > 0)");
  return g;
}

TargetFeature multi_scale_target(const SarImage& img, const RoaKernelBank& bank) {
  bank.validate();
  TargetFeature tf;
  tf.channels.reserve(bank.scales.size());
  for (int r : bank.scales) tf.channels.push_back(gr_single_scale(img, r, bank.kind, bank.epsilon).g_m);
  return tf;
}

GradientField differential_gradient(const SarImage& img) {
  const Eigen::Index H = img.height(), W = img.width();
  GradientField g;
  g.g_h.resize(H, W);
  g.g_v.resize(H, W);
  for (Eigen::Index y = 0; y < H; ++y) {
    for (Eigen::Index x = 0; x < W; ++x) {
      g.g_h(y, x) = img.data(y, reflect_index(x + 1, W)) - img.data(y, reflect_index(x - 1, W));
      g.g_v(y, x) = img.data(reflect_index(y + 1, H), x) - img.data(reflect_index(y - 1, H), x);
    }
  }
  g.g_m = (g.g_h.square() + g.g_v.square()).sqrt();
  return g;
}

namespace {

// Appends `bins` per-cell planes for one gradient field.
void orientation_histograms(const GradientField& g, int cell, int bins, std::vector<Plane>& out) {
  const Eigen::Index H = g.g_h.rows(), W = g.g_h.cols();
  const Eigen::Index rows = H / cell, cols = W / cell;
  const double bin_width = std::numbers::pi / bins;
  const std::size_t first = out.size();
  for (int b = 0; b < bins; ++b) out.emplace_back(Plane::Zero(rows, cols));

  for (Eigen::Index y = 0; y < H; ++y) {
    for (Eigen::Index x = 0; x < W; ++x) {
      const double m = g.g_m(y, x);
      if (m == 0.0) continue;
      double theta = std::atan2(g.g_v(y, x), g.g_h(y, x));
      if (theta < 0.0) theta += std::numbers::pi;
      if (theta >= std::numbers::pi) theta -= std::numbers::pi;
      const double pos = theta / bin_width - 0.5;
      const double lo = std::floor(pos);
      const double frac = pos - lo;
      const int b0 = (static_cast<int>(lo) + bins) % bins;
      const int b1 = (b0 + 1) % bins;
      out[first + b0](y / cell, x / cell) += m * (1.0 - frac);
      out[first + b1](y / cell, x / cell) += m * frac;
    }
  }

  for (Eigen::Index cy = 0; cy < rows; ++cy) {
    for (Eigen::Index cx = 0; cx < cols; ++cx) {
      double norm2 = 0.0;
      for (int b = 0; b < bins; ++b) norm2 += out[first + b](cy, cx) * out[first + b](cy, cx);
      const double norm = std::max(std::sqrt(norm2), 1e-6);
      for (int b = 0; b < bins; ++b) out[first + b](cy, cx) /= norm;
    }
  }
}

}  // namespace

TargetFeature hog_target(const SarImage& img, int cell, int bins, GradientKind kind,
                         const RoaKernelBank& bank) {
  require(cell >= 1 && bins >= 1, "cell and bins must be positive");
  require(img.height() % cell == 0 && img.width() % cell == 0,
          "image side must be divisible by the HOG cell size");
  TargetFeature tf;
  tf.cell = cell;
  if (kind == GradientKind::Differential) {
    orientation_histograms(differential_gradient(img), cell, bins, tf.channels);
  } else {
    bank.validate();
    for (int r : bank.scales)
      orientation_histograms(gr_single_scale(img, r, bank.kind, bank.epsilon), cell, bins, tf.channels);
  }
  return tf;
}

TargetFeature lpf_target(const SarImage& img, double cutoff_fraction) {
  require(cutoff_fraction >= 0.0, "cutoff_fraction must be >= 0");
  const Eigen::Index H = img.height(), W = img.width();
  using Complex = std::complex<double>;
  Eigen::FFT<double> fft;
  Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> spec(H, W);

  std::vector<Complex> in, out;
  for (Eigen::Index y = 0; y < H; ++y) {
    in.assign(W, Complex{});
    for (Eigen::Index x = 0; x < W; ++x) in[x] = img.data(y, x);
    fft.fwd(out, in);
    for (Eigen::Index x = 0; x < W; ++x) spec(y, x) = out[x];
  }
  for (Eigen::Index x = 0; x < W; ++x) {
    in.resize(H);
    for (Eigen::Index y = 0; y < H; ++y) in[y] = spec(y, x);
    fft.fwd(out, in);
    for (Eigen::Index y = 0; y < H; ++y) spec(y, x) = out[y];
  }

  // Radius in cycles/sample; the diagonal Nyquist corner sits at sqrt(2)/2.
  const double limit = cutoff_fraction * std::sqrt(0.5);
  auto signed_freq = [](Eigen::Index k, Eigen::Index n) {
    return static_cast<double>(2 * k <= n ? k : k - n) / static_cast<double>(n);
  };
  for (Eigen::Index y = 0; y < H; ++y) {
    const double fy = signed_freq(y, H);
    for (Eigen::Index x = 0; x < W; ++x) {
      const double fx = signed_freq(x, W);
      if (std::sqrt(fy * fy + fx * fx) > limit + 1e-12) spec(y, x) = 0.0;
    }
  }

  for (Eigen::Index x = 0; x < W; ++x) {
    in.resize(H);
    for (Eigen::Index y = 0; y < H; ++y) in[y] = spec(y, x);
    fft.inv(out, in);
    for (Eigen::Index y = 0; y < H; ++y) spec(y, x) = out[y];
  }
  TargetFeature tf;
  tf.channels.emplace_back(H, W);
  for (Eigen::Index y = 0; y < H; ++y) {
    in.assign(spec.row(y).data(), spec.row(y).data() + W);
    fft.inv(out, in);
    for (Eigen::Index x = 0; x < W; ++x) tf.channels[0](y, x) = out[x].real();
  }
  return tf;
}

TargetFeature pixel_target(const SarImage& img) {
  TargetFeature tf;
  tf.channels.push_back(img.data);
  return tf;
}

PatchTargets patch_targets(const TargetFeature& tf, int p) {
  require(p >= 1, "patch side must be >= 1");
  require(!tf.channels.empty(), "target feature has no channels");
  const Eigen::Index H = tf.height(), W = tf.width();
  require(H % p == 0 && W % p == 0, "feature size must be divisible by the patch side");
  const int C = tf.num_channels();
  PatchTargets out;
  out.grid_rows = static_cast<int>(H / p);
  out.grid_cols = static_cast<int>(W / p);
  const Eigen::Index n = static_cast<Eigen::Index>(out.grid_rows) * out.grid_cols;

  if (tf.cell > 1) {
    require(tf.cell == p, "per-cell features require cell == patch side");
    out.vectors.resize(n, C);
    for (int gr = 0; gr < out.grid_rows; ++gr)
      for (int gc = 0; gc < out.grid_cols; ++gc)
        for (int c = 0; c < C; ++c) out.vectors(gr * out.grid_cols + gc, c) = tf.channels[c](gr, gc);
    return out;
  }

  out.vectors.resize(n, static_cast<Eigen::Index>(C) * p * p);
  for (int gr = 0; gr < out.grid_rows; ++gr) {
    for (int gc = 0; gc < out.grid_cols; ++gc) {
      auto row = out.vectors.row(gr * out.grid_cols + gc);
      for (int c = 0; c < C; ++c) {
        const Plane block = tf.channels[c].block(gr * p, gc * p, p, p);
        const double mean = block.mean();
        const double var = (block - mean).square().mean();
        auto dst = row.segment(static_cast<Eigen::Index>(c) * p * p, p * p);
        if (var < 1e-12) {
          dst.setZero();
          continue;
        }
        const double inv_std = 1.0 / std::sqrt(var);
        for (int i = 0; i < p; ++i)
          for (int j = 0; j < p; ++j) dst(i * p + j) = (block(i, j) - mean) * inv_std;
      }
    }
  }
  return out;
}

FeatureKind parse_feature_kind(std::string_view name) {
  if (name == "pixel") return FeatureKind::Pixel;
  if (name == "lpf") return FeatureKind::Lpf;
  if (name == "hog") return FeatureKind::Hog;
  if (name == "sarhog") return FeatureKind::SarHog;
  if (name == "grlin") return FeatureKind::GrLin;
  if (name == "grgau") return FeatureKind::GrGau;
  throw ValidationError("unknown feature kind: " + std::string(name));
}

std::string_view feature_kind_name(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::Pixel: return "pixel";
    case FeatureKind::Lpf: return "lpf";
    case FeatureKind::Hog: return "hog";
    case FeatureKind::SarHog: return "sarhog";
    case FeatureKind::GrLin: return "grlin";
    case FeatureKind::GrGau: return "grgau";
  }
  return "unknown";
}

TargetFeature compute_target(const SarImage& img, FeatureKind kind, const RoaKernelBank& bank, int patch) {
  switch (kind) {
    case FeatureKind::Pixel: return pixel_target(img);
    case FeatureKind::Lpf: return lpf_target(img);
    case FeatureKind::Hog: return hog_target(img, patch, 9, GradientKind::Differential);
    case FeatureKind::SarHog: return hog_target(img, patch, 9, GradientKind::Ratio, bank);
    case FeatureKind::GrLin: {
      RoaKernelBank b = bank;
      b.kind = KernelKind::Linear;
      return multi_scale_target(img, b);
    }
    case FeatureKind::GrGau: {
      RoaKernelBank b = bank;
      b.kind = KernelKind::Gaussian;
      return multi_scale_target(img, b);
    }
  }
  throw ValidationError("unknown feature kind");
}

int target_dim(FeatureKind kind, const RoaKernelBank& bank, int patch, int hog_bins) {
  const int pp = patch * patch;
  switch (kind) {
    case FeatureKind::Pixel:
    case FeatureKind::Lpf: return pp;
    case FeatureKind::Hog: return hog_bins;
    case FeatureKind::SarHog: return hog_bins * static_cast<int>(bank.scales.size());
    case FeatureKind::GrLin:
    case FeatureKind::GrGau: return static_cast<int>(bank.scales.size()) * pp;
  }
  return 0;
}

}  // namespace sarjepa
