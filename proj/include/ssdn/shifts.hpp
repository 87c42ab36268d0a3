#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ssdn/rng.hpp"
#include "ssdn/tensor.hpp"

namespace ssdn {

struct ImageDataset {
  std::vector<Tensor<uint8_t>> images;  // each [C,H,W]
  std::vector<int> labels;
  std::string name;
  int class_count = 0;

  size_t size() const { return images.size(); }

  void validate() const {
    if (images.size() != labels.size()) {
      throw ContractViolation("ImageDataset: " + std::to_string(images.size()) + " images vs " +
                              std::to_string(labels.size()) + " labels");
    }
    for (int lab : labels) {
      if (lab < 0 || lab >= class_count) {
        throw ContractViolation("ImageDataset: label " + std::to_string(lab) +
                                " outside [0," + std::to_string(class_count) + ")");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Loaders. Bit-exact contracts: one CIFAR record is 1 label byte followed by
// C*H*W pixel bytes, channel-major; MNIST is the big-endian IDX format.

namespace detail {

inline uint32_t read_be32(std::istream& f, const char* what) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw FormatError(std::string("truncated ") + what);
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace detail

inline ImageDataset load_cifar_style(const std::string& path, int channels, int height, int width,
                                     int class_count) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("load_cifar_style: cannot open '" + path + "'");
  const int64_t fsize = static_cast<int64_t>(f.tellg());
  const int64_t record = 1 + static_cast<int64_t>(channels) * height * width;
  if (fsize % record != 0) {
    throw FormatError("load_cifar_style: size " + std::to_string(fsize) +
                      " is not a multiple of the record size " + std::to_string(record));
  }
  f.seekg(0);
  ImageDataset ds;
  ds.name = path;
  ds.class_count = class_count;
  const int64_t n = fsize / record;
  for (int64_t i = 0; i < n; ++i) {
    unsigned char lab;
    f.read(reinterpret_cast<char*>(&lab), 1);
    if (lab >= class_count) {
      throw FormatError("load_cifar_style: record " + std::to_string(i) + " has label " +
                        std::to_string(static_cast<int>(lab)) + " >= " +
                        std::to_string(class_count));
    }
    Tensor<uint8_t> img({channels, height, width});
    f.read(reinterpret_cast<char*>(img.data()), record - 1);
    if (!f) throw FormatError("load_cifar_style: truncated record " + std::to_string(i));
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<int>(lab));
  }
  return ds;
}

inline ImageDataset load_cifar10_binary(const std::string& path) {
  return load_cifar_style(path, 3, 32, 32, 10);
}

inline void save_cifar_style(const ImageDataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("save_cifar_style: cannot open '" + path + "' for writing");
  for (size_t i = 0; i < ds.images.size(); ++i) {
    const unsigned char lab = static_cast<unsigned char>(ds.labels[i]);
    f.write(reinterpret_cast<const char*>(&lab), 1);
    f.write(reinterpret_cast<const char*>(ds.images[i].data()),
            static_cast<std::streamsize>(ds.images[i].size()));
  }
  if (!f) throw FormatError("save_cifar_style: write failed for '" + path + "'");
}

inline ImageDataset load_mnist_idx(const std::string& images_path,
                                   const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw FormatError("load_mnist_idx: cannot open '" + images_path + "'");
  if (detail::read_be32(fi, "image magic") != 0x00000803u) {
    throw FormatError("load_mnist_idx: bad image magic in '" + images_path + "'");
  }
  const uint32_t n = detail::read_be32(fi, "image count");
  const uint32_t rows = detail::read_be32(fi, "row count");
  const uint32_t cols = detail::read_be32(fi, "column count");

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw FormatError("load_mnist_idx: cannot open '" + labels_path + "'");
  if (detail::read_be32(fl, "label magic") != 0x00000801u) {
    throw FormatError("load_mnist_idx: bad label magic in '" + labels_path + "'");
  }
  const uint32_t nl = detail::read_be32(fl, "label count");
  if (n != nl) {
    throw FormatError("load_mnist_idx: " + std::to_string(n) + " images vs " +
                      std::to_string(nl) + " labels");
  }

  ImageDataset ds;
  ds.name = images_path;
  ds.class_count = 10;
  for (uint32_t i = 0; i < n; ++i) {
    Tensor<uint8_t> img({1, static_cast<int>(rows), static_cast<int>(cols)});
    fi.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(img.size()));
    if (!fi) throw FormatError("load_mnist_idx: truncated image payload at " + std::to_string(i));
    unsigned char lab;
    fl.read(reinterpret_cast<char*>(&lab), 1);
    if (!fl) throw FormatError("load_mnist_idx: truncated label payload at " + std::to_string(i));
    if (lab >= 10) throw FormatError("load_mnist_idx: label out of range at " + std::to_string(i));
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<int>(lab));
  }
  // trailing image bytes mean the header undercounts
  fi.peek();
  if (!fi.eof()) {
    throw FormatError("load_mnist_idx: payload larger than the declared dimensions");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data: one class-defining shape over a vertical brightness
// gradient (bright top, dark bottom). The gradient makes the rotation angle
// recoverable while class identity stays rotation-agnostic.

struct SyntheticSpec {
  int image_side = 16;
  int class_count = 4;  // square, cross, disc, triangle
  int samples_per_class = 500;
  int bg_low = 20;    // bottom row brightness
  int bg_high = 150;  // top row brightness
  int shape_value = 255;
  int jitter = 10;  // per-image +/- on the gradient endpoints

  void validate() const {
    if (image_side < 8) throw ContractViolation("SyntheticSpec: image_side must be >= 8");
    if (class_count < 1 || class_count > 4) {
      throw ContractViolation("SyntheticSpec: class_count must be in [1,4]");
    }
    if (samples_per_class < 1) {
      throw ContractViolation("SyntheticSpec: samples_per_class must be positive");
    }
  }
};

namespace detail {

inline bool shape_stencil(int cls, int r, int c) {
  switch (cls) {
    case 0:  // square
      return r >= 1 && r <= 5 && c >= 1 && c <= 5;
    case 1:  // cross
      return (r >= 2 && r <= 4) || (c >= 2 && c <= 4);
    case 2:  // disc
      return (r - 3) * (r - 3) + (c - 3) * (c - 3) <= 9;
    case 3:  // triangle, apex up
      return r >= 1 && r <= 5 && std::abs(c - 3) <= r - 1;
    default:
      return false;
  }
}

}  // namespace detail

inline ImageDataset gen_synthetic(const SyntheticSpec& spec, uint64_t seed) {
  spec.validate();
  ImageDataset ds;
  ds.name = "synthetic";
  ds.class_count = spec.class_count;
  const int s = spec.image_side;
  const int n = spec.class_count * spec.samples_per_class;
  for (int idx = 0; idx < n; ++idx) {
    Rng rng(mix64(seed, static_cast<uint64_t>(idx)));
    const int cls = idx % spec.class_count;
    const int jit_lo = static_cast<int>(rng.uniform_int(2 * spec.jitter + 1)) - spec.jitter;
    const int jit_hi = static_cast<int>(rng.uniform_int(2 * spec.jitter + 1)) - spec.jitter;
    const double lo = std::clamp(spec.bg_low + jit_lo, 0, 255);
    const double hi = std::clamp(spec.bg_high + jit_hi, 0, 255);
    const int oy = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(s - 6)));
    const int ox = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(s - 6)));
    Tensor<uint8_t> img({1, s, s});
    for (int r = 0; r < s; ++r) {
      const double frac = s == 1 ? 0.0 : static_cast<double>(r) / (s - 1);
      const int v = static_cast<int>(std::lround(hi + (lo - hi) * frac));
      for (int c = 0; c < s; ++c) img(0, r, c) = static_cast<uint8_t>(std::clamp(v, 0, 255));
    }
    for (int r = 0; r < 7; ++r) {
      for (int c = 0; c < 7; ++c) {
        if (detail::shape_stencil(cls, r, c)) {
          img(0, oy + r, ox + c) = static_cast<uint8_t>(spec.shape_value);
        }
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(cls);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Deterministic covariate-shift generators.

enum class CorruptionKind {
  gaussian_noise,
  shot_noise,
  impulse_noise,
  gaussian_blur,
  brightness,
  contrast,
  pixelate,
};

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::shot_noise: return "shot_noise";
    case CorruptionKind::impulse_noise: return "impulse_noise";
    case CorruptionKind::gaussian_blur: return "gaussian_blur";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::pixelate: return "pixelate";
  }
  return "?";
}

inline CorruptionKind parse_corruption(const std::string& s) {
  for (CorruptionKind k :
       {CorruptionKind::gaussian_noise, CorruptionKind::shot_noise, CorruptionKind::impulse_noise,
        CorruptionKind::gaussian_blur, CorruptionKind::brightness, CorruptionKind::contrast,
        CorruptionKind::pixelate}) {
    if (s == corruption_name(k)) return k;
  }
  throw FormatError("unknown corruption kind '" + s + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 3;  // 1..5; 0 is the identity probe
  uint64_t seed = 0;

  void validate() const {
    if (severity < 0 || severity > 5) {
      throw ContractViolation("CorruptionSpec: severity " + std::to_string(severity) +
                              " outside [0,5]");
    }
  }

  std::string label() const {
    return std::string(corruption_name(kind)) + ":s" + std::to_string(severity);
  }
};

namespace detail {

constexpr double kGaussianNoiseSigma[5] = {8, 13, 18, 26, 38};          // 0..255 units
constexpr double kShotNoisePhotons[5] = {60, 25, 12, 5, 3};
constexpr double kImpulseFraction[5] = {0.03, 0.06, 0.09, 0.17, 0.27};
constexpr double kBlurSigma[5] = {0.4, 0.6, 0.9, 1.3, 1.8};
constexpr double kBrightnessAdd[5] = {0.1, 0.2, 0.3, 0.4, 0.5};          // x255
constexpr double kContrastScale[5] = {0.75, 0.6, 0.45, 0.3, 0.2};
constexpr double kPixelateFactor[5] = {0.8, 0.65, 0.5, 0.4, 0.3};

inline uint8_t clamp_round(double v) {
  return static_cast<uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
}

inline int reflect101(int idx, int n) {
  if (idx < 0) idx = -idx;
  if (idx >= n) idx = 2 * n - 2 - idx;
  return idx;
}

inline Tensor<uint8_t> blur_image(const Tensor<uint8_t>& img, double sigma) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<size_t>(i + radius)] = v;
    ksum += v;
  }
  for (auto& v : kernel) v /= ksum;

  Tensor<double> tmp({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int r = 0; r < h; ++r) {
      for (int col = 0; col < w; ++col) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<size_t>(i + radius)] *
                 img(ch, r, reflect101(col + i, w));
        }
        tmp(ch, r, col) = acc;
      }
    }
  }
  Tensor<uint8_t> out(img.shape());
  for (int ch = 0; ch < c; ++ch) {
    for (int r = 0; r < h; ++r) {
      for (int col = 0; col < w; ++col) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<size_t>(i + radius)] * tmp(ch, reflect101(r + i, h), col);
        }
        out(ch, r, col) = clamp_round(acc);
      }
    }
  }
  return out;
}

}  // namespace detail

// Pure function of (image, spec): same spec, same bytes. Severity 0 returns
// the input unchanged.
inline Tensor<uint8_t> apply_corruption(const Tensor<uint8_t>& img, const CorruptionSpec& spec) {
  spec.validate();
  if (img.rank() != 3) {
    throw ContractViolation("apply_corruption: expected [C,H,W], got " + shape_str(img.shape()));
  }
  if (spec.severity == 0) return img;
  const int sev = spec.severity - 1;
  Rng rng(spec.seed);
  Tensor<uint8_t> out(img.shape());

  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: {
      const double sigma = detail::kGaussianNoiseSigma[sev];
      for (int64_t i = 0; i < img.size(); ++i) {
        out[i] = detail::clamp_round(img[i] + sigma * rng.normal());
      }
      return out;
    }
    case CorruptionKind::shot_noise: {
      const double photons = detail::kShotNoisePhotons[sev];
      for (int64_t i = 0; i < img.size(); ++i) {
        const double lam = img[i] / 255.0 * photons;
        out[i] = detail::clamp_round(rng.poisson(lam) / photons * 255.0);
      }
      return out;
    }
    case CorruptionKind::impulse_noise: {
      const double frac = detail::kImpulseFraction[sev];
      for (int64_t i = 0; i < img.size(); ++i) {
        if (rng.uniform() < frac) {
          out[i] = rng.uniform() < 0.5 ? 0 : 255;
        } else {
          out[i] = img[i];
        }
      }
      return out;
    }
    case CorruptionKind::gaussian_blur:
      return detail::blur_image(img, detail::kBlurSigma[sev]);
    case CorruptionKind::brightness: {
      const double add = detail::kBrightnessAdd[sev] * 255.0;
      for (int64_t i = 0; i < img.size(); ++i) out[i] = detail::clamp_round(img[i] + add);
      return out;
    }
    case CorruptionKind::contrast: {
      const double scale = detail::kContrastScale[sev];
      double mean = 0;
      for (int64_t i = 0; i < img.size(); ++i) mean += img[i];
      mean /= static_cast<double>(img.size());
      for (int64_t i = 0; i < img.size(); ++i) {
        out[i] = detail::clamp_round((img[i] - mean) * scale + mean);
      }
      return out;
    }
    case CorruptionKind::pixelate: {
      const double f = detail::kPixelateFactor[sev];
      const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
      const int h2 = std::max(1, static_cast<int>(std::lround(h * f)));
      const int w2 = std::max(1, static_cast<int>(std::lround(w * f)));
      // nearest-neighbor down and back up
      for (int ch = 0; ch < c; ++ch) {
        for (int r = 0; r < h; ++r) {
          const int r2 = std::min(h2 - 1, static_cast<int>((r + 0.5) * h2 / h));
          const int rs = std::min(h - 1, static_cast<int>((r2 + 0.5) * h / h2));
          for (int col = 0; col < w; ++col) {
            const int c2 = std::min(w2 - 1, static_cast<int>((col + 0.5) * w2 / w));
            const int cs = std::min(w - 1, static_cast<int>((c2 + 0.5) * w / w2));
            out(ch, r, col) = img(ch, rs, cs);
          }
        }
      }
      return out;
    }
  }
  throw ContractViolation("apply_corruption: unknown corruption kind");
}

// Per-image substreams derived from (spec.seed, image index).
inline ImageDataset corrupt_dataset(const ImageDataset& ds, const CorruptionSpec& spec) {
  spec.validate();
  ImageDataset out;
  out.labels = ds.labels;
  out.class_count = ds.class_count;
  out.name = ds.name + "/" + spec.label();
  out.images.reserve(ds.images.size());
  for (size_t i = 0; i < ds.images.size(); ++i) {
    CorruptionSpec s = spec;
    s.seed = mix64(spec.seed, static_cast<uint64_t>(i));
    out.images.push_back(apply_corruption(ds.images[i], s));
  }
  return out;
}

}  // namespace ssdn
