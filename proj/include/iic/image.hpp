#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "iic/tensor.hpp"

// PNG image I/O and the reference quality metrics (PSNR, SSIM).
// Images are [C,H,W] tensors with values in [0,1]; files are 8-bit
// grayscale or RGB PNG.

namespace iic {

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  std::FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

} // namespace detail

// reads an 8-bit grayscale or RGB PNG; palette images are expanded to RGB,
// alpha is stripped, 16-bit files are rejected
inline Tensor png_read(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw ImageError("cannot open image: " + path);
  detail::FileCloser closer{f};

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ImageError("not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           nullptr, nullptr);
  if (!png) throw ImageError("libpng init failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageError("libpng init failure");
  }
  std::vector<png_bytep> row_ptrs;
  std::vector<unsigned char> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("corrupt PNG file: " + path);
  }
  png_init_io(png, f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth == 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("16-bit PNG not supported: " + path);
  }
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("unsupported channel count in " + path);
  }

  pixels.resize(static_cast<size_t>(h) * w * channels);
  row_ptrs.resize(h);
  for (png_uint_32 y = 0; y < h; ++y)
    row_ptrs[y] = pixels.data() + static_cast<size_t>(y) * w * channels;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out = Tensor::zeros({channels, static_cast<int>(h), static_cast<int>(w)});
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        out.data()[(static_cast<size_t>(c) * h + y) * w + x] =
            pixels[(static_cast<size_t>(y) * w + x) * channels + c] / 255.0;
  return out;
}

// writes an 8-bit PNG (1 channel -> grayscale, 3 -> RGB); values are
// quantized with round-half-away-from-zero and clamped to [0,255]
inline void png_write(const std::string& path, const Tensor& img) {
  if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw ImageError("png_write expects a [1|3,H,W] tensor");
  const int channels = img.dim(0), h = img.dim(1), w = img.dim(2);

  std::vector<unsigned char> pixels(static_cast<size_t>(h) * w * channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        double v = std::round(img.data()[(static_cast<size_t>(c) * h + y) * w + x] * 255.0);
        v = std::min(255.0, std::max(0.0, v));
        pixels[(static_cast<size_t>(y) * w + x) * channels + c] =
            static_cast<unsigned char>(v);
      }

  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw ImageError("cannot open image for writing: " + path);
  detail::FileCloser closer{f};

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            nullptr, nullptr);
  if (!png) throw ImageError("libpng init failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageError("libpng init failure");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("PNG write failed: " + path);
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, pixels.data() + static_cast<size_t>(y) * w * channels);
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
}

// ---- metrics ----------------------------------------------------------------

// peak signal-to-noise ratio over all channels jointly, peak = 1.0;
// +infinity for identical inputs
inline double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

namespace detail {

// 11-tap normalized Gaussian window, sigma 1.5
inline std::vector<double> ssim_window() {
  std::vector<double> w(11);
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

} // namespace detail

// structural similarity on the luma plane, 11x11 Gaussian window (sigma 1.5),
// valid windows only (no padding), K1=0.01, K2=0.03, dynamic range 1.0
inline double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("ssim: shape mismatch");
  if (a.ndim() != 3) throw std::invalid_argument("ssim expects [C,H,W]");
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (c != 1 && c != 3) throw std::invalid_argument("ssim expects 1 or 3 channels");
  if (h < 11 || w < 11)
    throw std::invalid_argument("ssim needs images of at least 11x11");

  // luma via the usual RGB weights; grayscale passes through
  auto luma = [&](const Tensor& t) {
    std::vector<double> out(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t p = static_cast<size_t>(y) * w + x;
        if (c == 1) {
          out[p] = t.data()[p];
        } else {
          const size_t plane = static_cast<size_t>(h) * w;
          out[p] = 0.299 * t.data()[p] + 0.587 * t.data()[plane + p] +
                   0.114 * t.data()[2 * plane + p];
        }
      }
    return out;
  };
  const auto la = luma(a), lb = luma(b);
  const auto win = detail::ssim_window();

  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  double total = 0.0;
  std::int64_t count = 0;
  for (int y0 = 0; y0 + 11 <= h; ++y0)
    for (int x0 = 0; x0 + 11 <= w; ++x0) {
      double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
      for (int dy = 0; dy < 11; ++dy)
        for (int dx = 0; dx < 11; ++dx) {
          const double g = win[dy] * win[dx];
          const size_t p = static_cast<size_t>(y0 + dy) * w + (x0 + dx);
          ma += g * la[p];
          mb += g * lb[p];
          va += g * la[p] * la[p];
          vb += g * lb[p] * lb[p];
          cov += g * la[p] * lb[p];
        }
      va -= ma * ma;
      vb -= mb * mb;
      cov -= ma * mb;
      total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
               ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
      ++count;
    }
  return total / static_cast<double>(count);
}

} // namespace iic
