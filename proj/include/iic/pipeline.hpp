#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iic/layers.hpp"
#include "iic/params.hpp"
#include "iic/tensor.hpp"

// Full IICNet assembly: stacking, relation module, optional invertible
// downscaling, coupling stack, channel squeeze, quantization, and the exact
// inverse chain.

namespace iic {

enum class DownscaleKind { haar, shuffle };
enum class QuantizeMode { train, test };

struct NetworkConfig {
  int images = 2;          // K
  int channels = 3;        // C per image
  int height = 32;         // H
  int width = 32;          // W
  bool downscale = false;
  DownscaleKind downscale_kind = DownscaleKind::haar;
  int embed_channels = 3;  // C_e
  int coupling_blocks = 8;
  DenseBlockSpec dense;
  int relation_features = 8;
  int reference_index = 0;
  bool disable_relation = false;

  int stacked_channels() const { return images * channels; }              // N
  int mixed_channels() const { return downscale ? 4 * stacked_channels()
                                                : stacked_channels(); }   // M
  int embed_height() const { return downscale ? height / 2 : height; }    // H_e
  int embed_width() const { return downscale ? width / 2 : width; }       // W_e
  int squeeze_groups() const { return mixed_channels() / embed_channels; }  // K_e
  // the top slice is reference-sized; for K=1 without downscaling that would
  // consume every channel, so fall back to a half split
  int split_position() const {
    return embed_channels < mixed_channels() ? embed_channels : mixed_channels() / 2;
  }

  void validate() const {
    if (images < 1) throw std::invalid_argument("config: K must be >= 1");
    if (channels < 1 || height < 1 || width < 1)
      throw std::invalid_argument("config: bad image dims");
    if (downscale && (height % 2 || width % 2))
      throw std::invalid_argument("config: downscale needs even H and W");
    if (embed_channels < 1 || mixed_channels() % embed_channels != 0)
      throw std::invalid_argument("config: M must be divisible by C_e");
    if (embed_channels != channels)
      throw std::invalid_argument("config: C_e must equal C (reference policy)");
    if (split_position() <= 0 || split_position() >= mixed_channels())
      throw std::invalid_argument("config: invalid coupling split position");
    if (coupling_blocks < 0) throw std::invalid_argument("config: bad block count");
    if (reference_index < 0 || reference_index >= images)
      throw std::invalid_argument("config: reference index out of range");
  }
};

// K images stacked along channels plus the designated reference
struct ImageStack {
  std::vector<Tensor> images;  // each [C,H,W], values in [0,1]
  int reference_index = 0;

  void validate(const NetworkConfig& cfg) const {
    if (static_cast<int>(images.size()) != cfg.images)
      throw std::invalid_argument("image stack: wrong image count");
    for (const auto& img : images) {
      if (img.shape() != Shape{cfg.channels, cfg.height, cfg.width})
        throw std::invalid_argument("image stack: wrong image shape");
      for (std::int64_t i = 0; i < img.size(); ++i)
        if (img.data()[i] < 0.0 || img.data()[i] > 1.0)
          throw std::invalid_argument("image stack: pixel outside [0,1]");
    }
    if (reference_index < 0 || reference_index >= cfg.images)
      throw std::invalid_argument("image stack: bad reference index");
  }
};

struct EmbeddingImage {
  Tensor values;  // [C_e,H_e,W_e]
  bool quantized = false;
};

inline Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw std::invalid_argument("stack: empty image list");
  for (const auto& img : images)
    if (img.shape() != images.front().shape())
      throw std::invalid_argument("stack: image shapes differ");
  if (images.size() == 1) return images.front();
  return concat_channels(images);
}

inline std::vector<Tensor> unstack_images(const Tensor& x, int k) {
  if (x.dim(0) % k) throw std::invalid_argument("unstack: channel count not divisible");
  const int c = x.dim(0) / k;
  std::vector<Tensor> out;
  Tensor rest = x;
  for (int i = 0; i + 1 < k; ++i) {
    auto [head, tail] = split_channels(rest, c);
    out.push_back(head);
    rest = tail;
  }
  out.push_back(rest);
  return out;
}

// ---- channel squeeze --------------------------------------------------------

inline Tensor channel_squeeze_forward(const Tensor& v, int embed_channels) {
  if (v.dim(0) % embed_channels)
    throw std::invalid_argument("channel squeeze: M not divisible by C_e");
  const int groups = v.dim(0) / embed_channels;
  if (groups == 1) return v;
  // mean written as e0 + (sum_i (e_i - e0))/K_e so identical preliminaries
  // average to the preliminary bit-exactly
  auto parts = unstack_images(v, groups);
  Tensor corr = sub(parts[1], parts[0]);
  for (int i = 2; i < groups; ++i) corr = add(corr, sub(parts[i], parts[0]));
  return add(parts[0], scale(corr, 1.0 / groups));
}

inline Tensor channel_squeeze_backward(const Tensor& e, int groups) {
  if (groups == 1) return e;
  std::vector<Tensor> copies(static_cast<size_t>(groups), e);
  return concat_channels(copies);
}

// ---- quantization -----------------------------------------------------------

// train: additive uniform noise in [-0.5/255, 0.5/255], then clamp to [0,1];
// test: round(v*255) half away from zero, clamp, divide by 255 (detached)
inline Tensor quantize(const Tensor& e, QuantizeMode mode, std::mt19937_64& rng) {
  if (mode == QuantizeMode::train) {
    Tensor noise = Tensor::uniform(e.shape(), rng, -0.5 / 255.0, 0.5 / 255.0);
    return clamp(add(e, noise), 0.0, 1.0);
  }
  Tensor out = e.detach();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const double scaled = out.data()[i] * 255.0;
    const double rounded = scaled >= 0.0 ? std::floor(scaled + 0.5) : std::ceil(scaled - 0.5);
    out.data()[i] = std::min(255.0, std::max(0.0, rounded)) / 255.0;
  }
  return out;
}

// same as train-mode quantize but with a caller-supplied noise tensor;
// the gradient checks need a frozen noise realization
inline Tensor quantize_with_noise(const Tensor& e, const Tensor& noise) {
  return clamp(add(e, noise), 0.0, 1.0);
}

// ---- bilinear resize (align-corners-false) ----------------------------------

inline Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out = Tensor::zeros({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < out_h; ++y)
      for (int xo = 0; xo < out_w; ++xo) {
        const double fy = std::min(std::max((y + 0.5) * sy - 0.5, 0.0), h - 1.0);
        const double fx = std::min(std::max((xo + 0.5) * sx - 0.5, 0.0), w - 1.0);
        const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
        const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double wy = fy - y0, wx = fx - x0;
        const double* p = x.data() + static_cast<size_t>(ci) * h * w;
        const double v = (1 - wy) * ((1 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1]) +
                         wy * ((1 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1]);
        out.data()[(static_cast<size_t>(ci) * out_h + y) * out_w + xo] = v;
      }
  return out;
}

// ---- the network ------------------------------------------------------------

struct EmbedResult {
  Tensor raw;        // embedding before quantization, [C_e,H_e,W_e]
  Tensor quantized;  // after the quantization layer
  Tensor mixed;      // INN output v, [M,H_e,W_e]
};

class IICNet {
 public:
  IICNet(const NetworkConfig& cfg, ParameterStore& store, std::mt19937_64& rng)
      : cfg_(cfg) {
    cfg_.validate();
    if (!cfg_.disable_relation) {
      relation_fwd_ = RelationModule(store, "rel_fwd", cfg_.images, cfg_.channels,
                                     cfg_.relation_features, cfg_.dense, rng);
      relation_inv_ = RelationModule(store, "rel_inv", cfg_.images, cfg_.channels,
                                     cfg_.relation_features, cfg_.dense, rng);
    }
    if (cfg_.downscale)
      mix_ = Inv1x1(store, "down.mix", cfg_.mixed_channels(), rng);
    for (int i = 0; i < cfg_.coupling_blocks; ++i)
      blocks_.emplace_back(store, "inn.block" + std::to_string(i), cfg_.mixed_channels(),
                           cfg_.split_position(), cfg_.dense, rng);
  }

  const NetworkConfig& config() const { return cfg_; }

  Tensor downscale_forward(const Tensor& r) const {
    if (!cfg_.downscale) return r;
    Tensor s = cfg_.downscale_kind == DownscaleKind::haar ? haar_forward(r)
                                                          : pixel_shuffle_down(r);
    return mix_.forward(s);
  }

  Tensor downscale_inverse(const Tensor& u) const {
    if (!cfg_.downscale) return u;
    Tensor s = mix_.inverse(u);
    return cfg_.downscale_kind == DownscaleKind::haar ? haar_inverse(s)
                                                      : pixel_shuffle_up(s);
  }

  Tensor core_forward(const Tensor& r) const {
    return inn_forward(downscale_forward(r), blocks_);
  }

  Tensor core_inverse(const Tensor& v) const {
    return downscale_inverse(inn_inverse(v, blocks_));
  }

  // forward chain on an already-stacked tensor [N,H,W]; quantization mode
  // picks noisy (train) or rounded (test) embedding
  EmbedResult embed_stacked(const Tensor& x, QuantizeMode mode, std::mt19937_64& rng) const {
    if (x.shape() != Shape{cfg_.stacked_channels(), cfg_.height, cfg_.width})
      throw std::invalid_argument("embed: stacked input shape mismatch");
    Tensor r = cfg_.disable_relation ? x : relation_fwd_.forward(x);
    Tensor v = core_forward(r);
    Tensor raw = channel_squeeze_forward(v, cfg_.embed_channels);
    Tensor q = quantize(raw, mode, rng);
    return {raw, q, v};
  }

  EmbedResult embed(const ImageStack& stack, QuantizeMode mode, std::mt19937_64& rng) const {
    stack.validate(cfg_);
    return embed_stacked(stack_images(stack.images), mode, rng);
  }

  // inverse chain from an embedding tensor [C_e,H_e,W_e]; returns the stacked
  // restoration [N,H,W] before clamping
  Tensor restore_stacked(const Tensor& e) const {
    if (e.shape() != Shape{cfg_.embed_channels, cfg_.embed_height(), cfg_.embed_width()})
      throw std::invalid_argument("restore: embedding shape mismatch");
    Tensor v = channel_squeeze_backward(e, cfg_.squeeze_groups());
    Tensor r = core_inverse(v);
    return cfg_.disable_relation ? r : relation_inv_.forward(r);
  }

  // clamped per-image restorations
  std::vector<Tensor> restore(const EmbeddingImage& e) const {
    Tensor x = restore_stacked(e.values);
    auto images = unstack_images(x, cfg_.images);
    for (auto& img : images) img = clamp(img, 0.0, 1.0);
    return images;
  }

  // reference image in embedding dimensions (bilinear when downscaling)
  Tensor reference(const ImageStack& stack) const {
    const Tensor& ref = stack.images.at(static_cast<size_t>(stack.reference_index));
    if (!cfg_.downscale) return ref;
    return bilinear_resize(ref, cfg_.embed_height(), cfg_.embed_width());
  }

  // strict bijectivity of f_inn . f_down, bypassing relation/squeeze/quantize
  double roundtrip_core_check(const Tensor& x) const {
    Tensor back = core_inverse(core_forward(x));
    double worst = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i)
      worst = std::max(worst, std::fabs(back.data()[i] - x.data()[i]));
    return worst;
  }

 private:
  NetworkConfig cfg_;
  RelationModule relation_fwd_, relation_inv_;
  Inv1x1 mix_;
  std::vector<CouplingBlock> blocks_;
};

} // namespace iic
