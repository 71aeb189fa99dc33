#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iic/pipeline.hpp"

// Losses, optimizer, and the training loop.

namespace iic {

struct LossWeights {
  double embedding = 1.0;   // lambda1
  double frequency = 1.0;   // lambda2
  double restoration = 16.0;  // lambda3

  void validate() const {
    if (embedding < 0 || frequency < 0 || restoration < 0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (embedding == 0 && frequency == 0 && restoration == 0)
      throw std::invalid_argument("at least one loss weight must be positive");
  }
};

// mean squared error against the reference image
inline Tensor loss_embedding(const Tensor& e_raw, const Tensor& e_ref) {
  if (e_raw.shape() != e_ref.shape())
    throw std::invalid_argument("loss_embedding: shape mismatch");
  Tensor d = sub(e_ref, e_raw);
  return mean(mul(d, d));
}

// mean squared complex distance over the retained one-sided spectrum bins
inline Tensor loss_frequency(const Tensor& e_raw, const Tensor& e_ref) {
  if (e_raw.shape() != e_ref.shape())
    throw std::invalid_argument("loss_frequency: shape mismatch");
  Tensor d = sub(dft2_onesided_packed(e_ref), dft2_onesided_packed(e_raw));
  Tensor s = sum(mul(d, d));
  const double bins = static_cast<double>(d.size()) / 2.0;  // re+im pairs
  return scale(s, 1.0 / bins);
}

// average per-image mean absolute error
inline Tensor loss_restoration(const std::vector<Tensor>& restored,
                               const std::vector<Tensor>& originals) {
  if (restored.size() != originals.size() || restored.empty())
    throw std::invalid_argument("loss_restoration: image count mismatch");
  Tensor acc;
  for (size_t k = 0; k < restored.size(); ++k) {
    Tensor term = mean(abs_(sub(originals[k], restored[k])));
    acc = k == 0 ? term : add(acc, term);
  }
  return scale(acc, 1.0 / static_cast<double>(restored.size()));
}

struct LossParts {
  Tensor embedding, frequency, restoration;
};

inline Tensor loss_total(const LossParts& parts, const LossWeights& w) {
  Tensor t = scale(parts.embedding, w.embedding);
  t = add(t, scale(parts.frequency, w.frequency));
  return add(t, scale(parts.restoration, w.restoration));
}

// ---- optimizer --------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// bias-corrected adaptive-moment update; clears gradients afterwards
inline void adam_step(ParameterStore& store, const AdamConfig& opt) {
  store.step += 1;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(store.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(store.step));
  for (const auto& name : store.names()) {
    Tensor& p = store.at(name);
    auto& mo = store.moments(name);
    const auto& g = p.grad();
    for (std::int64_t i = 0; i < p.size(); ++i) {
      mo.m[i] = opt.beta1 * mo.m[i] + (1.0 - opt.beta1) * g[i];
      mo.v[i] = opt.beta2 * mo.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mhat = mo.m[i] / c1;
      const double vhat = mo.v[i] / c2;
      p.data()[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
  store.zero_grads();
}

// ---- training loop ----------------------------------------------------------

struct TrainRunSpec {
  NetworkConfig net;
  LossWeights weights;
  AdamConfig adam;
  int iterations = 1000;
  int batch_size = 1;
  std::uint64_t seed = 0;
  bool disable_freq_loss = false;  // "w/o freq." arm; relation arm lives in net config
  int eval_interval = 0;           // 0 = no periodic eval
};

struct IterationRecord {
  int iteration = 0;
  double loss_embedding = 0.0;
  double loss_frequency = 0.0;
  double loss_restoration = 0.0;
  double loss_total = 0.0;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// random crop of every image in the sample down to the configured H x W
inline ImageStack random_crop(const ImageStack& sample, int h, int w,
                              std::mt19937_64& rng) {
  const int sh = sample.images.front().dim(1);
  const int sw = sample.images.front().dim(2);
  if (sh < h || sw < w) throw std::invalid_argument("sample smaller than crop size");
  std::uniform_int_distribution<int> dy(0, sh - h), dx(0, sw - w);
  const int y0 = dy(rng), x0 = dx(rng);
  ImageStack out;
  out.reference_index = sample.reference_index;
  for (const auto& img : sample.images) {
    const int c = img.dim(0);
    Tensor crop = Tensor::zeros({c, h, w});
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          crop.data()[(static_cast<size_t>(ci) * h + y) * w + x] =
              img.data()[(static_cast<size_t>(ci) * sh + y0 + y) * sw + x0 + x];
    out.images.push_back(crop);
  }
  return out;
}

// forward + inverse + losses for one sample; the restore pass consumes the
// noisy (train-mode) embedding so gradients flow through the whole chain
inline LossParts sample_losses(const IICNet& net, const ImageStack& sample,
                               QuantizeMode mode, std::mt19937_64& rng) {
  auto res = net.embed(sample, mode, rng);
  Tensor e_ref = net.reference(sample);
  Tensor noisy = mode == QuantizeMode::train ? res.quantized : res.quantized.detach();
  Tensor restored_stack = net.restore_stacked(noisy);
  auto restored = unstack_images(restored_stack, net.config().images);
  for (auto& img : restored) img = clamp(img, 0.0, 1.0);
  return {loss_embedding(res.raw, e_ref), loss_frequency(res.raw, e_ref),
          loss_restoration(restored, sample.images)};
}

using IterationCallback = std::function<void(const IterationRecord&)>;
using EvalCallback = std::function<void(int iteration)>;

// lr decays by x0.5 at 50% and 75% of the run
inline double scheduled_lr(double base, int iteration, int total) {
  double lr = base;
  if (total > 0 && iteration >= total / 2) lr *= 0.5;
  if (total > 0 && iteration >= (3 * total) / 4) lr *= 0.5;
  return lr;
}

inline void train(const TrainRunSpec& spec, const std::vector<ImageStack>& dataset,
                  IICNet& net, ParameterStore& store,
                  const IterationCallback& on_iteration = {},
                  const EvalCallback& on_eval = {}) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  spec.weights.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);

  LossWeights w = spec.weights;
  if (spec.disable_freq_loss) w.frequency = 0.0;

  for (int it = 0; it < spec.iterations; ++it) {
    IterationRecord rec;
    rec.iteration = it + 1;
    Tensor batch_total;
    try {
      for (int b = 0; b < spec.batch_size; ++b) {
        const ImageStack& sample = dataset[pick(rng)];
        ImageStack crop = random_crop(sample, spec.net.height, spec.net.width, rng);
        LossParts parts = sample_losses(net, crop, QuantizeMode::train, rng);
        Tensor total = loss_total(parts, w);
        rec.loss_embedding += parts.embedding.item() / spec.batch_size;
        rec.loss_frequency += parts.frequency.item() / spec.batch_size;
        rec.loss_restoration += parts.restoration.item() / spec.batch_size;
        Tensor scaled = scale(total, 1.0 / spec.batch_size);
        batch_total = b == 0 ? scaled : add(batch_total, scaled);
      }
      rec.loss_total = batch_total.item();
      if (!std::isfinite(rec.loss_total))
        throw DivergenceError("training diverged: non-finite loss");
      backward(batch_total);
    } catch (const std::domain_error& e) {
      throw DivergenceError(std::string("training diverged: ") + e.what());
    }

    AdamConfig opt = spec.adam;
    opt.lr = scheduled_lr(spec.adam.lr, it, spec.iterations);
    adam_step(store, opt);

    if (on_iteration) on_iteration(rec);
    if (on_eval && spec.eval_interval > 0 && rec.iteration % spec.eval_interval == 0)
      on_eval(rec.iteration);
  }
}

} // namespace iic
