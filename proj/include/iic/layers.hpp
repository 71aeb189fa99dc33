#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iic/params.hpp"
#include "iic/tensor.hpp"

// Layer zoo: dense conv blocks, relation module, invertible downscaling
// (Haar / pixel shuffle + invertible 1x1 convolution), affine coupling blocks.

namespace iic {

// ---- Haar wavelet downscaling ----------------------------------------------
//
// Orthonormal per-2x2-block transform; output channel groups ordered
// [all-a | all-h | all-v | all-d]. Exact bijection, inverse is the transpose.

namespace detail {

inline void haar_apply(const double* x, double* y, int n, int h, int w, bool forward) {
  const int h2 = h / 2, w2 = w / 2;
  const size_t iplane = static_cast<size_t>(h) * w;
  const size_t oplane = static_cast<size_t>(h2) * w2;
  for (int c = 0; c < n; ++c) {
    for (int by = 0; by < h2; ++by)
      for (int bx = 0; bx < w2; ++bx) {
        const size_t o = static_cast<size_t>(by) * w2 + bx;
        if (forward) {
          const double* xc = x + c * iplane;
          const double p00 = xc[(2 * by) * w + 2 * bx];
          const double p01 = xc[(2 * by) * w + 2 * bx + 1];
          const double p10 = xc[(2 * by + 1) * w + 2 * bx];
          const double p11 = xc[(2 * by + 1) * w + 2 * bx + 1];
          y[(0 * n + c) * oplane + o] = 0.5 * (p00 + p01 + p10 + p11);
          y[(1 * n + c) * oplane + o] = 0.5 * (p00 - p01 + p10 - p11);
          y[(2 * n + c) * oplane + o] = 0.5 * (p00 + p01 - p10 - p11);
          y[(3 * n + c) * oplane + o] = 0.5 * (p00 - p01 - p10 + p11);
        } else {
          const double av = x[(0 * n + c) * oplane + o];
          const double hv = x[(1 * n + c) * oplane + o];
          const double vv = x[(2 * n + c) * oplane + o];
          const double dv = x[(3 * n + c) * oplane + o];
          double* yc = y + c * iplane;
          yc[(2 * by) * w + 2 * bx] = 0.5 * (av + hv + vv + dv);
          yc[(2 * by) * w + 2 * bx + 1] = 0.5 * (av - hv + vv - dv);
          yc[(2 * by + 1) * w + 2 * bx] = 0.5 * (av + hv - vv - dv);
          yc[(2 * by + 1) * w + 2 * bx + 1] = 0.5 * (av - hv - vv + dv);
        }
      }
  }
}

} // namespace detail

inline Tensor haar_forward(const Tensor& x) {
  if (x.ndim() != 3) throw std::invalid_argument("haar_forward: need [N,H,W]");
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw std::invalid_argument("haar_forward: odd spatial dims");
  auto px = x.node();
  auto out = detail::make_result(Shape{4 * n, h / 2, w / 2}, {px});
  detail::haar_apply(px->data.data(), out->data.data(), n, h, w, /*forward=*/true);
  if (out->needs_grad)
    out->backward_fn = [px, n, h, w](detail::Node& self) {
      px->ensure_grad();
      std::vector<double> gx(px->data.size());
      detail::haar_apply(self.grad.data(), gx.data(), n, h, w, /*forward=*/false);
      for (size_t i = 0; i < gx.size(); ++i) px->grad[i] += gx[i];
    };
  return Tensor::wrap(out);
}

inline Tensor haar_inverse(const Tensor& x) {
  if (x.ndim() != 3) throw std::invalid_argument("haar_inverse: need [4N,H,W]");
  const int n4 = x.dim(0), h2 = x.dim(1), w2 = x.dim(2);
  if (n4 % 4) throw std::invalid_argument("haar_inverse: channels not divisible by 4");
  const int n = n4 / 4;
  auto px = x.node();
  auto out = detail::make_result(Shape{n, 2 * h2, 2 * w2}, {px});
  detail::haar_apply(px->data.data(), out->data.data(), n, 2 * h2, 2 * w2, false);
  if (out->needs_grad)
    out->backward_fn = [px, n, h2, w2](detail::Node& self) {
      px->ensure_grad();
      std::vector<double> gx(px->data.size());
      detail::haar_apply(self.grad.data(), gx.data(), n, 2 * h2, 2 * w2, true);
      for (size_t i = 0; i < gx.size(); ++i) px->grad[i] += gx[i];
    };
  return Tensor::wrap(out);
}

// ---- pixel shuffling downscaling -------------------------------------------
//
// Each 2x2 spatial block of channel c becomes output channels
// 4c+0..4c+3 in row-major sub-pixel order (p00, p01, p10, p11).

namespace detail {

inline void shuffle_apply(const double* x, double* y, int n, int h, int w, bool forward) {
  const int h2 = h / 2, w2 = w / 2;
  const size_t iplane = static_cast<size_t>(h) * w;
  const size_t oplane = static_cast<size_t>(h2) * w2;
  for (int c = 0; c < n; ++c)
    for (int j = 0; j < 4; ++j) {
      const int sy = j / 2, sx = j % 2;
      for (int by = 0; by < h2; ++by)
        for (int bx = 0; bx < w2; ++bx) {
          const size_t src = c * iplane + static_cast<size_t>(2 * by + sy) * w + 2 * bx + sx;
          const size_t dst = static_cast<size_t>(4 * c + j) * oplane +
                             static_cast<size_t>(by) * w2 + bx;
          if (forward)
            y[dst] = x[src];
          else
            y[src] = x[dst];
        }
    }
}

} // namespace detail

inline Tensor pixel_shuffle_down(const Tensor& x) {
  if (x.ndim() != 3) throw std::invalid_argument("pixel_shuffle_down: need [N,H,W]");
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw std::invalid_argument("pixel_shuffle_down: odd spatial dims");
  auto px = x.node();
  auto out = detail::make_result(Shape{4 * n, h / 2, w / 2}, {px});
  detail::shuffle_apply(px->data.data(), out->data.data(), n, h, w, true);
  if (out->needs_grad)
    out->backward_fn = [px, n, h, w](detail::Node& self) {
      px->ensure_grad();
      std::vector<double> gx(px->data.size());
      detail::shuffle_apply(self.grad.data(), gx.data(), n, h, w, false);
      for (size_t i = 0; i < gx.size(); ++i) px->grad[i] += gx[i];
    };
  return Tensor::wrap(out);
}

inline Tensor pixel_shuffle_up(const Tensor& x) {
  if (x.ndim() != 3) throw std::invalid_argument("pixel_shuffle_up: need [4N,H,W]");
  const int n4 = x.dim(0), h2 = x.dim(1), w2 = x.dim(2);
  if (n4 % 4) throw std::invalid_argument("pixel_shuffle_up: channels not divisible by 4");
  const int n = n4 / 4;
  auto px = x.node();
  auto out = detail::make_result(Shape{n, 2 * h2, 2 * w2}, {px});
  detail::shuffle_apply(px->data.data(), out->data.data(), n, 2 * h2, 2 * w2, false);
  if (out->needs_grad)
    out->backward_fn = [px, n, h2, w2](detail::Node& self) {
      px->ensure_grad();
      std::vector<double> gx(px->data.size());
      detail::shuffle_apply(self.grad.data(), gx.data(), n, 2 * h2, 2 * w2, true);
      for (size_t i = 0; i < gx.size(); ++i) px->grad[i] += gx[i];
    };
  return Tensor::wrap(out);
}

// ---- LU-mask ops for the invertible 1x1 convolution ------------------------

// strict lower triangle of lu with unit diagonal
inline Tensor lower_unit(const Tensor& lu) {
  const int n = lu.dim(0);
  auto p = lu.node();
  auto out = detail::make_result(lu.shape(), {p});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out->data[i * n + j] = i > j ? p->data[i * n + j] : (i == j ? 1.0 : 0.0);
  if (out->needs_grad)
    out->backward_fn = [p, n](detail::Node& self) {
      p->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < i; ++j) p->grad[i * n + j] += self.grad[i * n + j];
    };
  return Tensor::wrap(out);
}

// upper triangle of lu; diagonal magnitude floored away from zero
inline Tensor upper_floored(const Tensor& lu, double floor_mag = 1e-4) {
  const int n = lu.dim(0);
  auto p = lu.node();
  auto out = detail::make_result(lu.shape(), {p});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i < j)
        out->data[i * n + j] = p->data[i * n + j];
      else if (i == j) {
        const double d = p->data[i * n + j];
        const double s = d < 0.0 ? -1.0 : 1.0;
        out->data[i * n + j] = s * std::max(std::fabs(d), floor_mag);
      } else
        out->data[i * n + j] = 0.0;
    }
  if (out->needs_grad)
    out->backward_fn = [p, n, floor_mag](detail::Node& self) {
      p->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
          if (i == j && std::fabs(p->data[i * n + j]) < floor_mag) continue;
          p->grad[i * n + j] += self.grad[i * n + j];
        }
    };
  return Tensor::wrap(out);
}

// ---- dense conv block ------------------------------------------------------

struct DenseBlockSpec {
  int layers = 4;
  int growth = 8;
  double slope = 0.2;  // leaky rectification
  int kernel = 3;
};

// Densely connected conv stack; the final projection starts at zero so every
// block using it is an identity map at initialization.
class DenseBlock {
 public:
  DenseBlock() = default;

  DenseBlock(ParameterStore& store, const std::string& prefix, int in_ch, int out_ch,
             const DenseBlockSpec& spec, std::mt19937_64& rng)
      : spec_(spec) {
    int ch = in_ch;
    for (int l = 0; l < spec.layers; ++l) {
      const double std = std::sqrt(2.0 / (ch * spec.kernel * spec.kernel));
      Tensor w = store.create(prefix + ".conv" + std::to_string(l) + ".w",
                              {spec.growth, ch, spec.kernel, spec.kernel});
      std::normal_distribution<double> dist(0.0, std);
      for (std::int64_t i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
      Tensor b = store.create(prefix + ".conv" + std::to_string(l) + ".b", {spec.growth});
      ws_.push_back(w);
      bs_.push_back(b);
      ch += spec.growth;
    }
    wf_ = store.create(prefix + ".proj.w", {out_ch, ch, spec.kernel, spec.kernel});
    bf_ = store.create(prefix + ".proj.b", {out_ch});
  }

  Tensor forward(const Tensor& x) const {
    std::vector<Tensor> feats{x};
    Tensor cat = x;
    for (size_t l = 0; l < ws_.size(); ++l) {
      Tensor f = leaky_relu(conv2d(cat, ws_[l], bs_[l]), spec_.slope);
      feats.push_back(f);
      cat = concat_channels(feats);
    }
    return conv2d(cat, wf_, bf_);
  }

 private:
  DenseBlockSpec spec_;
  std::vector<Tensor> ws_, bs_;
  Tensor wf_, bf_;
};

// ---- relation module -------------------------------------------------------
//
// K parallel conv headers lift each image into feature space; the concatenated
// features pass through K tailers whose outputs are added back residually.

class RelationModule {
 public:
  RelationModule() = default;

  RelationModule(ParameterStore& store, const std::string& prefix, int k, int c,
                 int feat_ch, const DenseBlockSpec& spec, std::mt19937_64& rng)
      : k_(k), c_(c) {
    for (int i = 0; i < k; ++i)
      headers_.emplace_back(store, prefix + ".header" + std::to_string(i), c, feat_ch,
                            spec, rng);
    for (int i = 0; i < k; ++i)
      tailers_.emplace_back(store, prefix + ".tailer" + std::to_string(i), k * feat_ch,
                            c, spec, rng);
  }

  Tensor forward(const Tensor& x) const {
    if (x.dim(0) != k_ * c_)
      throw std::invalid_argument("relation module: channel count not divisible by K");
    std::vector<Tensor> slices = split_k(x);
    std::vector<Tensor> feats;
    for (int i = 0; i < k_; ++i) feats.push_back(headers_[i].forward(slices[i]));
    Tensor f = concat_channels(feats);
    std::vector<Tensor> outs;
    for (int i = 0; i < k_; ++i) outs.push_back(add(tailers_[i].forward(f), slices[i]));
    return concat_channels(outs);
  }

  int image_count() const { return k_; }

 private:
  std::vector<Tensor> split_k(const Tensor& x) const {
    std::vector<Tensor> out;
    Tensor rest = x;
    for (int i = 0; i + 1 < k_; ++i) {
      auto [head, tail] = split_channels(rest, c_);
      out.push_back(head);
      rest = tail;
    }
    out.push_back(rest);
    return out;
  }

  int k_ = 0, c_ = 0;
  std::vector<DenseBlock> headers_, tailers_;
};

// ---- invertible 1x1 convolution --------------------------------------------
//
// W = P * L * U with fixed permutation P from the pivoted LU of a random
// orthogonal matrix; L unit lower, U's diagonal floored away from zero, so W
// stays invertible under gradient updates.

class Inv1x1 {
 public:
  Inv1x1() = default;

  Inv1x1(ParameterStore& store, const std::string& prefix, int m, std::mt19937_64& rng)
      : m_(m) {
    // random orthogonal via Gram-Schmidt on a Gaussian matrix
    std::vector<double> q(static_cast<size_t>(m) * m);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& v : q) v = dist(rng);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < i; ++j) {
        double dot = 0.0;
        for (int t = 0; t < m; ++t) dot += q[i * m + t] * q[j * m + t];
        for (int t = 0; t < m; ++t) q[i * m + t] -= dot * q[j * m + t];
      }
      double norm = 0.0;
      for (int t = 0; t < m; ++t) norm += q[i * m + t] * q[i * m + t];
      norm = std::sqrt(norm);
      for (int t = 0; t < m; ++t) q[i * m + t] /= norm;
    }

    // pivoted LU of the orthogonal matrix; keep the permutation fixed
    detail::LuFactors f(q, m);
    perm_rows_ = f.piv;
    Tensor lu = store.create(prefix + ".lu", {m, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) lu.data()[i * m + j] = f.lu[i * m + j];
    lu_ = lu;

    // P as a constant matrix: row piv[i] of P*A is row i of LU, i.e.
    // (P)_{piv[i], i} = 1
    pmat_ = Tensor::zeros({m, m});
    for (int i = 0; i < m; ++i) pmat_.data()[perm_rows_[i] * m + i] = 1.0;
  }

  Tensor weight() const {
    return matmul_sq(pmat_, matmul_sq(lower_unit(lu_), upper_floored(lu_)));
  }

  Tensor forward(const Tensor& x) const {
    if (x.dim(0) != m_) throw std::invalid_argument("inv1x1: channel mismatch");
    return channel_mix(weight(), x);
  }

  Tensor inverse(const Tensor& y) const {
    if (y.dim(0) != m_) throw std::invalid_argument("inv1x1: channel mismatch");
    return channel_mix_inverse(weight(), y);
  }

 private:
  int m_ = 0;
  Tensor lu_, pmat_;
  std::vector<int> perm_rows_;
};

// ---- affine coupling block -------------------------------------------------

class CouplingBlock {
 public:
  CouplingBlock() = default;

  CouplingBlock(ParameterStore& store, const std::string& prefix, int m, int split_at,
                const DenseBlockSpec& spec, std::mt19937_64& rng)
      : m_(m), split_(split_at) {
    if (split_at <= 0 || split_at >= m)
      throw std::invalid_argument("coupling block: invalid split position");
    const int top = split_at, bot = m - split_at;
    h2_ = DenseBlock(store, prefix + ".h2", bot, top, spec, rng);
    g_ = DenseBlock(store, prefix + ".g", top, bot, spec, rng);
    h1_ = DenseBlock(store, prefix + ".h1", top, bot, spec, rng);
  }

  Tensor forward(const Tensor& u) const {
    if (u.dim(0) != m_) throw std::invalid_argument("coupling forward: channel mismatch");
    auto [t, b] = split_channels(u, split_);
    Tensor t2 = add(t, h2_.forward(b));
    Tensor scale_fac = exp_(centered_sigmoid(g_.forward(t2)));
    Tensor b2 = add(mul(b, scale_fac), h1_.forward(t2));
    return concat_channels({t2, b2});
  }

  Tensor inverse(const Tensor& u2) const {
    if (u2.dim(0) != m_) throw std::invalid_argument("coupling inverse: channel mismatch");
    auto [t2, b2] = split_channels(u2, split_);
    Tensor scale_fac = exp_(neg(centered_sigmoid(g_.forward(t2))));
    Tensor b = mul(sub(b2, h1_.forward(t2)), scale_fac);
    Tensor t = sub(t2, h2_.forward(b));
    return concat_channels({t, b});
  }

 private:
  int m_ = 0, split_ = 0;
  DenseBlock h2_, g_, h1_;
};

// random weights for the invertibility property suites; keeps the LU diagonal
// of any 1x1 mixing matrix away from zero so the inverse stays well conditioned
inline void randomize_parameters(ParameterStore& store, std::mt19937_64& rng,
                                 double stddev) {
  store.randomize_all(rng, stddev);
  for (const auto& name : store.names()) {
    if (name.size() < 3 || name.compare(name.size() - 3, 3, ".lu") != 0) continue;
    Tensor& lu = store.at(name);
    const int n = lu.dim(0);
    for (int i = 0; i < n; ++i) {
      double& d = lu.data()[i * n + i];
      d += d < 0.0 ? -1.0 : 1.0;
    }
  }
}

inline Tensor inn_forward(const Tensor& u, const std::vector<CouplingBlock>& blocks) {
  Tensor v = u;
  for (const auto& blk : blocks) v = blk.forward(v);
  return v;
}

inline Tensor inn_inverse(const Tensor& v, const std::vector<CouplingBlock>& blocks) {
  Tensor u = v;
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) u = it->inverse(u);
  return u;
}

} // namespace iic
