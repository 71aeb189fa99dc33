#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Dense double-precision tensors with a reverse-mode tape.
// Graphs are built implicitly by the ops below and are single-use:
// one forward build, one backward() consume.

namespace iic {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;   // allocated for grad leaves up front, lazily otherwise
  bool requires_grad = false; // leaf flag
  bool needs_grad = false;    // on any path to a requires_grad leaf
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

inline void check_finite(const Node& n, const char* op) {
  for (double v : n.data)
    if (!std::isfinite(v))
      throw std::domain_error(std::string("non-finite result in op '") + op + "'");
}

} // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    node_->shape = std::move(shape);
    node_->data.assign(static_cast<size_t>(shape_numel(node_->shape)), 0.0);
    node_->requires_grad = requires_grad;
    node_->needs_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor: data size does not match shape");
    for (double v : data)
      if (!std::isfinite(v)) throw std::domain_error("tensor: non-finite input value");
    Tensor t(std::move(shape), requires_grad);
    t.node_->data = std::move(data);
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.node_->data) v = dist(rng);
    return t;
  }

  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.node_->data) v = dist(rng);
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  double item() const {
    if (size() != 1) throw std::logic_error("item() on non-scalar tensor");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad_path() const { return node_->needs_grad; }
  const std::vector<double>& grad() const {
    if (!node_->requires_grad) throw std::logic_error("grad on non-leaf tensor");
    return node_->grad;
  }
  std::vector<double>& grad_mut() {
    if (!node_->requires_grad) throw std::logic_error("grad on non-leaf tensor");
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // detached copy of the values, no graph attachment
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> make_result(Shape shape,
                                         std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data.assign(static_cast<size_t>(shape_numel(n->shape)), 0.0);
  for (const auto& p : parents)
    if (p->needs_grad) n->needs_grad = true;
  if (n->needs_grad) n->parents = std::move(parents);
  return n;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

} // namespace detail

// ---- elementwise ops -------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_result(a.shape(), {pa, pb});
  const size_t n = pa->data.size();
  for (size_t i = 0; i < n; ++i) out->data[i] = pa->data[i] + pb->data[i];
  detail::check_finite(*out, "add");
  if (out->needs_grad)
    out->backward_fn = [pa, pb](detail::Node& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
      }
    };
  return Tensor::wrap(out);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_result(a.shape(), {pa, pb});
  const size_t n = pa->data.size();
  for (size_t i = 0; i < n; ++i) out->data[i] = pa->data[i] - pb->data[i];
  detail::check_finite(*out, "sub");
  if (out->needs_grad)
    out->backward_fn = [pa, pb](detail::Node& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
      }
    };
  return Tensor::wrap(out);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_result(a.shape(), {pa, pb});
  const size_t n = pa->data.size();
  for (size_t i = 0; i < n; ++i) out->data[i] = pa->data[i] * pb->data[i];
  detail::check_finite(*out, "mul");
  if (out->needs_grad)
    out->backward_fn = [pa, pb](detail::Node& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->data[i];
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->data[i];
      }
    };
  return Tensor::wrap(out);
}

inline Tensor neg(const Tensor& a) {
  auto pa = a.node();
  auto out = detail::make_result(a.shape(), {pa});
  for (size_t i = 0; i < pa->data.size(); ++i) out->data[i] = -pa->data[i];
  if (out->needs_grad)
    out->backward_fn = [pa](detail::Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] -= self.grad[i];
    };
  return Tensor::wrap(out);
}

inline Tensor exp_(const Tensor& a) {
  auto pa = a.node();
  auto out = detail::make_result(a.shape(), {pa});
  for (size_t i = 0; i < pa->data.size(); ++i) out->data[i] = std::exp(pa->data[i]);
  detail::check_finite(*out, "exp");
  if (out->needs_grad) {
    auto on = out;
    out->backward_fn = [pa, on](detail::Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * on->data[i];
    };
  }
  return Tensor::wrap(out);
}

// 2*sigmoid(x)-1, equivalently tanh(x/2); range (-1,1)
inline Tensor centered_sigmoid(const Tensor& a) {
  auto pa = a.node();
  auto out = detail::make_result(a.shape(), {pa});
  for (size_t i = 0; i < pa->data.size(); ++i)
    out->data[i] = std::tanh(0.5 * pa->data[i]);
  if (out->needs_grad) {
    auto on = out;
    out->backward_fn = [pa, on](detail::Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const double y = on->data[i];
        pa->grad[i] += self.grad[i] * 0.5 * (1.0 - y * y);
      }
    };
  }
  return Tensor::wrap(out);
}

inline Tensor leaky_relu(const Tensor& a, double slope = 0.2) {
  auto pa = a.node();
  auto out = detail::make_result(a.shape(), {pa});
  for (size_t i = 0; i < pa->data.size(); ++i) {
    const double v = pa->data[i];
    out->data[i] = v >= 0.0 ? v : slope * v;
  }
  if (out->needs_grad)
    out->backward_fn = [pa, slope](detail::Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * (pa->data[i] >= 0.0 ? 1.0 : slope);
    };
  return Tensor::wrap(out);
}

inline Tensor scale(const Tensor& a, double factor) {
  auto pa = a.node();
  auto out = detail::make_result(a.shape(), {pa});
  for (size_t i = 0; i < pa->data.size(); ++i) out->data[i] = factor * pa->data[i];
  detail::check_finite(*out, "scale");
  if (out->needs_grad)
    out->backward_fn = [pa, factor](detail::Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += factor * self.grad[i];
    };
  return Tensor::wrap(out);
}

inline Tensor abs_(const Tensor& a) {
  auto pa = a.node();
  auto out = detail::make_result(a.shape(), {pa});
  for (size_t i = 0; i < pa->data.size(); ++i) out->data[i] = std::fabs(pa->data[i]);
  if (out->needs_grad)
    out->backward_fn = [pa](detail::Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const double v = pa->data[i];
        pa->grad[i] += self.grad[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
      }
    };
  return Tensor::wrap(out);
}

// clamp to [lo,hi]; gradient is identity inside the range, zero outside
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  auto pa = a.node();
  auto out = detail::make_result(a.shape(), {pa});
  for (size_t i = 0; i < pa->data.size(); ++i)
    out->data[i] = std::min(hi, std::max(lo, pa->data[i]));
  if (out->needs_grad)
    out->backward_fn = [pa, lo, hi](detail::Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const double v = pa->data[i];
        if (v >= lo && v <= hi) pa->grad[i] += self.grad[i];
      }
    };
  return Tensor::wrap(out);
}

// ---- reductions ------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  auto pa = a.node();
  auto out = detail::make_result(Shape{1}, {pa});
  double s = 0.0;
  for (double v : pa->data) s += v;
  out->data[0] = s;
  detail::check_finite(*out, "sum");
  if (out->needs_grad)
    out->backward_fn = [pa](detail::Node& self) {
      pa->ensure_grad();
      const double g = self.grad[0];
      for (double& gv : pa->grad) gv += g;
    };
  return Tensor::wrap(out);
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---- shape ops -------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw std::invalid_argument("reshape: element count mismatch");
  auto pa = a.node();
  auto out = detail::make_result(std::move(shape), {pa});
  out->data = pa->data;
  if (out->needs_grad)
    out->backward_fn = [pa](detail::Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    };
  return Tensor::wrap(out);
}

// tensors of shape [C,H,W]; concatenation along the channel axis
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty list");
  const int h = parts[0].dim(1), w = parts[0].dim(2);
  int channels = 0;
  std::vector<std::shared_ptr<detail::Node>> parents;
  for (const auto& p : parts) {
    if (p.ndim() != 3 || p.dim(1) != h || p.dim(2) != w)
      throw std::invalid_argument("concat_channels: spatial dims differ");
    channels += p.dim(0);
    parents.push_back(p.node());
  }
  auto out = detail::make_result(Shape{channels, h, w}, parents);
  size_t off = 0;
  for (const auto& p : parts) {
    const auto& src = p.node()->data;
    std::copy(src.begin(), src.end(), out->data.begin() + off);
    off += src.size();
  }
  if (out->needs_grad) {
    std::vector<std::shared_ptr<detail::Node>> ps;
    for (const auto& p : parts) ps.push_back(p.node());
    out->backward_fn = [ps](detail::Node& self) {
      size_t off2 = 0;
      for (const auto& p : ps) {
        if (p->needs_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off2 + i];
        }
        off2 += p->data.size();
      }
    };
  }
  return Tensor::wrap(out);
}

inline std::pair<Tensor, Tensor> split_channels(const Tensor& x, int at) {
  if (x.ndim() != 3) throw std::invalid_argument("split_channels: need [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (at <= 0 || at >= c) throw std::invalid_argument("split_channels: invalid split index");
  auto px = x.node();
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t cut = static_cast<size_t>(at) * plane;

  auto top = detail::make_result(Shape{at, h, w}, {px});
  auto bot = detail::make_result(Shape{c - at, h, w}, {px});
  std::copy(px->data.begin(), px->data.begin() + cut, top->data.begin());
  std::copy(px->data.begin() + cut, px->data.end(), bot->data.begin());
  if (top->needs_grad)
    top->backward_fn = [px](detail::Node& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
    };
  if (bot->needs_grad)
    bot->backward_fn = [px, cut](detail::Node& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) px->grad[cut + i] += self.grad[i];
    };
  return {Tensor::wrap(top), Tensor::wrap(bot)};
}

// ---- convolution -----------------------------------------------------------

// x: [C_in,H,W], w: [C_out,C_in,k,k], b: [C_out]; stride 1, zero padding (k-1)/2
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 3 || w.ndim() != 4 || b.ndim() != 1)
    throw std::invalid_argument("conv2d: bad ranks");
  const int cin = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (w.dim(3) != k || k % 2 == 0) throw std::invalid_argument("conv2d: kernel must be odd square");
  if (b.dim(0) != cout) throw std::invalid_argument("conv2d: bias size mismatch");
  const int pad = (k - 1) / 2;

  auto px = x.node(), pw = w.node(), pb = b.node();
  auto out = detail::make_result(Shape{cout, h, ww}, {px, pw, pb});

  const double* xd = px->data.data();
  const double* wd = pw->data.data();
  const double* bd = pb->data.data();
  double* od = out->data.data();
  const size_t plane = static_cast<size_t>(h) * ww;

  for (int co = 0; co < cout; ++co) {
    double* op = od + static_cast<size_t>(co) * plane;
    for (size_t i = 0; i < plane; ++i) op[i] = bd[co];
    for (int ci = 0; ci < cin; ++ci) {
      const double* xp = xd + static_cast<size_t>(ci) * plane;
      const double* wp = wd + ((static_cast<size_t>(co) * cin + ci) * k) * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = wp[ky * k + kx];
          if (wv == 0.0) continue;
          const int dy = ky - pad, dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(ww, ww - dx);
          for (int y = y0; y < y1; ++y) {
            double* orow = op + static_cast<size_t>(y) * ww;
            const double* xrow = xp + static_cast<size_t>(y + dy) * ww + dx;
            for (int xi = x0; xi < x1; ++xi) orow[xi] += wv * xrow[xi];
          }
        }
      }
    }
  }
  detail::check_finite(*out, "conv2d");

  if (out->needs_grad)
    out->backward_fn = [px, pw, pb, cin, cout, h, ww, k, pad, plane](detail::Node& self) {
      const double* gd = self.grad.data();
      if (pb->needs_grad) {
        pb->ensure_grad();
        for (int co = 0; co < cout; ++co) {
          const double* gp = gd + static_cast<size_t>(co) * plane;
          double s = 0.0;
          for (size_t i = 0; i < plane; ++i) s += gp[i];
          pb->grad[co] += s;
        }
      }
      if (pw->needs_grad) {
        pw->ensure_grad();
        for (int co = 0; co < cout; ++co) {
          const double* gp = gd + static_cast<size_t>(co) * plane;
          for (int ci = 0; ci < cin; ++ci) {
            const double* xp = px->data.data() + static_cast<size_t>(ci) * plane;
            double* wg = pw->grad.data() + ((static_cast<size_t>(co) * cin + ci) * k) * k;
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const int dy = ky - pad, dx = kx - pad;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                const int x0 = std::max(0, -dx), x1 = std::min(ww, ww - dx);
                double s = 0.0;
                for (int y = y0; y < y1; ++y) {
                  const double* grow = gp + static_cast<size_t>(y) * ww;
                  const double* xrow = xp + static_cast<size_t>(y + dy) * ww + dx;
                  for (int xi = x0; xi < x1; ++xi) s += grow[xi] * xrow[xi];
                }
                wg[ky * k + kx] += s;
              }
            }
          }
        }
      }
      if (px->needs_grad) {
        px->ensure_grad();
        for (int co = 0; co < cout; ++co) {
          const double* gp = gd + static_cast<size_t>(co) * plane;
          for (int ci = 0; ci < cin; ++ci) {
            double* xg = px->grad.data() + static_cast<size_t>(ci) * plane;
            const double* wp =
                pw->data.data() + ((static_cast<size_t>(co) * cin + ci) * k) * k;
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const double wv = wp[ky * k + kx];
                if (wv == 0.0) continue;
                const int dy = ky - pad, dx = kx - pad;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                const int x0 = std::max(0, -dx), x1 = std::min(ww, ww - dx);
                for (int y = y0; y < y1; ++y) {
                  const double* grow = gp + static_cast<size_t>(y) * ww;
                  double* xrow = xg + static_cast<size_t>(y + dy) * ww + dx;
                  for (int xi = x0; xi < x1; ++xi) xrow[xi] += wv * grow[xi];
                }
              }
            }
          }
        }
      }
    };
  return Tensor::wrap(out);
}

// ---- small dense linear algebra (channel mixing matrices) ------------------

// A: [n,n], B: [n,n] -> A*B
inline Tensor matmul_sq(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != a.dim(1) || a.shape() != b.shape())
    throw std::invalid_argument("matmul_sq: need equal square matrices");
  const int n = a.dim(0);
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_result(Shape{n, n}, {pa, pb});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int t = 0; t < n; ++t) s += pa->data[i * n + t] * pb->data[t * n + j];
      out->data[i * n + j] = s;
    }
  detail::check_finite(*out, "matmul_sq");
  if (out->needs_grad)
    out->backward_fn = [pa, pb, n](detail::Node& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (int i = 0; i < n; ++i)
          for (int t = 0; t < n; ++t) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += self.grad[i * n + j] * pb->data[t * n + j];
            pa->grad[i * n + t] += s;
          }
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        for (int t = 0; t < n; ++t)
          for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += pa->data[i * n + t] * self.grad[i * n + j];
            pb->grad[t * n + j] += s;
          }
      }
    };
  return Tensor::wrap(out);
}

// y[c,p] = sum_c' W[c,c'] x[c',p] for every pixel p
inline Tensor channel_mix(const Tensor& w, const Tensor& x) {
  if (w.ndim() != 2 || x.ndim() != 3 || w.dim(0) != w.dim(1) || w.dim(1) != x.dim(0))
    throw std::invalid_argument("channel_mix: channel mismatch");
  const int m = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const size_t plane = static_cast<size_t>(h) * ww;
  auto pw = w.node(), px = x.node();
  auto out = detail::make_result(Shape{m, h, ww}, {pw, px});
  for (int c = 0; c < m; ++c) {
    double* op = out->data.data() + c * plane;
    std::fill(op, op + plane, 0.0);
    for (int c2 = 0; c2 < m; ++c2) {
      const double wv = pw->data[c * m + c2];
      if (wv == 0.0) continue;
      const double* xp = px->data.data() + c2 * plane;
      for (size_t i = 0; i < plane; ++i) op[i] += wv * xp[i];
    }
  }
  detail::check_finite(*out, "channel_mix");
  if (out->needs_grad)
    out->backward_fn = [pw, px, m, plane](detail::Node& self) {
      if (pw->needs_grad) {
        pw->ensure_grad();
        for (int c = 0; c < m; ++c) {
          const double* gp = self.grad.data() + c * plane;
          for (int c2 = 0; c2 < m; ++c2) {
            const double* xp = px->data.data() + c2 * plane;
            double s = 0.0;
            for (size_t i = 0; i < plane; ++i) s += gp[i] * xp[i];
            pw->grad[c * m + c2] += s;
          }
        }
      }
      if (px->needs_grad) {
        px->ensure_grad();
        for (int c2 = 0; c2 < m; ++c2) {
          double* xg = px->grad.data() + c2 * plane;
          for (int c = 0; c < m; ++c) {
            const double wv = pw->data[c * m + c2];
            if (wv == 0.0) continue;
            const double* gp = self.grad.data() + c * plane;
            for (size_t i = 0; i < plane; ++i) xg[i] += wv * gp[i];
          }
        }
      }
    };
  return Tensor::wrap(out);
}

namespace detail {

// partial-pivot LU solve of A x = y for many right-hand sides (columns are pixels)
struct LuFactors {
  int n = 0;
  std::vector<double> lu;
  std::vector<int> piv;

  explicit LuFactors(const std::vector<double>& a, int n_) : n(n_), lu(a), piv(n_) {
    for (int i = 0; i < n; ++i) piv[i] = i;
    for (int col = 0; col < n; ++col) {
      int best = col;
      double mag = std::fabs(lu[col * n + col]);
      for (int r = col + 1; r < n; ++r) {
        const double m2 = std::fabs(lu[r * n + col]);
        if (m2 > mag) { mag = m2; best = r; }
      }
      if (mag == 0.0) throw std::domain_error("singular channel-mixing matrix");
      if (best != col) {
        for (int j = 0; j < n; ++j) std::swap(lu[col * n + j], lu[best * n + j]);
        std::swap(piv[col], piv[best]);
      }
      const double d = lu[col * n + col];
      for (int r = col + 1; r < n; ++r) {
        const double f = lu[r * n + col] / d;
        lu[r * n + col] = f;
        for (int j = col + 1; j < n; ++j) lu[r * n + j] -= f * lu[col * n + j];
      }
    }
  }

  void solve(const double* y, double* x, std::vector<double>& tmp) const {
    for (int i = 0; i < n; ++i) tmp[i] = y[piv[i]];
    for (int i = 1; i < n; ++i)
      for (int j = 0; j < i; ++j) tmp[i] -= lu[i * n + j] * tmp[j];
    for (int i = n - 1; i >= 0; --i) {
      for (int j = i + 1; j < n; ++j) tmp[i] -= lu[i * n + j] * tmp[j];
      tmp[i] /= lu[i * n + i];
    }
    for (int i = 0; i < n; ++i) x[i] = tmp[i];
  }

  // solve A^T x = y  (A = P^T L U, so A^T = U^T L^T P)
  void solve_transposed(const double* y, double* x, std::vector<double>& tmp) const {
    for (int i = 0; i < n; ++i) tmp[i] = y[i];
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < i; ++j) tmp[i] -= lu[j * n + i] * tmp[j];
      tmp[i] /= lu[i * n + i];
    }
    for (int i = n - 1; i >= 0; --i)
      for (int j = i + 1; j < n; ++j) tmp[i] -= lu[j * n + i] * tmp[j];  // L^T back
    for (int i = 0; i < n; ++i) x[piv[i]] = tmp[i];
  }
};

} // namespace detail

// x = W^{-1} y per pixel; gradients flow to both W and y
inline Tensor channel_mix_inverse(const Tensor& w, const Tensor& y) {
  if (w.ndim() != 2 || y.ndim() != 3 || w.dim(0) != w.dim(1) || w.dim(1) != y.dim(0))
    throw std::invalid_argument("channel_mix_inverse: channel mismatch");
  const int m = y.dim(0), h = y.dim(1), ww = y.dim(2);
  const size_t plane = static_cast<size_t>(h) * ww;
  auto pw = w.node(), py = y.node();
  auto out = detail::make_result(Shape{m, h, ww}, {pw, py});

  auto lu = std::make_shared<detail::LuFactors>(pw->data, m);
  std::vector<double> col(m), tmp(m);
  for (size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < m; ++c) col[c] = py->data[c * plane + p];
    std::vector<double> sol(m);
    lu->solve(col.data(), sol.data(), tmp);
    for (int c = 0; c < m; ++c) out->data[c * plane + p] = sol[c];
  }
  detail::check_finite(*out, "channel_mix_inverse");

  if (out->needs_grad) {
    auto on = out;
    out->backward_fn = [pw, py, lu, m, plane, on](detail::Node& self) {
      // gy = W^{-T} g ; gW = -gy x^T
      std::vector<double> g(m), gy(m), tmp2(m);
      std::vector<double> wgrad;
      if (pw->needs_grad) wgrad.assign(static_cast<size_t>(m) * m, 0.0);
      if (py->needs_grad) py->ensure_grad();
      for (size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < m; ++c) g[c] = self.grad[c * plane + p];
        lu->solve_transposed(g.data(), gy.data(), tmp2);
        if (py->needs_grad)
          for (int c = 0; c < m; ++c) py->grad[c * plane + p] += gy[c];
        if (pw->needs_grad)
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j)
              wgrad[i * m + j] -= gy[i] * on->data[j * plane + p];
      }
      if (pw->needs_grad) {
        pw->ensure_grad();
        for (size_t i = 0; i < wgrad.size(); ++i) pw->grad[i] += wgrad[i];
      }
    };
  }
  return Tensor::wrap(out);
}

// ---- 2-D DFT ---------------------------------------------------------------

struct ComplexGrid {
  Tensor re;
  Tensor im;
};

// Unnormalized per-channel 2-D DFT keeping the non-redundant half of the last
// axis (bins 0..W/2). Packed layout [2,C,H,W/2+1]: index 0 real, 1 imaginary.
inline Tensor dft2_onesided_packed(const Tensor& x) {
  if (x.ndim() != 3) throw std::invalid_argument("dft2: need [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int wh = w / 2 + 1;
  auto px = x.node();
  auto out = detail::make_result(Shape{2, c, h, wh}, {px});

  std::vector<double> ch(static_cast<size_t>(h)), sh(static_cast<size_t>(h));
  std::vector<double> cw(static_cast<size_t>(w)), sw(static_cast<size_t>(w));
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t oplane = static_cast<size_t>(h) * wh;
  const double tau = 6.283185307179586476925286766559;

  // row DFT first, then column DFT, per channel
  std::vector<double> rre(static_cast<size_t>(h) * wh), rim(static_cast<size_t>(h) * wh);
  for (int cc = 0; cc < c; ++cc) {
    const double* xp = px->data.data() + cc * plane;
    for (int y = 0; y < h; ++y)
      for (int v = 0; v < wh; ++v) {
        double sr = 0.0, si = 0.0;
        for (int xw = 0; xw < w; ++xw) {
          const double ang = tau * v * xw / w;
          sr += xp[y * w + xw] * std::cos(ang);
          si -= xp[y * w + xw] * std::sin(ang);
        }
        rre[y * wh + v] = sr;
        rim[y * wh + v] = si;
      }
    double* ore = out->data.data() + cc * oplane;
    double* oim = out->data.data() + (static_cast<size_t>(c) + cc) * oplane;
    for (int u = 0; u < h; ++u)
      for (int v = 0; v < wh; ++v) {
        double sr = 0.0, si = 0.0;
        for (int y = 0; y < h; ++y) {
          const double ang = tau * u * y / h;
          const double cy = std::cos(ang), sy = std::sin(ang);
          sr += rre[y * wh + v] * cy + rim[y * wh + v] * sy;
          si += -rre[y * wh + v] * sy + rim[y * wh + v] * cy;
        }
        ore[u * wh + v] = sr;
        oim[u * wh + v] = si;
      }
  }
  detail::check_finite(*out, "dft2_onesided");

  if (out->needs_grad)
    out->backward_fn = [px, c, h, w, wh, plane, oplane, tau](detail::Node& self) {
      px->ensure_grad();
      for (int cc = 0; cc < c; ++cc) {
        const double* gr = self.grad.data() + cc * oplane;
        const double* gi = self.grad.data() + (static_cast<size_t>(c) + cc) * oplane;
        double* xg = px->grad.data() + cc * plane;
        for (int y = 0; y < h; ++y)
          for (int xw = 0; xw < w; ++xw) {
            double s = 0.0;
            for (int u = 0; u < h; ++u)
              for (int v = 0; v < wh; ++v) {
                const double ang = tau * (static_cast<double>(u) * y / h +
                                          static_cast<double>(v) * xw / w);
                s += gr[u * wh + v] * std::cos(ang) - gi[u * wh + v] * std::sin(ang);
              }
            xg[y * w + xw] += s;
          }
      }
    };
  return Tensor::wrap(out);
}

inline ComplexGrid dft2_onesided(const Tensor& x) {
  Tensor packed = dft2_onesided_packed(x);
  const int c = packed.dim(1), h = packed.dim(2), wh = packed.dim(3);
  auto [re4, im4] = split_channels(
      reshape(packed, Shape{2, c * h, wh}), 1);
  return ComplexGrid{reshape(re4, Shape{c, h, wh}), reshape(im4, Shape{c, h, wh})};
}

// ---- backward --------------------------------------------------------------

inline void backward(const Tensor& loss) {
  auto root = loss.node();
  if (loss.size() != 1) throw std::logic_error("backward: loss must be scalar");
  if (root->consumed) throw std::logic_error("backward: graph already consumed");
  if (!root->needs_grad) return;

  // iterative post-order DFS for topological order
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<std::shared_ptr<detail::Node>, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      auto p = n->parents[idx++];
      if (p->needs_grad && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n.get());
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
    n->consumed = true;
  }
  // release the tape; leaf grads persist
  for (detail::Node* n : order) {
    if (!n->requires_grad) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

} // namespace iic
