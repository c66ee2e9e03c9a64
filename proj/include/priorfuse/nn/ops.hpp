#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "priorfuse/core/error.hpp"
#include "priorfuse/nn/blas.hpp"
#include "priorfuse/nn/tensor.hpp"

// Differentiable operations on [C,H,W] activations. Weights follow the
// [out, in, kh, kw] layout.
namespace priorfuse::nn {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionMismatch(msg);
}

inline void require_chw(const Shape& s, const char* op) {
  require(s.size() == 3, std::string(op) + ": expected [C,H,W], got " + shape_string(s));
}

// Reflect-101 index folding (…, 2, 1, 0, 1, 2, …, n-2, n-1, n-2, …).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  std::vector<T> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
    for (Node<T>* p : {an, bn}) {
      if (!p->requires_grad) continue;
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  std::vector<T> out(a.value().begin(), a.value().end());
  for (auto& v : out) v *= s;
  Node<T>* an = a.node();
  return make_result<T>(a.shape(), std::move(out), {&a}, [an, s](Node<T>& self) {
    auto g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

namespace detail {

template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Node<T>* an = a.node();
  return make_result<T>(a.shape(), std::move(out), {&a}, [an, df](Node<T>& self) {
    auto g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(an->value[i], self.value[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.1)) {
  return detail::unary(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      a, [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [=](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Channel plumbing

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const int h = parts[0].dim(1), w = parts[0].dim(2);
  int channels = 0;
  for (const auto& p : parts) {
    detail::require_chw(p.shape(), "concat_channels");
    detail::require(p.dim(1) == h && p.dim(2) == w, "concat_channels: spatial mismatch");
    channels += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(channels) * h * w);
  for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result_list<T>({channels, h, w}, std::move(out), parts, [nodes](Node<T>& self) {
    std::size_t offset = 0;
    for (Node<T>* p : nodes) {
      if (p->requires_grad) {
        auto g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p->value.size();
    }
  });
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int start, int count) {
  detail::require_chw(x.shape(), "slice_channels");
  detail::require(start >= 0 && count > 0 && start + count <= x.dim(0), "slice_channels: range out of bounds");
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  auto xv = x.value();
  std::vector<T> out(xv.begin() + start * plane, xv.begin() + (start + count) * plane);
  Node<T>* xn = x.node();
  return make_result<T>({count, x.dim(1), x.dim(2)}, std::move(out), {&x}, [xn, start, plane](Node<T>& self) {
    auto g = xn->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * plane + i] += self.grad[i];
  });
}

// Keeps the top-left h x w window.
template <class T>
Var<T> crop_spatial(const Var<T>& x, int h, int w) {
  detail::require_chw(x.shape(), "crop_spatial");
  const int c = x.dim(0), ih = x.dim(1), iw = x.dim(2);
  detail::require(h <= ih && w <= iw, "crop_spatial: window larger than input");
  if (h == ih && w == iw) return x;
  std::vector<T> out(static_cast<std::size_t>(c) * h * w);
  auto xv = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(static_cast<std::size_t>(ch) * h + y) * w + xx] = xv[(static_cast<std::size_t>(ch) * ih + y) * iw + xx];
  Node<T>* xn = x.node();
  return make_result<T>({c, h, w}, std::move(out), {&x}, [xn, c, h, w, ih, iw](Node<T>& self) {
    auto g = xn->grad_buffer();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          g[(static_cast<std::size_t>(ch) * ih + y) * iw + xx] += self.grad[(static_cast<std::size_t>(ch) * h + y) * w + xx];
  });
}

// Reflect-101 padding of `before` cells above/left and `after` below/right.
template <class T>
Var<T> pad_reflect(const Var<T>& x, int top, int bottom, int left, int right) {
  detail::require_chw(x.shape(), "pad_reflect");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  detail::require(top < h && bottom < h && left < w && right < w,
                  "pad_reflect: padding must be smaller than the spatial dims");
  if (top == 0 && bottom == 0 && left == 0 && right == 0) return x;
  const int oh = h + top + bottom, ow = w + left + right;
  std::vector<int> ys(oh), xs(ow);
  for (int y = 0; y < oh; ++y) ys[y] = detail::reflect_index(y - top, h);
  for (int xx = 0; xx < ow; ++xx) xs[xx] = detail::reflect_index(xx - left, w);
  std::vector<T> out(static_cast<std::size_t>(c) * oh * ow);
  auto xv = x.value();
  for (int ch = 0; ch < c; ++ch) {
    const T* src = xv.data() + static_cast<std::size_t>(ch) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(ch) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[ys[y] * w + xs[xx]];
  }
  Node<T>* xn = x.node();
  return make_result<T>({c, oh, ow}, std::move(out), {&x},
                        [xn, c, h, w, oh, ow, ys = std::move(ys), xs = std::move(xs)](Node<T>& self) {
                          auto g = xn->grad_buffer();
                          for (int ch = 0; ch < c; ++ch) {
                            T* dst = g.data() + static_cast<std::size_t>(ch) * h * w;
                            const T* src = self.grad.data() + static_cast<std::size_t>(ch) * oh * ow;
                            for (int y = 0; y < oh; ++y)
                              for (int xx = 0; xx < ow; ++xx) dst[ys[y] * w + xs[xx]] += src[y * ow + xx];
                          }
                        });
}

template <class T>
Var<T> pad_reflect(const Var<T>& x, int p) {
  return pad_reflect(x, p, p, p, p);
}

// [C,H,W] -> [C*r*r, H/r, W/r]; out channel c*r*r + i*r + j holds in[c, y*r+i, x*r+j].
template <class T>
Var<T> pixel_unshuffle(const Var<T>& x, int r) {
  detail::require_chw(x.shape(), "pixel_unshuffle");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  detail::require(h % r == 0 && w % r == 0, "pixel_unshuffle: dims not divisible by factor");
  const int oh = h / r, ow = w / r;
  std::vector<std::size_t> map(static_cast<std::size_t>(c) * h * w);
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j)
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx)
            map[o++] = (static_cast<std::size_t>(ch) * h + (y * r + i)) * w + (xx * r + j);
  auto xv = x.value();
  std::vector<T> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xv[map[i]];
  Node<T>* xn = x.node();
  return make_result<T>({c * r * r, oh, ow}, std::move(out), {&x}, [xn, map = std::move(map)](Node<T>& self) {
    auto g = xn->grad_buffer();
    for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
  });
}

// Inverse of pixel_unshuffle.
template <class T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  detail::require_chw(x.shape(), "pixel_shuffle");
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  detail::require(ci % (r * r) == 0, "pixel_shuffle: channels not divisible by factor^2");
  const int c = ci / (r * r), oh = h * r, ow = w * r;
  // map[out_index] = in_index
  std::vector<std::size_t> map(static_cast<std::size_t>(ci) * h * w);
  std::size_t in = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            map[(static_cast<std::size_t>(ch) * oh + (y * r + i)) * ow + (xx * r + j)] = in++;
          }
  auto xv = x.value();
  std::vector<T> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xv[map[i]];
  Node<T>* xn = x.node();
  return make_result<T>({c, oh, ow}, std::move(out), {&x}, [xn, map = std::move(map)](Node<T>& self) {
    auto g = xn->grad_buffer();
    for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Convolutions

// Unpadded convolution, stride 1. weight [O, C, k, k], optional bias [O].
template <class T>
Var<T> conv2d_valid(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias, int dilation = 1) {
  detail::require_chw(x.shape(), "conv2d");
  detail::require(weight.shape().size() == 4 && weight.dim(1) == x.dim(0) && weight.dim(2) == weight.dim(3),
                  "conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                      shape_string(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int o = weight.dim(0), k = weight.dim(2);
  const int oh = h - dilation * (k - 1), ow = w - dilation * (k - 1);
  detail::require(oh > 0 && ow > 0, "conv2d: kernel larger than input");
  if (bias && *bias) detail::require(bias->size() == static_cast<std::size_t>(o), "conv2d: bias size");
  const int n = oh * ow;
  const int ck = c * k * k;

  std::vector<T> cols;
  const T* colp = x.value().data();
  if (k != 1) {
    cols.resize(static_cast<std::size_t>(ck) * n);
    auto xv = x.value();
    for (int ch = 0; ch < c; ++ch)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* dst = cols.data() + static_cast<std::size_t>((ch * k + ky) * k + kx) * n;
          const T* src = xv.data() + static_cast<std::size_t>(ch) * h * w + ky * dilation * w + kx * dilation;
          for (int y = 0; y < oh; ++y) std::copy_n(src + static_cast<std::size_t>(y) * w, ow, dst + y * ow);
        }
    colp = cols.data();
  }

  std::vector<T> out(static_cast<std::size_t>(o) * n, T(0));
  if (bias && *bias) {
    auto bv = bias->value();
    for (int oc = 0; oc < o; ++oc) std::fill_n(out.data() + static_cast<std::size_t>(oc) * n, n, bv[oc]);
  }
  gemm<T>(false, false, o, n, ck, T(1), weight.value().data(), ck, colp, n, T(1), out.data(), n);

  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = (bias && *bias) ? bias->node() : nullptr;
  return make_result<T>(
      {o, oh, ow}, std::move(out), {&x, &weight, bias},
      [xn, wn, bn, cols = std::move(cols), c, h, w, o, k, oh, ow, n, ck, dilation](Node<T>& self) {
        const T* colp = k == 1 ? xn->value.data() : cols.data();
        if (wn->requires_grad) {
          auto gw = wn->grad_buffer();
          gemm<T>(false, true, o, ck, n, T(1), self.grad.data(), n, colp, n, T(1), gw.data(), ck);
        }
        if (bn && bn->requires_grad) {
          auto gb = bn->grad_buffer();
          for (int oc = 0; oc < o; ++oc) {
            T s = 0;
            const T* g = self.grad.data() + static_cast<std::size_t>(oc) * n;
            for (int i = 0; i < n; ++i) s += g[i];
            gb[oc] += s;
          }
        }
        if (xn->requires_grad) {
          auto gx = xn->grad_buffer();
          if (k == 1) {
            gemm<T>(true, false, ck, n, o, T(1), wn->value.data(), ck, self.grad.data(), n, T(1), gx.data(), n);
          } else {
            std::vector<T> dcols(static_cast<std::size_t>(ck) * n, T(0));
            gemm<T>(true, false, ck, n, o, T(1), wn->value.data(), ck, self.grad.data(), n, T(0), dcols.data(), n);
            for (int ch = 0; ch < c; ++ch)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const T* src = dcols.data() + static_cast<std::size_t>((ch * k + ky) * k + kx) * n;
                  T* dst = gx.data() + static_cast<std::size_t>(ch) * h * w + ky * dilation * w + kx * dilation;
                  for (int y = 0; y < oh; ++y) {
                    T* drow = dst + static_cast<std::size_t>(y) * w;
                    const T* srow = src + y * ow;
                    for (int xx = 0; xx < ow; ++xx) drow[xx] += srow[xx];
                  }
                }
          }
        }
      });
}

// Depthwise valid convolution: weight [C, 1, k, k].
template <class T>
Var<T> depthwise_conv2d_valid(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias) {
  detail::require_chw(x.shape(), "depthwise_conv2d");
  detail::require(weight.shape().size() == 4 && weight.dim(0) == x.dim(0) && weight.dim(1) == 1 &&
                      weight.dim(2) == weight.dim(3),
                  "depthwise_conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                      shape_string(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), k = weight.dim(2);
  const int oh = h - k + 1, ow = w - k + 1;
  detail::require(oh > 0 && ow > 0, "depthwise_conv2d: kernel larger than input");
  std::vector<T> out(static_cast<std::size_t>(c) * oh * ow);
  auto xv = x.value();
  auto wv = weight.value();
  const bool has_bias = bias && *bias;
  for (int ch = 0; ch < c; ++ch) {
    T* dst = out.data() + static_cast<std::size_t>(ch) * oh * ow;
    std::fill_n(dst, static_cast<std::size_t>(oh) * ow, has_bias ? bias->value()[ch] : T(0));
    const T* src = xv.data() + static_cast<std::size_t>(ch) * h * w;
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T wt = wv[(ch * k + ky) * k + kx];
        for (int y = 0; y < oh; ++y) {
          const T* srow = src + static_cast<std::size_t>(y + ky) * w + kx;
          T* drow = dst + static_cast<std::size_t>(y) * ow;
          for (int xx = 0; xx < ow; ++xx) drow[xx] += wt * srow[xx];
        }
      }
  }
  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = has_bias ? bias->node() : nullptr;
  return make_result<T>({c, oh, ow}, std::move(out), {&x, &weight, bias}, [xn, wn, bn, c, h, w, k, oh, ow](Node<T>& self) {
    const bool gx_on = xn->requires_grad, gw_on = wn->requires_grad;
    T* gx = gx_on ? xn->grad_buffer().data() : nullptr;
    T* gw = gw_on ? wn->grad_buffer().data() : nullptr;
    for (int ch = 0; ch < c; ++ch) {
      const T* go = self.grad.data() + static_cast<std::size_t>(ch) * oh * ow;
      const T* src = xn->value.data() + static_cast<std::size_t>(ch) * h * w;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int widx = (ch * k + ky) * k + kx;
          const T wt = wn->value[widx];
          T acc = 0;
          for (int y = 0; y < oh; ++y) {
            const T* srow = src + static_cast<std::size_t>(y + ky) * w + kx;
            const T* grow = go + static_cast<std::size_t>(y) * ow;
            if (gw_on)
              for (int xx = 0; xx < ow; ++xx) acc += grow[xx] * srow[xx];
            if (gx_on) {
              T* gxrow = gx + static_cast<std::size_t>(ch) * h * w + static_cast<std::size_t>(y + ky) * w + kx;
              for (int xx = 0; xx < ow; ++xx) gxrow[xx] += wt * grow[xx];
            }
          }
          if (gw_on) gw[widx] += acc;
        }
      if (bn && bn->requires_grad) {
        T s = 0;
        for (int i = 0; i < oh * ow; ++i) s += go[i];
        bn->grad_buffer()[ch] += s;
      }
    }
  });
}

// "Same" convolution with reflection padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias = nullptr, int dilation = 1) {
  const int k = weight.dim(2);
  const int p = dilation * (k - 1) / 2;
  return conv2d_valid(pad_reflect(x, p), weight, bias, dilation);
}

template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias = nullptr) {
  const int p = (weight.dim(2) - 1) / 2;
  return depthwise_conv2d_valid(pad_reflect(x, p), weight, bias);
}

// ---------------------------------------------------------------------------
// Normalization and attention

// Per-pixel normalization across channels with affine [C] weight and bias.
template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, T eps = T(1e-5)) {
  detail::require_chw(x.shape(), "layer_norm_channels");
  const int c = x.dim(0);
  const std::size_t n = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  detail::require(weight.size() == static_cast<std::size_t>(c) && bias.size() == static_cast<std::size_t>(c),
                  "layer_norm_channels: affine size");
  auto xv = x.value();
  auto wv = weight.value();
  auto bv = bias.value();
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(n);
  std::vector<T> mean(n, T(0)), var(n, T(0));
  for (int ch = 0; ch < c; ++ch) {
    const T* src = xv.data() + ch * n;
    for (std::size_t i = 0; i < n; ++i) mean[i] += src[i];
  }
  for (auto& m : mean) m /= T(c);
  for (int ch = 0; ch < c; ++ch) {
    const T* src = xv.data() + ch * n;
    for (std::size_t i = 0; i < n; ++i) {
      const T d = src[i] - mean[i];
      var[i] += d * d;
    }
  }
  for (std::size_t i = 0; i < n; ++i) inv_std[i] = T(1) / std::sqrt(var[i] / T(c) + eps);
  std::vector<T> out(xv.size());
  for (int ch = 0; ch < c; ++ch) {
    const T* src = xv.data() + ch * n;
    T* xh = xhat.data() + ch * n;
    T* dst = out.data() + ch * n;
    for (std::size_t i = 0; i < n; ++i) {
      xh[i] = (src[i] - mean[i]) * inv_std[i];
      dst[i] = xh[i] * wv[ch] + bv[ch];
    }
  }
  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.node();
  return make_result<T>(x.shape(), std::move(out), {&x, &weight, &bias},
                        [xn, wn, bn, c, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                          const T* go = self.grad.data();
                          if (wn->requires_grad || bn->requires_grad) {
                            auto gw = wn->grad_buffer();
                            auto gb = bn->grad_buffer();
                            for (int ch = 0; ch < c; ++ch) {
                              T sw = 0, sb = 0;
                              for (std::size_t i = 0; i < n; ++i) {
                                sw += go[ch * n + i] * xhat[ch * n + i];
                                sb += go[ch * n + i];
                              }
                              gw[ch] += sw;
                              gb[ch] += sb;
                            }
                          }
                          if (!xn->requires_grad) return;
                          auto gx = xn->grad_buffer();
                          std::vector<T> sum_g(n, T(0)), sum_gx(n, T(0));
                          for (int ch = 0; ch < c; ++ch) {
                            const T wt = wn->value[ch];
                            for (std::size_t i = 0; i < n; ++i) {
                              const T g = go[ch * n + i] * wt;
                              sum_g[i] += g;
                              sum_gx[i] += g * xhat[ch * n + i];
                            }
                          }
                          const T inv_c = T(1) / T(c);
                          for (int ch = 0; ch < c; ++ch) {
                            const T wt = wn->value[ch];
                            for (std::size_t i = 0; i < n; ++i) {
                              const T g = go[ch * n + i] * wt;
                              gx[ch * n + i] +=
                                  inv_std[i] * (g - inv_c * sum_g[i] - xhat[ch * n + i] * inv_c * sum_gx[i]);
                            }
                          }
                        });
}

// Transposed (channel-wise) multi-head attention core. q, k, v: [C,H,W];
// temperature: [heads]. Per head, query and key rows are L2-normalised over
// pixels, A = softmax(temperature * Qn Kn^T) is a (C/heads)^2 matrix, and the
// output is A V.
template <class T>
Var<T> channel_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& temperature, int heads) {
  detail::require_chw(q.shape(), "channel_attention");
  detail::require(q.shape() == k.shape() && q.shape() == v.shape(), "channel_attention: q/k/v shape mismatch");
  const int c = q.dim(0);
  detail::require(heads > 0 && c % heads == 0, "channel_attention: channels not divisible by heads");
  detail::require(temperature.size() == static_cast<std::size_t>(heads), "channel_attention: temperature size");
  const int ch = c / heads;
  const int n = q.dim(1) * q.dim(2);
  constexpr T norm_eps = T(1e-12);

  std::vector<T> qn(q.size()), kn(k.size()), qnorm(c), knorm(c);
  auto normalize = [&](std::span<const T> src, std::vector<T>& dst, std::vector<T>& norms) {
    for (int r = 0; r < c; ++r) {
      const T* s = src.data() + static_cast<std::size_t>(r) * n;
      T ss = 0;
      for (int i = 0; i < n; ++i) ss += s[i] * s[i];
      const T nr = std::max(std::sqrt(ss), norm_eps);
      norms[r] = nr;
      T* d = dst.data() + static_cast<std::size_t>(r) * n;
      for (int i = 0; i < n; ++i) d[i] = s[i] / nr;
    }
  };
  normalize(q.value(), qn, qnorm);
  normalize(k.value(), kn, knorm);

  std::vector<T> attn(static_cast<std::size_t>(heads) * ch * ch);
  std::vector<T> out(q.size());
  auto tv = temperature.value();
  for (int hd = 0; hd < heads; ++hd) {
    T* a = attn.data() + static_cast<std::size_t>(hd) * ch * ch;
    const std::size_t off = static_cast<std::size_t>(hd) * ch * n;
    gemm<T>(false, true, ch, ch, n, tv[hd], qn.data() + off, n, kn.data() + off, n, T(0), a, ch);
    for (int r = 0; r < ch; ++r) {
      T* row = a + r * ch;
      const T mx = *std::max_element(row, row + ch);
      T s = 0;
      for (int j = 0; j < ch; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      for (int j = 0; j < ch; ++j) row[j] /= s;
    }
    gemm<T>(false, false, ch, n, ch, T(1), a, ch, v.value().data() + off, n, T(0), out.data() + off, n);
  }

  Node<T>* qnd = q.node();
  Node<T>* knd = k.node();
  Node<T>* vnd = v.node();
  Node<T>* tnd = temperature.node();
  return make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v, &temperature},
      [=, qn = std::move(qn), kn = std::move(kn), qnorm = std::move(qnorm), knorm = std::move(knorm),
       attn = std::move(attn)](Node<T>& self) {
        std::vector<T> da(static_cast<std::size_t>(ch) * ch), ds(static_cast<std::size_t>(ch) * ch);
        std::vector<T> dqn(static_cast<std::size_t>(ch) * n), dkn(static_cast<std::size_t>(ch) * n);
        for (int hd = 0; hd < heads; ++hd) {
          const std::size_t off = static_cast<std::size_t>(hd) * ch * n;
          const T* a = attn.data() + static_cast<std::size_t>(hd) * ch * ch;
          const T* go = self.grad.data() + off;
          const T t = tnd->value[hd];
          if (vnd->requires_grad) {
            auto gv = vnd->grad_buffer();
            gemm<T>(true, false, ch, n, ch, T(1), a, ch, go, n, T(1), gv.data() + off, n);
          }
          if (!(qnd->requires_grad || knd->requires_grad || tnd->requires_grad)) continue;
          gemm<T>(false, true, ch, ch, n, T(1), go, n, vnd->value.data() + off, n, T(0), da.data(), ch);
          for (int r = 0; r < ch; ++r) {
            T dot = 0;
            for (int j = 0; j < ch; ++j) dot += da[r * ch + j] * a[r * ch + j];
            for (int j = 0; j < ch; ++j) ds[r * ch + j] = a[r * ch + j] * (da[r * ch + j] - dot);
          }
          if (tnd->requires_grad) {
            // d/dt of t * S where S = Qn Kn^T; recover S from logits is unstable, recompute.
            std::vector<T> s(static_cast<std::size_t>(ch) * ch);
            gemm<T>(false, true, ch, ch, n, T(1), qn.data() + off, n, kn.data() + off, n, T(0), s.data(), ch);
            T acc = 0;
            for (std::size_t i = 0; i < s.size(); ++i) acc += ds[i] * s[i];
            tnd->grad_buffer()[hd] += acc;
          }
          auto back_norm = [&](Node<T>* target, const std::vector<T>& xn_, const std::vector<T>& norms,
                               const std::vector<T>& dxn) {
            auto g = target->grad_buffer();
            for (int r = 0; r < ch; ++r) {
              const T* xr = xn_.data() + off + static_cast<std::size_t>(r) * n;
              const T* dr = dxn.data() + static_cast<std::size_t>(r) * n;
              const T nr = norms[hd * ch + r];
              T dot = 0;
              for (int i = 0; i < n; ++i) dot += xr[i] * dr[i];
              T* gr = g.data() + off + static_cast<std::size_t>(r) * n;
              if (nr <= norm_eps) {
                for (int i = 0; i < n; ++i) gr[i] += dr[i] / nr;
              } else {
                for (int i = 0; i < n; ++i) gr[i] += (dr[i] - xr[i] * dot) / nr;
              }
            }
          };
          if (qnd->requires_grad) {
            gemm<T>(false, false, ch, n, ch, t, ds.data(), ch, kn.data() + off, n, T(0), dqn.data(), n);
            back_norm(qnd, qn, qnorm, dqn);
          }
          if (knd->requires_grad) {
            gemm<T>(true, false, ch, n, ch, t, ds.data(), ch, qn.data() + off, n, T(0), dkn.data(), n);
            back_norm(knd, kn, knorm, dkn);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Deformable sampling

// Bilinear gather at per-position, per-tap offset locations.
//   x          [C,H,W]      features to sample
//   offsets    [2K,H,W]     channel 2k = dy, 2k+1 = dx of tap k (cells)
//   modulation [K,H,W]      optional per-tap weight (nullptr = 1)
// Tap k = ky*s + kx of an s x s grid (s*s = K) has base offset (ky - s/2, kx - s/2).
// Output [C*K, H, W] with row c*K + k = m_k(p) * x_c(p + g_k + offset_k(p)),
// reflecting out-of-range corner indices.
template <class T>
Var<T> deform_gather(const Var<T>& x, const Var<T>& offsets, const std::type_identity_t<Var<T>>* modulation, int taps) {
  detail::require_chw(x.shape(), "deform_gather");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(taps))));
  detail::require(side * side == taps, "deform_gather: taps must be a perfect square");
  detail::require(offsets.shape() == Shape{2 * taps, h, w},
                  "deform_gather: offsets " + shape_string(offsets.shape()) + " vs features " + shape_string(x.shape()));
  const bool has_mod = modulation && *modulation;
  if (has_mod) detail::require(modulation->shape() == Shape{taps, h, w}, "deform_gather: modulation shape");
  const int n = h * w;
  const int half = side / 2;

  auto xv = x.value();
  auto ov = offsets.value();
  std::vector<T> out(static_cast<std::size_t>(c) * taps * n);
  // Unmodulated samples, kept for the modulation gradient.
  std::vector<T> raw(has_mod ? out.size() : 0);
  for (int kk = 0; kk < taps; ++kk) {
    const int gy = kk / side - half, gx = kk % side - half;
    const T* dy = ov.data() + static_cast<std::size_t>(2 * kk) * n;
    const T* dx = ov.data() + static_cast<std::size_t>(2 * kk + 1) * n;
    const T* m = has_mod ? modulation->value().data() + static_cast<std::size_t>(kk) * n : nullptr;
    for (int py = 0; py < h; ++py)
      for (int px = 0; px < w; ++px) {
        const int p = py * w + px;
        const T sy = py + gy + dy[p], sx = px + gx + dx[p];
        const T fy0 = std::floor(sy), fx0 = std::floor(sx);
        const T fy = sy - fy0, fx = sx - fx0;
        const int y0 = static_cast<int>(fy0), x0 = static_cast<int>(fx0);
        const int ya = detail::reflect_index(y0, h), yb = detail::reflect_index(y0 + 1, h);
        const int xa = detail::reflect_index(x0, w), xb = detail::reflect_index(x0 + 1, w);
        const T w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
        for (int ch = 0; ch < c; ++ch) {
          const T* plane = xv.data() + static_cast<std::size_t>(ch) * n;
          const T val = w00 * plane[ya * w + xa] + w01 * plane[ya * w + xb] + w10 * plane[yb * w + xa] +
                        w11 * plane[yb * w + xb];
          const std::size_t oi = (static_cast<std::size_t>(ch) * taps + kk) * n + p;
          if (has_mod) {
            raw[oi] = val;
            out[oi] = m[p] * val;
          } else {
            out[oi] = val;
          }
        }
      }
  }

  Node<T>* xn = x.node();
  Node<T>* on = offsets.node();
  Node<T>* mn = has_mod ? modulation->node() : nullptr;
  return make_result<T>(
      {c * taps, h, w}, std::move(out), {&x, &offsets, modulation},
      [xn, on, mn, c, h, w, n, taps, side, half, raw = std::move(raw)](Node<T>& self) {
        const bool gx_on = xn->requires_grad, go_on = on->requires_grad, gm_on = mn && mn->requires_grad;
        T* gxp = gx_on ? xn->grad_buffer().data() : nullptr;
        T* gop = go_on ? on->grad_buffer().data() : nullptr;
        T* gmp = gm_on ? mn->grad_buffer().data() : nullptr;
        const T* xv = xn->value.data();
        for (int kk = 0; kk < taps; ++kk) {
          const int gy = kk / side - half, gx = kk % side - half;
          const T* dy = on->value.data() + static_cast<std::size_t>(2 * kk) * n;
          const T* dx = on->value.data() + static_cast<std::size_t>(2 * kk + 1) * n;
          const T* m = mn ? mn->value.data() + static_cast<std::size_t>(kk) * n : nullptr;
          for (int py = 0; py < h; ++py)
            for (int px = 0; px < w; ++px) {
              const int p = py * w + px;
              const T sy = py + gy + dy[p], sx = px + gx + dx[p];
              const T fy0 = std::floor(sy), fx0 = std::floor(sx);
              const T fy = sy - fy0, fx = sx - fx0;
              const int y0 = static_cast<int>(fy0), x0 = static_cast<int>(fx0);
              const int ya = detail::reflect_index(y0, h), yb = detail::reflect_index(y0 + 1, h);
              const int xa = detail::reflect_index(x0, w), xb = detail::reflect_index(x0 + 1, w);
              const T w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
              const T mod = m ? m[p] : T(1);
              T d_sy = 0, d_sx = 0, d_m = 0;
              for (int ch = 0; ch < c; ++ch) {
                const std::size_t oi = (static_cast<std::size_t>(ch) * taps + kk) * n + p;
                const T g = self.grad[oi];
                if (g == T(0)) continue;
                const T* plane = xv + static_cast<std::size_t>(ch) * n;
                const T v00 = plane[ya * w + xa], v01 = plane[ya * w + xb];
                const T v10 = plane[yb * w + xa], v11 = plane[yb * w + xb];
                if (gx_on) {
                  T* gplane = gxp + static_cast<std::size_t>(ch) * n;
                  const T gm = g * mod;
                  gplane[ya * w + xa] += gm * w00;
                  gplane[ya * w + xb] += gm * w01;
                  gplane[yb * w + xa] += gm * w10;
                  gplane[yb * w + xb] += gm * w11;
                }
                d_sy += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
                d_sx += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                if (gm_on) d_m += g * raw[oi];
              }
              if (go_on) {
                gop[static_cast<std::size_t>(2 * kk) * n + p] += mod * d_sy;
                gop[static_cast<std::size_t>(2 * kk + 1) * n + p] += mod * d_sx;
              }
              if (gm_on) gmp[static_cast<std::size_t>(kk) * n + p] += d_m;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
Var<T> mean(const Var<T>& x) {
  auto xv = x.value();
  T s = 0;
  for (T v : xv) s += v;
  const T inv = T(1) / static_cast<T>(xv.size());
  Node<T>* xn = x.node();
  return make_result<T>({1}, {s * inv}, {&x}, [xn, inv](Node<T>& self) {
    auto g = xn->grad_buffer();
    const T go = self.grad[0] * inv;
    for (auto& v : g) v += go;
  });
}

// mean(sqrt((pred - target)^2 + eps^2)); gradient flows to pred only.
template <class T>
Var<T> charbonnier(const Var<T>& pred, const Var<T>& target, T eps) {
  detail::require(pred.shape() == target.shape(), "charbonnier: shape " + shape_string(pred.shape()) + " vs " +
                                                      shape_string(target.shape()));
  auto pv = pred.value();
  auto tv = target.value();
  const T eps2 = eps * eps;
  std::vector<T> ratio(pv.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T d = pv[i] - tv[i];
    const T r = std::sqrt(d * d + eps2);
    acc += r;
    ratio[i] = d / r;
  }
  const T inv = T(1) / static_cast<T>(pv.size());
  Node<T>* pn = pred.node();
  return make_result<T>({1}, {static_cast<T>(acc / static_cast<double>(pv.size()))}, {&pred},
                        [pn, inv, ratio = std::move(ratio)](Node<T>& self) {
                          auto g = pn->grad_buffer();
                          const T go = self.grad[0] * inv;
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * ratio[i];
                        });
}

}  // namespace priorfuse::nn
