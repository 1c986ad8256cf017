#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace rebirth {

struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense activation/weight container, NCHW row-major.
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<size_t>(n_) * c_ * h_ * w_, fill) {}

  size_t size() const { return data.size(); }

  float& at(int in, int ic, int iy, int ix) {
    return data[((static_cast<size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  float at(int in, int ic, int iy, int ix) const {
    return data[((static_cast<size_t>(in) * c + ic) * h + iy) * w + ix];
  }

  bool same_shape(const Tensor4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
};

struct ConvParams {
  int out_channels = 0, in_channels = 0, kh = 1, kw = 1;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  std::vector<float> weights;  // O x I x Kh x Kw
  std::vector<float> bias;     // O

  float weight(int o, int i, int ky, int kx) const {
    return weights[((static_cast<size_t>(o) * in_channels + i) * kh + ky) * kw + kx];
  }
  float& weight(int o, int i, int ky, int kx) {
    return weights[((static_cast<size_t>(o) * in_channels + i) * kh + ky) * kw + kx];
  }
};

struct BnParams {
  std::vector<float> mean;  // running mean per channel
  std::vector<float> var;   // running variance per channel
  float eps = 1e-5f;
};

struct ScaleParams {
  std::vector<float> gamma;
  std::vector<float> beta;
};

struct LrnParams {
  int local_size = 5;
  float alpha = 1e-4f;
  float beta_exp = 0.75f;
  float k = 1.0f;
};

enum class PoolMode { Max, Average };

struct PoolParams {
  PoolMode mode = PoolMode::Max;
  int kh = 2, kw = 2;
  int stride_h = 2, stride_w = 2;
  int pad_h = 0, pad_w = 0;
};

struct InnerProductParams {
  int out_features = 0, in_features = 0;
  std::vector<float> weights;  // out x in
  std::vector<float> bias;     // out
};

inline int conv_out_extent(int in, int pad, int kernel, int stride) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Direct convolution, zero padding, 64-bit accumulation.
inline Tensor4 conv2d(const Tensor4& x, const ConvParams& p) {
  if (x.c != p.in_channels)
    throw shape_error("conv2d: input has " + std::to_string(x.c) +
                      " channels, kernel expects " + std::to_string(p.in_channels));
  const int oh = conv_out_extent(x.h, p.pad_h, p.kh, p.stride_h);
  const int ow = conv_out_extent(x.w, p.pad_w, p.kw, p.stride_w);
  if (oh < 1 || ow < 1)
    throw shape_error("conv2d: non-positive output extent " + std::to_string(oh) +
                      "x" + std::to_string(ow));
  Tensor4 out(x.n, p.out_channels, oh, ow);
  for (int in = 0; in < x.n; ++in)
    for (int o = 0; o < p.out_channels; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = p.bias[o];
          for (int i = 0; i < p.in_channels; ++i)
            for (int ky = 0; ky < p.kh; ++ky) {
              const int sy = y * p.stride_h + ky - p.pad_h;
              if (sy < 0 || sy >= x.h) continue;
              for (int kx = 0; kx < p.kw; ++kx) {
                const int sx = xx * p.stride_w + kx - p.pad_w;
                if (sx < 0 || sx >= x.w) continue;
                acc += static_cast<double>(p.weight(o, i, ky, kx)) * x.at(in, i, sy, sx);
              }
            }
          out.at(in, o, y, xx) = static_cast<float>(acc);
        }
  return out;
}

// Pooling windows ignore out-of-bounds elements; average divides by the
// in-bounds count.
inline Tensor4 pool2d(const Tensor4& x, const PoolParams& p) {
  const int oh = conv_out_extent(x.h, p.pad_h, p.kh, p.stride_h);
  const int ow = conv_out_extent(x.w, p.pad_w, p.kw, p.stride_w);
  if (oh < 1 || ow < 1)
    throw shape_error("pool2d: non-positive output extent");
  Tensor4 out(x.n, x.c, oh, ow);
  for (int in = 0; in < x.n; ++in)
    for (int c = 0; c < x.c; ++c)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = (p.mode == PoolMode::Max)
                           ? -std::numeric_limits<double>::infinity()
                           : 0.0;
          int count = 0;
          for (int ky = 0; ky < p.kh; ++ky) {
            const int sy = y * p.stride_h + ky - p.pad_h;
            if (sy < 0 || sy >= x.h) continue;
            for (int kx = 0; kx < p.kw; ++kx) {
              const int sx = xx * p.stride_w + kx - p.pad_w;
              if (sx < 0 || sx >= x.w) continue;
              const double v = x.at(in, c, sy, sx);
              if (p.mode == PoolMode::Max)
                acc = std::max(acc, v);
              else
                acc += v;
              ++count;
            }
          }
          out.at(in, c, y, xx) =
              (p.mode == PoolMode::Max)
                  ? static_cast<float>(count ? acc : 0.0)
                  : static_cast<float>(count ? acc / count : 0.0);
        }
  return out;
}

// Cross-channel local response normalization, window clipped at boundaries.
inline Tensor4 lrn(const Tensor4& x, const LrnParams& p) {
  Tensor4 out(x.n, x.c, x.h, x.w);
  const int half = p.local_size / 2;
  for (int in = 0; in < x.n; ++in)
    for (int c = 0; c < x.c; ++c) {
      const int lo = std::max(0, c - half);
      const int hi = std::min(x.c - 1, c + half);
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
          double sum_sq = 0.0;
          for (int cc = lo; cc <= hi; ++cc) {
            const double v = x.at(in, cc, y, xx);
            sum_sq += v * v;
          }
          const double denom =
              std::pow(p.k + (static_cast<double>(p.alpha) / p.local_size) * sum_sq,
                       static_cast<double>(p.beta_exp));
          out.at(in, c, y, xx) = static_cast<float>(x.at(in, c, y, xx) / denom);
        }
    }
  return out;
}

inline Tensor4 batch_norm(const Tensor4& x, const BnParams& p) {
  if (static_cast<size_t>(x.c) != p.mean.size() ||
      static_cast<size_t>(x.c) != p.var.size())
    throw shape_error("batch_norm: channel count mismatch");
  Tensor4 out(x.n, x.c, x.h, x.w);
  for (int c = 0; c < x.c; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(p.var[c]) + p.eps);
    const double mu = p.mean[c];
    for (int in = 0; in < x.n; ++in)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx)
          out.at(in, c, y, xx) = static_cast<float>((x.at(in, c, y, xx) - mu) * inv);
  }
  return out;
}

inline Tensor4 scale(const Tensor4& x, const ScaleParams& p) {
  if (static_cast<size_t>(x.c) != p.gamma.size() ||
      static_cast<size_t>(x.c) != p.beta.size())
    throw shape_error("scale: channel count mismatch");
  Tensor4 out(x.n, x.c, x.h, x.w);
  for (int c = 0; c < x.c; ++c)
    for (int in = 0; in < x.n; ++in)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx)
          out.at(in, c, y, xx) = p.gamma[c] * x.at(in, c, y, xx) + p.beta[c];
  return out;
}

inline Tensor4 relu(const Tensor4& x) {
  Tensor4 out = x;
  for (float& v : out.data) v = std::max(0.0f, v);
  return out;
}

// Softmax over the channel axis per (n, y, x) position.
inline Tensor4 softmax_channels(const Tensor4& x) {
  Tensor4 out(x.n, x.c, x.h, x.w);
  for (int in = 0; in < x.n; ++in)
    for (int y = 0; y < x.h; ++y)
      for (int xx = 0; xx < x.w; ++xx) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < x.c; ++c) mx = std::max(mx, (double)x.at(in, c, y, xx));
        double sum = 0.0;
        for (int c = 0; c < x.c; ++c) sum += std::exp(x.at(in, c, y, xx) - mx);
        for (int c = 0; c < x.c; ++c)
          out.at(in, c, y, xx) =
              static_cast<float>(std::exp(x.at(in, c, y, xx) - mx) / sum);
      }
  return out;
}

// Input is flattened to n x (c*h*w); output is n x out x 1 x 1.
inline Tensor4 inner_product(const Tensor4& x, const InnerProductParams& p) {
  const int flat = x.c * x.h * x.w;
  if (flat != p.in_features)
    throw shape_error("inner_product: flattened input " + std::to_string(flat) +
                      " != in_features " + std::to_string(p.in_features));
  Tensor4 out(x.n, p.out_features, 1, 1);
  for (int in = 0; in < x.n; ++in)
    for (int o = 0; o < p.out_features; ++o) {
      double acc = p.bias[o];
      const size_t base = static_cast<size_t>(in) * flat;
      const size_t wbase = static_cast<size_t>(o) * flat;
      for (int i = 0; i < flat; ++i)
        acc += static_cast<double>(p.weights[wbase + i]) * x.data[base + i];
      out.at(in, o, 0, 0) = static_cast<float>(acc);
    }
  return out;
}

inline Tensor4 concat_channels(const std::vector<Tensor4>& xs) {
  if (xs.empty()) throw shape_error("concat_channels: no inputs");
  int total_c = 0;
  for (const auto& x : xs) {
    if (x.n != xs[0].n || x.h != xs[0].h || x.w != xs[0].w)
      throw shape_error("concat_channels: spatial/batch mismatch");
    total_c += x.c;
  }
  Tensor4 out(xs[0].n, total_c, xs[0].h, xs[0].w);
  for (int in = 0; in < out.n; ++in) {
    int coff = 0;
    for (const auto& x : xs) {
      for (int c = 0; c < x.c; ++c)
        for (int y = 0; y < x.h; ++y)
          for (int xx = 0; xx < x.w; ++xx)
            out.at(in, coff + c, y, xx) = x.at(in, c, y, xx);
      coff += x.c;
    }
  }
  return out;
}

inline std::vector<Tensor4> split_channels(const Tensor4& x,
                                           const std::vector<int>& counts) {
  int sum = 0;
  for (int c : counts) sum += c;
  if (sum != x.c) throw shape_error("split_channels: counts do not sum to c");
  std::vector<Tensor4> out;
  int coff = 0;
  for (int cnt : counts) {
    Tensor4 t(x.n, cnt, x.h, x.w);
    for (int in = 0; in < x.n; ++in)
      for (int c = 0; c < cnt; ++c)
        for (int y = 0; y < x.h; ++y)
          for (int xx = 0; xx < x.w; ++xx)
            t.at(in, c, y, xx) = x.at(in, coff + c, y, xx);
    out.push_back(std::move(t));
    coff += cnt;
  }
  return out;
}

// Gathers channel ranges (offset, count) from x in the given order.
inline Tensor4 gather_channels(const Tensor4& x,
                               const std::vector<std::pair<int, int>>& spans) {
  int total = 0;
  for (auto& s : spans) total += s.second;
  Tensor4 out(x.n, total, x.h, x.w);
  int coff = 0;
  for (auto& [off, cnt] : spans) {
    if (off < 0 || off + cnt > x.c)
      throw shape_error("gather_channels: span out of range");
    for (int in = 0; in < x.n; ++in)
      for (int c = 0; c < cnt; ++c)
        for (int y = 0; y < x.h; ++y)
          for (int xx = 0; xx < x.w; ++xx)
            out.at(in, coff + c, y, xx) = x.at(in, off + c, y, xx);
    coff += cnt;
  }
  return out;
}

}  // namespace rebirth
