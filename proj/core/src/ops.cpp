// SPDX-License-Identifier: Apache-2.0
#include "tofa/ops.hpp"

// Tiny products would otherwise use coefficient-wise reductions whose
// summation order follows buffer alignment; keep every product on the
// packed kernel so results do not depend on allocation addresses.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>
#include <algorithm>
#include <initializer_list>
#include <cmath>

#include "tofa/error.hpp"

namespace tofa::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstMatMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

std::uint64_t* g_mac_counter = nullptr;

void count_macs(std::uint64_t n) {
  if (g_mac_counter) *g_mac_counter += n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

void require_ndim(const Tensor& t, int n, const char* op, const char* what) {
  if (!t.defined() || t.ndim() != n) {
    throw DimensionError(std::string(op) + ": " + what + " must be " + std::to_string(n) +
                         "-d, got " + (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Bwd dfdx) {
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = fwd(xs[i]);
  if (detail::needs_grad({&x})) {
    auto xi = x.impl();
    detail::attach(out, op, {xi}, [xi, dfdx](std::span<const float> g) {
      auto gx = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xi->data[i]);
    });
  }
  return out;
}

}  // namespace

void set_mac_counter(std::uint64_t* counter) { g_mac_counter = counter; }

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto as = a.data();
  auto bs = b.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] + bs[i];
  if (detail::needs_grad({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    detail::attach(out, "add", {ai, bi}, [ai, bi](std::span<const float> g) {
      // ai == bi is fine: both contributions accumulate into the same buffer.
      for (auto* t : {ai.get(), bi.get()}) {
        if (!t->requires_grad) continue;
        auto gt = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto as = a.data();
  auto bs = b.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] * bs[i];
  if (detail::needs_grad({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    detail::attach(out, "mul", {ai, bi}, [ai, bi](std::span<const float> g) {
      if (ai->requires_grad) {
        auto ga = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto gb = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  return unary(a, "scale", [s](float v) { return v * s; }, [s](float) { return s; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor hardswish(const Tensor& x) {
  return unary(
      x, "hardswish",
      [](float v) {
        if (v <= -3.0f) return 0.0f;
        if (v >= 3.0f) return v;
        return v * (v + 3.0f) / 6.0f;
      },
      [](float v) {
        if (v <= -3.0f) return 0.0f;
        if (v >= 3.0f) return 1.0f;
        return (2.0f * v + 3.0f) / 6.0f;
      });
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = 1.0f / (1.0f + std::exp(-xs[i]));
  if (detail::needs_grad({&x})) {
    auto xi = x.impl();
    // Captures the output's values, not its impl, to avoid an ownership cycle.
    std::vector<float> y(ys.begin(), ys.end());
    detail::attach(out, "sigmoid", {xi}, [xi, y = std::move(y)](std::span<const float> g) {
      auto gx = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0f - y[i]);
    });
  }
  return out;
}

Tensor mul_channel(const Tensor& x, const Tensor& gate) {
  require_ndim(x, 4, "mul_channel", "input");
  require_ndim(gate, 2, "mul_channel", "gate");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (gate.dim(0) != n || gate.dim(1) != c) {
    throw DimensionError("mul_channel: gate " + shape_str(gate.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  Tensor out(x.shape());
  auto xs = x.data();
  auto gs = gate.data();
  auto ys = out.data();
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
    const float s = gs[p];
    for (std::size_t i = 0; i < hw; ++i) ys[p * hw + i] = xs[p * hw + i] * s;
  }
  if (detail::needs_grad({&x, &gate})) {
    auto xi = x.impl();
    auto gi = gate.impl();
    detail::attach(out, "mul_channel", {xi, gi}, [xi, gi, hw](std::span<const float> g) {
      const std::size_t planes = gi->data.size();
      if (xi->requires_grad) {
        auto gx = xi->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p) {
          const float s = gi->data[p];
          for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += g[p * hw + i] * s;
        }
      }
      if (gi->requires_grad) {
        auto gg = gi->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p) {
          float acc = 0.0f;
          for (std::size_t i = 0; i < hw; ++i) acc += g[p * hw + i] * xi->data[p * hw + i];
          gg[p] += acc;
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out({1}, std::vector<float>{static_cast<float>(acc)});
  if (detail::needs_grad({&x})) {
    auto xi = x.impl();
    detail::attach(out, "sum", {xi}, [xi](std::span<const float> g) {
      auto gx = xi->grad_buffer();
      for (auto& v : gx) v += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor global_avg_pool(const Tensor& x) {
  require_ndim(x, 4, "global_avg_pool", "input");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out({n, c});
  auto xs = x.data();
  auto ys = out.data();
  const float inv = 1.0f / static_cast<float>(hw);
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < hw; ++i) acc += xs[p * hw + i];
    ys[p] = acc * inv;
  }
  if (detail::needs_grad({&x})) {
    auto xi = x.impl();
    detail::attach(out, "global_avg_pool", {xi}, [xi, hw, inv](std::span<const float> g) {
      auto gx = xi->grad_buffer();
      for (std::size_t p = 0; p < g.size(); ++p) {
        const float v = g[p] * inv;
        for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += v;
      }
    });
  }
  return out;
}

Tensor pad2d(const Tensor& x, int pad) {
  require_ndim(x, 4, "pad2d", "input");
  if (pad < 0) throw ConfigError("pad2d: negative padding");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h + 2 * pad, wo = w + 2 * pad;
  Tensor out({n, c, ho, wo});
  auto xs = x.data();
  auto ys = out.data();
  for (int p = 0; p < n * c; ++p) {
    for (int y = 0; y < h; ++y) {
      std::copy_n(&xs[(static_cast<std::size_t>(p) * h + y) * w], w,
                  &ys[(static_cast<std::size_t>(p) * ho + y + pad) * wo + pad]);
    }
  }
  if (detail::needs_grad({&x})) {
    auto xi = x.impl();
    detail::attach(out, "pad2d", {xi}, [xi, n, c, h, w, ho, wo, pad](std::span<const float> g) {
      auto gx = xi->grad_buffer();
      for (int p = 0; p < n * c; ++p) {
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) {
            gx[(static_cast<std::size_t>(p) * h + y) * w + xx] +=
                g[(static_cast<std::size_t>(p) * ho + y + pad) * wo + xx + pad];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  int n, cin, h, w;
  int cout, k, kmax, off, stride, pad, groups;
  int ho, wo;
  int w_in_stride;  // weight.dim(1)
};

// Depthwise convolution runs channels-last: spatial planes here are tiny, so
// the vectorized inner loop goes over channels instead.
using ArrMap = Eigen::Map<Eigen::ArrayXf>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXf>;

// [N, C, HW] -> [N, HW, C]
void to_channels_last(const float* x, int n, int c, std::size_t hw, float* out) {
  for (int b = 0; b < n; ++b) {
    const float* src = x + static_cast<std::size_t>(b) * c * hw;
    float* dst = out + static_cast<std::size_t>(b) * c * hw;
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) dst[i * c + ch] = src[ch * hw + i];
  }
}

// [N, HW, C] -> [N, C, HW], accumulating into `out` when `add` is set.
void from_channels_last(const float* x, int n, int c, std::size_t hw, float* out, bool add) {
  for (int b = 0; b < n; ++b) {
    const float* src = x + static_cast<std::size_t>(b) * c * hw;
    float* dst = out + static_cast<std::size_t>(b) * c * hw;
    for (int ch = 0; ch < c; ++ch) {
      float* d = dst + ch * hw;
      if (add) {
        for (std::size_t i = 0; i < hw; ++i) d[i] += src[i * c + ch];
      } else {
        for (std::size_t i = 0; i < hw; ++i) d[i] = src[i * c + ch];
      }
    }
  }
}

// Cropped taps of a [C, 1, Kmax, Kmax] weight as [K*K, C].
std::vector<float> pack_depthwise_weight(const float* w, const ConvGeom& g) {
  std::vector<float> wt(static_cast<std::size_t>(g.k) * g.k * g.cin);
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx)
        wt[(static_cast<std::size_t>(ky) * g.k + kx) * g.cin + c] =
            w[(static_cast<std::size_t>(c) * g.kmax + ky + g.off) * g.kmax + kx + g.off];
  return wt;
}

void depthwise_cl_fwd(const float* xt, const float* wt, const ConvGeom& g, float* yt) {
  const int c = g.cin;
  for (int n = 0; n < g.n; ++n)
    for (int oy = 0; oy < g.ho; ++oy)
      for (int ox = 0; ox < g.wo; ++ox) {
        ArrMap acc(yt + ((static_cast<std::size_t>(n) * g.ho + oy) * g.wo + ox) * c, c);
        acc.setZero();
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            acc += ConstArrMap(wt + (static_cast<std::size_t>(ky) * g.k + kx) * c, c) *
                   ConstArrMap(xt + ((static_cast<std::size_t>(n) * g.h + iy) * g.w + ix) * c, c);
          }
        }
      }
}

void depthwise_cl_bwd(const float* xt, const float* wt, const ConvGeom& g, const float* gt,
                      float* gxt, float* gwt) {
  const int c = g.cin;
  for (int n = 0; n < g.n; ++n)
    for (int oy = 0; oy < g.ho; ++oy)
      for (int ox = 0; ox < g.wo; ++ox) {
        ConstArrMap go(gt + ((static_cast<std::size_t>(n) * g.ho + oy) * g.wo + ox) * c, c);
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            const std::size_t tap = (static_cast<std::size_t>(ky) * g.k + kx) * c;
            const std::size_t at = ((static_cast<std::size_t>(n) * g.h + iy) * g.w + ix) * c;
            if (gwt) ArrMap(gwt + tap, c) += go * ConstArrMap(xt + at, c);
            if (gxt) ArrMap(gxt + at, c) += go * ConstArrMap(wt + tap, c);
          }
        }
      }
}

void im2col(const float* in, const ConvGeom& g, float* col) {
  const std::size_t hw = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        float* dst = col + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * hw;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[oy * g.wo + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                      ? in[(static_cast<std::size_t>(c) * g.h + iy) * g.w + ix]
                                      : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, float* gin) {
  const std::size_t hw = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const float* src = col + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * hw;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            gin[(static_cast<std::size_t>(c) * g.h + iy) * g.w + ix] += src[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

// Dense weight slice [cout, cin*k*k] packed out of the [cout_max, cin_max, K, K] tensor.
std::vector<float> pack_dense_weight(const float* w, const ConvGeom& g) {
  std::vector<float> packed(static_cast<std::size_t>(g.cout) * g.cin * g.k * g.k);
  std::size_t i = 0;
  for (int o = 0; o < g.cout; ++o)
    for (int c = 0; c < g.cin; ++c)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx)
          packed[i++] = w[((static_cast<std::size_t>(o) * g.w_in_stride + c) * g.kmax + ky + g.off) *
                              g.kmax +
                          kx + g.off];
  return packed;
}

void unpack_dense_grad_add(const float* packed, const ConvGeom& g, float* gw) {
  std::size_t i = 0;
  for (int o = 0; o < g.cout; ++o)
    for (int c = 0; c < g.cin; ++c)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx)
          gw[((static_cast<std::size_t>(o) * g.w_in_stride + c) * g.kmax + ky + g.off) * g.kmax +
             kx + g.off] += packed[i++];
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias,
              const Conv2dOptions& opt) {
  require_ndim(x, 4, "conv2d", "input");
  require_ndim(weight, 4, "conv2d", "weight");
  ConvGeom g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.kmax = weight.dim(2);
  if (weight.dim(3) != g.kmax) throw DimensionError("conv2d: non-square kernel");
  g.k = opt.kernel < 0 ? g.kmax : opt.kernel;
  if (g.k < 1 || g.k > g.kmax || g.k % 2 == 0 || (g.kmax - g.k) % 2 != 0) {
    throw ConfigError("conv2d: kernel " + std::to_string(g.k) + " is not an odd centered crop of " +
                      std::to_string(g.kmax));
  }
  g.off = (g.kmax - g.k) / 2;
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.groups = opt.groups;
  g.w_in_stride = weight.dim(1);
  if (g.stride < 1 || g.pad < 0) throw ConfigError("conv2d: bad stride/padding");
  if (g.groups < 1 || g.cin % g.groups != 0) {
    throw ConfigError("conv2d: groups " + std::to_string(g.groups) + " do not divide " +
                      std::to_string(g.cin) + " input channels");
  }
  const bool depthwise = g.groups > 1 && g.groups == g.cin;
  if (g.groups == 1) {
    g.cout = opt.out_channels < 0 ? weight.dim(0) : opt.out_channels;
    if (g.cin > weight.dim(1) || g.cout > weight.dim(0) || g.cout < 1) {
      throw DimensionError("conv2d: input " + shape_str(x.shape()) + " / out " +
                           std::to_string(g.cout) + " exceed weight " + shape_str(weight.shape()));
    }
  } else if (depthwise) {
    g.cout = opt.out_channels < 0 ? g.cin : opt.out_channels;
    if (g.cout != g.cin || weight.dim(1) != 1 || g.cin > weight.dim(0)) {
      throw DimensionError("conv2d: depthwise input " + shape_str(x.shape()) +
                           " incompatible with weight " + shape_str(weight.shape()));
    }
  } else {
    g.cout = weight.dim(0);
    if (opt.out_channels >= 0 && opt.out_channels != g.cout) {
      throw ConfigError("conv2d: elastic output width needs groups 1 or depthwise");
    }
    if (weight.dim(1) != g.cin / g.groups || g.cout % g.groups != 0 || g.k != g.kmax) {
      throw DimensionError("conv2d: grouped weight " + shape_str(weight.shape()) +
                           " incompatible with input " + shape_str(x.shape()));
    }
  }
  if (bias && bias->defined() && (bias->ndim() != 1 || bias->dim(0) < g.cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " too small");
  }
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw DimensionError("conv2d: padded input smaller than kernel");
  }
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t out_plane = static_cast<std::size_t>(g.ho) * g.wo;
  Tensor out({g.n, g.cout, g.ho, g.wo});
  const float* xs = x.data().data();
  const float* ws = weight.data().data();
  float* ys = out.data().data();
  const int cin_per_group = g.cin / g.groups;
  count_macs(static_cast<std::uint64_t>(g.n) * out_plane * g.k * g.k * cin_per_group * g.cout);

  const bool pointwise = g.groups == 1 && g.kmax == 1 && g.stride == 1 && g.pad == 0;
  std::vector<float> cols;     // im2col buffers kept for backward
  std::vector<float> wpacked;  // cropped dense or depthwise taps
  std::vector<float> xt;  // channels-last input, kept for backward
  if (depthwise) {
    wpacked = pack_depthwise_weight(ws, g);
    xt.resize(x.numel());
    to_channels_last(xs, g.n, g.cin, in_plane, xt.data());
    std::vector<float> yt(out.numel());
    depthwise_cl_fwd(xt.data(), wpacked.data(), g, yt.data());
    from_channels_last(yt.data(), g.n, g.cout, out_plane, ys, false);
  } else if (pointwise) {
    ConstMatMap wm(ws, g.cout, g.cin, Eigen::OuterStride<>(g.w_in_stride));
    for (int n = 0; n < g.n; ++n) {
      ConstMatMap xm(xs + static_cast<std::size_t>(n) * g.cin * in_plane, g.cin,
                     static_cast<Eigen::Index>(in_plane), Eigen::OuterStride<>(in_plane));
      MatMap ym(ys + static_cast<std::size_t>(n) * g.cout * out_plane, g.cout,
                static_cast<Eigen::Index>(out_plane), Eigen::OuterStride<>(out_plane));
      ym.noalias() = wm * xm;
    }
  } else if (g.groups == 1) {
    wpacked = pack_dense_weight(ws, g);
    const std::size_t ckk = static_cast<std::size_t>(g.cin) * g.k * g.k;
    cols.resize(static_cast<std::size_t>(g.n) * ckk * out_plane);
    ConstMatMap wm(wpacked.data(), g.cout, static_cast<Eigen::Index>(ckk),
                   Eigen::OuterStride<>(ckk));
    for (int n = 0; n < g.n; ++n) {
      float* col = cols.data() + static_cast<std::size_t>(n) * ckk * out_plane;
      im2col(xs + static_cast<std::size_t>(n) * g.cin * in_plane, g, col);
      ConstMatMap cm(col, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(out_plane),
                     Eigen::OuterStride<>(out_plane));
      MatMap ym(ys + static_cast<std::size_t>(n) * g.cout * out_plane, g.cout,
                static_cast<Eigen::Index>(out_plane), Eigen::OuterStride<>(out_plane));
      ym.noalias() = wm * cm;
    }
  } else {
    const int cout_per_group = g.cout / g.groups;
    for (int n = 0; n < g.n; ++n)
      for (int o = 0; o < g.cout; ++o) {
        const int grp = o / cout_per_group;
        for (int oy = 0; oy < g.ho; ++oy)
          for (int ox = 0; ox < g.wo; ++ox) {
            float acc = 0.0f;
            for (int ci = 0; ci < cin_per_group; ++ci) {
              const int c = grp * cin_per_group + ci;
              for (int ky = 0; ky < g.k; ++ky) {
                const int iy = oy * g.stride - g.pad + ky;
                if (iy < 0 || iy >= g.h) continue;
                for (int kx = 0; kx < g.k; ++kx) {
                  const int ix = ox * g.stride - g.pad + kx;
                  if (ix < 0 || ix >= g.w) continue;
                  acc += ws[((static_cast<std::size_t>(o) * cin_per_group + ci) * g.k + ky) * g.k +
                            kx] *
                         xs[((static_cast<std::size_t>(n) * g.cin + c) * g.h + iy) * g.w + ix];
                }
              }
            }
            ys[((static_cast<std::size_t>(n) * g.cout + o) * g.ho + oy) * g.wo + ox] = acc;
          }
      }
  }
  if (bias && bias->defined()) {
    const float* bs = bias->data().data();
    for (int n = 0; n < g.n; ++n)
      for (int o = 0; o < g.cout; ++o) {
        float* p = ys + (static_cast<std::size_t>(n) * g.cout + o) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) p[i] += bs[o];
      }
  }

  const Tensor* b = (bias && bias->defined()) ? bias : nullptr;
  if (detail::needs_grad({&x, &weight, b})) {
    auto xi = x.impl();
    auto wi = weight.impl();
    std::shared_ptr<TensorImpl> bi = b ? b->impl() : nullptr;
    std::vector<std::shared_ptr<TensorImpl>> inputs{xi, wi};
    if (bi) inputs.push_back(bi);
    detail::attach(
        out, "conv2d", std::move(inputs),
        [xi, wi, bi, g, depthwise, pointwise, in_plane, out_plane, cols = std::move(cols),
         xt = std::move(xt),
         wpacked = std::move(wpacked)](std::span<const float> gout) {
          const float* xs = xi->data.data();
          const float* ws = wi->data.data();
          float* gx = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
          float* gw = wi->requires_grad ? wi->grad_buffer().data() : nullptr;
          if (bi && bi->requires_grad) {
            auto gb = bi->grad_buffer();
            for (int n = 0; n < g.n; ++n)
              for (int o = 0; o < g.cout; ++o) {
                const float* p = gout.data() + (static_cast<std::size_t>(n) * g.cout + o) * out_plane;
                float acc = 0.0f;
                for (std::size_t i = 0; i < out_plane; ++i) acc += p[i];
                gb[o] += acc;
              }
          }
          if (depthwise) {
            std::vector<float> gt(gout.size());
            to_channels_last(gout.data(), g.n, g.cout, out_plane, gt.data());
            std::vector<float> gxt(gx ? xt.size() : 0);
            std::vector<float> gwt(gw ? wpacked.size() : 0);
            depthwise_cl_bwd(xt.data(), wpacked.data(), g, gt.data(), gx ? gxt.data() : nullptr,
                             gw ? gwt.data() : nullptr);
            if (gx) from_channels_last(gxt.data(), g.n, g.cin, in_plane, gx, true);
            if (gw) {
              for (int c = 0; c < g.cin; ++c)
                for (int ky = 0; ky < g.k; ++ky)
                  for (int kx = 0; kx < g.k; ++kx)
                    gw[(static_cast<std::size_t>(c) * g.kmax + ky + g.off) * g.kmax + kx + g.off] +=
                        gwt[(static_cast<std::size_t>(ky) * g.k + kx) * g.cin + c];
            }
          } else if (pointwise) {
            const std::size_t wstride = static_cast<std::size_t>(g.w_in_stride) * g.kmax * g.kmax;
            ConstMatMap wm(ws, g.cout, g.cin, Eigen::OuterStride<>(wstride));
            RowMat gw_acc;
            if (gw) gw_acc.setZero(g.cout, g.cin);
            for (int n = 0; n < g.n; ++n) {
              ConstMatMap xm(xs + static_cast<std::size_t>(n) * g.cin * in_plane, g.cin,
                             static_cast<Eigen::Index>(in_plane), Eigen::OuterStride<>(in_plane));
              ConstMatMap gm(gout.data() + static_cast<std::size_t>(n) * g.cout * out_plane, g.cout,
                             static_cast<Eigen::Index>(out_plane), Eigen::OuterStride<>(out_plane));
              if (gw) gw_acc.noalias() += gm * xm.transpose();
              if (gx) {
                MatMap gxm(gx + static_cast<std::size_t>(n) * g.cin * in_plane, g.cin,
                           static_cast<Eigen::Index>(in_plane), Eigen::OuterStride<>(in_plane));
                gxm.noalias() += wm.transpose() * gm;
              }
            }
            if (gw) {
              MatMap gwm(gw, g.cout, g.cin, Eigen::OuterStride<>(wstride));
              gwm += gw_acc;
            }
          } else if (g.groups == 1) {
            const std::size_t ckk = static_cast<std::size_t>(g.cin) * g.k * g.k;
            ConstMatMap wm(wpacked.data(), g.cout, static_cast<Eigen::Index>(ckk),
                           Eigen::OuterStride<>(ckk));
            RowMat gw_acc;
            if (gw) gw_acc.setZero(g.cout, static_cast<Eigen::Index>(ckk));
            RowMat gcol;
            for (int n = 0; n < g.n; ++n) {
              ConstMatMap cm(cols.data() + static_cast<std::size_t>(n) * ckk * out_plane,
                             static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(out_plane),
                             Eigen::OuterStride<>(out_plane));
              ConstMatMap gm(gout.data() + static_cast<std::size_t>(n) * g.cout * out_plane, g.cout,
                             static_cast<Eigen::Index>(out_plane), Eigen::OuterStride<>(out_plane));
              if (gw) gw_acc.noalias() += gm * cm.transpose();
              if (gx) {
                gcol.noalias() = wm.transpose() * gm;
                col2im_add(gcol.data(), g, gx + static_cast<std::size_t>(n) * g.cin * in_plane);
              }
            }
            if (gw) unpack_dense_grad_add(gw_acc.data(), g, gw);
          } else {
            const int cin_per_group = g.cin / g.groups;
            const int cout_per_group = g.cout / g.groups;
            for (int n = 0; n < g.n; ++n)
              for (int o = 0; o < g.cout; ++o) {
                const int grp = o / cout_per_group;
                for (int oy = 0; oy < g.ho; ++oy)
                  for (int ox = 0; ox < g.wo; ++ox) {
                    const float go =
                        gout[((static_cast<std::size_t>(n) * g.cout + o) * g.ho + oy) * g.wo + ox];
                    for (int ci = 0; ci < cin_per_group; ++ci) {
                      const int c = grp * cin_per_group + ci;
                      for (int ky = 0; ky < g.k; ++ky) {
                        const int iy = oy * g.stride - g.pad + ky;
                        if (iy < 0 || iy >= g.h) continue;
                        for (int kx = 0; kx < g.k; ++kx) {
                          const int ix = ox * g.stride - g.pad + kx;
                          if (ix < 0 || ix >= g.w) continue;
                          const std::size_t wi_ =
                              ((static_cast<std::size_t>(o) * cin_per_group + ci) * g.k + ky) * g.k + kx;
                          const std::size_t xi_ =
                              ((static_cast<std::size_t>(n) * g.cin + c) * g.h + iy) * g.w + ix;
                          if (gw) gw[wi_] += go * xs[xi_];
                          if (gx) gx[xi_] += go * ws[wi_];
                        }
                      }
                    }
                  }
              }
          }
        });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias, int out_features) {
  require_ndim(x, 2, "linear", "input");
  require_ndim(weight, 2, "linear", "weight");
  const int n = x.dim(0), in = x.dim(1);
  const int out = out_features < 0 ? weight.dim(0) : out_features;
  const int ld = weight.dim(1);
  if (in > ld || out > weight.dim(0) || out < 1) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " / out " + std::to_string(out) +
                         " exceed weight " + shape_str(weight.shape()));
  }
  const Tensor* b = (bias && bias->defined()) ? bias : nullptr;
  if (b && (b->ndim() != 1 || b->dim(0) < out)) throw DimensionError("linear: bias too small");
  count_macs(static_cast<std::uint64_t>(n) * in * out);

  Tensor y({n, out});
  ConstMatMap xm(x.data().data(), n, in, Eigen::OuterStride<>(in));
  ConstMatMap wm(weight.data().data(), out, in, Eigen::OuterStride<>(ld));
  MatMap ym(y.data().data(), n, out, Eigen::OuterStride<>(out));
  ym.noalias() = xm * wm.transpose();
  if (b) {
    for (int r = 0; r < n; ++r)
      for (int o = 0; o < out; ++o) ym(r, o) += b->data()[o];
  }
  if (detail::needs_grad({&x, &weight, b})) {
    auto xi = x.impl();
    auto wi = weight.impl();
    std::shared_ptr<TensorImpl> bi = b ? b->impl() : nullptr;
    std::vector<std::shared_ptr<TensorImpl>> inputs{xi, wi};
    if (bi) inputs.push_back(bi);
    detail::attach(y, "linear", std::move(inputs),
                   [xi, wi, bi, n, in, out, ld](std::span<const float> g) {
                     ConstMatMap gm(g.data(), n, out, Eigen::OuterStride<>(out));
                     ConstMatMap xm(xi->data.data(), n, in, Eigen::OuterStride<>(in));
                     ConstMatMap wm(wi->data.data(), out, in, Eigen::OuterStride<>(ld));
                     if (xi->requires_grad) {
                       MatMap gx(xi->grad_buffer().data(), n, in, Eigen::OuterStride<>(in));
                       gx.noalias() += gm * wm;
                     }
                     if (wi->requires_grad) {
                       MatMap gw(wi->grad_buffer().data(), out, in, Eigen::OuterStride<>(ld));
                       gw.noalias() += gm.transpose() * xm;
                     }
                     if (bi && bi->requires_grad) {
                       auto gb = bi->grad_buffer();
                       for (int r = 0; r < n; ++r)
                         for (int o = 0; o < out; ++o) gb[o] += gm(r, o);
                     }
                   });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

ConstArrMap plane(const float* base, int b, int c, int ch, std::size_t hw) {
  return ConstArrMap(base + (static_cast<std::size_t>(b) * c + ch) * hw, static_cast<Eigen::Index>(hw));
}

const float* plane_ptr(const float* base, int b, int c, int ch, std::size_t hw) {
  return base + (static_cast<std::size_t>(b) * c + ch) * hw;
}

// Eigen reductions over unaligned maps peel up to the first aligned address,
// so their summation order depends on where the buffer lives. These use a
// fixed lane layout instead, keeping results independent of allocation.
template <class F>
float lane_sum(std::size_t n, F f) {
  constexpr std::size_t kLanes = 8;
  float acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += f(i + l);
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += f(i);
  float s = 0.0f;
  for (float v : acc) s += v;
  return s;
}

}  // namespace

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opt) {
  require_ndim(x, 4, "batchnorm2d", "input");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->ndim() != 1 || p->dim(0) < c) {
      throw DimensionError("batchnorm2d: parameter " + shape_str(p->shape()) + " shorter than " +
                           std::to_string(c) + " channels");
    }
  }
  if (!(opt.eps > 0.0f)) throw ConfigError("batchnorm2d: eps must be positive");
  const bool train = opt.mode == Mode::kTrain;
  if (train && n < 2) throw ContractError("batchnorm2d: batch of size < 2 in train mode");

  const std::size_t count = static_cast<std::size_t>(n) * hw;
  std::vector<float> mu(c), var(c), invstd(c);
  const float* xs = x.data().data();
  if (train) {
    for (int ch = 0; ch < c; ++ch) {
      // Planes are summed in float, planes accumulated in double.
      double s = 0.0;
      for (int b = 0; b < n; ++b) {
        const float* p = plane_ptr(xs, b, c, ch, hw);
        s += lane_sum(hw, [p](std::size_t i) { return p[i]; });
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (int b = 0; b < n; ++b) {
        const float* p = plane_ptr(xs, b, c, ch, hw);
        const float mf = static_cast<float>(m);
        ss += lane_sum(hw, [p, mf](std::size_t i) { return (p[i] - mf) * (p[i] - mf); });
      }
      mu[ch] = static_cast<float>(m);
      var[ch] = static_cast<float>(ss / static_cast<double>(count));
    }
    if (opt.stats_sink) opt.stats_sink(BatchStats{mu, var, count});
    if (opt.update_running) {
      auto rm = running_mean.data();
      auto rv = running_var.data();
      const float unbias = count > 1 ? static_cast<float>(count) / static_cast<float>(count - 1) : 1.0f;
      for (int ch = 0; ch < c; ++ch) {
        rm[ch] = (1.0f - opt.momentum) * rm[ch] + opt.momentum * mu[ch];
        rv[ch] = (1.0f - opt.momentum) * rv[ch] + opt.momentum * var[ch] * unbias;
      }
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.data()[ch];
      var[ch] = running_var.data()[ch];
    }
  }
  for (int ch = 0; ch < c; ++ch) invstd[ch] = 1.0f / std::sqrt(var[ch] + opt.eps);

  Tensor y(x.shape());
  float* ys = y.data().data();
  const float* gs = gamma.data().data();
  const float* bs = beta.data().data();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
      const float a = gs[ch] * invstd[ch];
      const float sh = bs[ch] - mu[ch] * a;
      ArrMap(ys + base, static_cast<Eigen::Index>(hw)) = plane(xs, b, c, ch, hw) * a + sh;
    }

  if (detail::needs_grad({&x, &gamma, &beta})) {
    auto xi = x.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    detail::attach(
        y, "batchnorm2d", {xi, gi, bi},
        [xi, gi, bi, n, c, hw, count, train, mu = std::move(mu),
         invstd = std::move(invstd)](std::span<const float> g) {
          const float* xs = xi->data.data();
          const float* gs = gi->data.data();
          float* gx = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
          float* gg = gi->requires_grad ? gi->grad_buffer().data() : nullptr;
          float* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
          for (int ch = 0; ch < c; ++ch) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int b = 0; b < n; ++b) {
              const float* gp = plane_ptr(g.data(), b, c, ch, hw);
              const float* xp = plane_ptr(xs, b, c, ch, hw);
              const float m = mu[ch];
              sum_g += lane_sum(hw, [gp](std::size_t i) { return gp[i]; });
              sum_gx += lane_sum(hw, [gp, xp, m](std::size_t i) { return gp[i] * (xp[i] - m); });
            }
            sum_gx *= invstd[ch];
            if (gg) gg[ch] += static_cast<float>(sum_gx);
            if (gb) gb[ch] += static_cast<float>(sum_g);
            if (!gx) continue;
            const float a = gs[ch] * invstd[ch];
            if (train) {
              const float mg = static_cast<float>(sum_g / static_cast<double>(count));
              const float mgx = static_cast<float>(sum_gx / static_cast<double>(count));
              const float k = mgx * invstd[ch];
              for (int b = 0; b < n; ++b) {
                const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
                ArrMap(gx + base, static_cast<Eigen::Index>(hw)) +=
                    a * (plane(g.data(), b, c, ch, hw) - mg - (plane(xs, b, c, ch, hw) - mu[ch]) * k);
              }
            } else {
              for (int b = 0; b < n; ++b) {
                const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
                ArrMap(gx + base, static_cast<Eigen::Index>(hw)) += a * plane(g.data(), b, c, ch, hw);
              }
            }
          }
        });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Regularization

Tensor dropout(const Tensor& x, float p, Rng& rng, Mode mode) {
  if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout: p must be in [0, 1)");
  if (mode == Mode::kEval || p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.numel());
  for (auto& m : mask) m = bernoulli(rng, p) ? 0.0f : keep_scale;
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[i] * mask[i];
  if (detail::needs_grad({&x})) {
    auto xi = x.impl();
    detail::attach(out, "dropout", {xi}, [xi, mask = std::move(mask)](std::span<const float> g) {
      auto gx = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

Tensor drop_connect(const Tensor& x, float p, Rng& rng, Mode mode) {
  if (p < 0.0f || p >= 1.0f) throw ConfigError("drop_connect: p must be in [0, 1)");
  if (mode == Mode::kEval || p == 0.0f) return x;
  const int n = x.dim(0);
  const std::size_t per = x.numel() / static_cast<std::size_t>(n);
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(static_cast<std::size_t>(n));
  for (auto& m : mask) m = bernoulli(rng, p) ? 0.0f : keep_scale;
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[i] * mask[i / per];
  if (detail::needs_grad({&x})) {
    auto xi = x.impl();
    detail::attach(out, "drop_connect", {xi},
                   [xi, per, mask = std::move(mask)](std::span<const float> g) {
                     auto gx = xi->grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i / per];
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

void log_softmax_row(const float* z, int c, float* out) {
  float mx = z[0];
  for (int j = 1; j < c; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (int j = 0; j < c; ++j) s += std::exp(static_cast<double>(z[j] - mx));
  const float lse = mx + static_cast<float>(std::log(s));
  for (int j = 0; j < c; ++j) out[j] = z[j] - lse;
}

}  // namespace

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_probs) {
  return soft_cross_entropy(logits, target_probs, {});
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_probs,
                          std::span<const float> row_weights) {
  require_ndim(logits, 2, "soft_cross_entropy", "logits");
  require_same_shape(logits, target_probs, "soft_cross_entropy");
  const int b = logits.dim(0), c = logits.dim(1);
  if (!row_weights.empty() && row_weights.size() != static_cast<std::size_t>(b)) {
    throw DimensionError("soft_cross_entropy: " + std::to_string(row_weights.size()) +
                         " row weights for " + std::to_string(b) + " rows");
  }
  std::vector<float> w(static_cast<std::size_t>(b), 1.0f);
  if (!row_weights.empty()) std::copy(row_weights.begin(), row_weights.end(), w.begin());
  auto ts = target_probs.data();
  for (int r = 0; r < b; ++r) {
    if (!(w[static_cast<std::size_t>(r)] >= 0.0f)) {
      throw ContractError("soft_cross_entropy: negative or NaN row weight");
    }
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      const float t = ts[static_cast<std::size_t>(r) * c + j];
      if (!(t >= 0.0f)) throw ContractError("soft_cross_entropy: negative or NaN target");
      s += t;
    }
    if (std::abs(s - 1.0) > 1e-5) {
      throw ContractError("soft_cross_entropy: target row " + std::to_string(r) + " sums to " +
                          std::to_string(s));
    }
  }
  std::vector<float> logp(logits.numel());
  auto zs = logits.data();
  double loss = 0.0;
  for (int r = 0; r < b; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * c;
    log_softmax_row(zs.data() + o, c, logp.data() + o);
    if (w[static_cast<std::size_t>(r)] == 0.0f) continue;
    double row = 0.0;
    for (int j = 0; j < c; ++j) row -= static_cast<double>(ts[o + j]) * logp[o + j];
    loss += w[static_cast<std::size_t>(r)] * row;
  }
  Tensor out({1}, std::vector<float>{static_cast<float>(loss / b)});
  if (detail::needs_grad({&logits})) {
    auto zi = logits.impl();
    std::vector<float> t(ts.begin(), ts.end());
    detail::attach(out, "soft_cross_entropy", {zi},
                   [zi, b, c, w = std::move(w), logp = std::move(logp),
                    t = std::move(t)](std::span<const float> g) {
                     auto gz = zi->grad_buffer();
                     const float s = g[0] / static_cast<float>(b);
                     for (int r = 0; r < b; ++r) {
                       const float sw = s * w[static_cast<std::size_t>(r)];
                       if (sw == 0.0f) continue;
                       const std::size_t o = static_cast<std::size_t>(r) * c;
                       for (int j = 0; j < c; ++j) {
                         gz[o + j] += sw * (std::exp(logp[o + j]) - t[o + j]);
                       }
                     }
                   });
  }
  return out;
}

Tensor softmax(const Tensor& logits) {
  require_ndim(logits, 2, "softmax", "logits");
  const int b = logits.dim(0), c = logits.dim(1);
  Tensor out(logits.shape());
  auto zs = logits.data();
  auto ps = out.data();
  for (int r = 0; r < b; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * c;
    log_softmax_row(zs.data() + o, c, ps.data() + o);
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      ps[o + j] = std::exp(ps[o + j]);
      s += ps[o + j];
    }
    for (int j = 0; j < c; ++j) ps[o + j] = static_cast<float>(ps[o + j] / s);
  }
  return out;
}

}  // namespace tofa::ops
