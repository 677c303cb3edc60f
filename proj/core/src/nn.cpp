#include "segkit/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "segkit/autograd.hpp"
#include "segkit/error.hpp"
#include "segkit/ops.hpp"
#include "segkit/parallel.hpp"

namespace segkit::nn {

namespace {

struct Geometry {
  std::size_t n, c, h, w;
};

Geometry image_geometry(const Tensor& t, const char* op) {
  if (t.rank() != 4) {
    fail(Errc::kShapeMismatch, std::string(op) + " expects NCHW, got " + shape_str(t.shape()));
  }
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

std::size_t pad_before(std::size_t in, std::size_t out, std::size_t eff_kernel,
                       std::size_t stride, PaddingMode mode) {
  if (mode == PaddingMode::kValid) return 0;
  const std::size_t needed = (out - 1) * stride + eff_kernel;
  return needed > in ? (needed - in) / 2 : 0;
}

// Resolved convolution problem for one call.
struct ConvPlan {
  std::size_t n, c, h, w;
  std::size_t o, groups, cg, og;
  std::size_t kh, kw, stride, rate;
  std::size_t oh, ow, pt, pl;
  std::size_t k() const { return cg * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

ConvPlan plan_conv(const Tensor& input, const Tensor& weights, const Tensor& bias,
                   const ConvSpec& spec) {
  const Geometry g = image_geometry(input, "conv2d");
  if (weights.rank() != 4) fail(Errc::kShapeMismatch, "conv weights must be O x I x kh x kw");
  if (spec.stride == 0 || spec.dilation_rate == 0) fail(Errc::kShapeMismatch, "zero stride/rate");
  ConvPlan p{};
  p.n = g.n;
  p.c = g.c;
  p.h = g.h;
  p.w = g.w;
  p.o = weights.dim(0);
  p.groups = spec.depthwise ? g.c : std::max<std::size_t>(1, spec.groups);
  if (p.c % p.groups != 0 || p.o % p.groups != 0) {
    fail(Errc::kShapeMismatch, "channels not divisible by groups");
  }
  p.cg = p.c / p.groups;
  p.og = p.o / p.groups;
  if (weights.dim(1) != p.cg) {
    fail(Errc::kShapeMismatch, "input has " + std::to_string(p.c) + " channels, weights expect " +
                                   std::to_string(weights.dim(1) * p.groups));
  }
  if (spec.depthwise && p.o != p.c) fail(Errc::kShapeMismatch, "depthwise needs out == in");
  if (bias.defined() && bias.numel() != p.o) fail(Errc::kShapeMismatch, "bias length != out");
  p.kh = weights.dim(2);
  p.kw = weights.dim(3);
  p.stride = spec.stride;
  p.rate = spec.dilation_rate;
  p.oh = conv_output_size(p.h, p.kh, p.stride, p.rate, spec.padding);
  p.ow = conv_output_size(p.w, p.kw, p.stride, p.rate, spec.padding);
  p.pt = pad_before(p.h, p.oh, (p.kh - 1) * p.rate + 1, p.stride, spec.padding);
  p.pl = pad_before(p.w, p.ow, (p.kw - 1) * p.rate + 1, p.stride, spec.padding);
  return p;
}

// Source row/column of tap t for output coordinate o, or -1 when padded.
inline long tap(std::size_t o, std::size_t t, const ConvPlan& p, std::size_t pad, std::size_t lim) {
  const long v = static_cast<long>(o * p.stride + t * p.rate) - static_cast<long>(pad);
  return v >= 0 && v < static_cast<long>(lim) ? v : -1;
}

// col is K x P for image n, group gi.
void im2col(const double* x, const ConvPlan& p, std::size_t gi, std::vector<double>& col) {
  col.assign(p.k() * p.p(), 0.0);
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.cg; ++c) {
    const double* plane = x + (gi * p.cg + c) * p.h * p.w;
    for (std::size_t ky = 0; ky < p.kh; ++ky) {
      for (std::size_t kx = 0; kx < p.kw; ++kx, ++row) {
        double* dst = col.data() + row * p.p();
        for (std::size_t oy = 0; oy < p.oh; ++oy) {
          const long iy = tap(oy, ky, p, p.pt, p.h);
          if (iy < 0) continue;
          for (std::size_t ox = 0; ox < p.ow; ++ox) {
            const long ix = tap(ox, kx, p, p.pl, p.w);
            if (ix >= 0) dst[oy * p.ow + ox] = plane[iy * p.w + ix];
          }
        }
      }
    }
  }
}

void col2im(const std::vector<double>& col, const ConvPlan& p, std::size_t gi, double* gx) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.cg; ++c) {
    double* plane = gx + (gi * p.cg + c) * p.h * p.w;
    for (std::size_t ky = 0; ky < p.kh; ++ky) {
      for (std::size_t kx = 0; kx < p.kw; ++kx, ++row) {
        const double* src = col.data() + row * p.p();
        for (std::size_t oy = 0; oy < p.oh; ++oy) {
          const long iy = tap(oy, ky, p, p.pt, p.h);
          if (iy < 0) continue;
          for (std::size_t ox = 0; ox < p.ow; ++ox) {
            const long ix = tap(ox, kx, p, p.pl, p.w);
            if (ix >= 0) plane[iy * p.w + ix] += src[oy * p.ow + ox];
          }
        }
      }
    }
  }
}

std::vector<double> conv_forward_raw(std::span<const double> x, std::span<const double> wt,
                                     const double* bias, const ConvPlan& p) {
  std::vector<double> out(p.n * p.o * p.p(), 0.0);
  const std::size_t K = p.k(), P = p.p();
  parallel_for(p.n, [&](std::size_t n) {
    std::vector<double> col;
    const double* xn = x.data() + n * p.c * p.h * p.w;
    for (std::size_t gi = 0; gi < p.groups; ++gi) {
      im2col(xn, p, gi, col);
      for (std::size_t oo = 0; oo < p.og; ++oo) {
        const std::size_t o = gi * p.og + oo;
        double* dst = out.data() + (n * p.o + o) * P;
        const double* wrow = wt.data() + o * K;
        for (std::size_t k = 0; k < K; ++k) {
          const double v = wrow[k];
          const double* src = col.data() + k * P;
          for (std::size_t q = 0; q < P; ++q) dst[q] += v * src[q];
        }
        if (bias) {
          for (std::size_t q = 0; q < P; ++q) dst[q] += bias[o];
        }
      }
    }
  });
  return out;
}

// Accumulates input/weight/bias gradients of a convolution.
void conv_backward_raw(std::span<const double> g, std::span<const double> x,
                       std::span<const double> wt, const ConvPlan& p, std::vector<double>* gx,
                       std::vector<double>* gw, std::vector<double>* gb) {
  const std::size_t K = p.k(), P = p.p();
  if (gb) {
    for (std::size_t n = 0; n < p.n; ++n)
      for (std::size_t o = 0; o < p.o; ++o) {
        const double* src = g.data() + (n * p.o + o) * P;
        double acc = 0.0;
        for (std::size_t q = 0; q < P; ++q) acc += src[q];
        (*gb)[o] += acc;
      }
  }
  if (gw) {
    std::vector<double> col;
    for (std::size_t n = 0; n < p.n; ++n) {
      const double* xn = x.data() + n * p.c * p.h * p.w;
      for (std::size_t gi = 0; gi < p.groups; ++gi) {
        im2col(xn, p, gi, col);
        for (std::size_t oo = 0; oo < p.og; ++oo) {
          const std::size_t o = gi * p.og + oo;
          const double* go = g.data() + (n * p.o + o) * P;
          for (std::size_t k = 0; k < K; ++k) {
            const double* src = col.data() + k * P;
            double acc = 0.0;
            for (std::size_t q = 0; q < P; ++q) acc += go[q] * src[q];
            (*gw)[o * K + k] += acc;
          }
        }
      }
    }
  }
  if (gx) {
    parallel_for(p.n, [&](std::size_t n) {
      std::vector<double> gcol(K * P);
      double* gxn = gx->data() + n * p.c * p.h * p.w;
      for (std::size_t gi = 0; gi < p.groups; ++gi) {
        std::fill(gcol.begin(), gcol.end(), 0.0);
        for (std::size_t k = 0; k < K; ++k) {
          double* dst = gcol.data() + k * P;
          for (std::size_t oo = 0; oo < p.og; ++oo) {
            const std::size_t o = gi * p.og + oo;
            const double v = wt[o * K + k];
            const double* go = g.data() + (n * p.o + o) * P;
            for (std::size_t q = 0; q < P; ++q) dst[q] += v * go[q];
          }
        }
        col2im(gcol, p, gi, gxn);
      }
    });
  }
}

Tensor record_conv(std::string_view name, Tensor result, const Tensor& input,
                   const Tensor& weights, const Tensor& bias, const ConvPlan& p) {
  if (!autograd::participates(input) && !autograd::participates(weights) &&
      !autograd::participates(bias)) {
    return result;
  }
  Tensor sx = input.detach();
  Tensor sw = weights.detach();
  return autograd::record(
      name, std::move(result), {&input, &weights, bias.defined() ? &bias : nullptr},
      [sx, sw, p](std::span<const double> g, std::span<std::vector<double>*> gi) {
        conv_backward_raw(g, sx.data(), sw.data(), p, gi[0], gi[1], gi[2]);
      });
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t rate, PaddingMode mode) {
  const std::size_t eff = (kernel - 1) * rate + 1;
  if (mode == PaddingMode::kSame) return (in + stride - 1) / stride;
  if (in < eff) {
    fail(Errc::kKernelTooLarge, "effective kernel " + std::to_string(eff) + " exceeds extent " +
                                    std::to_string(in));
  }
  return (in - eff) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
              const ConvSpec& spec) {
  const ConvPlan p = plan_conv(input, weights, bias, spec);
  std::vector<double> out =
      conv_forward_raw(input.data(), weights.data(), bias.defined() ? bias.data().data() : nullptr, p);
  Tensor result = Tensor::from_vector({p.n, p.o, p.oh, p.ow}, std::move(out));
  return record_conv("conv2d", std::move(result), input, weights, bias, p);
}

Tensor conv2d_standard(const Tensor& input, const Tensor& weights, const Tensor& bias,
                       const ConvSpec& spec) {
  if (spec.dilation_rate != 1) {
    fail(Errc::kShapeMismatch, "standard convolution has no dilation");
  }
  const ConvPlan p = plan_conv(input, weights, bias, spec);
  const auto x = input.data();
  const auto wt = weights.data();
  const double* b = bias.defined() ? bias.data().data() : nullptr;
  std::vector<double> out(p.n * p.o * p.p());
  for (std::size_t n = 0; n < p.n; ++n) {
    for (std::size_t o = 0; o < p.o; ++o) {
      const std::size_t gi = o / p.og;
      for (std::size_t oy = 0; oy < p.oh; ++oy) {
        for (std::size_t ox = 0; ox < p.ow; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < p.cg; ++c) {
            const double* plane = x.data() + (n * p.c + gi * p.cg + c) * p.h * p.w;
            for (std::size_t ky = 0; ky < p.kh; ++ky) {
              const long iy = static_cast<long>(oy * p.stride + ky) - static_cast<long>(p.pt);
              for (std::size_t kx = 0; kx < p.kw; ++kx) {
                const long ix = static_cast<long>(ox * p.stride + kx) - static_cast<long>(p.pl);
                const bool inside = iy >= 0 && iy < static_cast<long>(p.h) && ix >= 0 &&
                                    ix < static_cast<long>(p.w);
                const double v = inside ? plane[iy * static_cast<long>(p.w) + ix] : 0.0;
                acc += wt[((o * p.cg + c) * p.kh + ky) * p.kw + kx] * v;
              }
            }
          }
          if (b) acc += b[o];
          out[((n * p.o + o) * p.oh + oy) * p.ow + ox] = acc;
        }
      }
    }
  }
  Tensor result = Tensor::from_vector({p.n, p.o, p.oh, p.ow}, std::move(out));
  return record_conv("conv2d_standard", std::move(result), input, weights, bias, p);
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
                        const ConvSpec& spec) {
  const Geometry g = image_geometry(input, "depthwise_conv2d");
  if (weights.rank() != 4 || weights.dim(0) != g.c || weights.dim(1) != 1) {
    fail(Errc::kShapeMismatch, "depthwise weights must be C x 1 x kh x kw with C = " +
                                   std::to_string(g.c) + ", got " + shape_str(weights.shape()));
  }
  if (bias.defined() && bias.numel() != g.c) fail(Errc::kShapeMismatch, "bias length != C");
  ConvSpec s = spec;
  s.depthwise = true;
  s.out_channels = g.c;
  const ConvPlan p = plan_conv(input, weights, bias, s);
  const auto x = input.data();
  const auto wt = weights.data();
  const double* b = bias.defined() ? bias.data().data() : nullptr;
  const std::size_t taps = p.kh * p.kw;

  std::vector<double> out(p.n * p.c * p.p());
  parallel_for(p.n * p.c, [&](std::size_t nc) {
    const std::size_t c = nc % p.c;
    const double* plane = x.data() + nc * p.h * p.w;
    double* dst = out.data() + nc * p.p();
    for (std::size_t oy = 0; oy < p.oh; ++oy)
      for (std::size_t ox = 0; ox < p.ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < p.kh; ++ky) {
          const long iy = tap(oy, ky, p, p.pt, p.h);
          for (std::size_t kx = 0; kx < p.kw; ++kx) {
            const long ix = tap(ox, kx, p, p.pl, p.w);
            const double v = iy >= 0 && ix >= 0 ? plane[iy * p.w + ix] : 0.0;
            acc += wt[c * taps + ky * p.kw + kx] * v;
          }
        }
        if (b) acc += b[c];
        dst[oy * p.ow + ox] = acc;
      }
  });
  Tensor result = Tensor::from_vector({p.n, p.c, p.oh, p.ow}, std::move(out));
  if (!autograd::participates(input) && !autograd::participates(weights) &&
      !autograd::participates(bias)) {
    return result;
  }
  Tensor sx = input.detach();
  Tensor sw = weights.detach();
  return autograd::record(
      "depthwise_conv2d", std::move(result), {&input, &weights, bias.defined() ? &bias : nullptr},
      [sx, sw, p, taps](std::span<const double> g, std::span<std::vector<double>*> gi) {
        const auto x = sx.data();
        const auto wt = sw.data();
        for (std::size_t nc = 0; nc < p.n * p.c; ++nc) {
          const std::size_t c = nc % p.c;
          const double* plane = x.data() + nc * p.h * p.w;
          const double* go = g.data() + nc * p.p();
          for (std::size_t oy = 0; oy < p.oh; ++oy)
            for (std::size_t ox = 0; ox < p.ow; ++ox) {
              const double gv = go[oy * p.ow + ox];
              if (gi[2]) (*gi[2])[c] += gv;
              for (std::size_t ky = 0; ky < p.kh; ++ky) {
                const long iy = tap(oy, ky, p, p.pt, p.h);
                if (iy < 0) continue;
                for (std::size_t kx = 0; kx < p.kw; ++kx) {
                  const long ix = tap(ox, kx, p, p.pl, p.w);
                  if (ix < 0) continue;
                  const std::size_t src = iy * p.w + ix;
                  const std::size_t wi = c * taps + ky * p.kw + kx;
                  if (gi[0]) (*gi[0])[nc * p.h * p.w + src] += gv * wt[wi];
                  if (gi[1]) (*gi[1])[wi] += gv * plane[src];
                }
              }
            }
        }
      });
}

Tensor transposed_conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
                         std::size_t stride) {
  const Geometry g = image_geometry(input, "transposed_conv2d");
  if (stride == 0) fail(Errc::kShapeMismatch, "stride must be >= 1");
  if (weights.rank() != 4 || weights.dim(0) != g.c) {
    fail(Errc::kShapeMismatch, "transposed weights must be I x O x kh x kw with I = " +
                                   std::to_string(g.c) + ", got " + shape_str(weights.shape()));
  }
  const std::size_t o_ch = weights.dim(1), kh = weights.dim(2), kw = weights.dim(3);
  if (bias.defined() && bias.numel() != o_ch) fail(Errc::kShapeMismatch, "bias length != O");
  const std::size_t oh = (g.h - 1) * stride + kh;
  const std::size_t ow = (g.w - 1) * stride + kw;
  const auto x = input.data();
  const auto wt = weights.data();
  std::vector<double> out(g.n * o_ch * oh * ow, 0.0);
  parallel_for(g.n, [&](std::size_t n) {
    for (std::size_t i = 0; i < g.c; ++i) {
      const double* plane = x.data() + (n * g.c + i) * g.h * g.w;
      for (std::size_t o = 0; o < o_ch; ++o) {
        double* dst = out.data() + (n * o_ch + o) * oh * ow;
        const double* k = wt.data() + (i * o_ch + o) * kh * kw;
        for (std::size_t y = 0; y < g.h; ++y)
          for (std::size_t xx = 0; xx < g.w; ++xx) {
            const double v = plane[y * g.w + xx];
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx)
                dst[(y * stride + ky) * ow + xx * stride + kx] += v * k[ky * kw + kx];
          }
      }
    }
    if (bias.defined()) {
      for (std::size_t o = 0; o < o_ch; ++o) {
        double* dst = out.data() + (n * o_ch + o) * oh * ow;
        for (std::size_t q = 0; q < oh * ow; ++q) dst[q] += bias[o];
      }
    }
  });
  Tensor result = Tensor::from_vector({g.n, o_ch, oh, ow}, std::move(out));
  if (!autograd::participates(input) && !autograd::participates(weights) &&
      !autograd::participates(bias)) {
    return result;
  }
  Tensor sx = input.detach();
  Tensor sw = weights.detach();
  // The input gradient is the forward convolution of the upstream gradient
  // with the same weights read as I x O x kh x kw.
  ConvPlan adj{};
  adj.n = g.n;
  adj.c = o_ch;
  adj.h = oh;
  adj.w = ow;
  adj.o = g.c;
  adj.groups = 1;
  adj.cg = o_ch;
  adj.og = g.c;
  adj.kh = kh;
  adj.kw = kw;
  adj.stride = stride;
  adj.rate = 1;
  adj.oh = g.h;
  adj.ow = g.w;
  return autograd::record(
      "transposed_conv2d", std::move(result), {&input, &weights, bias.defined() ? &bias : nullptr},
      [sx, sw, adj](std::span<const double> g, std::span<std::vector<double>*> gi) {
        // Roles swap: the adjoint convolution's "input" is g, its weight
        // gradient pairs g's patches with the original input x.
        if (gi[0]) {
          std::vector<double> gx = conv_forward_raw(g, sw.data(), nullptr, adj);
          for (std::size_t i = 0; i < gx.size(); ++i) (*gi[0])[i] += gx[i];
        }
        if (gi[1] || gi[2]) {
          std::vector<double> gw_tmp(sw.numel(), 0.0);
          std::vector<double> gb_tmp(adj.c, 0.0);
          // d/dW of sum_o <g, conv(x)>: the adjoint conv maps g -> x-shape with
          // weight W[i][o], so dL/dW[i][o] = sum g_patch[o] * x[i].
          conv_backward_raw(sx.data(), g, sw.data(), adj, nullptr, gi[1] ? &gw_tmp : nullptr,
                            nullptr);
          if (gi[1])
            for (std::size_t i = 0; i < gw_tmp.size(); ++i) (*gi[1])[i] += gw_tmp[i];
          if (gi[2]) {
            const std::size_t plane = adj.h * adj.w;
            for (std::size_t n = 0; n < adj.n; ++n)
              for (std::size_t o = 0; o < adj.c; ++o) {
                double acc = 0.0;
                for (std::size_t q = 0; q < plane; ++q) acc += g[(n * adj.c + o) * plane + q];
                (*gi[2])[o] += acc;
              }
          }
        }
      });
}

Tensor pool2d(PoolKind kind, const Tensor& input, const PoolSpec& spec) {
  const Geometry g = image_geometry(input, "pool2d");
  if (spec.window == 0 || spec.stride == 0) fail(Errc::kShapeMismatch, "zero window/stride");
  if (spec.padding == PaddingMode::kValid && (spec.window > g.h || spec.window > g.w)) {
    fail(Errc::kShapeMismatch, "pool window " + std::to_string(spec.window) + " exceeds " +
                                   std::to_string(g.h) + "x" + std::to_string(g.w));
  }
  const std::size_t oh = conv_output_size(g.h, spec.window, spec.stride, 1, spec.padding);
  const std::size_t ow = conv_output_size(g.w, spec.window, spec.stride, 1, spec.padding);
  const std::size_t pt = pad_before(g.h, oh, spec.window, spec.stride, spec.padding);
  const std::size_t pl = pad_before(g.w, ow, spec.window, spec.stride, spec.padding);
  const auto x = input.data();
  const std::size_t planes = g.n * g.c;
  std::vector<double> out(planes * oh * ow);
  // For max: flat source index of the winner; for average: unused.
  std::vector<std::size_t> winner(kind == PoolKind::kMax ? out.size() : 0);
  std::vector<double> counts(kind == PoolKind::kAverage ? oh * ow : 0);

  auto range = [](std::size_t o, std::size_t stride, std::size_t pad, std::size_t win,
                  std::size_t lim) {
    const long lo = static_cast<long>(o * stride) - static_cast<long>(pad);
    const long hi = lo + static_cast<long>(win);
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(std::max(0L, lo)),
                                               static_cast<std::size_t>(std::min<long>(hi, lim)));
  };

  for (std::size_t q = 0; q < planes; ++q) {
    const double* plane = x.data() + q * g.h * g.w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto [y0, y1] = range(oy, spec.stride, pt, spec.window, g.h);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto [x0, x1] = range(ox, spec.stride, pl, spec.window, g.w);
        const std::size_t oi = (q * oh + oy) * ow + ox;
        if (kind == PoolKind::kMax) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t arg = y0 * g.w + x0;
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t xx = x0; xx < x1; ++xx)
              if (plane[y * g.w + xx] > best) {
                best = plane[y * g.w + xx];
                arg = y * g.w + xx;
              }
          out[oi] = best;
          winner[oi] = q * g.h * g.w + arg;
        } else {
          double acc = 0.0;
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t xx = x0; xx < x1; ++xx) acc += plane[y * g.w + xx];
          const double cnt = static_cast<double>((y1 - y0) * (x1 - x0));
          out[oi] = acc / cnt;
          if (q == 0) counts[oy * ow + ox] = cnt;
        }
      }
    }
  }
  Tensor result = Tensor::from_vector({g.n, g.c, oh, ow}, std::move(out));
  if (kind == PoolKind::kMax) {
    return autograd::record(
        "max_pool2d", std::move(result), {&input},
        [winner = std::move(winner)](std::span<const double> grad,
                                     std::span<std::vector<double>*> gi) {
          auto& ga = *gi[0];
          for (std::size_t i = 0; i < grad.size(); ++i) ga[winner[i]] += grad[i];
        });
  }
  return autograd::record(
      "avg_pool2d", std::move(result), {&input},
      [g, spec, oh, ow, pt, pl, range, counts = std::move(counts)](
          std::span<const double> grad, std::span<std::vector<double>*> gi) {
        auto& ga = *gi[0];
        for (std::size_t q = 0; q < g.n * g.c; ++q)
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto [y0, y1] = range(oy, spec.stride, pt, spec.window, g.h);
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto [x0, x1] = range(ox, spec.stride, pl, spec.window, g.w);
              const double share = grad[(q * oh + oy) * ow + ox] / counts[oy * ow + ox];
              for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t xx = x0; xx < x1; ++xx) ga[(q * g.h + y) * g.w + xx] += share;
            }
          }
      });
}

Tensor pool2d(PoolKind kind, const Tensor& input, std::size_t window, std::size_t stride) {
  return pool2d(kind, input, PoolSpec{window, stride, PaddingMode::kValid});
}

Tensor adaptive_avg_pool(const Tensor& input, std::size_t bins) {
  const Geometry g = image_geometry(input, "adaptive_avg_pool");
  if (bins == 0 || bins > g.h || bins > g.w) {
    fail(Errc::kBinTooMany, std::to_string(bins) + " bins for a " + std::to_string(g.h) + "x" +
                                std::to_string(g.w) + " map");
  }
  auto edge = [bins](std::size_t i, std::size_t extent) { return i * extent / bins; };
  const auto x = input.data();
  const std::size_t planes = g.n * g.c;
  std::vector<double> out(planes * bins * bins);
  for (std::size_t q = 0; q < planes; ++q)
    for (std::size_t by = 0; by < bins; ++by)
      for (std::size_t bx = 0; bx < bins; ++bx) {
        double acc = 0.0;
        const std::size_t y0 = edge(by, g.h), y1 = edge(by + 1, g.h);
        const std::size_t x0 = edge(bx, g.w), x1 = edge(bx + 1, g.w);
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += x[(q * g.h + y) * g.w + xx];
        out[(q * bins + by) * bins + bx] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  Tensor result = Tensor::from_vector({g.n, g.c, bins, bins}, std::move(out));
  return autograd::record(
      "adaptive_avg_pool", std::move(result), {&input},
      [g, bins, edge](std::span<const double> grad, std::span<std::vector<double>*> gi) {
        auto& ga = *gi[0];
        for (std::size_t q = 0; q < g.n * g.c; ++q)
          for (std::size_t by = 0; by < bins; ++by)
            for (std::size_t bx = 0; bx < bins; ++bx) {
              const std::size_t y0 = edge(by, g.h), y1 = edge(by + 1, g.h);
              const std::size_t x0 = edge(bx, g.w), x1 = edge(bx + 1, g.w);
              const double share = grad[(q * bins + by) * bins + bx] /
                                   static_cast<double>((y1 - y0) * (x1 - x0));
              for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t xx = x0; xx < x1; ++xx) ga[(q * g.h + y) * g.w + xx] += share;
            }
      });
}

BatchNormState BatchNormState::identity(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor::full({channels}, 1.0);
  s.beta = Tensor::zeros({channels});
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  return s;
}

Tensor batch_norm(const Tensor& input, BatchNormState& state, bool training) {
  const Geometry g = image_geometry(input, "batch_norm");
  if (state.gamma.numel() != g.c || state.beta.numel() != g.c ||
      state.running_mean.size() != g.c || state.running_var.size() != g.c) {
    fail(Errc::kShapeMismatch, "batch norm state does not match " + std::to_string(g.c) +
                                   " channels");
  }
  const std::size_t plane = g.h * g.w;
  const std::size_t m = g.n * plane;
  const auto x = input.data();
  std::vector<double> mean(g.c, 0.0), inv_std(g.c, 0.0);
  for (std::size_t c = 0; c < g.c; ++c) {
    if (training) {
      double s = 0.0;
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t q = 0; q < plane; ++q) s += x[(n * g.c + c) * plane + q];
      const double mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t q = 0; q < plane; ++q) {
          const double d = x[(n * g.c + c) * plane + q] - mu;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(m);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.epsilon);
      // The running variance tracks the same (biased) batch variance used for
      // normalisation, so inference matches training on tiny feature maps.
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * var;
    } else {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.epsilon);
    }
  }
  const auto gamma = state.gamma.data();
  const auto beta = state.beta.data();
  std::vector<double> xhat(input.numel()), out(input.numel());
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.c; ++c)
      for (std::size_t q = 0; q < plane; ++q) {
        const std::size_t i = (n * g.c + c) * plane + q;
        xhat[i] = (x[i] - mean[c]) * inv_std[c];
        out[i] = gamma[c] * xhat[i] + beta[c];
      }
  Tensor result = Tensor::from_vector(input.shape(), std::move(out));
  if (!autograd::participates(input) && !autograd::participates(state.gamma) &&
      !autograd::participates(state.beta)) {
    return result;
  }
  Tensor sg = state.gamma.detach();
  return autograd::record(
      training ? "batch_norm_train" : "batch_norm_eval", std::move(result),
      {&input, &state.gamma, &state.beta},
      [g, plane, m, training, sg, inv_std, xhat = std::move(xhat)](
          std::span<const double> grad, std::span<std::vector<double>*> gi) {
        const auto gamma = sg.data();
        for (std::size_t c = 0; c < g.c; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t q = 0; q < plane; ++q) {
              const std::size_t i = (n * g.c + c) * plane + q;
              sum_g += grad[i];
              sum_gx += grad[i] * xhat[i];
            }
          if (gi[1]) (*gi[1])[c] += sum_gx;
          if (gi[2]) (*gi[2])[c] += sum_g;
          if (!gi[0]) continue;
          const double k = gamma[c] * inv_std[c];
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t q = 0; q < plane; ++q) {
              const std::size_t i = (n * g.c + c) * plane + q;
              (*gi[0])[i] += training
                                 ? k * (grad[i] - inv_m * sum_g - xhat[i] * inv_m * sum_gx)
                                 : k * grad[i];
            }
        }
      });
}

namespace {

struct AxisWeights {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

AxisWeights bilinear_axis(std::size_t in, std::size_t out) {
  AxisWeights a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    a.lo[d] = i0;
    a.hi[d] = std::min(i0 + 1, in - 1);
    a.frac[d] = a.hi[d] == i0 ? 0.0 : src - static_cast<double>(i0);
  }
  return a;
}

}  // namespace

Tensor resize_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  const Geometry g = image_geometry(input, "resize_bilinear");
  if (out_h == 0 || out_w == 0) fail(Errc::kShapeMismatch, "empty resize target");
  const AxisWeights ay = bilinear_axis(g.h, out_h);
  const AxisWeights ax = bilinear_axis(g.w, out_w);
  const auto x = input.data();
  const std::size_t planes = g.n * g.c;
  std::vector<double> out(planes * out_h * out_w);
  for (std::size_t q = 0; q < planes; ++q) {
    const double* src = x.data() + q * g.h * g.w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const double fy = ay.frac[y];
      const double* r0 = src + ay.lo[y] * g.w;
      const double* r1 = src + ay.hi[y] * g.w;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const double fx = ax.frac[xx];
        const double top = r0[ax.lo[xx]] * (1.0 - fx) + r0[ax.hi[xx]] * fx;
        const double bot = r1[ax.lo[xx]] * (1.0 - fx) + r1[ax.hi[xx]] * fx;
        out[(q * out_h + y) * out_w + xx] = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  Tensor result = Tensor::from_vector({g.n, g.c, out_h, out_w}, std::move(out));
  return autograd::record(
      "resize_bilinear", std::move(result), {&input},
      [g, out_h, out_w, ay, ax](std::span<const double> grad, std::span<std::vector<double>*> gi) {
        auto& ga = *gi[0];
        for (std::size_t q = 0; q < g.n * g.c; ++q) {
          double* dst = ga.data() + q * g.h * g.w;
          for (std::size_t y = 0; y < out_h; ++y) {
            const double fy = ay.frac[y];
            for (std::size_t xx = 0; xx < out_w; ++xx) {
              const double fx = ax.frac[xx];
              const double v = grad[(q * out_h + y) * out_w + xx];
              dst[ay.lo[y] * g.w + ax.lo[xx]] += v * (1.0 - fy) * (1.0 - fx);
              dst[ay.lo[y] * g.w + ax.hi[xx]] += v * (1.0 - fy) * fx;
              dst[ay.hi[y] * g.w + ax.lo[xx]] += v * fy * (1.0 - fx);
              dst[ay.hi[y] * g.w + ax.hi[xx]] += v * fy * fx;
            }
          }
        }
      });
}

Tensor bilinear_upsample(const Tensor& input, std::size_t scale_factor) {
  if (scale_factor != 2 && scale_factor != 4 && scale_factor != 8) {
    fail(Errc::kShapeMismatch, "bilinear scale must be 2, 4 or 8");
  }
  const Geometry g = image_geometry(input, "bilinear_upsample");
  return resize_bilinear(input, g.h * scale_factor, g.w * scale_factor);
}

Tensor nearest_upsample(const Tensor& input, std::size_t scale) {
  const Geometry g = image_geometry(input, "nearest_upsample");
  if (scale == 0) fail(Errc::kShapeMismatch, "scale must be >= 1");
  const std::size_t oh = g.h * scale, ow = g.w * scale;
  const auto x = input.data();
  std::vector<double> out(g.n * g.c * oh * ow);
  for (std::size_t q = 0; q < g.n * g.c; ++q)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out[(q * oh + y) * ow + xx] = x[(q * g.h + y / scale) * g.w + xx / scale];
  Tensor result = Tensor::from_vector({g.n, g.c, oh, ow}, std::move(out));
  return autograd::record(
      "nearest_upsample", std::move(result), {&input},
      [g, scale, oh, ow](std::span<const double> grad, std::span<std::vector<double>*> gi) {
        auto& ga = *gi[0];
        for (std::size_t q = 0; q < g.n * g.c; ++q)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx)
              ga[(q * g.h + y / scale) * g.w + xx / scale] += grad[(q * oh + y) * ow + xx];
      });
}

namespace {

template <class Fwd, class Bwd>
Tensor pointwise(std::string_view name, const Tensor& a, Fwd fwd, Bwd bwd) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor result = Tensor::from_vector(a.shape(), std::move(out));
  if (!autograd::participates(a)) return result;
  Tensor sx = a.detach();
  Tensor sy = result.detach();
  return autograd::record(name, std::move(result), {&a},
                          [sx, sy, bwd](std::span<const double> g,
                                        std::span<std::vector<double>*> gi) {
                            auto& ga = *gi[0];
                            const auto x = sx.data();
                            const auto y = sy.data();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(x[i], y[i]);
                          });
}

}  // namespace

Tensor sigmoid(const Tensor& input) {
  return pointwise(
      "sigmoid", input,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& input) {
  return pointwise(
      "relu", input, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& input) {
  return pointwise(
      "leaky_relu", input, [](double x) { return x > 0.0 ? x : kLeakySlope * x; },
      [](double x, double) { return x > 0.0 ? 1.0 : kLeakySlope; });
}

Tensor tanh(const Tensor& input) {
  return pointwise(
      "tanh", input, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax_channel(const Tensor& input) {
  const Geometry g = image_geometry(input, "softmax_channel");
  const std::size_t plane = g.h * g.w;
  const auto x = input.data();
  std::vector<double> out(input.numel());
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t q = 0; q < plane; ++q) {
      const std::size_t base = n * g.c * plane + q;
      double mx = x[base];
      for (std::size_t c = 1; c < g.c; ++c) mx = std::max(mx, x[base + c * plane]);
      double z = 0.0;
      for (std::size_t c = 0; c < g.c; ++c) {
        const double e = std::exp(x[base + c * plane] - mx);
        out[base + c * plane] = e;
        z += e;
      }
      for (std::size_t c = 0; c < g.c; ++c) out[base + c * plane] /= z;
    }
  Tensor result = Tensor::from_vector(input.shape(), std::move(out));
  if (!autograd::participates(input)) return result;
  Tensor sy = result.detach();
  return autograd::record(
      "softmax_channel", std::move(result), {&input},
      [g, plane, sy](std::span<const double> grad, std::span<std::vector<double>*> gi) {
        auto& ga = *gi[0];
        const auto y = sy.data();
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t q = 0; q < plane; ++q) {
            const std::size_t base = n * g.c * plane + q;
            double dot = 0.0;
            for (std::size_t c = 0; c < g.c; ++c) dot += grad[base + c * plane] * y[base + c * plane];
            for (std::size_t c = 0; c < g.c; ++c) {
              const std::size_t i = base + c * plane;
              ga[i] += y[i] * (grad[i] - dot);
            }
          }
      });
}

Tensor activation(Activation kind, const Tensor& input) {
  switch (kind) {
    case Activation::kIdentity: return input;
    case Activation::kSigmoid: return sigmoid(input);
    case Activation::kRelu: return relu(input);
    case Activation::kLeakyRelu: return leaky_relu(input);
    case Activation::kTanh: return tanh(input);
    case Activation::kSoftmaxChannel: return softmax_channel(input);
  }
  return input;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias, Activation act) {
  if (input.rank() != 2 || weights.rank() != 2 || input.dim(1) != weights.dim(0)) {
    fail(Errc::kShapeMismatch, "dense " + shape_str(input.shape()) + " x " +
                                   shape_str(weights.shape()));
  }
  Tensor z = ops::matmul(input, weights);
  if (bias.defined()) {
    if (bias.numel() != weights.dim(1)) fail(Errc::kShapeMismatch, "dense bias length");
    z = ops::add(z, ops::reshape(bias, {bias.numel()}));
  }
  return activation(act, z);
}

std::vector<int> argmax_channel(const Tensor& input) {
  const Geometry g = image_geometry(input, "argmax_channel");
  const std::size_t plane = g.h * g.w;
  const auto x = input.data();
  std::vector<int> labels(g.n * plane);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t q = 0; q < plane; ++q) {
      const std::size_t base = n * g.c * plane + q;
      std::size_t best = 0;
      for (std::size_t c = 1; c < g.c; ++c)
        if (x[base + c * plane] > x[base + best * plane]) best = c;
      labels[n * plane + q] = static_cast<int>(best);
    }
  return labels;
}

}  // namespace segkit::nn
