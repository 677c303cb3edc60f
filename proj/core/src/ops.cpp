#include "segkit/ops.hpp"

#include <algorithm>
#include <cmath>

#include "segkit/autograd.hpp"
#include "segkit/error.hpp"

namespace segkit::ops {

namespace {

// Flat index into b for every flat index of a, or empty when shapes match.
std::vector<std::size_t> broadcast_index(const Shape& a, const Shape& b) {
  if (a == b) return {};
  if (b.size() > a.size()) {
    fail(Errc::kShapeMismatch, shape_str(b) + " does not broadcast to " + shape_str(a));
  }
  const std::size_t offset = a.size() - b.size();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != a[offset + i] && b[i] != 1) {
      fail(Errc::kShapeMismatch, shape_str(b) + " does not broadcast to " + shape_str(a));
    }
  }
  const auto b_strides = row_major_strides(b);
  std::vector<std::size_t> stride(a.size(), 0);
  for (std::size_t i = 0; i < b.size(); ++i) {
    stride[offset + i] = b[i] == 1 ? 0 : b_strides[i];
  }
  const std::size_t n = shape_numel(a);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(a.size(), 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = pos;
    for (std::size_t ax = a.size(); ax-- > 0;) {
      ++idx[ax];
      pos += stride[ax];
      if (idx[ax] < a[ax]) break;
      pos -= stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

double guard_denominator(double d) {
  if (std::abs(d) >= kDivisionGuard) return d;
  return std::signbit(d) ? -kDivisionGuard : kDivisionGuard;
}

template <class Fwd, class Bwd>
Tensor unary(std::string_view name, const Tensor& a, Fwd fwd, Bwd bwd) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor result = Tensor::from_vector(a.shape(), std::move(out));
  if (!autograd::participates(a)) return result;
  Tensor saved_in = a.detach();
  Tensor saved_out = result.detach();
  return autograd::record(name, std::move(result), {&a},
                          [saved_in, saved_out, bwd](std::span<const double> g,
                                                     std::span<std::vector<double>*> gi) {
                            auto& ga = *gi[0];
                            const auto x = saved_in.data();
                            const auto y = saved_out.data();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(x[i], y[i]);
                          });
}

}  // namespace

Tensor elementwise(Binary kind, const Tensor& a, const Tensor& b) {
  const auto map = broadcast_index(a.shape(), b.shape());
  const auto x = a.data();
  const auto y = b.data();
  auto bi = [&map](std::size_t i) { return map.empty() ? i : map[i]; };
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = x[i];
    const double v = y[bi(i)];
    switch (kind) {
      case Binary::kAdd: out[i] = u + v; break;
      case Binary::kSub: out[i] = u - v; break;
      case Binary::kMul: out[i] = u * v; break;
      case Binary::kDiv: out[i] = u / guard_denominator(v); break;
      case Binary::kMax: out[i] = u >= v ? u : v; break;
    }
  }
  Tensor result = Tensor::from_vector(a.shape(), std::move(out));
  if (!autograd::participates(a) && !autograd::participates(b)) return result;

  static constexpr std::string_view kNames[] = {"add", "sub", "mul", "div", "max"};
  Tensor sa = a.detach();
  Tensor sb = b.detach();
  return autograd::record(
      kNames[static_cast<int>(kind)], std::move(result), {&a, &b},
      [kind, sa, sb, map](std::span<const double> g, std::span<std::vector<double>*> gi) {
        const auto x = sa.data();
        const auto y = sb.data();
        auto* ga = gi[0];
        auto* gb = gi[1];
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t j = map.empty() ? i : map[i];
          double da = 0.0;
          double db = 0.0;
          switch (kind) {
            case Binary::kAdd: da = g[i]; db = g[i]; break;
            case Binary::kSub: da = g[i]; db = -g[i]; break;
            case Binary::kMul: da = g[i] * y[j]; db = g[i] * x[i]; break;
            case Binary::kDiv: {
              const double d = guard_denominator(y[j]);
              da = g[i] / d;
              db = std::abs(y[j]) >= kDivisionGuard ? -g[i] * x[i] / (d * d) : 0.0;
              break;
            }
            case Binary::kMax:
              if (x[i] >= y[j]) da = g[i]; else db = g[i];
              break;
          }
          if (ga) (*ga)[i] += da;
          if (gb) (*gb)[j] += db;
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Binary::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Binary::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Binary::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(Binary::kDiv, a, b); }
Tensor maximum(const Tensor& a, const Tensor& b) { return elementwise(Binary::kMax, a, b); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      "add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_clamped(const Tensor& a) {
  return unary(
      "log", a,
      [](double x) { return std::log(std::clamp(x, kLogGuard, 1.0 - kLogGuard)); },
      [](double x, double) { return x < kLogGuard || x > 1.0 - kLogGuard ? 0.0 : 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor result = Tensor::scalar(total);
  const std::size_t n = a.numel();
  return autograd::record("sum", std::move(result), {&a},
                          [n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                            auto& ga = *gi[0];
                            for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
                          });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(Errc::kShapeMismatch, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double v = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += v * y[p * n + j];
    }
  }
  Tensor result = Tensor::from_vector({m, n}, std::move(out));
  if (!autograd::participates(a) && !autograd::participates(b)) return result;
  Tensor sa = a.detach();
  Tensor sb = b.detach();
  return autograd::record(
      "matmul", std::move(result), {&a, &b},
      [sa, sb, m, k, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
        const auto x = sa.data();
        const auto y = sb.data();
        if (auto* ga = gi[0]) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
              (*ga)[i * k + p] += acc;
            }
        }
        if (auto* gb = gi[1]) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double v = x[i * k + p];
              for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += v * g[i * n + j];
            }
        }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    fail(Errc::kShapeMismatch, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor result = Tensor::create(std::move(shape), a.data());
  return autograd::record("reshape", std::move(result), {&a},
                          [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                            auto& ga = *gi[0];
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) fail(Errc::kShapeMismatch, "concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) fail(Errc::kShapeMismatch, "concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) fail(Errc::kShapeMismatch, "concat rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) {
        fail(Errc::kShapeMismatch,
             "concat " + shape_str(p.shape()) + " vs " + shape_str(first) + " on axis " +
                 std::to_string(axis));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t row = out_shape[axis] * inner;

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * w, w, out.begin() + o * row + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  Tensor result = Tensor::from_vector(std::move(out_shape), std::move(out));
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  return autograd::record(
      "concat", std::move(result), inputs,
      [widths, outer, row](std::span<const double> g, std::span<std::vector<double>*> gi) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (auto* gk = gi[k]) {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < widths[k]; ++i)
                (*gk)[o * widths[k] + i] += g[o * row + off + i];
          }
          off += widths[k];
        }
      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank() || length == 0 || start + length > a.dim(axis)) {
    fail(Errc::kShapeMismatch, "slice out of range on " + shape_str(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t src_row = a.dim(axis) * inner;
  const std::size_t dst_row = length * inner;
  const std::size_t skip = start * inner;
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> out(outer * dst_row);
  const auto src = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + o * src_row + skip, dst_row, out.begin() + o * dst_row);
  }
  Tensor result = Tensor::from_vector(std::move(shape), std::move(out));
  return autograd::record(
      "slice", std::move(result), {&a},
      [outer, src_row, dst_row, skip](std::span<const double> g,
                                      std::span<std::vector<double>*> gi) {
        auto& ga = *gi[0];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < dst_row; ++i) ga[o * src_row + skip + i] += g[o * dst_row + i];
      });
}

Tensor pad(const Tensor& a, Padding p, double value) {
  if (a.rank() < 2) fail(Errc::kShapeMismatch, "pad needs rank >= 2");
  const std::size_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  const std::size_t oh = h + p.top + p.bottom, ow = w + p.left + p.right;
  const std::size_t planes = a.numel() / (h * w);
  Shape shape = a.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  std::vector<double> out(planes * oh * ow, value);
  const auto src = a.data();
  for (std::size_t q = 0; q < planes; ++q)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(src.begin() + (q * h + y) * w, w,
                  out.begin() + (q * oh + y + p.top) * ow + p.left);
  Tensor result = Tensor::from_vector(std::move(shape), std::move(out));
  return autograd::record(
      "pad", std::move(result), {&a},
      [p, planes, h, w, oh, ow](std::span<const double> g, std::span<std::vector<double>*> gi) {
        auto& ga = *gi[0];
        for (std::size_t q = 0; q < planes; ++q)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
              ga[(q * h + y) * w + x] += g[(q * oh + y + p.top) * ow + x + p.left];
      });
}

Tensor pad(const Tensor& a, std::size_t amount, double value) {
  return pad(a, Padding{amount, amount, amount, amount}, value);
}

}  // namespace segkit::ops
