#include "segkit/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "segkit/autograd.hpp"
#include "segkit/data.hpp"
#include "segkit/error.hpp"
#include "segkit/layers.hpp"
#include "segkit/losses.hpp"
#include "segkit/metrics.hpp"
#include "segkit/nn.hpp"
#include "segkit/ops.hpp"

namespace segkit::selftest {

namespace {

using nn::Rng;

Tensor uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v));
}

// |x| in [lo, hi] with random sign: keeps relu-like kinks out of reach.
Tensor away_from_zero(Rng& rng, Shape shape, double lo = 0.1, double hi = 1.0) {
  Tensor t = uniform(rng, std::move(shape), lo, hi);
  for (auto& x : t.mutable_data())
    if (rng.uniform() < 0.5) x = -x;
  return t;
}

// Distinct values spaced 0.05 apart in random order (no max ties).
Tensor distinct(Rng& rng, Shape shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 0.05 * static_cast<double>(i) - 0.025 * static_cast<double>(n);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(v[i], v[rng.below(i + 1)]);
  return Tensor::from_vector(std::move(shape), std::move(v));
}

// sum(f(x) * r) for a fixed random r: every output element contributes with
// its own weight.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed ^ 0xabcdefULL);
  return ops::sum(ops::mul(out, uniform(rng, out.shape(), -1.0, 1.0)));
}

Tensor onehot_batch(Rng& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> v(n * c * h * w, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < h * w; ++i) v[(b * c + rng.below(c)) * h * w + i] = 1.0;
  return Tensor::from_vector({n, c, h, w}, std::move(v));
}

using Build = std::function<Tensor(std::span<const Tensor>)>;

GradientCase make_case(std::string name, std::function<std::vector<Tensor>(Rng&)> inputs,
                       std::function<Tensor(std::span<const Tensor>, std::uint64_t)> body) {
  return {std::move(name), [inputs, body](std::uint64_t seed, double step) {
            Rng rng(seed);
            const std::vector<Tensor> xs = inputs(rng);
            return finite_difference_check([&](std::span<const Tensor> t) { return body(t, seed); }, xs, step);
          }};
}

GradientCase unary(std::string name, std::function<Tensor(Rng&)> input, std::function<Tensor(const Tensor&)> op) {
  return make_case(
      std::move(name), [input](Rng& r) { return std::vector<Tensor>{input(r)}; },
      [op](std::span<const Tensor> t, std::uint64_t seed) { return weighted_sum(op(t[0]), seed); });
}

nn::ConvSpec spec(std::size_t out, std::size_t k, std::size_t stride, std::size_t rate,
                  nn::PaddingMode pad = nn::PaddingMode::kSame) {
  nn::ConvSpec s;
  s.out_channels = out;
  s.kernel_h = s.kernel_w = k;
  s.stride = stride;
  s.dilation_rate = rate;
  s.padding = pad;
  return s;
}

}  // namespace

std::vector<GradientCase> gradient_cases() {
  using namespace ops;
  std::vector<GradientCase> cases;
  auto small = [](Rng& r) { return uniform(r, {2, 3, 4}, -1.0, 1.0); };
  auto img = [](Rng& r) { return uniform(r, {2, 2, 4, 4}, -1.0, 1.0); };

  // elementwise and reductions
  for (auto [name, kind] : {std::pair{"add", Binary::kAdd}, {"sub", Binary::kSub}, {"mul", Binary::kMul}}) {
    cases.push_back(make_case(
        name, [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 3, 4}, -1, 1), uniform(r, {2, 3, 4}, -1, 1)}; },
        [kind](std::span<const Tensor> t, std::uint64_t s) { return weighted_sum(elementwise(kind, t[0], t[1]), s); }));
  }
  cases.push_back(make_case(
      "div", [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 3, 4}, -1, 1), uniform(r, {2, 3, 4}, 0.5, 1.5)}; },
      [](std::span<const Tensor> t, std::uint64_t s) { return weighted_sum(div(t[0], t[1]), s); }));
  cases.push_back(make_case(
      "maximum",
      [](Rng& r) {
        Tensor a = uniform(r, {2, 3, 4}, -1, 1), b = a.clone();
        for (auto& x : b.mutable_data()) x += r.uniform() < 0.5 ? -0.2 : 0.2;
        return std::vector<Tensor>{a, b};
      },
      [](std::span<const Tensor> t, std::uint64_t s) { return weighted_sum(maximum(t[0], t[1]), s); }));
  cases.push_back(make_case(
      "broadcast_add_mul",
      [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 3, 4}, -1, 1), uniform(r, {3, 1}, -1, 1)}; },
      [](std::span<const Tensor> t, std::uint64_t s) {
        return weighted_sum(mul(add(t[0], t[1]), t[1]), s);
      }));
  cases.push_back(unary("scale", small, [](const Tensor& x) { return scale(x, -1.7); }));
  cases.push_back(unary("add_scalar", small, [](const Tensor& x) { return add_scalar(x, 0.3); }));
  cases.push_back(unary("neg", small, [](const Tensor& x) { return neg(x); }));
  cases.push_back(unary("exp", small, [](const Tensor& x) { return ops::exp(x); }));
  cases.push_back(unary("log_clamped", [](Rng& r) { return uniform(r, {2, 3, 4}, 0.1, 0.9); },
                        [](const Tensor& x) { return log_clamped(x); }));
  cases.push_back(unary("square", small, [](const Tensor& x) { return square(x); }));
  cases.push_back(unary("sum", small, [](const Tensor& x) { return ops::sum(square(x)); }));
  cases.push_back(unary("mean", small, [](const Tensor& x) { return mean(square(x)); }));
  cases.push_back(make_case(
      "matmul", [](Rng& r) { return std::vector<Tensor>{uniform(r, {3, 4}, -1, 1), uniform(r, {4, 5}, -1, 1)}; },
      [](std::span<const Tensor> t, std::uint64_t s) { return weighted_sum(matmul(t[0], t[1]), s); }));
  cases.push_back(unary("reshape", small, [](const Tensor& x) { return reshape(x, {4, 6}); }));
  cases.push_back(make_case(
      "concat", [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 2, 3, 3}, -1, 1), uniform(r, {2, 3, 3, 3}, -1, 1)}; },
      [](std::span<const Tensor> t, std::uint64_t s) { return weighted_sum(concat(t, 1), s); }));
  cases.push_back(unary("slice", img, [](const Tensor& x) { return slice(x, 3, 1, 2); }));
  cases.push_back(unary("pad", img, [](const Tensor& x) { return pad(x, Padding{1, 0, 2, 1}, 0.5); }));

  // activations
  cases.push_back(unary("relu", [](Rng& r) { return away_from_zero(r, {2, 2, 3, 3}); },
                        [](const Tensor& x) { return nn::relu(x); }));
  cases.push_back(unary("leaky_relu", [](Rng& r) { return away_from_zero(r, {2, 2, 3, 3}); },
                        [](const Tensor& x) { return nn::leaky_relu(x); }));
  cases.push_back(unary("sigmoid", img, [](const Tensor& x) { return nn::sigmoid(x); }));
  cases.push_back(unary("tanh", img, [](const Tensor& x) { return nn::tanh(x); }));
  cases.push_back(unary("softmax_channel", [](Rng& r) { return uniform(r, {2, 3, 3, 3}, -2, 2); },
                        [](const Tensor& x) { return nn::softmax_channel(x); }));
  cases.push_back(make_case(
      "dense",
      [](Rng& r) {
        return std::vector<Tensor>{uniform(r, {3, 4}, -1, 1), uniform(r, {4, 5}, -1, 1), uniform(r, {5}, -1, 1)};
      },
      [](std::span<const Tensor> t, std::uint64_t s) {
        return weighted_sum(nn::dense(t[0], t[1], t[2], nn::Activation::kSigmoid), s);
      }));

  // convolutions
  struct ConvCase {
    const char* name;
    std::size_t k, stride, rate;
    nn::PaddingMode pad;
  };
  for (const ConvCase& c : {ConvCase{"conv2d_3x3", 3, 1, 1, nn::PaddingMode::kSame},
                            ConvCase{"conv2d_strided", 3, 2, 1, nn::PaddingMode::kSame},
                            ConvCase{"conv2d_atrous", 3, 1, 2, nn::PaddingMode::kSame},
                            ConvCase{"conv2d_valid", 3, 1, 1, nn::PaddingMode::kValid},
                            ConvCase{"conv2d_1x1", 1, 1, 1, nn::PaddingMode::kSame}}) {
    cases.push_back(make_case(
        c.name,
        [c](Rng& r) {
          return std::vector<Tensor>{uniform(r, {2, 2, 5, 5}, -1, 1), uniform(r, {3, 2, c.k, c.k}, -1, 1),
                                     uniform(r, {3}, -1, 1)};
        },
        [c](std::span<const Tensor> t, std::uint64_t s) {
          return weighted_sum(nn::conv2d(t[0], t[1], t[2], spec(3, c.k, c.stride, c.rate, c.pad)), s);
        }));
  }
  cases.push_back(make_case(
      "conv2d_standard",
      [](Rng& r) {
        return std::vector<Tensor>{uniform(r, {1, 2, 5, 5}, -1, 1), uniform(r, {2, 2, 3, 3}, -1, 1),
                                   uniform(r, {2}, -1, 1)};
      },
      [](std::span<const Tensor> t, std::uint64_t s) {
        return weighted_sum(nn::conv2d_standard(t[0], t[1], t[2], spec(2, 3, 2, 1)), s);
      }));
  cases.push_back(make_case(
      "depthwise_conv2d",
      [](Rng& r) {
        return std::vector<Tensor>{uniform(r, {2, 3, 5, 5}, -1, 1), uniform(r, {3, 1, 3, 3}, -1, 1),
                                   uniform(r, {3}, -1, 1)};
      },
      [](std::span<const Tensor> t, std::uint64_t s) {
        auto sp = spec(3, 3, 1, 2);
        sp.depthwise = true;
        sp.groups = 3;
        return weighted_sum(nn::depthwise_conv2d(t[0], t[1], t[2], sp), s);
      }));
  cases.push_back(make_case(
      "transposed_conv2d",
      [](Rng& r) {
        return std::vector<Tensor>{uniform(r, {2, 2, 3, 3}, -1, 1), uniform(r, {2, 3, 2, 2}, -1, 1),
                                   uniform(r, {3}, -1, 1)};
      },
      [](std::span<const Tensor> t, std::uint64_t s) {
        return weighted_sum(nn::transposed_conv2d(t[0], t[1], t[2], 2), s);
      }));

  // pooling and resampling
  cases.push_back(unary("max_pool", [](Rng& r) { return distinct(r, {2, 2, 4, 4}); },
                        [](const Tensor& x) { return nn::pool2d(nn::PoolKind::kMax, x, 2, 2); }));
  cases.push_back(unary("max_pool_same", [](Rng& r) { return distinct(r, {1, 2, 5, 5}); }, [](const Tensor& x) {
    return nn::pool2d(nn::PoolKind::kMax, x, nn::PoolSpec{3, 2, nn::PaddingMode::kSame});
  }));
  cases.push_back(unary("avg_pool_same", img, [](const Tensor& x) {
    return nn::pool2d(nn::PoolKind::kAverage, x, nn::PoolSpec{3, 1, nn::PaddingMode::kSame});
  }));
  cases.push_back(unary("adaptive_avg_pool", [](Rng& r) { return uniform(r, {2, 2, 5, 5}, -1, 1); },
                        [](const Tensor& x) { return nn::adaptive_avg_pool(x, 3); }));
  cases.push_back(unary("resize_bilinear", img, [](const Tensor& x) { return nn::resize_bilinear(x, 6, 3); }));
  cases.push_back(unary("bilinear_upsample", img, [](const Tensor& x) { return nn::bilinear_upsample(x, 2); }));
  cases.push_back(unary("nearest_upsample", img, [](const Tensor& x) { return nn::nearest_upsample(x, 2); }));
  cases.push_back(make_case(
      "batch_norm_train",
      [](Rng& r) {
        return std::vector<Tensor>{uniform(r, {2, 3, 3, 3}, -1, 1), uniform(r, {3}, 0.5, 1.5), uniform(r, {3}, -1, 1)};
      },
      [](std::span<const Tensor> t, std::uint64_t s) {
        nn::BatchNormState st = nn::BatchNormState::identity(3);
        st.gamma = t[1];
        st.beta = t[2];
        return weighted_sum(nn::batch_norm(t[0], st, true), s);
      }));

  // losses (categorical ones through softmax so the input stays normalised)
  cases.push_back(make_case(
      "bce_loss", [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 1, 3, 3}, 0.05, 0.95)}; },
      [](std::span<const Tensor> t, std::uint64_t s) {
        Rng rng(s ^ 0x77);
        Tensor y = uniform(rng, {2, 1, 3, 3}, 0, 1);
        for (auto& v : y.mutable_data()) v = v < 0.5 ? 0.0 : 1.0;
        return losses::bce_loss(y, t[0]);
      }));
  cases.push_back(make_case(
      "categorical_ce", [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 3, 3, 3}, -2, 2)}; },
      [](std::span<const Tensor> t, std::uint64_t s) {
        Rng rng(s ^ 0x78);
        return losses::categorical_ce(onehot_batch(rng, 2, 3, 3, 3), nn::softmax_channel(t[0]));
      }));
  cases.push_back(make_case(
      "weighted_ce", [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 3, 3, 3}, -2, 2)}; },
      [](std::span<const Tensor> t, std::uint64_t s) {
        Rng rng(s ^ 0x79);
        return losses::categorical_ce(onehot_batch(rng, 2, 3, 3, 3), nn::softmax_channel(t[0]), {0.5, 1.0, 2.0});
      }));
  cases.push_back(make_case(
      "dice_loss", [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 3, 3, 3}, 0.05, 0.95)}; },
      [](std::span<const Tensor> t, std::uint64_t s) {
        Rng rng(s ^ 0x7a);
        return losses::dice_loss(onehot_batch(rng, 2, 3, 3, 3), t[0], 1.0);
      }));
  cases.push_back(make_case(
      "mse_loss", [](Rng& r) { return std::vector<Tensor>{uniform(r, {2, 3, 3, 3}, -1, 1)}; },
      [](std::span<const Tensor> t, std::uint64_t s) {
        Rng rng(s ^ 0x7b);
        return losses::mse_loss(uniform(rng, {2, 3, 3, 3}, -1, 1), t[0]);
      }));
  return cases;
}

std::vector<CheckResult> gradient_suite(std::size_t seeds, double step, double tolerance) {
  std::vector<CheckResult> out;
  for (const auto& c : gradient_cases()) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      const double err = c.run(1000 + s, step);
      worst = std::isnan(err) ? err : std::max(worst, err);
      if (std::isnan(worst)) break;
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "max rel err %.3g over %zu seeds", worst, seeds);
    out.push_back({"gradient " + c.name, worst < tolerance, buf});
  }
  return out;
}

CheckResult atrous_identity(std::size_t cases, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t n = 1 + rng.below(2), in = 1 + rng.below(4), out = 1 + rng.below(4);
    const std::size_t h = 3 + rng.below(6), w = 3 + rng.below(6), k = 1 + 2 * rng.below(2);
    nn::ConvSpec sp = spec(out, k, 1 + rng.below(2), 1, rng.below(2) ? nn::PaddingMode::kSame : nn::PaddingMode::kValid);
    const Tensor x = uniform(rng, {n, in, h, w}, -1, 1), wt = uniform(rng, {out, in, k, k}, -1, 1),
                 b = uniform(rng, {out}, -1, 1);
    const Tensor a = nn::conv2d(x, wt, b, sp), s = nn::conv2d_standard(x, wt, b, sp);
    if (a.shape() != s.shape() ||
        std::memcmp(a.data().data(), s.data().data(), a.numel() * sizeof(double)) != 0) {
      return {"atrous identity", false, "case " + std::to_string(i) + " differs"};
    }
  }
  return {"atrous identity", true, std::to_string(cases) + " cases bit-equal"};
}

CheckResult metric_oracle(std::size_t cases, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t c = 2 + rng.below(4);
    std::vector<int> pred(64), truth(64);
    for (auto& v : pred) v = static_cast<int>(rng.below(c));
    for (auto& v : truth) v = static_cast<int>(rng.below(c));
    const auto cm = metrics::confusion(pred, truth, c);
    const auto iou = metrics::iou_per_class(cm);
    const auto f1 = metrics::f1_per_class(cm);
    std::size_t correct = 0;
    for (std::size_t p = 0; p < 64; ++p) correct += pred[p] == truth[p];
    if (metrics::pixel_accuracy(cm) != static_cast<double>(correct) / 64.0) {
      return {"metric oracle", false, "accuracy differs in case " + std::to_string(i)};
    }
    for (std::size_t k = 0; k < c; ++k) {
      std::set<std::size_t> u, v;  // predicted / true pixel sets
      for (std::size_t p = 0; p < 64; ++p) {
        if (pred[p] == static_cast<int>(k)) u.insert(p);
        if (truth[p] == static_cast<int>(k)) v.insert(p);
      }
      std::vector<std::size_t> both, either;
      std::set_intersection(u.begin(), u.end(), v.begin(), v.end(), std::back_inserter(both));
      std::set_union(u.begin(), u.end(), v.begin(), v.end(), std::back_inserter(either));
      const std::optional<double> want_iou =
          either.empty() ? std::nullopt : std::optional(static_cast<double>(both.size()) / either.size());
      const std::size_t denom = u.size() + v.size();
      const std::optional<double> want_f1 =
          denom == 0 ? std::nullopt : std::optional(2.0 * both.size() / static_cast<double>(denom));
      if (iou[k] != want_iou || f1[k] != want_f1) {
        return {"metric oracle", false, "class " + std::to_string(k) + " differs in case " + std::to_string(i)};
      }
    }
  }
  return {"metric oracle", true, std::to_string(cases) + " random 8x8 maps match set counting"};
}

CheckResult analytic_losses() {
  std::vector<std::string> failures;
  const double bce = losses::bce_loss(Tensor::create({1}, {1.0}), Tensor::create({1}, {0.5})).item();
  if (std::abs(bce - std::log(2.0)) > 1e-9) failures.push_back("BCE(1, 0.5) != ln 2");
  const Tensor z = Tensor::zeros({1, 2, 2, 2});
  if (losses::dice_loss(z, z).item() != 0.0) failures.push_back("Dice(0, 0) != 0");
  Rng rng(3);
  const Tensor y = uniform(rng, {1, 2, 3, 3}, -1, 1);
  if (losses::mse_loss(y, y).item() != 0.0) failures.push_back("MSE(y, y) != 0");
  const Tensor p = nn::softmax_channel(uniform(rng, {2, 4, 3, 3}, -5, 5));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += p[(n * 4 + c) * 9 + i];
      if (std::abs(s - 1.0) > 1e-9) {
        failures.push_back("softmax sum != 1");
        n = 2;
        break;
      }
    }
  std::string detail;
  for (const auto& f : failures) detail += (detail.empty() ? "" : "; ") + f;
  return {"analytic losses", failures.empty(), failures.empty() ? "BCE, Dice, MSE, softmax identities hold" : detail};
}

CheckResult palette_fidelity() {
  std::vector<std::string> failures;
  if (data::hex_to_rgb("3C1098") != data::Rgb{60, 16, 152}) failures.push_back("hex 3C1098");
  const auto pal = data::LabelPalette::bdd22();
  if (pal.lookup({128, 64, 128}) != 2) failures.push_back("road is not class 2");
  if (pal.lookup({0, 0, 0}) != 0) failures.push_back("black is not class 0");
  // Round trip over every class except the shadowed one.
  data::LabelMap labels{3, 7, {}};
  for (std::size_t i = 0; i < 21; ++i) labels.labels.push_back(i == 0 ? 0 : static_cast<int>(i + 1));
  const auto back = data::rgb_mask_to_labels(data::labels_to_rgb(labels, pal), pal, data::UnknownColorPolicy::kStrict);
  if (back.labels != labels.labels) failures.push_back("round trip");
  std::string detail;
  for (const auto& f : failures) detail += (detail.empty() ? "" : "; ") + f;
  return {"palette fidelity", failures.empty(), failures.empty() ? "hex, lookup and round trip hold" : detail};
}

std::vector<CheckResult> run_all(std::size_t gradient_seeds) {
  std::vector<CheckResult> out = gradient_suite(gradient_seeds);
  for (auto f : {+[] { return atrous_identity(); }, +[] { return metric_oracle(); }, +[] { return analytic_losses(); },
                 +[] { return palette_fidelity(); }}) {
    try {
      out.push_back(f());
    } catch (const std::exception& e) {
      out.push_back({"suite", false, e.what()});
    }
  }
  return out;
}

}  // namespace segkit::selftest
