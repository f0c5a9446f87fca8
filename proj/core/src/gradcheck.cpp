#include "fusiondepth/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "fusiondepth/loss.hpp"
#include "fusiondepth/model.hpp"
#include "fusiondepth/ops.hpp"
#include "fusiondepth/rng.hpp"

namespace fusiondepth {

bool GradcheckReport::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const GradcheckCase& c) { return c.passed; });
}

GradcheckCase check_gradients(const std::string& name, const std::vector<Tensor<double>>& inputs, const ScalarFn& fn,
                              const GradcheckOptions& options, const ScalarFn& numeric_fn) {
  GradcheckCase result;
  result.name = name;
  for (auto t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto loss = fn();
    backward(loss, tape);
  }
  const ScalarFn& reference = numeric_fn ? numeric_fn : fn;
  const auto evaluate = [&] { return reference().item(); };

  Rng rng(derive_seed(options.seed, std::hash<std::string>{}(name) & 0xFFFFFF));
  double worst = 0.0;
  for (auto t : inputs) {
    const auto n = static_cast<std::size_t>(t.numel());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options.samples_per_tensor > 0 && n > static_cast<std::size_t>(options.samples_per_tensor)) {
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(options.samples_per_tensor));
    }
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(n, 0.0);
    auto data = t.data();
    for (std::size_t i : idx) {
      const double saved = data[i];
      data[i] = saved + options.step;
      const double up = evaluate();
      data[i] = saved - options.step;
      const double down = evaluate();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      worst = std::max(worst, err);
      ++result.checked;
    }
  }
  for (auto t : inputs) t.clear_grad();
  result.max_rel_err = worst;
  result.passed = std::isfinite(worst) && worst <= options.tolerance;
  return result;
}

namespace {

using TensorD = Tensor<double>;

TensorD random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, double min_abs = 0.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (std::abs(x) < min_abs);
  }
  return TensorD::from_data(std::move(shape), std::move(v));
}

/// sum(out * weights): a scalar whose gradient exercises every output element.
TensorD project(const TensorD& out, const TensorD& weights) { return sum(mul(out, weights)); }

/// y = x^2 with a backward rule of 3x instead of 2x.
TensorD faulty_square(const TensorD& x) {
  std::vector<double> data(x.data().begin(), x.data().end());
  for (auto& v : data) v = v * v;
  auto impl = std::make_shared<TensorImpl<double>>();
  impl->shape = x.shape();
  impl->data = std::move(data);
  TensorD out(impl);
  if (auto* tape = Tape<double>::active(); tape && x.requires_grad()) {
    impl->requires_grad = true;
    impl->leaf = false;
    auto in = x.impl();
    tape->record("faulty_square", {in}, impl, [in](std::span<const double> g) {
      if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) in->grad[i] += 3.0 * in->data[i] * g[i];
    });
  }
  return out;
}

struct Suite {
  const GradcheckOptions& options;
  GradcheckReport& report;
  Rng rng;

  void check(const std::string& name, const std::vector<TensorD>& inputs, const ScalarFn& fn,
           const ScalarFn& numeric_fn = {}) {
    report.cases.push_back(check_gradients(name, inputs, fn, options, numeric_fn));
  }

  void elementwise_cases() {
    const Shape s{2, 3, 4};
    auto a = random_tensor(rng, s), b = random_tensor(rng, s), w = random_tensor(rng, s);
    auto pos = random_tensor(rng, s, 0.5, 2.0);
    auto away = random_tensor(rng, s, -1.0, 1.0, 0.1);
    auto sc = random_tensor(rng, {1});
    check("add", {a, b}, [=] { return project(add(a, b), w); });
    check("sub", {a, b}, [=] { return project(sub(a, b), w); });
    check("mul", {a, b}, [=] { return project(mul(a, b), w); });
    check("div", {a, pos}, [=] { return project(div(a, pos), w); });
    check("mul_scalar_broadcast", {a, sc}, [=] { return project(mul(a, sc), w); });
    check("exp", {a}, [=] { return project(exp(a), w); });
    check("abs", {away}, [=] { return project(abs(away), w); });
    check("square", {a}, [=] { return project(square(a), w); });
    check("relu", {away}, [=] { return project(relu(away), w); });
    check("add_scalar", {a}, [=] { return project(add_scalar(a, 0.7), w); });
    check("mul_scalar", {a}, [=] { return project(mul_scalar(a, -1.3), w); });
    check("sum", {a}, [=] { return sum(a); });
    check("reduce_mean", {a}, [=] { return reduce_mean(square(a)); });
    std::vector<double> m(static_cast<std::size_t>(shape_numel(s)));
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (i % 3 == 0) ? 0.0 : 1.0;
    const auto mask = TensorD::from_data(s, m);
    check("reduce_mean_masked", {a}, [=] { return reduce_mean(square(a), mask); });
  }

  void layout_cases() {
    auto x = random_tensor(rng, {2, 3, 4, 5}), y = random_tensor(rng, {2, 2, 4, 5});
    auto w = random_tensor(rng, {2, 5, 4, 5});
    check("concat_channels", {x, y}, [=] { return project(concat_channels<double>({x, y}), w); });
    auto ws = random_tensor(rng, {2, 2, 4, 5});
    check("slice_channels", {x}, [=] { return project(slice_channels(x, 1, 2), ws); });
    auto wp = random_tensor(rng, {2, 3, 6, 8});
    check("pad_bottom_right", {x}, [=] { return project(pad_bottom_right(x, 2, 3), wp); });
    auto wc = random_tensor(rng, {2, 3, 3, 2});
    check("crop_top_left", {x}, [=] { return project(crop_top_left(x, 3, 2), wc); });
  }

  void conv_cases() {
    auto x = random_tensor(rng, {2, 3, 7, 6});
    auto k = random_tensor(rng, {4, 3, 3, 3});
    auto bias = random_tensor(rng, {4});
    auto w1 = random_tensor(rng, {2, 4, 7, 6});
    check("conv2d_3x3_s1", {x, k, bias}, [=] { return project(conv2d(x, k, bias, 1, 1), w1); });
    auto w2 = random_tensor(rng, {2, 4, 4, 3});
    check("conv2d_3x3_s2", {x, k, bias}, [=] { return project(conv2d(x, k, bias, 2, 1), w2); });
    auto k1 = random_tensor(rng, {4, 3, 1, 1});
    check("conv2d_1x1", {x, k1}, [=] { return project(conv2d(x, k1, TensorD{}, 1, 0), w1); });
    auto relu_w = random_tensor(rng, {2, 4, 7, 6});
    check("conv2d_relu", {x, k, bias}, [=] { return project(relu(conv2d(x, k, bias, 1, 1)), relu_w); });

    auto t = random_tensor(rng, {4, 2, 2, 2});
    auto tb = random_tensor(rng, {2});
    auto xt = random_tensor(rng, {2, 4, 3, 5});
    auto wt = random_tensor(rng, {2, 2, 6, 10});
    check("conv_transpose2d_2x2_s2", {xt, t, tb}, [=] { return project(conv_transpose2d(xt, t, tb, 2, 0), wt); });
    auto t3 = random_tensor(rng, {4, 2, 3, 3});
    auto wt3 = random_tensor(rng, {2, 2, 5, 9});
    check("conv_transpose2d_3x3_s2_p1", {xt, t3}, [=] { return project(conv_transpose2d(xt, t3, TensorD{}, 2, 1), wt3); });
  }

  void batchnorm_cases() {
    auto x = random_tensor(rng, {3, 2, 4, 5}, -2.0, 3.0);
    auto gamma = random_tensor(rng, {2}, 0.5, 1.5);
    auto beta = random_tensor(rng, {2});
    auto w = random_tensor(rng, {3, 2, 4, 5});
    auto rm = TensorD::zeros({2}), rv = TensorD::full({2}, 1.0);
    check("batch_norm_train", {x, gamma, beta}, [=]() mutable {
      return project(batch_norm(x, gamma, beta, rm, rv, BatchNormOptions{true, 0.1, 1e-5}), w);
    });
    auto rm2 = random_tensor(rng, {2}), rv2 = random_tensor(rng, {2}, 0.5, 2.0);
    check("batch_norm_eval", {x, gamma, beta}, [=]() mutable {
      return project(batch_norm(x, gamma, beta, rm2, rv2, BatchNormOptions{false, 0.1, 1e-5}), w);
    });
  }

  void fusion_cases() {
    const Shape s{2, 1, 3, 4};
    auto x = random_tensor(rng, s, -3.0, 3.0), y = random_tensor(rng, s, -3.0, 3.0);
    auto w1 = random_tensor(rng, s), w2 = random_tensor(rng, s);
    check("softmax_pair", {x, y}, [=] {
      const auto [wx, wy] = softmax_pair(x, y);
      return add(project(wx, w1), project(wy, w2));
    });
    auto dg = random_tensor(rng, s, 1.0, 20.0), dl = random_tensor(rng, s, 1.0, 20.0);
    check("confidence_fuse", {dg, dl, x, y}, [=] { return project(confidence_fuse(dg, dl, x, y), w1); });
  }

  void loss_cases() {
    const Shape s{2, 1, 4, 5};
    auto pred = random_tensor(rng, s, 1.0, 10.0);
    auto target = random_tensor(rng, s, 1.0, 10.0);
    std::vector<double> m(static_cast<std::size_t>(shape_numel(s)));
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (i % 4 == 1) ? 0.0 : 1.0;
    const auto mask = TensorD::from_data(s, m);
    const int epoch = 7;
    check("focal_mse_full", {pred}, [=] { return focal_mse(pred, target, mask, epoch, FocalGradient::full); });
    // The detached variant differentiates as if the focal factor were a fixed
    // per-pixel weight, so the numeric reference freezes it at the base point.
    std::vector<double> factor(m.size());
    for (std::size_t i = 0; i < factor.size(); ++i) {
      factor[i] = 1.0 + 0.05 * epoch * std::abs(pred.data()[i] - target.data()[i]);
    }
    const auto frozen = TensorD::from_data(s, factor);
    check("focal_mse_detached", {pred}, [=] { return focal_mse(pred, target, mask, epoch, FocalGradient::detached); },
        [=] { return reduce_mean(mul(frozen, square(sub(pred, target))), mask); });

    auto pg = random_tensor(rng, s, 1.0, 10.0), pl = random_tensor(rng, s, 1.0, 10.0);
    check("composite_loss", {pred, pg, pl}, [=] {
      return composite_loss(pred, pg, pl, target, mask, 3, LossWeights{}, FocalGradient::full);
    });
  }

  void model_case() {
    ModelConfig config;
    config.global_widths = {4, 8};
    config.local_width = 4;
    config.seed = options.seed;
    auto net = std::make_shared<FusionNet<double>>(config);
    const Shape img{2, 3, 8, 24}, map{2, 1, 8, 24};
    auto rgb = random_tensor(rng, img, 0.0, 1.0);
    std::vector<double> lidar_v(static_cast<std::size_t>(shape_numel(map)), 0.0);
    std::vector<double> mask_v(lidar_v.size(), 0.0);
    auto target = random_tensor(rng, map, 2.0, 30.0);
    for (std::size_t i = 0; i < lidar_v.size(); ++i) {
      if (rng.bernoulli(0.3)) lidar_v[i] = target.data()[i];
      if (rng.bernoulli(0.5)) mask_v[i] = 1.0;
    }
    auto lidar = TensorD::from_data(map, lidar_v);
    const auto mask = TensorD::from_data(map, mask_v);
    std::vector<TensorD> inputs;
    for (const auto& p : net->state().params) inputs.push_back(p.tensor);
    inputs.push_back(lidar);
    const auto loss = [=] {
      const auto out = net->forward(rgb, lidar, true);
      return composite_loss(out.d_out, out.d_global, out.d_local, target, mask, 2, LossWeights{}, FocalGradient::full);
    };
    // Normalised to unit scale; the smaller step keeps perturbations from
    // crossing ReLU kinks inside the network.
    const double scale = 1.0 / loss().item();
    GradcheckOptions net_options = options;
    net_options.step = options.step * 0.1;
    report.cases.push_back(check_gradients(
        "fusionnet_forward", inputs, [=] { return mul_scalar(loss(), scale); }, net_options));
  }

  void fault_case() {
    auto x = random_tensor(rng, {3, 4});
    check("faulty_square (injected fault)", {x}, [=] { return sum(faulty_square(x)); });
  }
};

}  // namespace

GradcheckReport run_gradcheck_suite(const GradcheckOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport report;
  Suite suite{options, report, Rng(options.seed)};
  suite.elementwise_cases();
  suite.layout_cases();
  suite.conv_cases();
  suite.batchnorm_cases();
  suite.fusion_cases();
  suite.loss_cases();
  suite.model_case();
  if (options.inject_fault) suite.fault_case();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace fusiondepth
