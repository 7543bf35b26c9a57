#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hesskit/fp16.hpp"
#include "test_helpers.hpp"

using namespace hesskit;
using namespace hesskit::testing;

namespace {

Tensor rand_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// keeps relu inputs away from the kink so finite differences stay clean
void keep_off_kink(Tensor& t, double margin = 0.05) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    double& v = t.data()[i];
    if (std::fabs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
}

struct PrimitiveCase {
  std::string name;
  LossFn loss;
  std::vector<Tensor> params;
  bool second_order = true;
};

// builds one randomized instance per spec primitive; loss = sum(y*y)/2 over
// the primitive output (or the scalar itself for the loss primitive)
std::vector<PrimitiveCase> primitive_cases(uint64_t seed) {
  Rng rng(seed);
  std::vector<PrimitiveCase> cases;

  auto square_loss = [](Tape& t, const Tensor& y) {
    return ops::scale(t, ops::sum_all(t, ops::mul(t, y, y)), 0.5);
  };

  {
    PrimitiveCase c;
    c.name = "matmul";
    Tensor a = rand_tensor({3, 4}, rng).set_requires_grad(true);
    Tensor b = rand_tensor({4, 2}, rng).set_requires_grad(true);
    c.params = {a, b};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "matmul", {p[0], p[1]}));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "conv2d";
    Tensor x = rand_tensor({2, 2, 5, 5}, rng).set_requires_grad(true);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng).set_requires_grad(true);
    c.params = {x, w};
    PrimitiveAttrs attrs;
    attrs.stride = 2;
    attrs.pad = 1;
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "conv2d", {p[0], p[1]}, attrs));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "bias-add";
    Tensor x = rand_tensor({2, 3, 4, 4}, rng).set_requires_grad(true);
    Tensor b = rand_tensor({3}, rng).set_requires_grad(true);
    c.params = {x, b};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "bias-add", {p[0], p[1]}));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "add";
    Tensor a = rand_tensor({7}, rng).set_requires_grad(true);
    Tensor b = rand_tensor({7}, rng).set_requires_grad(true);
    c.params = {a, b};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "add", {p[0], p[1]}));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "mul";
    Tensor a = rand_tensor({6}, rng).set_requires_grad(true);
    Tensor b = rand_tensor({6}, rng).set_requires_grad(true);
    c.params = {a, b};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "mul", {p[0], p[1]}));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "relu";
    Tensor x = rand_tensor({10}, rng);
    keep_off_kink(x);
    x.set_requires_grad(true);
    c.params = {x};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "relu", {p[0]}));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "batch-norm";
    Tensor x = rand_tensor({2, 3, 3, 3}, rng).set_requires_grad(true);
    Tensor gamma = rand_tensor({3}, rng, 0.5, 1.5).set_requires_grad(true);
    Tensor beta = rand_tensor({3}, rng).set_requires_grad(true);
    Tensor rmean = rand_tensor({3}, rng, -0.2, 0.2);
    Tensor rvar = rand_tensor({3}, rng, 0.5, 1.5);
    c.params = {x, gamma, beta};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "batch-norm", {p[0], p[1], p[2], rmean, rvar}));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "global-average-pool";
    Tensor x = rand_tensor({2, 3, 4, 4}, rng).set_requires_grad(true);
    c.params = {x};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "global-average-pool", {p[0]}));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "flatten";
    Tensor x = rand_tensor({2, 3, 2, 2}, rng).set_requires_grad(true);
    c.params = {x};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return square_loss(t, primitive_forward(t, "flatten", {p[0]}));
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;
    c.name = "softmax-cross-entropy";
    Tensor z = rand_tensor({4, 5}, rng, -2.0, 2.0).set_requires_grad(true);
    c.params = {z};
    PrimitiveAttrs attrs;
    attrs.labels = {0, 2, 4, 1};
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      return primitive_forward(t, "softmax-cross-entropy", {p[0]}, attrs);
    };
    cases.push_back(c);
  }
  {
    PrimitiveCase c;  // training-statistics form, first order only
    c.name = "batch-norm-train";
    Tensor x = rand_tensor({4, 3, 2, 2}, rng).set_requires_grad(true);
    Tensor gamma = rand_tensor({3}, rng, 0.5, 1.5).set_requires_grad(true);
    Tensor beta = rand_tensor({3}, rng).set_requires_grad(true);
    c.params = {x, gamma, beta};
    c.second_order = false;
    c.loss = [=](Tape& t, const std::vector<Tensor>& p) {
      Tensor y = ops::batchnorm_train(t, p[0], p[1], p[2], 1e-5, nullptr, nullptr);
      return ops::scale(t, ops::sum_all(t, ops::mul(t, y, y)), 0.5);
    };
    cases.push_back(c);
  }
  return cases;
}

std::vector<std::vector<double>> direction_like(const std::vector<Tensor>& params, Rng& rng) {
  std::vector<std::vector<double>> v;
  for (const auto& p : params) {
    std::vector<double> d(static_cast<size_t>(p.numel()));
    for (auto& e : d) e = rng.rademacher();
    v.push_back(std::move(d));
  }
  return v;
}

}  // namespace

TEST_CASE("gradients match central differences for every primitive") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    for (auto& c : primitive_cases(seed)) {
      INFO(c.name << " seed " << seed);
      auto analytic = tape_gradient(c.loss, c.params);
      auto numeric = fd_gradient(c.loss, c.params);
      CHECK(max_mismatch(analytic, numeric, 1e-6, 1e-4) <= 1.0);
    }
  }
}

TEST_CASE("second order matches finite differences of gradients") {
  for (uint64_t seed = 11; seed <= 13; ++seed) {
    Rng dir_rng(seed * 31);
    for (auto& c : primitive_cases(seed)) {
      if (!c.second_order) continue;
      INFO(c.name << " seed " << seed);
      auto v = direction_like(c.params, dir_rng);
      auto analytic = tape_hvp(c.loss, c.params, v);
      auto numeric = fd_hvp(c.loss, c.params, v);
      CHECK(max_mismatch(analytic, numeric, 1e-5, 1e-3) <= 1.0);
    }
  }
}

TEST_CASE("backward on documented quadratics") {
  {
    // L = 1/2 |w|^2 at w = [3,4]
    Tensor w = Tensor::from({1, 2}, {3.0, 4.0}).set_requires_grad(true);
    Tape tape;
    Tensor loss = ops::scale(tape, ops::sum_all(tape, ops::mul(tape, w, w)), 0.5);
    auto g = backward(tape, loss, {w}, false);
    CHECK(g[0].values() == std::vector<double>{3.0, 4.0});
  }
  QuadraticTarget target({2, 1, 1, 3}, {1.0, 1.0});
  {
    Tape tape;
    Tensor loss = target.build_loss(tape);
    auto g = backward(tape, loss, target.parameters(), false);
    CHECK(g[0].values()[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(g[0].values()[1] == doctest::Approx(4.0).epsilon(1e-12));
  }
  {
    // differentiating g.v with v = [1,0] extracts the first Hessian row
    auto row = hvp(target, {1.0, 0.0}, TraceMode::FP32);
    CHECK(row[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(row[1] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("backward error surface") {
  Tensor w = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
  Tape tape;
  Tensor detached = Tensor::scalar(1.0);
  CHECK_THROWS_AS(backward(tape, detached, {w}, false), Error);
  Tensor vec = ops::mul(tape, w, w);
  CHECK_THROWS_AS(backward(tape, vec, {w}, false), Error);
  try {
    backward(tape, vec, {w}, false);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NonScalarLoss);
  }
  CHECK_THROWS_AS(primitive_forward(tape, "not-an-op", {w}), Error);
}

TEST_CASE("documented primitive values") {
  Tape tape;
  {
    Tensor x = ops::constant({3}, {-1.0, 0.0, 2.0});
    Tensor y = primitive_forward(tape, "relu", {x});
    CHECK(y.values() == std::vector<double>{0.0, 0.0, 2.0});
  }
  {
    // uniform logits cross-entropy is ln(C)
    const int64_t classes = 7;
    Tensor z = Tensor::zeros({2, classes});
    PrimitiveAttrs attrs;
    attrs.labels = {3, 0};
    Tensor l = primitive_forward(tape, "softmax-cross-entropy", {z}, attrs);
    CHECK(l.item() == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  {
    // binary16 rounding of an operand before the multiply
    PrecisionGuard guard(tape, Precision::FP16EMU);
    Tensor a = ops::constant({1, 1}, {1.0});
    Tensor b = ops::constant({1, 1}, {1.0 + std::ldexp(1.0, -11)});
    Tensor y = primitive_forward(tape, "matmul", {a, b});
    CHECK(y.values()[0] == 1.0);
  }
}

TEST_CASE("scaled backward reproduces the documented values") {
  auto build = [](Tape& tape, std::vector<Tensor>& params, double coeff) {
    PrecisionGuard guard(tape, Precision::FP16EMU);
    Tensor sum;
    for (auto& p : params) {
      Tensor s = ops::sum_all(tape, p);
      sum = sum.defined() ? ops::add(tape, sum, s) : s;
    }
    return ops::scale(tape, sum, coeff);
  };

  {
    std::vector<Tensor> params;
    for (int i = 0; i < 3; ++i)
      params.push_back(Tensor::from({1}, {1.0 + i}).set_requires_grad(true));
    Tape tape;
    Tensor loss = build(tape, params, 1e-6);
    GradScaler scaler(GradScaler::Mode::FirstOrder);
    auto sg = scaled_backward(tape, loss, params, scaler, false, true);
    const double expected = round_fp16(65536.0 * 1e-6);
    CHECK(expected == doctest::Approx(0.06554).epsilon(1e-3));
    for (auto& g : sg) CHECK(g.values()[0] == expected);

    auto un = unscale(sg, scaler);
    CHECK(un[0].values()[0] == doctest::Approx(1.00006e-6).epsilon(1e-4));
  }
  {
    // below the subnormal floor with no scaling: flushes to zero
    std::vector<Tensor> params{Tensor::from({1}, {1.0}).set_requires_grad(true)};
    Tape tape;
    Tensor loss = build(tape, params, 1e-9);
    GradScaler scaler(GradScaler::Mode::FirstOrder, 1.0);
    auto sg = scaled_backward(tape, loss, params, scaler, false, true);
    CHECK(sg[0].values()[0] == 0.0);
  }
  {
    // overflow past the binary16 maximum raises
    std::vector<Tensor> params{Tensor::from({1}, {1.0}).set_requires_grad(true)};
    Tape tape;
    Tensor loss = build(tape, params, 10.0);
    GradScaler scaler(GradScaler::Mode::FirstOrder);
    CHECK_THROWS_AS(scaled_backward(tape, loss, params, scaler, false, true), Error);
  }
}

TEST_CASE("unscale is exact for powers of two and passes infinities through") {
  GradScaler scaler(GradScaler::Mode::FirstOrder);
  std::vector<Tensor> grads{Tensor::from({3}, {0.0655517578125, 0.0,
                                               std::numeric_limits<double>::infinity()})};
  auto out = unscale(grads, scaler);
  CHECK(out[0].values()[0] == 0.0655517578125 / 65536.0);
  CHECK(out[0].values()[1] == 0.0);
  CHECK(std::isinf(out[0].values()[2]));
}

TEST_CASE("scaled gradients agree with full-precision gradients after unscaling") {
  Rng rng(55);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor> params{rand_tensor({4, 4}, rng).set_requires_grad(true),
                               rand_tensor({4}, rng).set_requires_grad(true)};
    LossFn fn = [](Tape& t, const std::vector<Tensor>& p) {
      Tensor h = ops::relu(t, ops::bias_add(t, ops::mul(t, p[0], p[0]), p[1]));
      return ops::scale(t, ops::sum_all(t, h), 0.01);
    };
    auto reference = tape_gradient(fn, params);

    Tape tape;
    Tensor loss;
    {
      PrecisionGuard guard(tape, Precision::FP16EMU);
      loss = fn(tape, params);
    }
    GradScaler scaler(GradScaler::Mode::FirstOrder);
    auto sg = scaled_backward(tape, loss, params, scaler, false, true);
    auto un = unscale(sg, scaler);
    for (size_t p = 0; p < params.size(); ++p)
      for (int64_t i = 0; i < params[p].numel(); ++i) {
        const double g = reference[p][static_cast<size_t>(i)];
        const double bound = std::ldexp(std::fabs(g), -10) + std::ldexp(1.0, -24) / scaler.scale;
        CHECK(std::fabs(un[p].values()[i] - g) <= bound * 3.0 + 1e-12);
      }
  }
}

TEST_CASE("byte accounting follows tensor precision") {
  {
    Tape tape;
    Tensor x = ops::constant({1000}, std::vector<double>(1000, 0.5));
    ops::relu(tape, x);
    CHECK(tape.peak().fp32_saved == 8000);  // input + output at 4 bytes/value
    CHECK(tape.peak().fp16_saved == 0);
  }
  {
    Tape tape;
    PrecisionGuard guard(tape, Precision::FP16EMU);
    Tensor x = ops::constant({1000}, std::vector<double>(1000, 0.5));
    ops::relu(tape, x);
    CHECK(tape.peak().fp32_saved == 0);     // the wide original is not tape-resident
    CHECK(tape.peak().fp16_saved == 4000);  // rounded copy + output at 2 bytes/value
  }
  {
    Tape tape;
    Tensor w = Tensor::from({1000}, std::vector<double>(1000, 0.5));
    w.mark_param();
    ops::relu(tape, w);
    CHECK(tape.peak().param_bytes == 4000);
    CHECK(tape.peak().fp32_saved == 4000);
  }
}

TEST_CASE("tape rollback releases accounted bytes") {
  Tape tape;
  Tensor x = ops::constant({100}, std::vector<double>(100, 1.0));
  Tensor y = ops::relu(tape, x);
  const auto mark = tape.mark();
  const auto before = tape.live_total();
  ops::mul(tape, y, y);
  CHECK(tape.live_total() > before);
  tape.truncate(mark);
  CHECK(tape.live_total() == before);
}

TEST_CASE("tape determinism") {
  auto run = [] {
    Rng rng(77);
    std::vector<Tensor> params{rand_tensor({5, 5}, rng).set_requires_grad(true)};
    LossFn fn = [](Tape& t, const std::vector<Tensor>& p) {
      return ops::sum_all(t, ops::relu(t, ops::matmul(t, p[0], p[0])));
    };
    return tape_gradient(fn, params);
  };
  CHECK(run() == run());
}
