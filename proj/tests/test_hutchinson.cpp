#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hesskit/dataset.hpp"
#include "hesskit/pruner.hpp"
#include "hesskit/train.hpp"
#include "test_helpers.hpp"

using namespace hesskit;
using namespace hesskit::testing;

namespace {

std::vector<double> sym_matrix(int64_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> a(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j <= i; ++j) {
      const double v = scale * rng.uniform(-1.0, 1.0);
      a[static_cast<size_t>(i * n + j)] = v;
      a[static_cast<size_t>(j * n + i)] = v;
    }
  return a;
}

double exact_trace(const std::vector<double>& a, int64_t n) {
  double t = 0.0;
  for (int64_t i = 0; i < n; ++i) t += a[static_cast<size_t>(i * n + i)];
  return t;
}

double sample_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(xs.size() - 1));
}

}  // namespace

TEST_CASE("rademacher draws") {
  Rng rng(42);
  auto v = rademacher(50, rng);
  double norm_sq = 0.0;
  for (double e : v) norm_sq += e * e;
  CHECK(norm_sq == 50.0);

  Rng a(42), b(42);
  CHECK(rademacher(64, a) == rademacher(64, b));

  // per-coordinate mean over many draws stays within the 5-sigma band
  const int64_t draws = 10000, dim = 100;
  std::vector<double> mean(dim, 0.0);
  Rng rng2(7);
  for (int64_t d = 0; d < draws; ++d) {
    auto x = rademacher(dim, rng2);
    for (int64_t i = 0; i < dim; ++i) mean[static_cast<size_t>(i)] += x[static_cast<size_t>(i)];
  }
  for (double m : mean) CHECK(std::fabs(m / static_cast<double>(draws)) <= 0.05);
}

TEST_CASE("hvp on a documented quadratic") {
  QuadraticTarget target({2, 1, 1, 3}, {1.0, 1.0});
  SUBCASE("matches A v") {
    auto hv = hvp(target, {1.0, -1.0}, TraceMode::FP32);
    CHECK(hv[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(hv[1] == doctest::Approx(-2.0).epsilon(1e-12));
  }
  SUBCASE("zero probe gives zero product") {
    auto hv = hvp(target, {0.0, 0.0}, TraceMode::FP32);
    CHECK(hv == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("reduced precision carries the second-order scale") {
    // Hv does not depend on w for a quadratic; small weights keep the
    // 2^16-scaled first-order pass inside the binary16 range
    QuadraticTarget small({2, 1, 1, 3}, {0.01, 0.01});
    auto hv = hvp(small, {1.0, -1.0}, TraceMode::FP16Scaled);
    CHECK(std::fabs(hv[0] - 256.0 * 1.0) <= 256.0 * std::ldexp(1.0, -8));
    CHECK(std::fabs(hv[1] - 256.0 * -2.0) <= 512.0 * std::ldexp(1.0, -8));
  }
}

TEST_CASE("identity Hessian has zero estimator variance") {
  const int64_t n = 7;
  std::vector<double> eye(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) eye[static_cast<size_t>(i * n + i)] = 1.0;
  QuadraticTarget target(eye, std::vector<double>(n, 0.3));
  HutchinsonOptions opt;
  opt.n_v = 20;
  opt.seed = 5;
  TraceReport r = estimate_trace(target, opt);
  for (double v : r.iterations) CHECK(v == static_cast<double>(n));
  CHECK(r.global_trace == static_cast<double>(n));
}

TEST_CASE("diagonal Hessians are estimated exactly for every iteration count") {
  std::vector<double> a = {1, 0, 0, 0, 2, 0, 0, 0, 3};
  QuadraticTarget target(a, {0.5, -0.25, 1.0});
  for (int64_t n_v : {1, 5, 300}) {
    HutchinsonOptions opt;
    opt.n_v = n_v;
    opt.seed = 9;
    TraceReport r = estimate_trace(target, opt);
    CHECK(r.global_trace == 6.0);
  }
}

TEST_CASE("dense quadratic estimate lands inside the variance bound") {
  // trace 5; var(v'Hv) = 2 sum_{i != j} A_ij^2 = 4, so 5 sigma of the mean
  // at n_v = 300 is about 0.577
  QuadraticTarget target({2, 1, 1, 3}, {1.0, 1.0});
  HutchinsonOptions opt;
  opt.n_v = 300;
  opt.seed = 123;
  TraceReport r = estimate_trace(target, opt);
  CHECK(std::fabs(r.global_trace - 5.0) <= 0.6);
}

TEST_CASE("partition identity and report invariants") {
  Rng rng(31);
  const int64_t n = 12;
  auto a = sym_matrix(n, rng);
  QuadraticTarget target(a, std::vector<double>(n, 0.1));
  std::vector<ChannelGroup> groups;
  for (int64_t c = 0; c < 3; ++c) {
    ChannelGroup g;
    g.layer_id = 0;
    g.channel = c;
    for (int64_t i = c * 3; i < (c + 1) * 3; ++i) g.own.push_back(i);
    g.weight_count = 3;
    groups.push_back(g);
  }
  target.set_groups(groups);  // indices 9..11 stay in the residue

  HutchinsonOptions opt;
  opt.n_v = 50;
  opt.seed = 77;
  TraceReport r = estimate_trace(target, opt);

  double mean = 0.0;
  for (double v : r.iterations) mean += v;
  mean /= static_cast<double>(r.iterations.size());
  CHECK(r.global_trace == mean);

  double recomposed = r.residue_trace;
  for (const auto& c : r.channels) recomposed += c.trace;
  CHECK(std::fabs(recomposed - r.global_trace) <=
        1e-12 * std::max(1.0, std::fabs(r.global_trace)));
}

TEST_CASE("estimator is unbiased within five sigma on repeated seeded runs") {
  Rng rng(99);
  const int64_t n = 10;
  auto a = sym_matrix(n, rng);
  const double tr = exact_trace(a, n);
  QuadraticTarget target(a, std::vector<double>(n, 0.2));
  int hits = 0;
  const int runs = 100;
  for (int s = 0; s < runs; ++s) {
    HutchinsonOptions opt;
    opt.n_v = 300;
    opt.seed = 1000 + static_cast<uint64_t>(s);
    TraceReport r = estimate_trace(target, opt);
    const double bound = 5.0 * sample_std(r.iterations) / std::sqrt(300.0);
    if (std::fabs(r.global_trace - tr) <= bound) ++hits;
  }
  CHECK(hits >= 99);
}

TEST_CASE("fixed-batch determinism, including the block-parallel mode") {
  Dataset data = make_images(96, 4, 3, 0.25, 0.15);
  ModelSpec s;
  s.arch = Arch::SmallConvNet;
  s.input_shape = {1, 12, 12};
  s.num_classes = 4;
  s.conv_channels = {4, 6};
  s.conv_strides = {1, 2};
  Model model = Model::build(s, 17);

  std::vector<int64_t> idx;
  for (int64_t i = 0; i < 32; ++i) idx.push_back(i);
  Tensor x = data.gather_train(idx);
  auto y = data.labels_train(idx);
  ModelBatchTarget target(model, x, y);

  HutchinsonOptions opt;
  opt.n_v = 12;
  opt.seed = 2024;
  TraceReport a = estimate_trace(target, opt);
  TraceReport b = estimate_trace(target, opt);
  opt.threads = 3;
  TraceReport c = estimate_trace(target, opt);
  CHECK(a.iterations == b.iterations);
  CHECK(a.iterations == c.iterations);
  CHECK(a.global_trace == c.global_trace);
  for (size_t i = 0; i < a.channels.size(); ++i) CHECK(a.channels[i].trace == c.channels[i].trace);
  CHECK(a.peak.total() == c.peak.total());
}

TEST_CASE("mode comparison on a small convnet") {
  Dataset data = make_images(128, 4, 3, 0.25, 0.15);
  ModelSpec s;
  s.arch = Arch::SmallConvNet;
  s.input_shape = {1, 12, 12};
  s.num_classes = 4;
  s.conv_channels = {6, 8};
  s.conv_strides = {1, 2};
  Model model = Model::build(s, 17);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.initial_lr = 0.02;
  train_model(model, data, cfg, 4);

  std::vector<int64_t> idx;
  for (int64_t i = 0; i < 64; ++i) idx.push_back(i);
  Tensor x = data.gather_train(idx);
  auto y = data.labels_train(idx);
  ModelBatchTarget target(model, x, y);

  ModeComparison cmp = compare_modes(target, 60, 7);
  CHECK(cmp.fp32.scale_applied == 1.0);
  CHECK(cmp.fp16.scale_applied == 256.0);
  CHECK(cmp.peak_byte_ratio <= 0.65);
  CHECK(cmp.kendall_tau >= 0.8);
  // global traces agree once the carried scale is divided out
  CHECK(std::fabs(cmp.fp16.global_trace / 256.0 - cmp.fp32.global_trace) <=
        0.1 * std::fabs(cmp.fp32.global_trace));
}

TEST_CASE("per-channel traces carry exactly the second-order scale on a tiny quadratic") {
  Rng rng(13);
  const int64_t n = 8;
  std::vector<double> a(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j <= i; ++j) {
      const double v = rng.uniform(0.2, 1.0) * (i == j ? 2.0 : 0.3);
      a[static_cast<size_t>(i * n + j)] = v;
      a[static_cast<size_t>(j * n + i)] = v;
    }
  QuadraticTarget target(a, std::vector<double>(n, 0.01));
  std::vector<ChannelGroup> groups;
  for (int64_t c = 0; c < 4; ++c) {
    ChannelGroup g;
    g.layer_id = 0;
    g.channel = c;
    g.own = {2 * c, 2 * c + 1};
    g.weight_count = 2;
    groups.push_back(g);
  }
  target.set_groups(groups);

  HutchinsonOptions opt;
  opt.n_v = 40;
  opt.seed = 3;
  TraceReport wide = estimate_trace(target, opt);
  opt.mode = TraceMode::FP16Scaled;
  TraceReport narrow = estimate_trace(target, opt);
  for (size_t i = 0; i < wide.channels.size(); ++i)
    CHECK(std::fabs(narrow.channels[i].trace - 256.0 * wide.channels[i].trace) <=
          std::ldexp(1.0, -6) * 256.0 * std::fabs(wide.channels[i].trace) + 1e-9);
}

TEST_CASE("non-finite products abort with the failing iteration") {
  // small weights keep the scaled first-order pass in range while the
  // second-order pass overflows the binary16 maximum
  const int64_t n = 4;
  std::vector<double> a(static_cast<size_t>(n * n), 300.0);
  for (int64_t i = 0; i < n; ++i) a[static_cast<size_t>(i * n + i)] = 400.0;
  QuadraticTarget target(a, std::vector<double>(n, 1e-3));
  HutchinsonOptions opt;
  opt.n_v = 3;
  opt.mode = TraceMode::FP16Scaled;
  opt.seed = 1;
  try {
    estimate_trace(target, opt);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NonFiniteHvp);
    CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
  }
}

TEST_CASE("kendall tau basics") {
  CHECK(kendall_tau({1, 2, 3, 4}, {10, 20, 30, 40}) == 1.0);
  CHECK(kendall_tau({1, 2, 3, 4}, {4, 3, 2, 1}) == -1.0);
  CHECK(std::fabs(kendall_tau({1, 2, 3, 4}, {2, 1, 4, 3})) < 0.5);
}
