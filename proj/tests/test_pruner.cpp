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

TraceReport report_for(const Model& model, std::function<double(int64_t, int64_t)> trace_of) {
  TraceReport r;
  r.n_v = 1;
  for (const auto& g : model.channel_groups())
    r.channels.push_back({g.layer_id, g.channel, trace_of(g.layer_id, g.channel)});
  return r;
}

ModelSpec small_convnet() {
  ModelSpec s;
  s.arch = Arch::SmallConvNet;
  s.input_shape = {1, 12, 12};
  s.num_classes = 4;
  s.conv_channels = {8, 12};
  s.conv_strides = {1, 2};
  return s;
}

Model masked_clone(const Model& model, const PrunePlan& plan) {
  Model masked = model.clone();
  auto groups = masked.channel_groups();
  std::vector<double*> slot(static_cast<size_t>(masked.param_count()));
  {
    int64_t off = 0;
    for (auto& p : masked.params())
      for (int64_t i = 0; i < p.t.numel(); ++i) slot[static_cast<size_t>(off++)] = p.t.data() + i;
  }
  for (const auto& [layer, channel] : plan.removals)
    for (const auto& g : groups)
      if (g.layer_id == layer && g.channel == channel)
        for (int64_t i : g.own) *slot[static_cast<size_t>(i)] = 0.0;
  return masked;
}

}  // namespace

TEST_CASE("sensitivity formula") {
  ModelSpec s;
  s.arch = Arch::Mlp;
  s.input_shape = {2};
  s.num_classes = 2;
  s.mlp_hidden = {3};
  Model m = Model::build(s, 1);
  // first hidden channel weights [0.1, -0.1]; p = 2
  Tensor& w = m.params()[0].t;
  w.data()[0] = 0.1;
  w.data()[1] = -0.1;

  auto report = report_for(m, [](int64_t, int64_t c) { return c == 0 ? 4.0 : 1.0; });
  auto records = channel_sensitivity(report, m);
  CHECK(records.size() == 3);
  CHECK(records[0].weight_count == 2);
  CHECK(records[0].weight_norm_sq == doctest::Approx(0.02).epsilon(1e-12));
  CHECK(records[0].sensitivity == doctest::Approx(0.02).epsilon(1e-12));

  SUBCASE("zero weights give zero sensitivity regardless of trace") {
    w.data()[2] = w.data()[3] = 0.0;  // channel 1 weights
    auto rec = channel_sensitivity(report_for(m, [](int64_t, int64_t) { return 1e9; }), m);
    CHECK(rec[1].sensitivity == 0.0);
  }
  SUBCASE("sensitivity is linear in the squared norm") {
    w.data()[2] = 0.2;
    w.data()[3] = 0.2;  // norm^2 = 0.08 vs 0.02
    auto rec = channel_sensitivity(report_for(m, [](int64_t, int64_t) { return 4.0; }), m);
    CHECK(rec[1].sensitivity == doctest::Approx(4.0 * rec[0].sensitivity).epsilon(1e-9));
  }
  SUBCASE("negative traces clamp to zero and are flagged") {
    auto rec = channel_sensitivity(report_for(m, [](int64_t, int64_t) { return -3.0; }), m);
    CHECK(rec[0].clamped);
    CHECK(rec[0].sensitivity == 0.0);
    CHECK(rec[0].raw_trace == -3.0);
  }
  SUBCASE("channel set mismatch is rejected") {
    TraceReport bad = report_for(m, [](int64_t, int64_t) { return 1.0; });
    bad.channels.pop_back();
    CHECK_THROWS_AS(channel_sensitivity(bad, m), Error);
  }
}

TEST_CASE("selection honors ties, limits, and survivor floors") {
  ModelSpec s;
  s.arch = Arch::Mlp;
  s.input_shape = {4};
  s.num_classes = 2;
  s.mlp_hidden = {10};
  Model m = Model::build(s, 3);
  auto equal = channel_sensitivity(report_for(m, [](int64_t, int64_t) { return 1.0; }), m);
  // force exactly equal sensitivities
  for (auto& r : equal) {
    r.sensitivity = 1.0;
    r.weight_norm_sq = 1.0;
  }

  SUBCASE("equal sensitivities remove ascending (layer, channel)") {
    PrunePlan plan = select_channels(equal, m, 0.5, 1.0);
    REQUIRE(plan.removals.size() >= 2);
    for (size_t i = 0; i < plan.removals.size(); ++i) {
      CHECK(plan.removals[i].first == 0);
      CHECK(plan.removals[i].second == static_cast<int64_t>(i));
    }
  }
  SUBCASE("prune ratio limit bounds per-layer removals") {
    PrunePlan plan = select_channels(equal, m, 0.30, 0.95);
    int64_t layer0 = 0;
    for (const auto& [layer, channel] : plan.removals)
      if (layer == 0) ++layer0;
    CHECK(layer0 <= 9);
  }
  SUBCASE("at least one channel survives even with limit 1") {
    PrunePlan plan = select_channels(equal, m, 0.30, 1.0);
    int64_t layer0 = 0;
    for (const auto& [layer, channel] : plan.removals)
      if (layer == 0) ++layer0;
    CHECK(layer0 <= 9);
  }
  SUBCASE("unreachable targets raise") {
    try {
      select_channels(equal, m, 0.05, 0.2);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::InfeasibleTarget);
    }
  }
}

TEST_CASE("selection is invariant under positive rescaling of traces") {
  Rng rng(404);
  for (int trial = 0; trial < 20; ++trial) {
    ModelSpec s;
    s.arch = Arch::Mlp;
    s.input_shape = {3};
    s.num_classes = 2;
    s.mlp_hidden = {static_cast<int64_t>(4 + rng.below(6)), static_cast<int64_t>(4 + rng.below(6))};
    Model m = Model::build(s, 100 + static_cast<uint64_t>(trial));

    std::vector<double> traces;
    auto base = report_for(m, [&](int64_t, int64_t) { return rng.uniform(0.0, 2.0); });
    const double c = std::exp(rng.uniform(-6.0, 6.0));
    TraceReport scaled = base;
    for (auto& ch : scaled.channels) ch.trace *= c;

    PrunePlan a = select_channels(channel_sensitivity(base, m), m, 0.4, 0.95);
    PrunePlan b = select_channels(channel_sensitivity(scaled, m), m, 0.4, 0.95);
    CHECK(a.removals == b.removals);
    CHECK(a.predicted_retained_params == b.predicted_retained_params);
  }
}

TEST_CASE("compression accounting matches the rebuilt model exactly") {
  Model m = Model::build(small_convnet(), 5);
  Rng rng(8);
  auto report = report_for(m, [&](int64_t, int64_t) { return rng.uniform(0.1, 3.0); });
  PrunePlan plan = select_channels(channel_sensitivity(report, m), m, 0.35, 0.95);
  Model pruned = apply_prune(m, plan);
  CHECK(pruned.param_count() == plan.predicted_retained_params);
  CHECK(plan.achieved_compression_ratio ==
        doctest::Approx(static_cast<double>(pruned.param_count()) /
                        static_cast<double>(m.param_count()))
            .epsilon(1e-12));
}

TEST_CASE("pruned forward equals the zero-masked forward") {
  Dataset data = make_images(64, 4, 11, 0.25, 0.15);
  Model m = Model::build(small_convnet(), 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.initial_lr = 0.02;
  train_model(m, data, cfg, 7);

  Rng rng(21);
  auto report = report_for(m, [&](int64_t, int64_t) { return rng.uniform(0.1, 3.0); });
  PrunePlan plan = select_channels(channel_sensitivity(report, m), m, 0.4, 0.95);
  Model pruned = apply_prune(m, plan);
  Model masked = masked_clone(m, plan);

  Rng input_rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = Tensor::zeros({1, 1, 12, 12});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = input_rng.uniform(0.0, 1.0);
    Tape t1, t2;
    t1.recording = false;
    t2.recording = false;
    Tensor a = pruned.forward(t1, x, false);
    Tensor b = masked.forward(t2, x, false);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(std::fabs(a.data()[i] - b.data()[i]) <= 1e-6);
  }

  SUBCASE("empty plans reproduce the forward bitwise") {
    PrunePlan empty;
    Model same = apply_prune(m, empty);
    Tensor x = Tensor::zeros({2, 1, 12, 12});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = 0.25;
    Tape t1, t2;
    t1.recording = false;
    t2.recording = false;
    CHECK(same.forward(t1, x, false).values() == m.forward(t2, x, false).values());
  }
}

TEST_CASE("exact Hessian of a quadratic recovers the matrix") {
  Rng rng(6);
  const int64_t n = 6;
  std::vector<double> a(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j <= i; ++j) {
      const double v = rng.uniform(-1.0, 1.0);
      a[static_cast<size_t>(i * n + j)] = v;
      a[static_cast<size_t>(j * n + i)] = v;
    }
  QuadraticTarget target(a, std::vector<double>(n, 0.5));
  ExactHessian h = exact_hessian(target);
  CHECK(h.max_asymmetry <= 1e-10);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      CHECK(h.h.at(i, j) == doctest::Approx(a[static_cast<size_t>(i * n + j)]).epsilon(1e-9));

  SUBCASE("trace agrees with the stochastic estimate within the bound") {
    HutchinsonOptions opt;
    opt.n_v = 300;
    opt.seed = 3;
    TraceReport r = estimate_trace(target, opt);
    double tr = 0.0;
    for (int64_t i = 0; i < n; ++i) tr += h.h.at(i, i);
    double mean = r.global_trace;
    double var = 0.0;
    for (double v : r.iterations) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / 299.0);
    CHECK(std::fabs(mean - tr) <= 5.0 * sd / std::sqrt(300.0) + 1e-9);
  }
}

TEST_CASE("exact Hessian rejects oversized problems") {
  ModelSpec s;
  s.arch = Arch::Mlp;
  s.input_shape = {64};
  s.num_classes = 16;
  s.mlp_hidden = {64};
  Model m = Model::build(s, 1);  // 64*64+64 + 64*16+16 > 2000
  Tensor x = Tensor::zeros({4, 64});
  PenalizedModelTarget target(m, x, {0, 1, 2, 3}, 0.0);
  CHECK_THROWS_AS(exact_hessian(target), Error);
}

TEST_CASE("lagrangian change on documented matrices") {
  DenseMatrix h;
  h.n = 2;
  h.a = {2, 1, 1, 3};
  SUBCASE("prune the first coordinate") {
    auto r = lagrangian_change(h, {1.0, 1.0}, {0});
    CHECK(r.delta_loss == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    REQUIRE(r.optimal_update.size() == 1);
    CHECK(r.optimal_update[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("decoupled blocks leave survivors untouched") {
    DenseMatrix d;
    d.n = 3;
    d.a = {2, 0, 0, 0, 3, 0, 0, 0, 4};
    auto r = lagrangian_change(d, {1.0, 2.0, 1.0}, {1});
    CHECK(r.delta_loss == doctest::Approx(0.5 * 3.0 * 4.0).epsilon(1e-12));
    for (double u : r.optimal_update) CHECK(u == 0.0);
  }
  SUBCASE("pruning everything scores the full quadratic") {
    auto r = lagrangian_change(h, {1.0, 1.0}, {0, 1});
    CHECK(r.delta_loss == doctest::Approx(0.5 * 7.0).epsilon(1e-12));
    CHECK(r.optimal_update.empty());
  }
  SUBCASE("singular surviving block raises") {
    DenseMatrix z;
    z.n = 2;
    z.a = {1, 0, 0, 0};
    try {
      lagrangian_change(z, {1.0, 1.0}, {0});
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::SingularBlock);
    }
  }
}

TEST_CASE("second-order prediction matches brute force on a trained tiny net") {
  Dataset data = make_blobs(200, 2, 19, 0.25, 0.15);
  ModelSpec s;
  s.arch = Arch::Mlp;
  s.input_shape = {2};
  s.num_classes = 2;
  s.mlp_hidden = {4};
  Model m = Model::build(s, 3);
  TrainConfig cfg;
  cfg.epochs = 120;
  cfg.batch_size = 64;
  cfg.initial_lr = 0.05;
  cfg.weight_decay = 1e-2;
  train_model(m, data, cfg, 9);

  // the oracle loss includes the same quadratic penalty the optimizer used
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < data.train_size(); ++i) idx.push_back(i);
  Tensor x = data.gather_train(idx);
  PenalizedModelTarget target(m, x, data.labels_train(idx), cfg.weight_decay);

  ExactHessian h = exact_hessian(target);

  auto flat_params = [&] {
    std::vector<double> flat;
    for (const auto& p : m.trainable())
      flat.insert(flat.end(), p.values().begin(), p.values().end());
    return flat;
  };
  auto loss_at = [&](const std::vector<double>& flat) {
    auto params = m.trainable();
    std::vector<double> saved = flat_params();
    int64_t off = 0;
    for (auto& p : params)
      for (int64_t i = 0; i < p.numel(); ++i) p.data()[i] = flat[static_cast<size_t>(off++)];
    Tape tape;
    tape.recording = false;
    const double value = target.build_loss(tape).item();
    off = 0;
    for (auto& p : params)
      for (int64_t i = 0; i < p.numel(); ++i) p.data()[i] = saved[static_cast<size_t>(off++)];
    return value;
  };

  const auto groups = m.channel_groups();
  const auto w0 = flat_params();
  const double base = loss_at(w0);
  int checked = 0;
  for (const auto& g : groups) {
    auto r = lagrangian_change(h.h, w0, g.own);
    std::vector<double> moved = w0;
    for (int64_t i : g.own) moved[static_cast<size_t>(i)] = 0.0;
    int64_t li = 0;
    for (int64_t i = 0; i < static_cast<int64_t>(moved.size()); ++i) {
      if (std::find(g.own.begin(), g.own.end(), i) != g.own.end()) continue;
      moved[static_cast<size_t>(i)] += r.optimal_update[static_cast<size_t>(li++)];
    }
    const double actual = loss_at(moved) - base;
    CHECK(std::fabs(actual - r.delta_loss) <= 0.1 * std::fabs(actual) + 1e-4);
    ++checked;
  }
  CHECK(checked == 4);
}

TEST_CASE("fine-tuning recovers accuracy on the image task") {
  Dataset data = make_images(600, 4, 23, 0.25, 0.12);
  Model m = Model::build(small_convnet(), 5);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 64;
  cfg.initial_lr = 0.05;
  train_model(m, data, cfg, 7);
  const double before = test_accuracy(m, data);

  std::vector<int64_t> idx;
  for (int64_t i = 0; i < 128; ++i) idx.push_back(i);
  Tensor hx = data.gather_train(idx);
  TraceReport trace = estimate_trace(m, hx, data.labels_train(idx), 100, TraceMode::FP32, 31);
  PrunePlan plan = select_channels(channel_sensitivity(trace, m), m, 0.30, 0.95);
  Model pruned = apply_prune(m, plan);

  TrainConfig ft;
  ft.epochs = 10;
  ft.batch_size = 64;
  ft.initial_lr = 0.01;
  fine_tune(pruned, data, ft, 13);
  CHECK(test_accuracy(pruned, data) >= 0.9 * before);

  SUBCASE("zero-epoch fine-tune is the identity") {
    Model copy = pruned.clone();
    TrainConfig none;
    none.epochs = 0;
    fine_tune(copy, data, none, 1);
    for (size_t i = 0; i < copy.params().size(); ++i)
      CHECK(copy.params()[i].t.values() == pruned.params()[i].t.values());
  }
}
