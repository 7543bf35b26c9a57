#include "hesskit/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>

namespace hesskit {

json sensitivity_to_json(const std::vector<SensitivityRecord>& records) {
  json arr = json::array();
  for (const auto& r : records) {
    json e;
    e["layer"] = r.layer;
    e["channel"] = r.channel;
    e["trace"] = r.trace_estimate;
    e["raw_trace"] = r.raw_trace;
    e["clamped"] = r.clamped;
    e["weight_norm_sq"] = r.weight_norm_sq;
    e["weight_count"] = r.weight_count;
    e["sensitivity"] = r.sensitivity;
    arr.push_back(e);
  }
  json j;
  j["records"] = arr;
  int64_t clamped = 0;
  for (const auto& r : records) clamped += r.clamped ? 1 : 0;
  j["clamped_count"] = clamped;
  return j;
}

json PrunePlan::to_json() const {
  json j;
  json rem = json::array();
  for (const auto& [layer, channel] : removals) {
    json e;
    e["layer"] = layer;
    e["channel"] = channel;
    rem.push_back(e);
  }
  j["removals"] = rem;
  j["original_params"] = original_params;
  j["predicted_retained_params"] = predicted_retained_params;
  j["achieved_compression_ratio"] = achieved_compression_ratio;
  json fractions = json::array();
  for (const auto& [layer, frac] : layer_prune_fraction) {
    json e;
    e["layer"] = layer;
    e["fraction"] = frac;
    fractions.push_back(e);
  }
  j["layer_prune_fraction"] = fractions;
  return j;
}

PrunePlan PrunePlan::from_json(const json& j) {
  PrunePlan p;
  for (const auto& e : j.at("removals"))
    p.removals.emplace_back(e.at("layer").get<int64_t>(), e.at("channel").get<int64_t>());
  p.original_params = j.at("original_params").get<int64_t>();
  p.predicted_retained_params = j.at("predicted_retained_params").get<int64_t>();
  p.achieved_compression_ratio = j.at("achieved_compression_ratio").get<double>();
  for (const auto& e : j.at("layer_prune_fraction"))
    p.layer_prune_fraction.emplace_back(e.at("layer").get<int64_t>(),
                                        e.at("fraction").get<double>());
  return p;
}

std::vector<SensitivityRecord> channel_sensitivity(const TraceReport& report, const Model& model) {
  const auto groups = model.channel_groups();
  std::map<std::pair<int64_t, int64_t>, double> traces;
  for (const auto& c : report.channels) {
    if (!traces.emplace(std::make_pair(c.layer, c.channel), c.trace).second)
      raise(Errc::ChannelSetMismatch, "duplicate channel in trace report");
  }
  if (traces.size() != groups.size())
    raise(Errc::ChannelSetMismatch, "trace report channel count does not match the model");

  // flat parameter vector for the weight norms
  std::vector<double> flat(static_cast<size_t>(model.param_count()));
  {
    int64_t off = 0;
    for (const auto& p : model.params()) {
      std::memcpy(flat.data() + off, p.t.data(), static_cast<size_t>(p.t.numel()) * sizeof(double));
      off += p.t.numel();
    }
  }

  std::vector<SensitivityRecord> records;
  for (const auto& g : groups) {
    auto it = traces.find({g.layer_id, g.channel});
    if (it == traces.end())
      raise(Errc::ChannelSetMismatch, "trace report is missing a model channel");
    if (!g.prunable) continue;
    SensitivityRecord r;
    r.layer = g.layer_id;
    r.channel = g.channel;
    r.raw_trace = it->second;
    r.clamped = r.raw_trace < 0.0;
    r.trace_estimate = r.clamped ? 0.0 : r.raw_trace;
    r.weight_count = g.weight_count;
    double norm_sq = 0.0;
    for (int64_t k = 0; k < g.weight_count; ++k) {
      const double w = flat[static_cast<size_t>(g.own[static_cast<size_t>(k)])];
      norm_sq += w * w;
    }
    r.weight_norm_sq = norm_sq;
    r.sensitivity = r.trace_estimate / (2.0 * static_cast<double>(r.weight_count)) * norm_sq;
    records.push_back(r);
  }
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.layer, a.channel) < std::tie(b.layer, b.channel);
  });
  return records;
}

PrunePlan select_channels(const std::vector<SensitivityRecord>& records, const Model& model,
                          double target_compression, double prune_ratio_limit) {
  if (records.empty()) raise(Errc::InvalidSpec, "no sensitivity records");
  if (!(target_compression > 0.0 && target_compression < 1.0))
    raise(Errc::InvalidSpec, "target compression must be in (0,1)");
  if (!(prune_ratio_limit > 0.0 && prune_ratio_limit <= 1.0))
    raise(Errc::InvalidSpec, "prune ratio limit must be in (0,1]");

  const auto groups = model.channel_groups();
  std::map<std::pair<int64_t, int64_t>, const ChannelGroup*> by_key;
  for (const auto& g : groups) by_key[{g.layer_id, g.channel}] = &g;

  std::vector<const SensitivityRecord*> order;
  order.reserve(records.size());
  for (const auto& r : records) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return std::tie(a->sensitivity, a->layer, a->channel) <
           std::tie(b->sensitivity, b->layer, b->channel);
  });

  const int64_t total = model.param_count();
  std::vector<bool> removed_mask(static_cast<size_t>(total), false);
  int64_t removed_count = 0;
  std::map<int64_t, int64_t> pruned_per_layer;

  PrunePlan plan;
  plan.original_params = total;

  auto retained_fraction = [&] {
    return static_cast<double>(total - removed_count) / static_cast<double>(total);
  };

  for (const auto* rec : order) {
    if (retained_fraction() <= target_compression) break;
    auto it = by_key.find({rec->layer, rec->channel});
    if (it == by_key.end()) raise(Errc::ChannelSetMismatch, "record has no matching group");
    const ChannelGroup& g = *it->second;
    if (!g.prunable) continue;

    const int64_t channels = model.layer_channel_count(g.layer_id);
    const int64_t pruned = pruned_per_layer[g.layer_id];
    // honor the per-layer limit and always leave one survivor
    if (static_cast<double>(pruned + 1) / static_cast<double>(channels) > prune_ratio_limit)
      continue;
    if (pruned + 1 >= channels) continue;

    for (int64_t i : g.own)
      if (!removed_mask[static_cast<size_t>(i)]) {
        removed_mask[static_cast<size_t>(i)] = true;
        ++removed_count;
      }
    for (int64_t i : g.coupled)
      if (!removed_mask[static_cast<size_t>(i)]) {
        removed_mask[static_cast<size_t>(i)] = true;
        ++removed_count;
      }
    pruned_per_layer[g.layer_id] = pruned + 1;
    plan.removals.emplace_back(g.layer_id, g.channel);
  }

  if (retained_fraction() > target_compression + 0.05)
    raise(Errc::InfeasibleTarget,
          "per-layer limits prevent reaching within 5 percentage points of the target");

  plan.predicted_retained_params = total - removed_count;
  plan.achieved_compression_ratio =
      static_cast<double>(plan.predicted_retained_params) / static_cast<double>(total);
  for (int64_t layer = 0; layer < model.prunable_layer_count(); ++layer) {
    const auto it = pruned_per_layer.find(layer);
    const int64_t pruned = it == pruned_per_layer.end() ? 0 : it->second;
    plan.layer_prune_fraction.emplace_back(
        layer, static_cast<double>(pruned) / static_cast<double>(model.layer_channel_count(layer)));
  }
  return plan;
}

Model apply_prune(const Model& model, const PrunePlan& plan) {
  std::vector<std::set<int64_t>> removed(static_cast<size_t>(model.prunable_layer_count()));
  for (const auto& [layer, channel] : plan.removals) {
    if (layer < 0 || layer >= model.prunable_layer_count())
      raise(Errc::StructuralViolation, "plan references unknown layer");
    if (channel < 0 || channel >= model.layer_channel_count(layer))
      raise(Errc::StructuralViolation, "plan references unknown channel");
    if (!removed[static_cast<size_t>(layer)].insert(channel).second)
      raise(Errc::StructuralViolation, "plan removes a channel twice");
  }
  std::vector<std::vector<int64_t>> survivors(static_cast<size_t>(model.prunable_layer_count()));
  for (int64_t layer = 0; layer < model.prunable_layer_count(); ++layer) {
    for (int64_t ch = 0; ch < model.layer_channel_count(layer); ++ch)
      if (!removed[static_cast<size_t>(layer)].count(ch))
        survivors[static_cast<size_t>(layer)].push_back(ch);
  }
  return model.rebuild_pruned(survivors);
}

TrainHistory fine_tune(Model& model, const Dataset& data, const TrainConfig& config,
                       uint64_t seed) {
  return train_model(model, data, config, seed);
}

ExactHessian exact_hessian(const TraceTarget& target) {
  int64_t n = 0;
  for (const auto& p : target.parameters()) n += p.numel();
  if (n > 2000) raise(Errc::TooLarge, "exact Hessian supports at most 2000 parameters");

  HvpSession session(target, TraceMode::FP32);
  DenseMatrix raw;
  raw.n = n;
  raw.a.assign(static_cast<size_t>(n * n), 0.0);
  std::vector<double> e(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    e[static_cast<size_t>(i)] = 1.0;
    const auto col = session.apply(e);
    e[static_cast<size_t>(i)] = 0.0;
    for (int64_t r = 0; r < n; ++r) raw.at(r, i) = col[static_cast<size_t>(r)];
  }

  ExactHessian out;
  out.h.n = n;
  out.h.a.assign(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      out.h.at(i, j) = 0.5 * (raw.at(i, j) + raw.at(j, i));
      out.max_asymmetry = std::max(out.max_asymmetry, std::fabs(raw.at(i, j) - raw.at(j, i)));
    }
  return out;
}

namespace {

// Solves A x = b in place by partial-pivot LU. A is m x m row-major.
std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b, int64_t m) {
  std::vector<int64_t> piv(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) piv[static_cast<size_t>(i)] = i;
  for (int64_t k = 0; k < m; ++k) {
    int64_t best = k;
    double best_abs = std::fabs(a[static_cast<size_t>(k * m + k)]);
    for (int64_t i = k + 1; i < m; ++i) {
      const double v = std::fabs(a[static_cast<size_t>(i * m + k)]);
      if (v > best_abs) {
        best = i;
        best_abs = v;
      }
    }
    if (best_abs < 1e-10)
      raise(Errc::SingularBlock, "surviving-parameter Hessian block is singular to tolerance");
    if (best != k) {
      for (int64_t j = 0; j < m; ++j)
        std::swap(a[static_cast<size_t>(k * m + j)], a[static_cast<size_t>(best * m + j)]);
      std::swap(b[static_cast<size_t>(k)], b[static_cast<size_t>(best)]);
    }
    const double pivot = a[static_cast<size_t>(k * m + k)];
    for (int64_t i = k + 1; i < m; ++i) {
      const double f = a[static_cast<size_t>(i * m + k)] / pivot;
      if (f == 0.0) continue;
      a[static_cast<size_t>(i * m + k)] = 0.0;
      for (int64_t j = k + 1; j < m; ++j)
        a[static_cast<size_t>(i * m + j)] -= f * a[static_cast<size_t>(k * m + j)];
      b[static_cast<size_t>(i)] -= f * b[static_cast<size_t>(k)];
    }
  }
  std::vector<double> x(static_cast<size_t>(m), 0.0);
  for (int64_t i = m - 1; i >= 0; --i) {
    double acc = b[static_cast<size_t>(i)];
    for (int64_t j = i + 1; j < m; ++j) acc -= a[static_cast<size_t>(i * m + j)] * x[static_cast<size_t>(j)];
    x[static_cast<size_t>(i)] = acc / a[static_cast<size_t>(i * m + i)];
  }
  return x;
}

}  // namespace

LagrangianResult lagrangian_change(const DenseMatrix& h, const std::vector<double>& w,
                                   const std::vector<int64_t>& prune_set) {
  const int64_t n = h.n;
  if (static_cast<int64_t>(w.size()) != n)
    raise(Errc::ShapeMismatch, "weight vector length does not match the Hessian");
  if (prune_set.empty()) raise(Errc::ShapeMismatch, "prune index set is empty");
  std::vector<bool> pruned(static_cast<size_t>(n), false);
  for (int64_t i : prune_set) {
    if (i < 0 || i >= n) raise(Errc::ShapeMismatch, "prune index out of range");
    if (pruned[static_cast<size_t>(i)]) raise(Errc::ShapeMismatch, "duplicate prune index");
    pruned[static_cast<size_t>(i)] = true;
  }

  std::vector<int64_t> p, l;
  for (int64_t i = 0; i < n; ++i) (pruned[static_cast<size_t>(i)] ? p : l).push_back(i);
  const int64_t np = static_cast<int64_t>(p.size());
  const int64_t nl = static_cast<int64_t>(l.size());

  std::vector<double> wp(static_cast<size_t>(np));
  for (int64_t i = 0; i < np; ++i) wp[static_cast<size_t>(i)] = w[static_cast<size_t>(p[static_cast<size_t>(i)])];

  // H_pp w_p
  std::vector<double> hpp_wp(static_cast<size_t>(np), 0.0);
  for (int64_t i = 0; i < np; ++i)
    for (int64_t j = 0; j < np; ++j)
      hpp_wp[static_cast<size_t>(i)] +=
          h.at(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]) * wp[static_cast<size_t>(j)];

  LagrangianResult out;
  if (nl == 0) {  // full prune, no surviving block
    double acc = 0.0;
    for (int64_t i = 0; i < np; ++i) acc += wp[static_cast<size_t>(i)] * hpp_wp[static_cast<size_t>(i)];
    out.delta_loss = 0.5 * acc;
    return out;
  }

  // rhs = H_lp w_p ; solve H_ll x = rhs
  std::vector<double> hll(static_cast<size_t>(nl * nl));
  std::vector<double> rhs(static_cast<size_t>(nl), 0.0);
  for (int64_t i = 0; i < nl; ++i) {
    for (int64_t j = 0; j < nl; ++j)
      hll[static_cast<size_t>(i * nl + j)] = h.at(l[static_cast<size_t>(i)], l[static_cast<size_t>(j)]);
    for (int64_t j = 0; j < np; ++j)
      rhs[static_cast<size_t>(i)] +=
          h.at(l[static_cast<size_t>(i)], p[static_cast<size_t>(j)]) * wp[static_cast<size_t>(j)];
  }
  std::vector<double> x = solve_dense(std::move(hll), std::move(rhs), nl);

  // delta = 1/2 (w_p' H_pp w_p - w_p' H_pl x)
  double quad = 0.0;
  for (int64_t i = 0; i < np; ++i) quad += wp[static_cast<size_t>(i)] * hpp_wp[static_cast<size_t>(i)];
  double cross = 0.0;
  for (int64_t i = 0; i < np; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < nl; ++j)
      acc += h.at(p[static_cast<size_t>(i)], l[static_cast<size_t>(j)]) * x[static_cast<size_t>(j)];
    cross += wp[static_cast<size_t>(i)] * acc;
  }
  out.delta_loss = 0.5 * (quad - cross);
  out.optimal_update = std::move(x);
  return out;
}

}  // namespace hesskit
