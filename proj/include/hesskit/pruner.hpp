#pragma once

#include <cstdint>
#include <vector>

#include "hesskit/hutchinson.hpp"
#include "hesskit/model.hpp"
#include "hesskit/train.hpp"

namespace hesskit {

struct SensitivityRecord {
  int64_t layer = 0;
  int64_t channel = 0;
  double trace_estimate = 0.0;  // after the non-negative clamp
  double raw_trace = 0.0;
  bool clamped = false;
  double weight_norm_sq = 0.0;
  int64_t weight_count = 0;
  double sensitivity = 0.0;  // trace/(2p) * |w_p|^2
};

json sensitivity_to_json(const std::vector<SensitivityRecord>& records);

struct PrunePlan {
  std::vector<std::pair<int64_t, int64_t>> removals;  // (layer, channel), in order
  int64_t original_params = 0;
  int64_t predicted_retained_params = 0;
  double achieved_compression_ratio = 1.0;
  std::vector<std::pair<int64_t, double>> layer_prune_fraction;

  json to_json() const;
  static PrunePlan from_json(const json& j);
};

// One record per prunable channel group, ordered by (layer, channel).
// Negative trace estimates are clamped to zero before the sensitivity.
std::vector<SensitivityRecord> channel_sensitivity(const TraceReport& report, const Model& model);

// Greedy removal of the least sensitive channels until the retained parameter
// fraction reaches the target, honoring the per-layer prune limit and keeping
// at least one channel per layer. Ties break on ascending (layer, channel).
PrunePlan select_channels(const std::vector<SensitivityRecord>& records, const Model& model,
                          double target_compression, double prune_ratio_limit);

// Structural rebuild deleting removed channels' own and coupled parameters.
Model apply_prune(const Model& model, const PrunePlan& plan);

TrainHistory fine_tune(Model& model, const Dataset& data, const TrainConfig& config,
                       uint64_t seed);

struct DenseMatrix {
  int64_t n = 0;
  std::vector<double> a;  // row-major n*n
  double& at(int64_t i, int64_t j) { return a[static_cast<size_t>(i * n + j)]; }
  double at(int64_t i, int64_t j) const { return a[static_cast<size_t>(i * n + j)]; }
};

struct ExactHessian {
  DenseMatrix h;  // symmetrized
  double max_asymmetry = 0.0;
};

// Full Hessian assembled from unit-vector products; oracle scale only.
ExactHessian exact_hessian(const TraceTarget& target);

struct LagrangianResult {
  double delta_loss = 0.0;
  std::vector<double> optimal_update;  // surviving-parameter update, l order
};

// Second-order loss change for zeroing the pruned block plus the optimal
// update of the surviving block.
LagrangianResult lagrangian_change(const DenseMatrix& h, const std::vector<double>& w,
                                   const std::vector<int64_t>& prune_set);

}  // namespace hesskit
