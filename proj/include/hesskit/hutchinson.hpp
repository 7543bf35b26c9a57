#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hesskit/json_util.hpp"
#include "hesskit/model.hpp"
#include "hesskit/rng.hpp"
#include "hesskit/tape.hpp"

namespace hesskit {

enum class TraceMode { FP32, FP16Scaled };

std::string trace_mode_name(TraceMode m);
TraceMode trace_mode_from_name(const std::string& s);

struct TraceReport {
  TraceMode mode = TraceMode::FP32;
  int64_t n_v = 0;
  double scale_applied = 1.0;  // second-order scale left on the estimates
  double global_trace = 0.0;
  struct ChannelTrace {
    int64_t layer = 0;
    int64_t channel = 0;
    double trace = 0.0;
  };
  std::vector<ChannelTrace> channels;
  double residue_trace = 0.0;  // parameters outside every channel group
  std::vector<double> iterations;
  double wall_time_s = 0.0;
  PeakBytes peak;
  // per-iteration per-channel partial sums; filled only on request
  std::vector<std::vector<double>> channel_history;

  json to_json() const;
  static TraceReport from_json(const json& j);
};

// A scalar objective with a fixed data batch baked in. The estimator draws
// probe vectors over the flattened parameter list in order.
class TraceTarget {
 public:
  virtual ~TraceTarget() = default;
  virtual Tensor build_loss(Tape& tape) const = 0;
  virtual std::vector<Tensor> parameters() const = 0;
  virtual std::vector<ChannelGroup> groups() const { return {}; }
};

// Model loss over one fixed Hessian batch, evaluation semantics.
class ModelBatchTarget : public TraceTarget {
 public:
  ModelBatchTarget(Model& model, Tensor inputs, std::vector<int> labels)
      : model_(&model), inputs_(std::move(inputs)), labels_(std::move(labels)) {}
  Tensor build_loss(Tape& tape) const override {
    return model_->loss(tape, inputs_, labels_, false);
  }
  std::vector<Tensor> parameters() const override { return model_->trainable(); }
  std::vector<ChannelGroup> groups() const override { return model_->channel_groups(); }

 private:
  Model* model_;
  Tensor inputs_;
  std::vector<int> labels_;
};

std::vector<double> rademacher(int64_t dim, Rng& rng);

// Holds a first-order gradient graph (create_graph) and produces one
// Hessian-vector product per call; per-call nodes are rolled back.
// In FP16Scaled mode the forward and gradient graphs run at FP16EMU, the
// first-order gradients are scaled by 2^16 and unscaled on the tape, and each
// product carries the second-order scale 2^8.
class HvpSession {
 public:
  HvpSession(const TraceTarget& target, TraceMode mode);
  ~HvpSession();
  HvpSession(const HvpSession&) = delete;

  int64_t dim() const { return dim_; }
  double applied_scale() const;
  // one (s)Hv; result is flattened in parameter order
  std::vector<double> apply(const std::vector<double>& v);
  const Tape& tape() const { return tape_; }

 private:
  Tape tape_;
  TraceMode mode_;
  std::vector<Tensor> params_;
  std::vector<Tensor> grads_;
  std::vector<int64_t> offsets_;
  int64_t dim_ = 0;
  int64_t mark_ = 0;
};

// Convenience one-shot product on a fresh session.
std::vector<double> hvp(const TraceTarget& target, const std::vector<double>& v, TraceMode mode);

struct HutchinsonOptions {
  int64_t n_v = 300;
  TraceMode mode = TraceMode::FP32;
  uint64_t seed = 0;
  int threads = 1;
  bool keep_channel_history = false;
};

TraceReport estimate_trace(const TraceTarget& target, const HutchinsonOptions& options);
TraceReport estimate_trace(Model& model, const Tensor& batch_inputs,
                           const std::vector<int>& batch_labels, int64_t n_v, TraceMode mode,
                           uint64_t seed);

struct ModeComparison {
  double kendall_tau = 0.0;
  double peak_byte_ratio = 0.0;  // fp16 / fp32
  double wall_time_ratio = 0.0;  // informational only
  bool low_confidence = false;
  TraceReport fp32;
  TraceReport fp16;
  json to_json() const;
};

ModeComparison compare_modes(const TraceTarget& target, int64_t n_v, uint64_t seed,
                             int threads = 1);

double kendall_tau(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace hesskit
