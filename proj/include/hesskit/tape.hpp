#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hesskit/tensor.hpp"

namespace hesskit {

struct PeakBytes {
  int64_t fp32_saved = 0;
  int64_t fp16_saved = 0;
  int64_t param_bytes = 0;
  int64_t total() const { return fp32_saved + fp16_saved + param_bytes; }
};

class GradientSink;
class Tape;

struct Node {
  // Accumulates adjoints of the node inputs given the upstream adjoint of the
  // node output. Runs with the tape precision set to the node precision and
  // tape.recording mirroring create_graph.
  std::function<void(Tape&, GradientSink&, const Tensor&)> backward;
  Tensor output;
  std::vector<Tensor> kept;  // saved-for-backward tensors (inputs, aux)
  Precision precision = Precision::FP32;
  std::vector<TensorData*> noted;  // liveness accounting entries
};

// Append-only computation graph. One tape is confined to one worker; separate
// tapes may run concurrently on separate workers.
class Tape {
 public:
  bool recording = true;
  // Set during the backward sweep: kernels then take their inputs as-is and
  // round only outputs, so adjoints cross wide-to-narrow boundaries the way
  // the scaled values do (saved forward tensors are already binary16).
  bool in_backward = false;

  Precision precision() const { return prec_; }

  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  Node& node(int64_t i) { return nodes_[static_cast<size_t>(i)]; }
  uint64_t epoch() const { return epoch_; }

  int64_t mark() const { return size(); }
  void truncate(int64_t mark);
  void clear();

  // Records a node, accounting bytes for its output and kept tensors.
  int64_t record(Node n);

  PeakBytes peak() const { return peak_; }
  int64_t live_total() const { return live_.total(); }

  // True when the tensor's node reference is usable on this tape.
  bool valid_ref(const Tensor& t) const {
    if (t.node() < 0) return true;
    return t.tape() == this && t.raw()->tape_epoch == epoch_ && t.node() < size();
  }

 private:
  friend class PrecisionGuard;
  void note(TensorData* d, Node& n);

  std::vector<Node> nodes_;
  Precision prec_ = Precision::FP32;
  std::unordered_map<TensorData*, int> live_refs_;
  PeakBytes live_;
  PeakBytes peak_;
  uint64_t epoch_ = 1;
};

class PrecisionGuard {
 public:
  PrecisionGuard(Tape& t, Precision p) : t_(t), saved_(t.prec_) { t_.prec_ = p; }
  ~PrecisionGuard() { t_.prec_ = saved_; }
  PrecisionGuard(const PrecisionGuard&) = delete;

 private:
  Tape& t_;
  Precision saved_;
};

class RecordingGuard {
 public:
  RecordingGuard(Tape& t, bool on) : t_(t), saved_(t.recording) { t_.recording = on; }
  ~RecordingGuard() { t_.recording = saved_; }
  RecordingGuard(const RecordingGuard&) = delete;

 private:
  Tape& t_;
  bool saved_;
};

// Adjoint accumulator keyed by tensor storage.
class GradientSink {
 public:
  bool wants(const Tensor& t) const { return t.requires_grad(); }
  void add(Tape& tape, const Tensor& target, Tensor grad);
  Tensor get(const Tensor& t) const {
    auto it = adj_.find(t.raw());
    return it == adj_.end() ? Tensor() : it->second;
  }
  void seed(const Tensor& t, Tensor g) { adj_[t.raw()] = std::move(g); }

 private:
  std::unordered_map<TensorData*, Tensor> adj_;
};

// Static loss scaler. Scales are fixed powers of two; the first-order default
// is 2^16 and the second-order default is 2^8.
struct GradScaler {
  enum class Mode { FirstOrder, SecondOrder };
  Mode mode;
  double scale;

  explicit GradScaler(Mode m) : mode(m), scale(m == Mode::FirstOrder ? 65536.0 : 256.0) {}
  GradScaler(Mode m, double s) : mode(m), scale(s) {
    if (!(s > 0.0) || std::ldexp(1.0, static_cast<int>(std::lround(std::log2(s)))) != s)
      raise(Errc::InvalidSpec, "gradient scale must be a positive power of two");
  }
};

namespace ops {

Tensor constant(std::vector<int64_t> shape, std::vector<double> v);

Tensor matmul(Tape&, const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor conv2d(Tape&, const Tensor& x, const Tensor& w, int stride, int pad);
Tensor conv2d_input_grad(Tape&, const Tensor& dy, const Tensor& w, int stride, int pad,
                         int64_t in_h, int64_t in_w);
Tensor conv2d_weight_grad(Tape&, const Tensor& x, const Tensor& dy, int stride, int pad,
                          int64_t kh, int64_t kw);
Tensor add(Tape&, const Tensor& a, const Tensor& b);
Tensor sub(Tape&, const Tensor& a, const Tensor& b);
Tensor neg(Tape&, const Tensor& x);
Tensor mul(Tape&, const Tensor& a, const Tensor& b);
Tensor scale(Tape&, const Tensor& x, double c);
Tensor scalar_mul(Tape&, const Tensor& s, const Tensor& x);
Tensor scalar_bcast(Tape&, const Tensor& s, std::vector<int64_t> shape);
Tensor relu(Tape&, const Tensor& x);
Tensor bias_add(Tape&, const Tensor& x, const Tensor& b);
Tensor channel_reduce(Tape&, const Tensor& x);  // sum over every axis but axis 1
Tensor channel_bcast(Tape&, const Tensor& v, std::vector<int64_t> shape);
Tensor channel_mul(Tape&, const Tensor& x, const Tensor& s);
Tensor spatial_sum(Tape&, const Tensor& x);                      // [N,C,H,W] -> [N,C]
Tensor spatial_bcast(Tape&, const Tensor& x, int64_t h, int64_t w);
Tensor reshape(Tape&, const Tensor& x, std::vector<int64_t> shape);
Tensor sum_all(Tape&, const Tensor& x);  // -> rank-0 scalar
Tensor row_softmax(Tape&, const Tensor& z);
Tensor row_sum_bcast(Tape&, const Tensor& x);
Tensor softmax_xent(Tape&, const Tensor& z, const std::vector<int>& labels);
// Training-form batch norm over [N,C] or [N,C,H,W]. Writes batch statistics
// for the caller's running-average update. First-order only.
Tensor batchnorm_train(Tape&, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps, std::vector<double>* batch_mean, std::vector<double>* batch_var);
// Inference-form batch norm: running statistics folded into a per-channel
// affine map; differentiable to any order.
Tensor batchnorm_eval(Tape&, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const std::vector<double>& rmean, const std::vector<double>& rvar,
                      double eps);
Tensor global_avg_pool(Tape&, const Tensor& x);
Tensor flatten(Tape&, const Tensor& x);
Tensor fake_quant_op(Tape&, const Tensor& x, double s, int32_t z, int qmin, int qmax,
                     double alpha, double beta);

}  // namespace ops

// Reverse sweep from a scalar loss. With create_graph the gradient computation
// is recorded as new nodes, so the returned gradients are differentiable.
// The tape is cleared afterwards unless create_graph or retain_graph is set.
std::vector<Tensor> backward(Tape&, const Tensor& loss, const std::vector<Tensor>& params,
                             bool create_graph, bool retain_graph = false);

// Backward of (scale x loss); raises NonFiniteGradient if any result entry is
// inf or NaN. Meant to run over a graph recorded at FP16EMU precision.
std::vector<Tensor> scaled_backward(Tape&, const Tensor& loss, const std::vector<Tensor>& params,
                                    const GradScaler&, bool create_graph,
                                    bool retain_graph = false);

// Divides each gradient by the scale at full working precision.
std::vector<Tensor> unscale(const std::vector<Tensor>& grads, const GradScaler&);
// On-tape variant used when the result must stay differentiable.
std::vector<Tensor> unscale_on_tape(Tape&, const std::vector<Tensor>& grads, const GradScaler&);

PeakBytes peak_bytes(const Tape&);

// Name-dispatched forward for the fixed primitive vocabulary.
struct PrimitiveAttrs {
  int stride = 1;
  int pad = 0;
  double eps = 1e-5;
  std::vector<int> labels;
};
Tensor primitive_forward(Tape&, const std::string& kind, const std::vector<Tensor>& inputs,
                         const PrimitiveAttrs& attrs = {});

}  // namespace hesskit
