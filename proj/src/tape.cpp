#include "hesskit/tape.hpp"

#include <cmath>

namespace hesskit {

void Tape::note(TensorData* d, Node& n) {
  if (d == nullptr || d->values.empty()) return;
  auto [it, fresh] = live_refs_.try_emplace(d, 0);
  it->second += 1;
  n.noted.push_back(d);
  if (it->second > 1) return;  // already accounted
  const int64_t vals = static_cast<int64_t>(d->values.size());
  if (d->is_param) {
    live_.param_bytes += 4 * vals;  // FP32 master copy
  } else if (d->precision == Precision::FP16EMU) {
    live_.fp16_saved += 2 * vals;
  } else {
    live_.fp32_saved += 4 * vals;
  }
  if (live_.total() > peak_.total()) peak_ = live_;
}

int64_t Tape::record(Node n) {
  note(n.output.raw(), n);
  for (auto& t : n.kept)
    if (t.defined()) note(t.raw(), n);
  nodes_.push_back(std::move(n));
  const int64_t id = size() - 1;
  Node& stored = nodes_.back();
  stored.output.raw()->node = id;
  stored.output.raw()->tape = this;
  stored.output.raw()->tape_epoch = epoch_;
  return id;
}

void Tape::truncate(int64_t mark) {
  while (size() > mark) {
    Node& n = nodes_.back();
    for (TensorData* d : n.noted) {
      auto it = live_refs_.find(d);
      if (it == live_refs_.end()) continue;
      if (--it->second == 0) {
        const int64_t vals = static_cast<int64_t>(d->values.size());
        if (d->is_param)
          live_.param_bytes -= 4 * vals;
        else if (d->precision == Precision::FP16EMU)
          live_.fp16_saved -= 2 * vals;
        else
          live_.fp32_saved -= 4 * vals;
        live_refs_.erase(it);
      }
    }
    n.output.raw()->node = -1;
    n.output.raw()->tape = nullptr;
    nodes_.pop_back();
  }
}

void Tape::clear() {
  truncate(0);
  live_refs_.clear();
  live_ = PeakBytes{};
  epoch_ += 1;
}

void GradientSink::add(Tape& tape, const Tensor& target, Tensor grad) {
  if (!target.requires_grad()) return;
  auto it = adj_.find(target.raw());
  if (it == adj_.end()) {
    adj_.emplace(target.raw(), std::move(grad));
    return;
  }
  PrecisionGuard g(tape, target.precision());
  it->second = ops::add(tape, it->second, grad);
}

std::vector<Tensor> backward(Tape& tape, const Tensor& loss, const std::vector<Tensor>& params,
                             bool create_graph, bool retain_graph) {
  if (!loss.defined() || loss.node() < 0 || loss.tape() != &tape || !tape.valid_ref(loss))
    raise(Errc::DetachedLoss, "loss is not resident on this tape");
  if (loss.numel() != 1) raise(Errc::NonScalarLoss, "loss must be a scalar");

  GradientSink sink;
  sink.seed(loss, Tensor::scalar(1.0));

  struct BackwardPhase {
    Tape& t;
    bool saved;
    explicit BackwardPhase(Tape& tape) : t(tape), saved(tape.in_backward) {
      t.in_backward = true;
    }
    ~BackwardPhase() { t.in_backward = saved; }
  } phase(tape);

  {
    RecordingGuard rec(tape, create_graph);
    for (int64_t i = loss.node(); i >= 0; --i) {
      // Copy the node pieces out: rules recorded with create_graph push new
      // nodes and may reallocate the node vector mid-call.
      Tensor out = tape.node(i).output;
      if (!out.requires_grad()) continue;
      Tensor up = sink.get(out);
      if (!up.defined()) continue;
      auto fn = tape.node(i).backward;
      PrecisionGuard pg(tape, tape.node(i).precision);
      fn(tape, sink, up);
    }
  }

  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    Tensor g = sink.get(p);
    if (!g.defined()) g = Tensor::zeros(p.shape(), p.precision());
    grads.push_back(std::move(g));
  }
  if (!create_graph && !retain_graph) tape.clear();
  return grads;
}

std::vector<Tensor> scaled_backward(Tape& tape, const Tensor& loss,
                                    const std::vector<Tensor>& params, const GradScaler& scaler,
                                    bool create_graph, bool retain_graph) {
  Tensor scaled;
  {
    PrecisionGuard g(tape, Precision::FP32);  // loss scaling stays wide
    scaled = ops::scale(tape, loss, scaler.scale);
  }
  auto grads = backward(tape, scaled, params, create_graph, retain_graph || create_graph);
  for (const auto& g : grads)
    for (double v : g.values())
      if (!std::isfinite(v))
        raise(Errc::NonFiniteGradient,
              "scaled gradient overflowed or is NaN; lower the static scale "
              "(dynamic scaling is not supported)");
  return grads;
}

std::vector<Tensor> unscale(const std::vector<Tensor>& grads, const GradScaler& scaler) {
  std::vector<Tensor> out;
  out.reserve(grads.size());
  for (const auto& g : grads) {
    Tensor u = g.detached_clone();
    for (double& v : u.values()) v /= scaler.scale;
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<Tensor> unscale_on_tape(Tape& tape, const std::vector<Tensor>& grads,
                                    const GradScaler& scaler) {
  PrecisionGuard g(tape, Precision::FP32);
  std::vector<Tensor> out;
  out.reserve(grads.size());
  for (const auto& sg : grads) out.push_back(ops::scale(tape, sg, 1.0 / scaler.scale));
  return out;
}

PeakBytes peak_bytes(const Tape& tape) { return tape.peak(); }

}  // namespace hesskit
