#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "hesskit/hutchinson.hpp"
#include "hesskit/model.hpp"
#include "hesskit/rng.hpp"
#include "hesskit/tape.hpp"

namespace hesskit::testing {

// scalar objective over a fixed parameter list
using LossFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

inline double eval_loss(const LossFn& fn, const std::vector<Tensor>& params) {
  Tape tape;
  tape.recording = false;
  return fn(tape, params).item();
}

inline std::vector<Tensor> clone_params(const std::vector<Tensor>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) {
    Tensor t = p.detached_clone();
    t.set_requires_grad(true);
    out.push_back(t);
  }
  return out;
}

// central finite differences of the loss w.r.t. every parameter entry
inline std::vector<std::vector<double>> fd_gradient(const LossFn& fn,
                                                    const std::vector<Tensor>& params,
                                                    double eps = 1e-5) {
  std::vector<std::vector<double>> grads;
  for (size_t p = 0; p < params.size(); ++p) {
    std::vector<double> g(static_cast<size_t>(params[p].numel()));
    for (int64_t i = 0; i < params[p].numel(); ++i) {
      const double saved = params[p].data()[i];
      const_cast<Tensor&>(params[p]).data()[i] = saved + eps;
      const double up = eval_loss(fn, params);
      const_cast<Tensor&>(params[p]).data()[i] = saved - eps;
      const double down = eval_loss(fn, params);
      const_cast<Tensor&>(params[p]).data()[i] = saved;
      g[static_cast<size_t>(i)] = (up - down) / (2.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

inline std::vector<std::vector<double>> tape_gradient(const LossFn& fn,
                                                      const std::vector<Tensor>& params) {
  Tape tape;
  Tensor loss = fn(tape, params);
  auto grads = backward(tape, loss, params, false);
  std::vector<std::vector<double>> out;
  for (const auto& g : grads) out.push_back(g.values());
  return out;
}

// autodiff Hessian-vector product via differentiating the gradient-probe dot
inline std::vector<std::vector<double>> tape_hvp(const LossFn& fn,
                                                 const std::vector<Tensor>& params,
                                                 const std::vector<std::vector<double>>& v) {
  Tape tape;
  Tensor loss = fn(tape, params);
  auto grads = backward(tape, loss, params, true, true);
  Tensor dot;
  for (size_t p = 0; p < grads.size(); ++p) {
    Tensor vp = ops::constant(params[p].shape(), v[p]);
    Tensor s = ops::sum_all(tape, ops::mul(tape, grads[p], vp));
    dot = dot.defined() ? ops::add(tape, dot, s) : s;
  }
  auto hv = backward(tape, dot, params, false, true);
  std::vector<std::vector<double>> out;
  for (const auto& h : hv) out.push_back(h.values());
  return out;
}

// finite differences of the analytic gradient along direction v
inline std::vector<std::vector<double>> fd_hvp(const LossFn& fn, const std::vector<Tensor>& params,
                                               const std::vector<std::vector<double>>& v,
                                               double eps = 1e-5) {
  auto shift = [&](double sgn) {
    auto moved = clone_params(params);
    for (size_t p = 0; p < moved.size(); ++p)
      for (int64_t i = 0; i < moved[p].numel(); ++i)
        moved[p].data()[i] += sgn * eps * v[p][static_cast<size_t>(i)];
    return tape_gradient(fn, moved);
  };
  auto up = shift(1.0);
  auto down = shift(-1.0);
  for (size_t p = 0; p < up.size(); ++p)
    for (size_t i = 0; i < up[p].size(); ++i) up[p][i] = (up[p][i] - down[p][i]) / (2.0 * eps);
  return up;
}

inline double max_mismatch(const std::vector<std::vector<double>>& a,
                           const std::vector<std::vector<double>>& b, double atol, double rtol) {
  double worst = 0.0;
  for (size_t p = 0; p < a.size(); ++p)
    for (size_t i = 0; i < a[p].size(); ++i) {
      const double tol = atol + rtol * std::fabs(b[p][i]);
      const double excess = std::fabs(a[p][i] - b[p][i]) / tol;
      worst = std::max(worst, excess);
    }
  return worst;  // <= 1 means within tolerance everywhere
}

// loss 1/2 w' A w over a single flat parameter vector; A symmetric row-major
class QuadraticTarget : public TraceTarget {
 public:
  QuadraticTarget(std::vector<double> a, std::vector<double> w, bool reduced_precision = false)
      : a_(std::move(a)), reduced_(reduced_precision) {
    n_ = static_cast<int64_t>(w.size());
    w_ = Tensor::from({1, n_}, std::move(w));
    w_.mark_param();
  }

  Tensor build_loss(Tape& tape) const override {
    Tensor amat = ops::constant({n_, n_}, a_);
    Tensor aw = ops::matmul(tape, w_, amat, false, false);  // w' A as a row
    Tensor q = ops::sum_all(tape, ops::mul(tape, aw, w_));
    return ops::scale(tape, q, 0.5);
  }
  std::vector<Tensor> parameters() const override { return {w_}; }
  std::vector<ChannelGroup> groups() const override { return groups_; }
  void set_groups(std::vector<ChannelGroup> g) { groups_ = std::move(g); }
  Tensor& weights() { return w_; }

 private:
  std::vector<double> a_;
  Tensor w_;
  int64_t n_ = 0;
  bool reduced_;
  std::vector<ChannelGroup> groups_;
};

// model cross-entropy over a fixed batch plus an optional L2 term
class PenalizedModelTarget : public TraceTarget {
 public:
  PenalizedModelTarget(Model& model, Tensor inputs, std::vector<int> labels, double l2)
      : model_(&model), inputs_(std::move(inputs)), labels_(std::move(labels)), l2_(l2) {}

  Tensor build_loss(Tape& tape) const override {
    Tensor loss = model_->loss(tape, inputs_, labels_, false);
    if (l2_ > 0.0) {
      Tensor sq;
      for (const auto& p : model_->trainable()) {
        Tensor s = ops::sum_all(tape, ops::mul(tape, p, p));
        sq = sq.defined() ? ops::add(tape, sq, s) : s;
      }
      loss = ops::add(tape, loss, ops::scale(tape, sq, 0.5 * l2_));
    }
    return loss;
  }
  std::vector<Tensor> parameters() const override { return model_->trainable(); }
  std::vector<ChannelGroup> groups() const override { return model_->channel_groups(); }

 private:
  Model* model_;
  Tensor inputs_;
  std::vector<int> labels_;
  double l2_;
};

}  // namespace hesskit::testing
