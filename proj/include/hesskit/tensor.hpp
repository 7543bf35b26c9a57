#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hesskit/errors.hpp"

namespace hesskit {

class Tape;

enum class Precision : uint8_t { FP32 = 0, FP16EMU = 1 };

inline int64_t precision_bytes(Precision p) { return p == Precision::FP16EMU ? 2 : 4; }

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

struct TensorData {
  std::vector<int64_t> shape;
  std::vector<double> values;  // always stored at full working precision
  Precision precision = Precision::FP32;
  bool requires_grad = false;
  bool is_param = false;
  int64_t node = -1;  // producing tape node, -1 for leaves/constants
  Tape* tape = nullptr;
  uint64_t tape_epoch = 0;
};

// Shared-value handle. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, Precision p = Precision::FP32) {
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->values.assign(static_cast<size_t>(shape_numel(t.d_->shape)), 0.0);
    t.d_->precision = p;
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<double> values,
                     Precision p = Precision::FP32) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      raise(Errc::ShapeMismatch, "tensor value count does not match shape");
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    t.d_->precision = p;
    return t;
  }

  static Tensor scalar(double v, Precision p = Precision::FP32) { return from({}, {v}, p); }

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<int64_t>& shape() const { return d_->shape; }
  int64_t rank() const { return static_cast<int64_t>(d_->shape.size()); }
  int64_t extent(int64_t i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }

  double* data() { return d_->values.data(); }
  const double* data() const { return d_->values.data(); }
  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }

  double item() const {
    if (numel() != 1) raise(Errc::NonScalarLoss, "item() on non-scalar tensor");
    return d_->values[0];
  }

  Precision precision() const { return d_->precision; }
  void set_precision(Precision p) { d_->precision = p; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }
  bool is_param() const { return d_ && d_->is_param; }
  Tensor& mark_param() {
    d_->is_param = true;
    d_->requires_grad = true;
    return *this;
  }

  int64_t node() const { return d_->node; }
  Tape* tape() const { return d_->tape; }

  TensorData* raw() const { return d_.get(); }
  bool same_storage(const Tensor& o) const { return d_.get() == o.d_.get(); }

  // deep copy, detached from any tape
  Tensor detached_clone() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    t.d_->precision = d_->precision;
    return t;
  }

 private:
  std::shared_ptr<TensorData> d_;
};

}  // namespace hesskit
