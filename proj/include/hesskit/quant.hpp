#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hesskit/dataset.hpp"
#include "hesskit/model.hpp"
#include "hesskit/train.hpp"

namespace hesskit {

double round_half_even(double x);

struct QuantParams {
  double s = 1.0;   // scaling factor
  int32_t z = 0;    // zero point
  double alpha = 0.0, beta = 0.0;  // clip range
  bool symmetric = true;
  int qmin = -127, qmax = 127;
};

// Symmetric weight calibration: beta = max(|max|, |min|), S = beta/127, Z = 0.
// An all-zero input falls back to the 2^-16 scale floor.
QuantParams calibrate_symmetric(const double* values, int64_t count);
QuantParams calibrate_symmetric(const Tensor& t);

// Asymmetric activation lattice over [alpha, beta] with q in [0, 255] and
// Z = Int(alpha/S).
QuantParams asymmetric_params(double alpha, double beta);

// EMA range tracker; the first observation initializes the range directly.
struct RangeObserver {
  double running_min = 0.0;
  double running_max = 0.0;
  double momentum = 0.99;
  bool initialized = false;

  void observe(double batch_min, double batch_max);
};

int32_t quantize(double r, const QuantParams& p);
double dequantize(int32_t q, const QuantParams& p);

// quantize-dequantize with a straight-through backward inside [alpha, beta]
Tensor fake_quant(Tape& tape, const Tensor& x, const QuantParams& p);

struct QatOptions {
  TrainConfig train;  // defaults below mirror the quantization setup tables
  double act_momentum = 0.99;
  uint64_t seed = 0;
  int64_t calibration_batches = 8;

  QatOptions() {
    train.epochs = 10;
    train.initial_lr = 1e-4;
    train.weight_decay = 1e-4;
    train.momentum = 0.9;
  }
};

// A trained fake-quant model with frozen observers plus the deployment view
// (int8 weight lattice, float32 remainder) used for export and evaluation.
class QatModel {
 public:
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const std::map<std::string, RangeObserver>& observers() const { return observers_; }
  const std::vector<std::pair<std::string, QuantParams>>& weight_params() const {
    return weight_params_;
  }

  Tensor deployed_forward(Tape& tape, const Tensor& x);
  double deployed_accuracy(const Dataset& data, int threads = 1);

 private:
  friend QatModel qat_train(const Model&, const Dataset&, const QatOptions&);
  friend double quantized_eval(const std::vector<uint8_t>&, const Dataset&, int threads);

  void freeze();  // bakes the deployment view from the trained master weights

  Model model_;          // master weights (training view)
  Model deployed_;       // dequantized int8 weights, float32 remainder
  bool frozen_ = false;
  std::map<std::string, RangeObserver> observers_;
  std::vector<std::pair<std::string, QuantParams>> weight_params_;
  std::map<std::string, QuantParams> act_params_;
};

// Calibration pass (observers only) followed by fake-quant fine-tuning with
// straight-through gradients. Zero epochs leaves a post-training-quantization
// baseline.
QatModel qat_train(const Model& pruned, const Dataset& data, const QatOptions& options);

// Quantized container: magic "EHAPQNT1", version u16, u32-length-prefixed
// canonical-JSON spec blob, record count u64, then per tensor: name length
// u16 + name, kind u8 (0 = weight int8, 1 = fp32, 2 = activation-params),
// rank u8, extents u32 each, S f64, Z i32, payload (int8 or f32, little
// endian; activation-params records carry no payload).
std::vector<uint8_t> export_int8(const QatModel& qat);
double quantized_eval(const std::vector<uint8_t>& bytes, const Dataset& data, int threads = 1);

}  // namespace hesskit
