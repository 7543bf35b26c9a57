#pragma once

#include <cstdint>
#include <vector>

#include "hesskit/dataset.hpp"
#include "hesskit/json_util.hpp"
#include "hesskit/model.hpp"

namespace hesskit {

struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  double initial_lr = 0.05;  // cosine schedule from here to zero

  void validate() const {
    if (momentum < 0.0 || momentum >= 1.0) raise(Errc::InvalidSpec, "momentum must be in [0,1)");
    if (!(initial_lr >= 0.0)) raise(Errc::InvalidSpec, "initial_lr must be non-negative");
    if (batch_size < 1) raise(Errc::InvalidSpec, "batch_size must be positive");
    if (epochs < 0) raise(Errc::InvalidSpec, "epochs must be non-negative");
  }
};

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  json to_json() const;
};

double cosine_lr(int64_t t, int64_t total, double lr0);

// SGD with momentum and weight decay over seeded shuffled batches.
// Deterministic for a fixed seed. Raises DivergedLoss on a non-finite batch
// loss. Hooks are forwarded to the model (used by quantization-aware runs).
TrainHistory train_model(Model& model, const Dataset& data, const TrainConfig& config,
                         uint64_t seed, const ForwardHooks* hooks = nullptr);

double test_accuracy(Model& model, const Dataset& data, int threads = 1);
double train_accuracy(Model& model, const Dataset& data, int threads = 1);

}  // namespace hesskit
