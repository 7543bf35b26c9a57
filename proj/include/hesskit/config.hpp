#pragma once

#include <string>

#include "hesskit/dataset.hpp"
#include "hesskit/hutchinson.hpp"
#include "hesskit/model.hpp"
#include "hesskit/quant.hpp"
#include "hesskit/train.hpp"

namespace hesskit {

struct Seeds {
  uint64_t init = 1;
  uint64_t data = 2;
  uint64_t hutchinson = 3;
};

struct PipelineConfig {
  ModelSpec model;
  DatasetSpec dataset;
  TrainConfig train;     // initial LR 0.05, momentum 0.9, weight decay 1e-3
  TrainConfig finetune;  // initial LR 0.01
  QatOptions qat;        // uniform 8-bit, initial LR 1e-4, range momentum 0.99
  int64_t n_v = 300;
  int64_t hessian_batch_size = 512;  // clamped to the dataset size
  TraceMode mode = TraceMode::FP32;
  double target_compression = 0.10;
  double prune_ratio_limit = 0.95;
  Seeds seeds;
  std::string out_dir = "out";
  bool bench_enabled = true;
  int threads = 1;

  void validate() const;
};

// Flat key = value text; '#' starts a comment; unknown keys are hard errors.
PipelineConfig parse_config_text(const std::string& text);
PipelineConfig parse_config_file(const std::string& path);

}  // namespace hesskit
