#pragma once

#include <string>
#include <vector>

#include "hesskit/config.hpp"
#include "hesskit/json_util.hpp"

namespace hesskit {

// On-disk artifact names inside the output directory. Every stage reads its
// inputs from disk, so stages can be re-run independently.
struct ArtifactPaths {
  explicit ArtifactPaths(const std::string& dir);
  std::string dir;
  std::string model_ckpt;
  std::string train_history;
  std::string trace_report;
  std::string sensitivity;
  std::string prune_plan;
  std::string pruned_ckpt;
  std::string finetuned_ckpt;
  std::string finetune_history;
  std::string quant_file;
  std::string qat_metrics;
  std::string bench;
  std::string report;
};

Dataset load_config_dataset(const PipelineConfig& cfg);

void run_train(const PipelineConfig& cfg);
void run_estimate(const PipelineConfig& cfg);
void run_prune(const PipelineConfig& cfg);
void run_finetune(const PipelineConfig& cfg);
void run_qat(const PipelineConfig& cfg);
void run_bench(const PipelineConfig& cfg);
json run_report(const PipelineConfig& cfg);
void run_pipeline(const PipelineConfig& cfg);

// Entry point used by the binary and by tests. Returns the process exit
// code: 0 success, 1 validation error, 2 runtime failure.
int cli(const std::vector<std::string>& args);

}  // namespace hesskit
