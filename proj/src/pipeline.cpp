#include "hesskit/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "hesskit/checkpoint.hpp"
#include "hesskit/pruner.hpp"
#include "hesskit/rng.hpp"

namespace hesskit {
namespace fs = std::filesystem;

ArtifactPaths::ArtifactPaths(const std::string& d) : dir(d) {
  model_ckpt = dir + "/model.ckpt";
  train_history = dir + "/train_history.json";
  trace_report = dir + "/trace_report.json";
  sensitivity = dir + "/sensitivity.json";
  prune_plan = dir + "/prune_plan.json";
  pruned_ckpt = dir + "/pruned.ckpt";
  finetuned_ckpt = dir + "/finetuned.ckpt";
  finetune_history = dir + "/finetune_history.json";
  quant_file = dir + "/model.ehapqnt";
  qat_metrics = dir + "/qat_metrics.json";
  bench = dir + "/bench.json";
  report = dir + "/report.json";
}

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
}

Model require_checkpoint(const std::string& path) {
  if (!fs::exists(path)) raise(Errc::MissingArtifact, path + " (run the producing stage first)");
  return load_checkpoint_file(path);
}

std::vector<uint8_t> read_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Errc::MissingArtifact, path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

int64_t file_size(const std::string& path) {
  std::error_code ec;
  const auto n = fs::file_size(path, ec);
  if (ec) raise(Errc::MissingArtifact, path);
  return static_cast<int64_t>(n);
}

// Fixed Hessian batch: a seeded sample of the training split, clamped to the
// dataset size.
std::pair<Tensor, std::vector<int>> hessian_batch(const Dataset& data,
                                                  const PipelineConfig& cfg) {
  int64_t size = cfg.hessian_batch_size;
  if (size > data.train_size()) {
    std::cerr << "note: hessian batch clamped from " << size << " to " << data.train_size()
              << " (dataset size)\n";
    size = data.train_size();
  }
  std::vector<int64_t> order(static_cast<size_t>(data.train_size()));
  for (int64_t i = 0; i < data.train_size(); ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(mix_seed(cfg.seeds.hutchinson, 0xba7c4));
  shuffle_inplace(order, rng);
  order.resize(static_cast<size_t>(size));
  return {data.gather_train(order), data.labels_train(order)};
}

}  // namespace

Dataset load_config_dataset(const PipelineConfig& cfg) { return load_dataset(cfg.dataset); }

void run_train(const PipelineConfig& cfg) {
  ensure_dir(cfg.out_dir);
  ArtifactPaths paths(cfg.out_dir);
  Dataset data = load_config_dataset(cfg);
  Model model = Model::build(cfg.model, cfg.seeds.init);
  TrainHistory history = train_model(model, data, cfg.train, cfg.seeds.data);
  save_checkpoint_file(model, paths.model_ckpt);
  write_canonical_json(paths.train_history, history.to_json());
}

void run_estimate(const PipelineConfig& cfg) {
  ensure_dir(cfg.out_dir);
  ArtifactPaths paths(cfg.out_dir);
  Model model = require_checkpoint(paths.model_ckpt);
  Dataset data = load_config_dataset(cfg);
  auto [inputs, labels] = hessian_batch(data, cfg);
  ModelBatchTarget target(model, inputs, labels);
  HutchinsonOptions options;
  options.n_v = cfg.n_v;
  options.mode = cfg.mode;
  options.seed = cfg.seeds.hutchinson;
  options.threads = cfg.threads;
  TraceReport report = estimate_trace(target, options);
  write_canonical_json(paths.trace_report, report.to_json());
}

void run_prune(const PipelineConfig& cfg) {
  ensure_dir(cfg.out_dir);
  ArtifactPaths paths(cfg.out_dir);
  Model model = require_checkpoint(paths.model_ckpt);
  if (!fs::exists(paths.trace_report)) raise(Errc::MissingArtifact, paths.trace_report);
  TraceReport report = TraceReport::from_json(read_json_file(paths.trace_report));
  auto records = channel_sensitivity(report, model);
  PrunePlan plan = select_channels(records, model, cfg.target_compression, cfg.prune_ratio_limit);
  Model pruned = apply_prune(model, plan);
  write_canonical_json(paths.sensitivity, sensitivity_to_json(records));
  write_canonical_json(paths.prune_plan, plan.to_json());
  save_checkpoint_file(pruned, paths.pruned_ckpt);
}

void run_finetune(const PipelineConfig& cfg) {
  ensure_dir(cfg.out_dir);
  ArtifactPaths paths(cfg.out_dir);
  Model pruned = require_checkpoint(paths.pruned_ckpt);
  Dataset data = load_config_dataset(cfg);
  TrainHistory history = fine_tune(pruned, data, cfg.finetune, mix_seed(cfg.seeds.data, 2));
  save_checkpoint_file(pruned, paths.finetuned_ckpt);
  write_canonical_json(paths.finetune_history, history.to_json());
}

void run_qat(const PipelineConfig& cfg) {
  ensure_dir(cfg.out_dir);
  ArtifactPaths paths(cfg.out_dir);
  Model finetuned = require_checkpoint(paths.finetuned_ckpt);
  Dataset data = load_config_dataset(cfg);

  QatOptions options = cfg.qat;
  options.seed = mix_seed(cfg.seeds.data, 3);
  QatModel qat = qat_train(finetuned, data, options);
  const auto bytes = export_int8(qat);
  {
    std::ofstream f(paths.quant_file, std::ios::binary);
    if (!f) raise(Errc::MissingArtifact, "cannot open for writing: " + paths.quant_file);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  }

  json metrics;
  metrics["pruned_acc"] = test_accuracy(finetuned, data, cfg.threads);
  metrics["quantized_acc"] = quantized_eval(bytes, data, cfg.threads);
  metrics["file_bytes"] = static_cast<int64_t>(bytes.size());
  write_canonical_json(paths.qat_metrics, metrics);
}

void run_bench(const PipelineConfig& cfg) {
  ensure_dir(cfg.out_dir);
  ArtifactPaths paths(cfg.out_dir);
  Model model = require_checkpoint(paths.model_ckpt);
  Dataset data = load_config_dataset(cfg);
  auto [inputs, labels] = hessian_batch(data, cfg);
  ModelBatchTarget target(model, inputs, labels);
  ModeComparison cmp = compare_modes(target, cfg.n_v, cfg.seeds.hutchinson, cfg.threads);
  json j = cmp.to_json();
  j["fp32_wall_time_s"] = cmp.fp32.wall_time_s;
  j["fp16_wall_time_s"] = cmp.fp16.wall_time_s;
  write_canonical_json(paths.bench, j);
}

json run_report(const PipelineConfig& cfg) {
  ArtifactPaths paths(cfg.out_dir);
  Dataset data = load_config_dataset(cfg);

  Model original = require_checkpoint(paths.model_ckpt);
  Model finetuned = require_checkpoint(paths.finetuned_ckpt);
  if (!fs::exists(paths.trace_report)) raise(Errc::MissingArtifact, paths.trace_report);
  if (!fs::exists(paths.prune_plan)) raise(Errc::MissingArtifact, paths.prune_plan);
  if (!fs::exists(paths.quant_file)) raise(Errc::MissingArtifact, paths.quant_file);

  TraceReport trace = TraceReport::from_json(read_json_file(paths.trace_report));
  PrunePlan plan = PrunePlan::from_json(read_json_file(paths.prune_plan));
  const auto quant_bytes = read_binary(paths.quant_file);

  json report;
  {
    json o;
    o["accuracy"] = test_accuracy(original, data, cfg.threads);
    o["params"] = original.param_count();
    o["flops"] = original.flop_count();
    o["checkpoint_bytes"] = file_size(paths.model_ckpt);
    report["original"] = o;
  }
  {
    json p;
    p["accuracy"] = test_accuracy(finetuned, data, cfg.threads);
    p["params"] = finetuned.param_count();
    p["flops"] = finetuned.flop_count();
    p["checkpoint_bytes"] = file_size(paths.finetuned_ckpt);
    p["achieved_compression"] = static_cast<double>(finetuned.param_count()) /
                                static_cast<double>(original.param_count());
    p["planned_compression"] = plan.achieved_compression_ratio;
    report["pruned"] = p;
  }
  {
    json q;
    q["accuracy"] = quantized_eval(quant_bytes, data, cfg.threads);
    q["file_bytes"] = static_cast<int64_t>(quant_bytes.size());
    report["quantized"] = q;
  }
  {
    // wall-clock numbers are excluded so repeated runs reproduce the report
    json t;
    t["mode"] = trace_mode_name(trace.mode);
    t["n_v"] = trace.n_v;
    t["scale"] = trace.scale_applied;
    t["global_trace"] = trace.global_trace;
    t["peak_bytes"] = trace.peak.total();
    report["trace"] = t;
  }
  if (fs::exists(paths.bench)) {
    json bench = read_json_file(paths.bench);
    json b;
    b["kendall_tau"] = bench.at("kendall_tau");
    b["peak_byte_ratio"] = bench.at("peak_byte_ratio");
    b["fp16_peak_bytes"] = bench.at("fp16_peak_bytes");
    b["fp32_peak_bytes"] = bench.at("fp32_peak_bytes");
    b["low_confidence"] = bench.at("low_confidence");
    report["mode_comparison"] = b;
  }
  write_canonical_json(paths.report, report);
  return report;
}

void run_pipeline(const PipelineConfig& cfg) {
  run_train(cfg);
  run_estimate(cfg);
  run_prune(cfg);
  run_finetune(cfg);
  run_qat(cfg);
  if (cfg.bench_enabled) run_bench(cfg);
  run_report(cfg);
}

int cli(const std::vector<std::string>& args) {
  CLI::App app{"hesskit: Hessian-trace channel pruning and INT8 QAT toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::string mode_override;
  int64_t nv_override = -1;
  double target_override = -1.0;
  int64_t seed_override = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "configuration file")->required();
    sub->add_option("--out", out_override, "output directory override");
    sub->add_option("--seed", seed_override, "base seed override");
    sub->add_option("--mode", mode_override, "trace mode override (fp32|fp16)");
    sub->add_option("--n-v", nv_override, "Hutchinson iteration override");
    sub->add_option("--target-compression", target_override, "target retained fraction override");
  };

  const std::vector<std::string> names = {"train", "estimate", "prune",    "finetune",
                                          "qat",   "bench",    "pipeline", "report"};
  for (const auto& n : names) add_common(app.add_subcommand(n));

  std::vector<const char*> argv;
  argv.push_back("hesskit");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help() << std::endl;
      return 0;
    }
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }

  try {
    PipelineConfig cfg;
    try {
      cfg = parse_config_file(config_path);
    } catch (const Error& e) {
      if (e.code() == Errc::MissingArtifact)
        raise(Errc::ConfigInvalid, "config file not found: " + config_path);
      throw;
    }
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (!mode_override.empty()) cfg.mode = trace_mode_from_name(mode_override);
    if (nv_override > 0) cfg.n_v = nv_override;
    if (target_override > 0.0) cfg.target_compression = target_override;
    if (seed_override >= 0) {
      cfg.seeds.init = static_cast<uint64_t>(seed_override);
      cfg.seeds.data = static_cast<uint64_t>(seed_override) + 1;
      cfg.seeds.hutchinson = static_cast<uint64_t>(seed_override) + 2;
    }
    if (const char* env = std::getenv("HESSKIT_THREADS")) {
      const int t = std::atoi(env);
      if (t >= 1) cfg.threads = t;
    }
    cfg.validate();

    const std::string stage = app.get_subcommands().front()->get_name();
    if (stage == "train") run_train(cfg);
    else if (stage == "estimate") run_estimate(cfg);
    else if (stage == "prune") run_prune(cfg);
    else if (stage == "finetune") run_finetune(cfg);
    else if (stage == "qat") run_qat(cfg);
    else if (stage == "bench") run_bench(cfg);
    else if (stage == "pipeline") run_pipeline(cfg);
    else if (stage == "report") run_report(cfg);
    else raise(Errc::UnknownCommand, stage);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    switch (e.code()) {
      case Errc::ConfigInvalid:
      case Errc::UnknownCommand:
      case Errc::InvalidSpec:
        return 1;
      default:
        return 2;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
}

}  // namespace hesskit
