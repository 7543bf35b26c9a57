#include "hesskit/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

namespace hesskit {
namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int64_t out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (...) {
    raise(Errc::ConfigInvalid, key + ": expected an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (...) {
    raise(Errc::ConfigInvalid, key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  raise(Errc::ConfigInvalid, key + ": expected true or false, got '" + v + "'");
}

std::vector<int64_t> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) raise(Errc::ConfigInvalid, key + ": empty list entry");
    out.push_back(to_int(key, part));
  }
  if (out.empty()) raise(Errc::ConfigInvalid, key + ": expected a comma-separated list");
  return out;
}

std::vector<std::string> to_str_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

void assign_train(TrainConfig& t, const std::string& field, const std::string& key,
                  const std::string& v) {
  if (field == "epochs") t.epochs = to_int(key, v);
  else if (field == "batch_size") t.batch_size = to_int(key, v);
  else if (field == "momentum") t.momentum = to_double(key, v);
  else if (field == "weight_decay") t.weight_decay = to_double(key, v);
  else if (field == "initial_lr") t.initial_lr = to_double(key, v);
  else raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
}

}  // namespace

void PipelineConfig::validate() const {
  try {
    model.validate();
  } catch (const Error& e) {
    raise(Errc::ConfigInvalid, std::string("model: ") + e.what());
  }
  if (dataset.kind.empty()) raise(Errc::ConfigInvalid, "dataset.kind is required");
  if (dataset.kind == "idx-images") {
    if (dataset.images_path.empty()) raise(Errc::ConfigInvalid, "dataset.images is required");
    if (dataset.labels_path.empty()) raise(Errc::ConfigInvalid, "dataset.labels is required");
  }
  if (dataset.kind == "cifar10-binary" && dataset.files.empty())
    raise(Errc::ConfigInvalid, "dataset.files is required");
  if (n_v < 1) raise(Errc::ConfigInvalid, "hutchinson.n_v must be at least 1");
  if (hessian_batch_size < 1) raise(Errc::ConfigInvalid, "hutchinson.batch_size must be positive");
  if (!(target_compression > 0.0 && target_compression < 1.0))
    raise(Errc::ConfigInvalid, "pruning.target_compression must be in (0,1)");
  if (!(prune_ratio_limit > 0.0 && prune_ratio_limit <= 1.0))
    raise(Errc::ConfigInvalid, "pruning.prune_ratio_limit must be in (0,1]");
  if (out_dir.empty()) raise(Errc::ConfigInvalid, "output.dir must not be empty");
  try {
    train.validate();
    finetune.validate();
    qat.train.validate();
  } catch (const Error& e) {
    raise(Errc::ConfigInvalid, e.what());
  }
}

PipelineConfig parse_config_text(const std::string& text) {
  PipelineConfig cfg;
  cfg.train.initial_lr = 0.05;
  cfg.finetune.initial_lr = 0.01;
  cfg.finetune.epochs = 20;

  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      raise(Errc::ConfigInvalid, "line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      raise(Errc::ConfigInvalid, "line " + std::to_string(line_no) + ": empty key or value");

    const size_t dot = key.find('.');
    const std::string section = dot == std::string::npos ? key : key.substr(0, dot);
    const std::string field = dot == std::string::npos ? "" : key.substr(dot + 1);

    if (section == "model") {
      if (field == "arch") cfg.model.arch = arch_from_name(value);
      else if (field == "input_shape") cfg.model.input_shape = to_int_list(key, value);
      else if (field == "num_classes") cfg.model.num_classes = to_int(key, value);
      else if (field == "hidden") cfg.model.mlp_hidden = to_int_list(key, value);
      else if (field == "conv_channels") cfg.model.conv_channels = to_int_list(key, value);
      else if (field == "conv_strides") cfg.model.conv_strides = to_int_list(key, value);
      else if (field == "stem_channels") cfg.model.stem_channels = to_int(key, value);
      else if (field == "block_channels") cfg.model.block_channels = to_int_list(key, value);
      else if (field == "block_strides") cfg.model.block_strides = to_int_list(key, value);
      else if (field == "block_inner") cfg.model.block_inner = to_int_list(key, value);
      else raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
    } else if (section == "dataset") {
      if (field == "kind") cfg.dataset.kind = value;
      else if (field == "size") cfg.dataset.size = to_int(key, value);
      else if (field == "classes") cfg.dataset.classes = to_int(key, value);
      else if (field == "seed") cfg.dataset.seed = static_cast<uint64_t>(to_int(key, value));
      else if (field == "test_fraction") cfg.dataset.test_fraction = to_double(key, value);
      else if (field == "noise") cfg.dataset.noise = to_double(key, value);
      else if (field == "images") cfg.dataset.images_path = value;
      else if (field == "labels") cfg.dataset.labels_path = value;
      else if (field == "test_images") cfg.dataset.test_images_path = value;
      else if (field == "test_labels") cfg.dataset.test_labels_path = value;
      else if (field == "files") cfg.dataset.files = to_str_list(value);
      else raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
    } else if (section == "train") {
      assign_train(cfg.train, field, key, value);
    } else if (section == "finetune") {
      assign_train(cfg.finetune, field, key, value);
    } else if (section == "qat") {
      if (field == "act_momentum") cfg.qat.act_momentum = to_double(key, value);
      else if (field == "calibration_batches") cfg.qat.calibration_batches = to_int(key, value);
      else assign_train(cfg.qat.train, field, key, value);
    } else if (section == "hutchinson") {
      if (field == "n_v") cfg.n_v = to_int(key, value);
      else if (field == "batch_size") cfg.hessian_batch_size = to_int(key, value);
      else if (field == "mode") cfg.mode = trace_mode_from_name(value);
      else raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
    } else if (section == "pruning") {
      if (field == "target_compression") cfg.target_compression = to_double(key, value);
      else if (field == "prune_ratio_limit") cfg.prune_ratio_limit = to_double(key, value);
      else raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
    } else if (section == "seeds") {
      if (field == "init") cfg.seeds.init = static_cast<uint64_t>(to_int(key, value));
      else if (field == "data") cfg.seeds.data = static_cast<uint64_t>(to_int(key, value));
      else if (field == "hutchinson")
        cfg.seeds.hutchinson = static_cast<uint64_t>(to_int(key, value));
      else raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
    } else if (section == "output") {
      if (field == "dir") cfg.out_dir = value;
      else raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
    } else if (section == "bench") {
      if (field == "enabled") cfg.bench_enabled = to_bool(key, value);
      else raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
    } else {
      raise(Errc::ConfigInvalid, "unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

PipelineConfig parse_config_file(const std::string& path) {
  return parse_config_text(read_text_file(path));
}

}  // namespace hesskit
