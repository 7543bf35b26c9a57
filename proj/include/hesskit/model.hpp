#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hesskit/json_util.hpp"
#include "hesskit/tape.hpp"

namespace hesskit {

enum class Arch { Mlp, SmallConvNet, MiniResNet };

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& s);

struct ModelSpec {
  Arch arch = Arch::Mlp;
  std::vector<int64_t> input_shape;  // [d] for mlp, [C,H,W] otherwise
  int64_t num_classes = 2;

  std::vector<int64_t> mlp_hidden;

  std::vector<int64_t> conv_channels;
  std::vector<int64_t> conv_strides;  // empty means all 1

  int64_t stem_channels = 8;
  std::vector<int64_t> block_channels;
  std::vector<int64_t> block_strides;  // empty means all 1
  std::vector<int64_t> block_inner;    // empty means same as block_channels
  std::vector<int64_t> block_proj;     // 0/1 skip projection flags; empty means shape-derived

  void validate() const;
  json to_json() const;
  static ModelSpec from_json(const json& j);
};

// One prunable channel: the parameters it owns (its producing weights, bias
// and batch-norm affine pair) and the consumer-side weights that go with it.
// Indices are offsets into the flat trainable-parameter vector.
struct ChannelGroup {
  int64_t layer_id = 0;
  int64_t channel = 0;
  std::vector<int64_t> own;
  std::vector<int64_t> coupled;
  int64_t weight_count = 0;  // own weight entries only; bias/affine excluded
  bool prunable = true;
};

struct NamedTensor {
  std::string name;
  Tensor t;
};

struct ForwardHooks {
  // rewrites a weight tensor before use (quantizer insertion point)
  std::function<Tensor(Tape&, const std::string&, const Tensor&)> weight;
  // rewrites a post-activation tensor (quantizer insertion point)
  std::function<Tensor(Tape&, const std::string&, const Tensor&)> activation;
};

class Model {
 public:
  Model() = default;  // empty shell; assign from build(), clone(), or a checkpoint
  static Model build(const ModelSpec& spec, uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<NamedTensor>& params() { return params_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  std::vector<NamedTensor>& buffers() { return buffers_; }

  std::vector<Tensor> trainable() const;
  int64_t param_count() const;
  int64_t flop_count() const;
  int64_t param_offset(size_t param_index) const;
  const Tensor* find_param(const std::string& name) const;
  Tensor* find_buffer(const std::string& name);

  std::vector<ChannelGroup> channel_groups() const;
  int64_t prunable_layer_count() const;
  int64_t layer_channel_count(int64_t layer_id) const;

  Tensor forward(Tape& tape, const Tensor& x, bool training,
                 const ForwardHooks* hooks = nullptr);
  Tensor loss(Tape& tape, const Tensor& x, const std::vector<int>& labels, bool training,
              const ForwardHooks* hooks = nullptr);

  // Structural rebuild keeping only the listed channels of each prunable
  // layer. Survivor lists are ascending original channel indices.
  Model rebuild_pruned(const std::vector<std::vector<int64_t>>& survivors) const;

  Model clone() const;

 private:
  void init_layout();  // derives descriptors and offsets from spec_

  struct Dense {
    int64_t in = 0, out = 0;
    int w = -1, b = -1;
  };
  struct Bn {
    int gamma = -1, beta = -1;  // params
    int rmean = -1, rvar = -1;  // buffers
  };
  struct Conv {
    int64_t cin = 0, cout = 0, k = 3;
    int stride = 1, pad = 1;
    int w = -1, b = -1;
    int bn = -1;  // index into bns_
  };
  // Prunable-layer table entry: which conv/dense produces this channel space
  // and who consumes it.
  struct PruneLayer {
    bool is_conv = false;
    int conv = -1;
    int dense = -1;
    bool prunable = true;
    std::vector<int> consumer_convs;   // convs whose input channels couple
    int consumer_dense = -1;           // dense whose input columns couple
  };

  ModelSpec spec_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<int64_t> offsets_;
  std::vector<Dense> denses_;  // hidden denses then head last
  std::vector<Conv> convs_;
  std::vector<Bn> bns_;
  std::vector<PruneLayer> prune_layers_;
  int head_dense_ = -1;

  friend struct ModelTestAccess;
};

double evaluate_accuracy(Model& model, const std::vector<double>& xs, const std::vector<int>& ys,
                         const std::vector<int64_t>& sample_shape, int threads = 1);

}  // namespace hesskit
