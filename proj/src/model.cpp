#include "hesskit/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>

#include "hesskit/rng.hpp"

namespace hesskit {
namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;

int64_t conv_out(int64_t extent, int64_t k, int stride, int pad) {
  return (extent + 2 * pad - k) / stride + 1;
}

std::vector<int64_t> all_channels(int64_t n) {
  std::vector<int64_t> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
  return v;
}

Tensor he_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-limit, limit);
  return t;
}

Tensor filled(std::vector<int64_t> shape, double v) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = v;
  return t;
}

}  // namespace

std::string arch_name(Arch a) {
  switch (a) {
    case Arch::Mlp: return "mlp";
    case Arch::SmallConvNet: return "smallconvnet";
    case Arch::MiniResNet: return "miniresnet";
  }
  return "mlp";
}

Arch arch_from_name(const std::string& s) {
  if (s == "mlp") return Arch::Mlp;
  if (s == "smallconvnet") return Arch::SmallConvNet;
  if (s == "miniresnet") return Arch::MiniResNet;
  raise(Errc::InvalidSpec, "unknown architecture '" + s + "'");
}

void ModelSpec::validate() const {
  if (num_classes < 2) raise(Errc::InvalidSpec, "num_classes must be at least 2");
  if (arch == Arch::Mlp) {
    if (input_shape.size() != 1 || input_shape[0] < 1)
      raise(Errc::InvalidSpec, "mlp input_shape must be [features]");
    for (int64_t w : mlp_hidden)
      if (w < 1) raise(Errc::InvalidSpec, "mlp hidden widths must be positive");
    return;
  }
  if (input_shape.size() != 3 || input_shape[0] < 1 || input_shape[1] < 1 || input_shape[2] < 1)
    raise(Errc::InvalidSpec, "conv input_shape must be [C,H,W]");
  if (arch == Arch::SmallConvNet) {
    if (conv_channels.empty()) raise(Errc::InvalidSpec, "conv_channels must be non-empty");
    for (int64_t c : conv_channels)
      if (c < 1) raise(Errc::InvalidSpec, "conv channel counts must be positive");
    if (!conv_strides.empty() && conv_strides.size() != conv_channels.size())
      raise(Errc::InvalidSpec, "conv_strides length must match conv_channels");
    return;
  }
  if (block_channels.empty()) raise(Errc::InvalidSpec, "block_channels must be non-empty");
  if (stem_channels < 1) raise(Errc::InvalidSpec, "stem_channels must be positive");
  for (int64_t c : block_channels)
    if (c < 1) raise(Errc::InvalidSpec, "block channel counts must be positive");
  if (!block_strides.empty() && block_strides.size() != block_channels.size())
    raise(Errc::InvalidSpec, "block_strides length must match block_channels");
  if (!block_inner.empty() && block_inner.size() != block_channels.size())
    raise(Errc::InvalidSpec, "block_inner length must match block_channels");
  if (!block_proj.empty() && block_proj.size() != block_channels.size())
    raise(Errc::InvalidSpec, "block_proj length must match block_channels");
}

json ModelSpec::to_json() const {
  json j;
  j["arch"] = arch_name(arch);
  j["input_shape"] = input_shape;
  j["num_classes"] = num_classes;
  if (arch == Arch::Mlp) j["hidden"] = mlp_hidden;
  if (arch == Arch::SmallConvNet) {
    j["conv_channels"] = conv_channels;
    j["conv_strides"] = conv_strides;
  }
  if (arch == Arch::MiniResNet) {
    j["stem_channels"] = stem_channels;
    j["block_channels"] = block_channels;
    j["block_strides"] = block_strides;
    j["block_inner"] = block_inner;
    j["block_proj"] = block_proj;
  }
  return j;
}

ModelSpec ModelSpec::from_json(const json& j) {
  ModelSpec s;
  s.arch = arch_from_name(j.at("arch").get<std::string>());
  s.input_shape = j.at("input_shape").get<std::vector<int64_t>>();
  s.num_classes = j.at("num_classes").get<int64_t>();
  if (j.contains("hidden")) s.mlp_hidden = j["hidden"].get<std::vector<int64_t>>();
  if (j.contains("conv_channels")) s.conv_channels = j["conv_channels"].get<std::vector<int64_t>>();
  if (j.contains("conv_strides")) s.conv_strides = j["conv_strides"].get<std::vector<int64_t>>();
  if (j.contains("stem_channels")) s.stem_channels = j["stem_channels"].get<int64_t>();
  if (j.contains("block_channels")) s.block_channels = j["block_channels"].get<std::vector<int64_t>>();
  if (j.contains("block_strides")) s.block_strides = j["block_strides"].get<std::vector<int64_t>>();
  if (j.contains("block_inner")) s.block_inner = j["block_inner"].get<std::vector<int64_t>>();
  if (j.contains("block_proj")) s.block_proj = j["block_proj"].get<std::vector<int64_t>>();
  s.validate();
  return s;
}

void Model::init_layout() {
  denses_.clear();
  convs_.clear();
  bns_.clear();
  prune_layers_.clear();
  offsets_.clear();
  head_dense_ = -1;

  auto param_index = [&](const std::string& name) -> int {
    for (size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return static_cast<int>(i);
    raise(Errc::InvalidSpec, "missing parameter " + name);
  };
  auto buffer_index = [&](const std::string& name) -> int {
    for (size_t i = 0; i < buffers_.size(); ++i)
      if (buffers_[i].name == name) return static_cast<int>(i);
    raise(Errc::InvalidSpec, "missing buffer " + name);
  };
  auto add_bn = [&](const std::string& prefix) -> int {
    Bn bn;
    bn.gamma = param_index(prefix + ".gamma");
    bn.beta = param_index(prefix + ".beta");
    bn.rmean = buffer_index(prefix + ".running_mean");
    bn.rvar = buffer_index(prefix + ".running_var");
    bns_.push_back(bn);
    return static_cast<int>(bns_.size()) - 1;
  };
  auto add_conv = [&](const std::string& prefix, int64_t cin, int64_t cout, int64_t k, int stride,
                      int pad, bool with_bn) -> int {
    Conv c;
    c.cin = cin;
    c.cout = cout;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    c.w = param_index(prefix + ".weight");
    c.b = param_index(prefix + ".bias");
    if (with_bn) c.bn = add_bn(prefix + ".bn");
    convs_.push_back(c);
    return static_cast<int>(convs_.size()) - 1;
  };
  auto add_dense = [&](const std::string& prefix, int64_t in, int64_t out) -> int {
    Dense d;
    d.in = in;
    d.out = out;
    d.w = param_index(prefix + ".weight");
    d.b = param_index(prefix + ".bias");
    denses_.push_back(d);
    return static_cast<int>(denses_.size()) - 1;
  };

  if (spec_.arch == Arch::Mlp) {
    int64_t prev = spec_.input_shape[0];
    for (size_t i = 0; i < spec_.mlp_hidden.size(); ++i) {
      add_dense("fc" + std::to_string(i), prev, spec_.mlp_hidden[i]);
      prev = spec_.mlp_hidden[i];
    }
    head_dense_ = add_dense("head", prev, spec_.num_classes);
    for (size_t i = 0; i < spec_.mlp_hidden.size(); ++i) {
      PruneLayer pl;
      pl.is_conv = false;
      pl.dense = static_cast<int>(i);
      pl.consumer_dense = static_cast<int>(i) + 1;
      prune_layers_.push_back(pl);
    }
  } else if (spec_.arch == Arch::SmallConvNet) {
    int64_t prev = spec_.input_shape[0];
    for (size_t i = 0; i < spec_.conv_channels.size(); ++i) {
      const int stride =
          spec_.conv_strides.empty() ? 1 : static_cast<int>(spec_.conv_strides[i]);
      add_conv("conv" + std::to_string(i), prev, spec_.conv_channels[i], 3, stride, 1, true);
      prev = spec_.conv_channels[i];
    }
    head_dense_ = add_dense("head", prev, spec_.num_classes);
    for (size_t i = 0; i < spec_.conv_channels.size(); ++i) {
      PruneLayer pl;
      pl.is_conv = true;
      pl.conv = static_cast<int>(i);
      if (i + 1 < spec_.conv_channels.size())
        pl.consumer_convs.push_back(static_cast<int>(i) + 1);
      else
        pl.consumer_dense = head_dense_;
      prune_layers_.push_back(pl);
    }
  } else {
    const size_t nb = spec_.block_channels.size();
    std::vector<int64_t> inner =
        spec_.block_inner.empty() ? spec_.block_channels : spec_.block_inner;
    std::vector<int64_t> strides(nb, 1);
    if (!spec_.block_strides.empty())
      for (size_t i = 0; i < nb; ++i) strides[i] = spec_.block_strides[i];

    const int stem = add_conv("stem", spec_.input_shape[0], spec_.stem_channels, 3, 1, 1, true);
    int64_t prev = spec_.stem_channels;
    std::vector<int> conv1_of(nb), conv2_of(nb), proj_of(nb, -1);
    for (size_t b = 0; b < nb; ++b) {
      const std::string bp = "block" + std::to_string(b);
      conv1_of[b] = add_conv(bp + ".conv1", prev, inner[b], 3, static_cast<int>(strides[b]), 1, true);
      conv2_of[b] = add_conv(bp + ".conv2", inner[b], spec_.block_channels[b], 3, 1, 1, true);
      const bool has_proj = spec_.block_proj.empty()
                                ? (prev != spec_.block_channels[b] || strides[b] != 1)
                                : spec_.block_proj[b] != 0;
      if (has_proj)
        proj_of[b] = add_conv(bp + ".proj", prev, spec_.block_channels[b], 1,
                              static_cast<int>(strides[b]), 0, true);
      prev = spec_.block_channels[b];
    }
    head_dense_ = add_dense("head", prev, spec_.num_classes);

    {
      PruneLayer pl;  // stem feeds the first residual sum when the skip is identity
      pl.is_conv = true;
      pl.conv = stem;
      pl.prunable = proj_of[0] >= 0;
      pl.consumer_convs.push_back(conv1_of[0]);
      if (proj_of[0] >= 0) pl.consumer_convs.push_back(proj_of[0]);
      prune_layers_.push_back(pl);
    }
    for (size_t b = 0; b < nb; ++b) {
      PruneLayer c1;
      c1.is_conv = true;
      c1.conv = conv1_of[b];
      c1.consumer_convs.push_back(conv2_of[b]);
      prune_layers_.push_back(c1);

      PruneLayer c2;  // output-facing, feeds the residual sum
      c2.is_conv = true;
      c2.conv = conv2_of[b];
      c2.prunable = false;
      prune_layers_.push_back(c2);

      if (proj_of[b] >= 0) {
        PruneLayer pp;
        pp.is_conv = true;
        pp.conv = proj_of[b];
        pp.prunable = false;
        prune_layers_.push_back(pp);
      }
    }
  }

  offsets_.resize(params_.size() + 1);
  offsets_[0] = 0;
  for (size_t i = 0; i < params_.size(); ++i)
    offsets_[i + 1] = offsets_[i] + params_[i].t.numel();
}

Model Model::build(const ModelSpec& spec, uint64_t seed) {

  spec.validate();
  Model m;
  m.spec_ = spec;
  Rng rng(mix_seed(seed, 0xA11));

  auto push_param = [&](const std::string& name, Tensor t) {
    t.mark_param();
    m.params_.push_back({name, std::move(t)});
  };
  auto push_buffer = [&](const std::string& name, Tensor t) {
    m.buffers_.push_back({name, std::move(t)});
  };
  auto push_bn = [&](const std::string& prefix, int64_t c) {
    push_param(prefix + ".gamma", filled({c}, 1.0));
    push_param(prefix + ".beta", Tensor::zeros({c}));
    push_buffer(prefix + ".running_mean", Tensor::zeros({c}));
    push_buffer(prefix + ".running_var", filled({c}, 1.0));
  };
  auto push_conv = [&](const std::string& prefix, int64_t cin, int64_t cout, int64_t k,
                       bool with_bn) {
    push_param(prefix + ".weight", he_uniform({cout, cin, k, k}, cin * k * k, rng));
    push_param(prefix + ".bias", Tensor::zeros({cout}));
    if (with_bn) push_bn(prefix + ".bn", cout);
  };
  auto push_dense = [&](const std::string& prefix, int64_t in, int64_t out) {
    push_param(prefix + ".weight", he_uniform({out, in}, in, rng));
    push_param(prefix + ".bias", Tensor::zeros({out}));
  };

  if (spec.arch == Arch::Mlp) {
    int64_t prev = spec.input_shape[0];
    for (size_t i = 0; i < spec.mlp_hidden.size(); ++i) {
      push_dense("fc" + std::to_string(i), prev, spec.mlp_hidden[i]);
      prev = spec.mlp_hidden[i];
    }
    push_dense("head", prev, spec.num_classes);
  } else if (spec.arch == Arch::SmallConvNet) {
    int64_t prev = spec.input_shape[0];
    for (size_t i = 0; i < spec.conv_channels.size(); ++i) {
      push_conv("conv" + std::to_string(i), prev, spec.conv_channels[i], 3, true);
      prev = spec.conv_channels[i];
    }
    push_dense("head", prev, spec.num_classes);
  } else {
    const size_t nb = spec.block_channels.size();
    std::vector<int64_t> inner = spec.block_inner.empty() ? spec.block_channels : spec.block_inner;
    std::vector<int64_t> strides(nb, 1);
    if (!spec.block_strides.empty())
      for (size_t i = 0; i < nb; ++i) strides[i] = spec.block_strides[i];
    push_conv("stem", spec.input_shape[0], spec.stem_channels, 3, true);
    int64_t prev = spec.stem_channels;
    for (size_t b = 0; b < nb; ++b) {
      const std::string bp = "block" + std::to_string(b);
      push_conv(bp + ".conv1", prev, inner[b], 3, true);
      push_conv(bp + ".conv2", inner[b], spec.block_channels[b], 3, true);
      const bool has_proj = spec.block_proj.empty()
                                ? (prev != spec.block_channels[b] || strides[b] != 1)
                                : spec.block_proj[b] != 0;
      if (has_proj) push_conv(bp + ".proj", prev, spec.block_channels[b], 1, true);
      prev = spec.block_channels[b];
    }
    push_dense("head", prev, spec.num_classes);
  }

  m.init_layout();
  return m;
}

std::vector<Tensor> Model::trainable() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.t);
  return out;
}

int64_t Model::param_count() const { return offsets_.back(); }

int64_t Model::param_offset(size_t param_index) const { return offsets_[param_index]; }

const Tensor* Model::find_param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p.t;
  return nullptr;
}

Tensor* Model::find_buffer(const std::string& name) {
  for (auto& b : buffers_)
    if (b.name == name) return &b.t;
  return nullptr;
}

int64_t Model::prunable_layer_count() const {
  return static_cast<int64_t>(prune_layers_.size());
}

int64_t Model::layer_channel_count(int64_t layer_id) const {
  const PruneLayer& pl = prune_layers_[static_cast<size_t>(layer_id)];
  return pl.is_conv ? convs_[static_cast<size_t>(pl.conv)].cout
                    : denses_[static_cast<size_t>(pl.dense)].out;
}

int64_t Model::flop_count() const {
  int64_t flops = 0;
  auto dense_flops = [&](const Dense& d) { flops += 2 * d.in * d.out + d.out; };
  auto conv_flops = [&](const Conv& c, int64_t h, int64_t w, int64_t& oh, int64_t& ow) {
    oh = conv_out(h, c.k, c.stride, c.pad);
    ow = conv_out(w, c.k, c.stride, c.pad);
    const int64_t out_vals = c.cout * oh * ow;
    flops += 2 * c.k * c.k * c.cin * out_vals;  // multiply-add pairs
    flops += out_vals;                          // bias
    if (c.bn >= 0) flops += 2 * out_vals;       // scale and shift
  };

  if (spec_.arch == Arch::Mlp) {
    for (size_t i = 0; i < denses_.size(); ++i) {
      dense_flops(denses_[i]);
      if (static_cast<int>(i) != head_dense_) flops += denses_[i].out;  // relu
    }
    return flops;
  }

  int64_t h = spec_.input_shape[1], w = spec_.input_shape[2];
  if (spec_.arch == Arch::SmallConvNet) {
    for (const auto& c : convs_) {
      int64_t oh = 0, ow = 0;
      conv_flops(c, h, w, oh, ow);
      flops += c.cout * oh * ow;  // relu
      h = oh;
      w = ow;
    }
    flops += convs_.back().cout * h * w;  // global average pool
    dense_flops(denses_[static_cast<size_t>(head_dense_)]);
    return flops;
  }

  // miniresnet: stem, then blocks in construction order
  size_t ci = 0;
  {
    int64_t oh = 0, ow = 0;
    conv_flops(convs_[ci], h, w, oh, ow);
    flops += convs_[ci].cout * oh * ow;  // relu
    h = oh;
    w = ow;
    ++ci;
  }
  const size_t nb = spec_.block_channels.size();
  for (size_t b = 0; b < nb; ++b) {
    const int64_t in_h = h, in_w = w;
    int64_t oh = 0, ow = 0;
    conv_flops(convs_[ci], in_h, in_w, oh, ow);  // conv1
    flops += convs_[ci].cout * oh * ow;          // relu
    ++ci;
    int64_t oh2 = 0, ow2 = 0;
    conv_flops(convs_[ci], oh, ow, oh2, ow2);  // conv2
    ++ci;
    if (ci < convs_.size() && convs_[ci].k == 1) {
      int64_t ph = 0, pw = 0;
      conv_flops(convs_[ci], in_h, in_w, ph, pw);  // projection
      ++ci;
    }
    flops += 2 * spec_.block_channels[b] * oh2 * ow2;  // residual add + relu
    h = oh2;
    w = ow2;
  }
  flops += spec_.block_channels.back() * h * w;  // global average pool
  dense_flops(denses_[static_cast<size_t>(head_dense_)]);
  return flops;
}

std::vector<ChannelGroup> Model::channel_groups() const {
  std::vector<ChannelGroup> groups;
  for (size_t li = 0; li < prune_layers_.size(); ++li) {
    const PruneLayer& pl = prune_layers_[li];
    const int64_t channels = layer_channel_count(static_cast<int64_t>(li));
    for (int64_t ch = 0; ch < channels; ++ch) {
      ChannelGroup g;
      g.layer_id = static_cast<int64_t>(li);
      g.channel = ch;
      g.prunable = pl.prunable;
      if (pl.is_conv) {
        const Conv& c = convs_[static_cast<size_t>(pl.conv)];
        const int64_t row = c.cin * c.k * c.k;
        const int64_t w_off = offsets_[static_cast<size_t>(c.w)];
        for (int64_t i = 0; i < row; ++i) g.own.push_back(w_off + ch * row + i);
        g.weight_count = row;
        g.own.push_back(offsets_[static_cast<size_t>(c.b)] + ch);
        if (c.bn >= 0) {
          const Bn& bn = bns_[static_cast<size_t>(c.bn)];
          g.own.push_back(offsets_[static_cast<size_t>(bn.gamma)] + ch);
          g.own.push_back(offsets_[static_cast<size_t>(bn.beta)] + ch);
        }
      } else {
        const Dense& d = denses_[static_cast<size_t>(pl.dense)];
        const int64_t w_off = offsets_[static_cast<size_t>(d.w)];
        for (int64_t i = 0; i < d.in; ++i) g.own.push_back(w_off + ch * d.in + i);
        g.weight_count = d.in;
        g.own.push_back(offsets_[static_cast<size_t>(d.b)] + ch);
      }
      for (int cc : pl.consumer_convs) {
        const Conv& nc = convs_[static_cast<size_t>(cc)];
        const int64_t w_off = offsets_[static_cast<size_t>(nc.w)];
        for (int64_t o = 0; o < nc.cout; ++o)
          for (int64_t i = 0; i < nc.k * nc.k; ++i)
            g.coupled.push_back(w_off + (o * nc.cin + ch) * nc.k * nc.k + i);
      }
      if (pl.consumer_dense >= 0) {
        const Dense& nd = denses_[static_cast<size_t>(pl.consumer_dense)];
        const int64_t w_off = offsets_[static_cast<size_t>(nd.w)];
        for (int64_t o = 0; o < nd.out; ++o) g.coupled.push_back(w_off + o * nd.in + ch);
      }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

Tensor Model::forward(Tape& tape, const Tensor& x, bool training, const ForwardHooks* hooks) {
  int act_site = 0;
  auto weight_of = [&](int idx, const std::string& name) -> Tensor {
    Tensor w = params_[static_cast<size_t>(idx)].t;
    if (hooks && hooks->weight) return hooks->weight(tape, name, w);
    return w;
  };
  auto post_act = [&](Tensor a) -> Tensor {
    if (hooks && hooks->activation)
      return hooks->activation(tape, "act" + std::to_string(act_site++), a);
    ++act_site;
    return a;
  };
  auto apply_bn = [&](int bn_idx, const Tensor& h) -> Tensor {
    const Bn& bn = bns_[static_cast<size_t>(bn_idx)];
    Tensor gamma = params_[static_cast<size_t>(bn.gamma)].t;
    Tensor beta = params_[static_cast<size_t>(bn.beta)].t;
    auto& rmean = buffers_[static_cast<size_t>(bn.rmean)].t.values();
    auto& rvar = buffers_[static_cast<size_t>(bn.rvar)].t.values();
    if (training) {
      std::vector<double> bm, bv;
      Tensor y = ops::batchnorm_train(tape, h, gamma, beta, kBnEps, &bm, &bv);
      for (size_t i = 0; i < rmean.size(); ++i) {
        rmean[i] = kBnMomentum * rmean[i] + (1.0 - kBnMomentum) * bm[i];
        rvar[i] = kBnMomentum * rvar[i] + (1.0 - kBnMomentum) * bv[i];
      }
      return y;
    }
    return ops::batchnorm_eval(tape, h, gamma, beta, rmean, rvar, kBnEps);
  };
  auto run_conv = [&](int conv_idx, const std::string& name, const Tensor& h) -> Tensor {
    const Conv& c = convs_[static_cast<size_t>(conv_idx)];
    Tensor y = ops::conv2d(tape, h, weight_of(c.w, name + ".weight"), c.stride, c.pad);
    y = ops::bias_add(tape, y, params_[static_cast<size_t>(c.b)].t);
    if (c.bn >= 0) y = apply_bn(c.bn, y);
    return y;
  };
  auto run_dense = [&](int dense_idx, const std::string& name, const Tensor& h) -> Tensor {
    const Dense& d = denses_[static_cast<size_t>(dense_idx)];
    Tensor y = ops::matmul(tape, h, weight_of(d.w, name + ".weight"), false, true);
    return ops::bias_add(tape, y, params_[static_cast<size_t>(d.b)].t);
  };

  if (spec_.arch == Arch::Mlp) {
    Tensor h = x;
    for (size_t i = 0; i + 1 < denses_.size(); ++i) {
      h = run_dense(static_cast<int>(i), "fc" + std::to_string(i), h);
      h = post_act(ops::relu(tape, h));
    }
    return run_dense(head_dense_, "head", h);
  }

  if (spec_.arch == Arch::SmallConvNet) {
    Tensor h = x;
    for (size_t i = 0; i < convs_.size(); ++i) {
      h = run_conv(static_cast<int>(i), "conv" + std::to_string(i), h);
      h = post_act(ops::relu(tape, h));
    }
    h = ops::global_avg_pool(tape, h);
    return run_dense(head_dense_, "head", h);
  }

  // miniresnet
  size_t ci = 0;
  Tensor h = run_conv(static_cast<int>(ci++), "stem", x);
  h = post_act(ops::relu(tape, h));
  const size_t nb = spec_.block_channels.size();
  for (size_t b = 0; b < nb; ++b) {
    const std::string bp = "block" + std::to_string(b);
    Tensor t = run_conv(static_cast<int>(ci++), bp + ".conv1", h);
    t = post_act(ops::relu(tape, t));
    Tensor t2 = run_conv(static_cast<int>(ci++), bp + ".conv2", t);
    Tensor skip = h;
    if (ci < convs_.size() && convs_[ci].k == 1) skip = run_conv(static_cast<int>(ci++), bp + ".proj", h);
    h = post_act(ops::relu(tape, ops::add(tape, t2, skip)));
  }
  h = ops::global_avg_pool(tape, h);
  return run_dense(head_dense_, "head", h);
}

Tensor Model::loss(Tape& tape, const Tensor& x, const std::vector<int>& labels, bool training,
                   const ForwardHooks* hooks) {
  Tensor logits = forward(tape, x, training, hooks);
  return ops::softmax_xent(tape, logits, labels);
}

Model Model::clone() const {
  Model m;
  m.spec_ = spec_;
  for (const auto& p : params_) {
    Tensor t = p.t.detached_clone();
    t.mark_param();
    m.params_.push_back({p.name, std::move(t)});
  }
  for (const auto& b : buffers_) m.buffers_.push_back({b.name, b.t.detached_clone()});
  m.init_layout();
  return m;
}

Model Model::rebuild_pruned(const std::vector<std::vector<int64_t>>& survivors) const {
  if (survivors.size() != prune_layers_.size())
    raise(Errc::StructuralViolation, "survivor list count does not match prunable layers");
  for (size_t li = 0; li < prune_layers_.size(); ++li) {
    if (survivors[li].empty())
      raise(Errc::StructuralViolation,
            "layer " + std::to_string(li) + " would be left without channels");
    if (!prune_layers_[li].prunable &&
        static_cast<int64_t>(survivors[li].size()) != layer_channel_count(static_cast<int64_t>(li)))
      raise(Errc::StructuralViolation,
            "layer " + std::to_string(li) + " is not prunable but lost channels");
  }

  ModelSpec ns = spec_;
  if (spec_.arch == Arch::Mlp) {
    for (size_t i = 0; i < ns.mlp_hidden.size(); ++i)
      ns.mlp_hidden[i] = static_cast<int64_t>(survivors[i].size());
  } else if (spec_.arch == Arch::SmallConvNet) {
    for (size_t i = 0; i < ns.conv_channels.size(); ++i)
      ns.conv_channels[i] = static_cast<int64_t>(survivors[i].size());
  } else {
    ns.stem_channels = static_cast<int64_t>(survivors[0].size());
    if (ns.block_inner.empty()) ns.block_inner = ns.block_channels;
    ns.block_proj.assign(ns.block_channels.size(), 0);
    size_t li = 1;
    for (size_t b = 0; b < ns.block_channels.size(); ++b) {
      ns.block_inner[b] = static_cast<int64_t>(survivors[li].size());
      li += 2;  // conv1, conv2
      const bool has_proj = li < prune_layers_.size() && prune_layers_[li].is_conv &&
                            convs_[static_cast<size_t>(prune_layers_[li].conv)].k == 1;
      ns.block_proj[b] = has_proj ? 1 : 0;
      if (has_proj) ++li;
    }
  }

  Model out = Model::build(ns, 0);

  // input-channel survivors for every conv/dense of the old model
  std::vector<std::vector<int64_t>> conv_in(convs_.size()), conv_out_s(convs_.size());
  std::vector<std::vector<int64_t>> dense_in(denses_.size()), dense_out_s(denses_.size());
  for (size_t i = 0; i < convs_.size(); ++i) {
    conv_in[i] = all_channels(convs_[i].cin);
    conv_out_s[i] = all_channels(convs_[i].cout);
  }
  for (size_t i = 0; i < denses_.size(); ++i) {
    dense_in[i] = all_channels(denses_[i].in);
    dense_out_s[i] = all_channels(denses_[i].out);
  }
  for (size_t li = 0; li < prune_layers_.size(); ++li) {
    const PruneLayer& pl = prune_layers_[li];
    if (pl.is_conv)
      conv_out_s[static_cast<size_t>(pl.conv)] = survivors[li];
    else
      dense_out_s[static_cast<size_t>(pl.dense)] = survivors[li];
    for (int cc : pl.consumer_convs) conv_in[static_cast<size_t>(cc)] = survivors[li];
    if (pl.consumer_dense >= 0) dense_in[static_cast<size_t>(pl.consumer_dense)] = survivors[li];
  }

  auto copy_vector = [&](const Tensor& src, Tensor& dst, const std::vector<int64_t>& keep) {
    for (size_t i = 0; i < keep.size(); ++i) dst.data()[i] = src.data()[keep[i]];
  };
  auto copy_bn = [&](const Bn& ob, const Bn& nb, const std::vector<int64_t>& keep,
                     Model& dst_model) {
    copy_vector(params_[static_cast<size_t>(ob.gamma)].t,
                dst_model.params_[static_cast<size_t>(nb.gamma)].t, keep);
    copy_vector(params_[static_cast<size_t>(ob.beta)].t,
                dst_model.params_[static_cast<size_t>(nb.beta)].t, keep);
    copy_vector(buffers_[static_cast<size_t>(ob.rmean)].t,
                dst_model.buffers_[static_cast<size_t>(nb.rmean)].t, keep);
    copy_vector(buffers_[static_cast<size_t>(ob.rvar)].t,
                dst_model.buffers_[static_cast<size_t>(nb.rvar)].t, keep);
  };

  if (convs_.size() != out.convs_.size() || denses_.size() != out.denses_.size())
    raise(Errc::StructuralViolation, "rebuild changed the layer structure");

  for (size_t i = 0; i < convs_.size(); ++i) {
    const Conv& oc = convs_[i];
    const Conv& nc = out.convs_[i];
    const auto& keep_out = conv_out_s[i];
    const auto& keep_in = conv_in[i];
    const Tensor& ow = params_[static_cast<size_t>(oc.w)].t;
    Tensor& nw = out.params_[static_cast<size_t>(nc.w)].t;
    const int64_t kk = oc.k * oc.k;
    for (size_t o = 0; o < keep_out.size(); ++o)
      for (size_t c = 0; c < keep_in.size(); ++c)
        std::memcpy(nw.data() + ((static_cast<int64_t>(o) * nc.cin + static_cast<int64_t>(c)) * kk),
                    ow.data() + ((keep_out[o] * oc.cin + keep_in[c]) * kk),
                    static_cast<size_t>(kk) * sizeof(double));
    copy_vector(params_[static_cast<size_t>(oc.b)].t, out.params_[static_cast<size_t>(nc.b)].t,
                keep_out);
    if (oc.bn >= 0) copy_bn(bns_[static_cast<size_t>(oc.bn)], out.bns_[static_cast<size_t>(nc.bn)], keep_out, out);
  }
  for (size_t i = 0; i < denses_.size(); ++i) {
    const Dense& od = denses_[i];
    const Dense& nd = out.denses_[i];
    const auto& keep_out = dense_out_s[i];
    const auto& keep_in = dense_in[i];
    const Tensor& ow = params_[static_cast<size_t>(od.w)].t;
    Tensor& nw = out.params_[static_cast<size_t>(nd.w)].t;
    for (size_t o = 0; o < keep_out.size(); ++o)
      for (size_t c = 0; c < keep_in.size(); ++c)
        nw.data()[static_cast<int64_t>(o) * nd.in + static_cast<int64_t>(c)] =
            ow.data()[keep_out[o] * od.in + keep_in[c]];
    copy_vector(params_[static_cast<size_t>(od.b)].t, out.params_[static_cast<size_t>(nd.b)].t,
                keep_out);
  }

  // forward-shape validation on a single zero sample
  {
    Tape probe;
    probe.recording = false;
    std::vector<int64_t> shape;
    shape.push_back(1);
    for (int64_t e : out.spec_.input_shape) shape.push_back(e);
    out.forward(probe, Tensor::zeros(shape), false);
  }
  return out;
}

double evaluate_accuracy(Model& model, const std::vector<double>& xs, const std::vector<int>& ys,
                         const std::vector<int64_t>& sample_shape, int threads) {
  const int64_t n = static_cast<int64_t>(ys.size());
  if (n == 0) return 0.0;
  const int64_t dim = shape_numel(sample_shape);
  const int64_t batch = 256;
  const int64_t num_batches = (n + batch - 1) / batch;

  auto eval_range = [&](int64_t b0, int64_t b1, int64_t* correct) {
    int64_t ok = 0;
    for (int64_t bi = b0; bi < b1; ++bi) {
      const int64_t lo = bi * batch;
      const int64_t hi = std::min(n, lo + batch);
      std::vector<int64_t> shape;
      shape.push_back(hi - lo);
      for (int64_t e : sample_shape) shape.push_back(e);
      Tensor x = Tensor::from(shape, std::vector<double>(xs.begin() + lo * dim,
                                                          xs.begin() + hi * dim));
      Tape tape;
      tape.recording = false;
      Tensor logits = model.forward(tape, x, false);
      const int64_t classes = logits.extent(1);
      for (int64_t i = 0; i < hi - lo; ++i) {
        const double* row = logits.data() + i * classes;
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c)
          if (row[c] > row[best]) best = c;
        if (best == ys[static_cast<size_t>(lo + i)]) ++ok;
      }
    }
    *correct = ok;
  };

  threads = std::max(1, std::min<int>(threads, static_cast<int>(num_batches)));
  if (threads == 1) {
    int64_t correct = 0;
    eval_range(0, num_batches, &correct);
    return static_cast<double>(correct) / static_cast<double>(n);
  }
  std::vector<int64_t> counts(static_cast<size_t>(threads), 0);
  std::vector<std::thread> pool;
  const int64_t per = (num_batches + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int64_t b0 = t * per;
    const int64_t b1 = std::min(num_batches, b0 + per);
    if (b0 >= b1) break;
    pool.emplace_back(eval_range, b0, b1, &counts[static_cast<size_t>(t)]);
  }
  for (auto& th : pool) th.join();
  int64_t correct = 0;
  for (int64_t c : counts) correct += c;
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace hesskit
