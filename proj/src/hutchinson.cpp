#include "hesskit/hutchinson.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <optional>
#include <thread>

namespace hesskit {

std::string trace_mode_name(TraceMode m) {
  return m == TraceMode::FP32 ? "FP32" : "FP16_SCALED";
}

TraceMode trace_mode_from_name(const std::string& s) {
  if (s == "FP32" || s == "fp32") return TraceMode::FP32;
  if (s == "FP16_SCALED" || s == "fp16") return TraceMode::FP16Scaled;
  raise(Errc::ConfigInvalid, "unknown trace mode '" + s + "'");
}

json TraceReport::to_json() const {
  json j;
  j["mode"] = trace_mode_name(mode);
  j["n_v"] = n_v;
  j["scale"] = scale_applied;
  j["global_trace"] = global_trace;
  json chans = json::array();
  for (const auto& c : channels) {
    json e;
    e["layer"] = c.layer;
    e["channel"] = c.channel;
    e["trace"] = c.trace;
    chans.push_back(e);
  }
  j["channels"] = chans;
  j["iterations"] = iterations;
  j["wall_time_s"] = wall_time_s;
  j["peak_bytes"] = peak.total();
  return j;
}

TraceReport TraceReport::from_json(const json& j) {
  TraceReport r;
  r.mode = trace_mode_from_name(j.at("mode").get<std::string>());
  r.n_v = j.at("n_v").get<int64_t>();
  r.scale_applied = j.at("scale").get<double>();
  r.global_trace = j.at("global_trace").get<double>();
  for (const auto& e : j.at("channels"))
    r.channels.push_back({e.at("layer").get<int64_t>(), e.at("channel").get<int64_t>(),
                          e.at("trace").get<double>()});
  r.iterations = j.at("iterations").get<std::vector<double>>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.peak.fp32_saved = j.at("peak_bytes").get<int64_t>();
  double ch_sum = 0.0;
  for (const auto& c : r.channels) ch_sum += c.trace;
  r.residue_trace = r.global_trace - ch_sum;
  return r;
}

std::vector<double> rademacher(int64_t dim, Rng& rng) {
  if (dim < 1) raise(Errc::InvalidSpec, "rademacher dimension must be positive");
  std::vector<double> v(static_cast<size_t>(dim));
  for (auto& e : v) e = rng.rademacher();
  return v;
}

HvpSession::HvpSession(const TraceTarget& target, TraceMode mode) : mode_(mode) {
  params_ = target.parameters();
  offsets_.resize(params_.size() + 1, 0);
  for (size_t i = 0; i < params_.size(); ++i) offsets_[i + 1] = offsets_[i] + params_[i].numel();
  dim_ = offsets_.back();

  Tensor loss;
  {
    std::optional<PrecisionGuard> reduced;
    if (mode == TraceMode::FP16Scaled) reduced.emplace(tape_, Precision::FP16EMU);
    loss = target.build_loss(tape_);
  }
  if (mode == TraceMode::FP32) {
    grads_ = backward(tape_, loss, params_, true, true);
  } else {
    GradScaler first(GradScaler::Mode::FirstOrder);
    auto sg = scaled_backward(tape_, loss, params_, first, true, true);
    grads_ = unscale_on_tape(tape_, sg, first);
  }
  mark_ = tape_.mark();
}

HvpSession::~HvpSession() = default;

double HvpSession::applied_scale() const {
  return mode_ == TraceMode::FP16Scaled ? GradScaler(GradScaler::Mode::SecondOrder).scale : 1.0;
}

std::vector<double> HvpSession::apply(const std::vector<double>& v) {
  if (static_cast<int64_t>(v.size()) != dim_)
    raise(Errc::ShapeMismatch, "probe vector length does not match parameter count");

  std::vector<Tensor> hv;
  {
    PrecisionGuard wide(tape_, Precision::FP32);  // the dot product stays wide
    Tensor dot;
    for (size_t p = 0; p < grads_.size(); ++p) {
      Tensor vp = ops::constant(params_[p].shape(),
                                std::vector<double>(v.begin() + offsets_[p],
                                                    v.begin() + offsets_[p + 1]));
      Tensor s = ops::sum_all(tape_, ops::mul(tape_, grads_[p], vp));
      dot = dot.defined() ? ops::add(tape_, dot, s) : s;
    }
    Tensor objective = dot;
    if (mode_ == TraceMode::FP16Scaled) objective = ops::scale(tape_, dot, applied_scale());
    hv = backward(tape_, objective, params_, false, true);
  }

  std::vector<double> flat(static_cast<size_t>(dim_));
  for (size_t p = 0; p < hv.size(); ++p)
    std::memcpy(flat.data() + offsets_[p], hv[p].data(),
                static_cast<size_t>(hv[p].numel()) * sizeof(double));
  tape_.truncate(mark_);
  return flat;
}

std::vector<double> hvp(const TraceTarget& target, const std::vector<double>& v, TraceMode mode) {
  HvpSession session(target, mode);
  auto out = session.apply(v);
  for (double x : out)
    if (!std::isfinite(x)) raise(Errc::NonFiniteHvp, "Hessian-vector product is not finite");
  return out;
}

namespace {

struct BlockResult {
  // indexed by global iteration number within [begin, end)
  std::vector<double> values;
  std::vector<std::vector<double>> channel_partials;  // [iter][group]
  std::vector<double> residue_partials;
  PeakBytes peak;
};

void run_block(const TraceTarget& target, const HutchinsonOptions& options,
               const std::vector<ChannelGroup>& groups, const std::vector<int64_t>& residue,
               int64_t begin, int64_t end, BlockResult* out) {
  HvpSession session(target, options.mode);
  const int64_t dim = session.dim();
  out->values.reserve(static_cast<size_t>(end - begin));
  for (int64_t it = begin; it < end; ++it) {
    Rng rng(mix_seed(options.seed, static_cast<uint64_t>(it)));
    const auto v = rademacher(dim, rng);
    const auto hv = session.apply(v);
    for (double x : hv)
      if (!std::isfinite(x))
        raise(Errc::NonFiniteHvp,
              "non-finite Hessian-vector product at iteration " + std::to_string(it));

    // componentwise partition of v (.) Hv: groups first, residue last, so the
    // per-iteration value recomposes from its parts exactly
    std::vector<double> partials(groups.size(), 0.0);
    double value = 0.0;
    for (size_t g = 0; g < groups.size(); ++g) {
      double acc = 0.0;
      for (int64_t i : groups[g].own)
        acc += v[static_cast<size_t>(i)] * hv[static_cast<size_t>(i)];
      partials[g] = acc;
      value += acc;
    }
    double res = 0.0;
    for (int64_t i : residue) res += v[static_cast<size_t>(i)] * hv[static_cast<size_t>(i)];
    value += res;

    out->values.push_back(value);
    out->channel_partials.push_back(std::move(partials));
    out->residue_partials.push_back(res);
  }
  out->peak = session.tape().peak();
}

}  // namespace

TraceReport estimate_trace(const TraceTarget& target, const HutchinsonOptions& options) {
  if (options.n_v < 1) raise(Errc::InvalidSpec, "n_v must be at least 1");
  const auto t0 = std::chrono::steady_clock::now();

  const auto groups = target.groups();
  const auto params = target.parameters();
  int64_t dim = 0;
  for (const auto& p : params) dim += p.numel();
  std::vector<bool> grouped(static_cast<size_t>(dim), false);
  for (const auto& g : groups)
    for (int64_t i : g.own) grouped[static_cast<size_t>(i)] = true;
  std::vector<int64_t> residue;
  for (int64_t i = 0; i < dim; ++i)
    if (!grouped[static_cast<size_t>(i)]) residue.push_back(i);

  const int threads =
      std::max(1, std::min<int>(options.threads, static_cast<int>(options.n_v)));
  std::vector<BlockResult> blocks(static_cast<size_t>(threads));
  const int64_t per = (options.n_v + threads - 1) / threads;

  if (threads == 1) {
    run_block(target, options, groups, residue, 0, options.n_v, &blocks[0]);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      const int64_t b0 = t * per;
      const int64_t b1 = std::min<int64_t>(options.n_v, b0 + per);
      if (b0 >= b1) break;
      pool.emplace_back([&, t, b0, b1] {
        try {
          run_block(target, options, groups, residue, b0, b1, &blocks[static_cast<size_t>(t)]);
        } catch (...) {
          errors[static_cast<size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  TraceReport report;
  report.mode = options.mode;
  report.n_v = options.n_v;
  report.scale_applied =
      options.mode == TraceMode::FP16Scaled ? GradScaler(GradScaler::Mode::SecondOrder).scale : 1.0;
  report.peak = blocks[0].peak;

  std::vector<double> channel_sums(groups.size(), 0.0);
  double residue_sum = 0.0;
  double value_sum = 0.0;
  for (const auto& b : blocks) {  // blocks are in iteration order
    for (size_t i = 0; i < b.values.size(); ++i) {
      report.iterations.push_back(b.values[i]);
      value_sum += b.values[i];
      residue_sum += b.residue_partials[i];
      for (size_t g = 0; g < groups.size(); ++g) channel_sums[g] += b.channel_partials[i][g];
      if (options.keep_channel_history) report.channel_history.push_back(b.channel_partials[i]);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(options.n_v);
  report.global_trace = value_sum * inv_n;
  report.residue_trace = residue_sum * inv_n;
  report.channels.reserve(groups.size());
  for (size_t g = 0; g < groups.size(); ++g)
    report.channels.push_back({groups[g].layer_id, groups[g].channel, channel_sums[g] * inv_n});

  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

TraceReport estimate_trace(Model& model, const Tensor& batch_inputs,
                           const std::vector<int>& batch_labels, int64_t n_v, TraceMode mode,
                           uint64_t seed) {
  ModelBatchTarget target(model, batch_inputs, batch_labels);
  HutchinsonOptions options;
  options.n_v = n_v;
  options.mode = mode;
  options.seed = seed;
  return estimate_trace(target, options);
}

json ModeComparison::to_json() const {
  json j;
  j["kendall_tau"] = kendall_tau;
  j["fp16_peak_bytes"] = fp16.peak.total();
  j["fp32_peak_bytes"] = fp32.peak.total();
  j["peak_byte_ratio"] = peak_byte_ratio;
  j["wall_time_ratio"] = wall_time_ratio;
  j["wall_time_note"] =
      "emulated FP16 wall time is informational only and not comparable to GPU timings";
  j["low_confidence"] = low_confidence;
  return j;
}

ModeComparison compare_modes(const TraceTarget& target, int64_t n_v, uint64_t seed, int threads) {
  HutchinsonOptions options;
  options.n_v = n_v;
  options.seed = seed;
  options.threads = threads;

  ModeComparison cmp;
  options.mode = TraceMode::FP32;
  cmp.fp32 = estimate_trace(target, options);
  options.mode = TraceMode::FP16Scaled;
  cmp.fp16 = estimate_trace(target, options);

  std::vector<double> a, b;
  a.reserve(cmp.fp32.channels.size());
  for (const auto& c : cmp.fp32.channels) a.push_back(c.trace);
  for (const auto& c : cmp.fp16.channels) b.push_back(c.trace);
  cmp.kendall_tau = a.empty() ? 0.0 : kendall_tau(a, b);
  cmp.peak_byte_ratio = cmp.fp32.peak.total() > 0
                            ? static_cast<double>(cmp.fp16.peak.total()) /
                                  static_cast<double>(cmp.fp32.peak.total())
                            : 0.0;
  cmp.wall_time_ratio =
      cmp.fp32.wall_time_s > 0.0 ? cmp.fp16.wall_time_s / cmp.fp32.wall_time_s : 0.0;
  cmp.low_confidence = n_v < 30 || a.size() < 2;
  return cmp;
}

double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) raise(Errc::ShapeMismatch, "kendall_tau length mismatch");
  const int64_t n = static_cast<int64_t>(a.size());
  if (n < 2) return 0.0;
  int64_t concordant = 0, discordant = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) {
      const double da = a[static_cast<size_t>(i)] - a[static_cast<size_t>(j)];
      const double db = b[static_cast<size_t>(i)] - b[static_cast<size_t>(j)];
      const double s = da * db;
      if (s > 0.0) ++concordant;
      else if (s < 0.0) ++discordant;
    }
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  return static_cast<double>(concordant - discordant) / pairs;
}

}  // namespace hesskit
