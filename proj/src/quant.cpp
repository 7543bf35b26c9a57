#include "hesskit/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>

namespace hesskit {
namespace {

constexpr double kScaleFloor = 0x1.0p-16;

bool is_weight_name(const std::string& name) {
  return name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

double f32_round(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

double round_half_even(double x) {
  double r = std::floor(x);
  const double frac = x - r;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(r, 2.0) != 0.0)) r += 1.0;
  return r;
}

QuantParams calibrate_symmetric(const double* values, int64_t count) {
  if (count < 1) raise(Errc::InvalidSpec, "cannot calibrate an empty tensor");
  double beta = 0.0;
  for (int64_t i = 0; i < count; ++i) beta = std::max(beta, std::fabs(values[i]));
  QuantParams p;
  p.symmetric = true;
  p.qmin = -127;
  p.qmax = 127;
  p.s = beta == 0.0 ? kScaleFloor : beta / 127.0;
  p.z = 0;
  p.beta = beta;
  p.alpha = -beta;
  return p;
}

QuantParams calibrate_symmetric(const Tensor& t) { return calibrate_symmetric(t.data(), t.numel()); }

QuantParams asymmetric_params(double alpha, double beta) {
  if (!(alpha <= beta)) raise(Errc::InvalidSpec, "clip range is inverted");
  QuantParams p;
  p.symmetric = false;
  p.qmin = 0;
  p.qmax = 255;
  p.alpha = alpha;
  p.beta = beta;
  p.s = beta - alpha == 0.0 ? kScaleFloor : (beta - alpha) / 255.0;
  p.z = static_cast<int32_t>(round_half_even(alpha / p.s));
  return p;
}

void RangeObserver::observe(double batch_min, double batch_max) {
  if (!(batch_min <= batch_max)) raise(Errc::InvalidSpec, "observer range is inverted");
  if (!initialized) {
    running_min = batch_min;
    running_max = batch_max;
    initialized = true;
    return;
  }
  running_min = momentum * running_min + (1.0 - momentum) * batch_min;
  running_max = momentum * running_max + (1.0 - momentum) * batch_max;
}

int32_t quantize(double r, const QuantParams& p) {
  if (!(p.s > 0.0)) raise(Errc::InvalidSpec, "quantization scale must be positive");
  double q = round_half_even(r / p.s) - static_cast<double>(p.z);
  q = std::min(std::max(q, static_cast<double>(p.qmin)), static_cast<double>(p.qmax));
  return static_cast<int32_t>(q);
}

double dequantize(int32_t q, const QuantParams& p) {
  return p.s * (static_cast<double>(q) + static_cast<double>(p.z));
}

Tensor fake_quant(Tape& tape, const Tensor& x, const QuantParams& p) {
  return ops::fake_quant_op(tape, x, p.s, p.z, p.qmin, p.qmax, p.alpha, p.beta);
}

Tensor QatModel::deployed_forward(Tape& tape, const Tensor& x) {
  if (!frozen_) raise(Errc::InvalidSpec, "quantized model is not frozen");
  ForwardHooks hooks;
  hooks.activation = [this](Tape& t, const std::string& name, const Tensor& a) -> Tensor {
    auto it = act_params_.find(name);
    if (it == act_params_.end()) return a;
    return fake_quant(t, a, it->second);
  };
  return deployed_.forward(tape, x, false, &hooks);
}

double QatModel::deployed_accuracy(const Dataset& data, int threads) {
  const int64_t n = data.test_size();
  if (n == 0) return 0.0;
  const int64_t batch = 256;
  const int64_t num_batches = (n + batch - 1) / batch;

  auto eval_range = [&](int64_t b0, int64_t b1, int64_t* correct) {
    int64_t ok = 0;
    for (int64_t bi = b0; bi < b1; ++bi) {
      const int64_t lo = bi * batch;
      const int64_t hi = std::min(n, lo + batch);
      Tensor x = data.gather_test(lo, hi - lo);
      Tape tape;
      tape.recording = false;
      Tensor logits = deployed_forward(tape, x);
      const int64_t classes = logits.extent(1);
      for (int64_t i = 0; i < hi - lo; ++i) {
        const double* row = logits.data() + i * classes;
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c)
          if (row[c] > row[best]) best = c;
        if (best == data.test_y[static_cast<size_t>(lo + i)]) ++ok;
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

void QatModel::freeze() {
  deployed_ = model_.clone();
  weight_params_.clear();
  act_params_.clear();
  for (size_t i = 0; i < deployed_.params().size(); ++i) {
    auto& dst = deployed_.params()[i].t;
    const auto& name = deployed_.params()[i].name;
    const auto& src = model_.params()[i].t;
    if (is_weight_name(name)) {
      QuantParams qp = calibrate_symmetric(src);
      for (int64_t k = 0; k < dst.numel(); ++k)
        dst.data()[k] = dequantize(quantize(src.data()[k], qp), qp);
      weight_params_.emplace_back(name, qp);
    } else {
      for (int64_t k = 0; k < dst.numel(); ++k) dst.data()[k] = f32_round(src.data()[k]);
    }
  }
  for (auto& b : deployed_.buffers())
    for (int64_t k = 0; k < b.t.numel(); ++k) b.t.data()[k] = f32_round(b.t.data()[k]);
  for (const auto& [name, obs] : observers_)
    act_params_[name] = asymmetric_params(obs.running_min, obs.running_max);
  frozen_ = true;
}

QatModel qat_train(const Model& pruned, const Dataset& data, const QatOptions& options) {
  options.train.validate();
  QatModel qat;
  qat.model_ = pruned.clone();

  ForwardHooks hooks;
  hooks.weight = [](Tape& tape, const std::string&, const Tensor& w) -> Tensor {
    return fake_quant(tape, w, calibrate_symmetric(w));
  };
  hooks.activation = [&qat, m = options.act_momentum](Tape& tape, const std::string& name,
                                                      const Tensor& a) -> Tensor {
    auto& obs = qat.observers_[name];
    obs.momentum = m;
    double mn = a.data()[0], mx = a.data()[0];
    for (int64_t i = 1; i < a.numel(); ++i) {
      mn = std::min(mn, a.data()[i]);
      mx = std::max(mx, a.data()[i]);
    }
    obs.observe(mn, mx);
    return fake_quant(tape, a, asymmetric_params(obs.running_min, obs.running_max));
  };

  // calibration pass over the leading batches, observers only
  {
    const int64_t bs = options.train.batch_size;
    const int64_t nb =
        std::min(options.calibration_batches, (data.train_size() + bs - 1) / bs);
    for (int64_t b = 0; b < nb; ++b) {
      const int64_t lo = b * bs;
      const int64_t hi = std::min(data.train_size(), lo + bs);
      std::vector<int64_t> idx;
      for (int64_t i = lo; i < hi; ++i) idx.push_back(i);
      Tensor x = data.gather_train(idx);
      Tape tape;
      tape.recording = false;
      qat.model_.forward(tape, x, false, &hooks);
    }
  }

  if (options.train.epochs > 0) train_model(qat.model_, data, options.train, options.seed, &hooks);
  qat.freeze();
  return qat;
}

namespace {

constexpr char kMagic[8] = {'E', 'H', 'A', 'P', 'Q', 'N', 'T', '1'};
constexpr uint16_t kVersion = 1;

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}
void put_f64(std::vector<uint8_t>& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::vector<uint8_t>& b;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > b.size()) raise(Errc::CorruptQuantFile, "truncated quantized file");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(b[pos] | (b[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  }
};

void put_record_header(std::vector<uint8_t>& out, const std::string& name, uint8_t kind,
                       const Tensor* shape_of, double s, int32_t z) {
  put_u16(out, static_cast<uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(kind);
  if (shape_of) {
    out.push_back(static_cast<uint8_t>(shape_of->rank()));
    for (int64_t i = 0; i < shape_of->rank(); ++i)
      put_u32(out, static_cast<uint32_t>(shape_of->extent(i)));
  } else {
    out.push_back(0);
  }
  put_f64(out, s);
  put_u32(out, static_cast<uint32_t>(z));
}

}  // namespace

std::vector<uint8_t> export_int8(const QatModel& qat) {
  if (!qat.weight_params().empty() && qat.model().params().empty())
    raise(Errc::InvalidSpec, "empty model");
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 8);
  put_u16(out, kVersion);
  const std::string spec = canonical_dump(qat.model().spec().to_json());
  put_u32(out, static_cast<uint32_t>(spec.size()));
  out.insert(out.end(), spec.begin(), spec.end());

  const auto& model = qat.model();
  std::map<std::string, QuantParams> wq;
  for (const auto& [name, p] : qat.weight_params()) wq[name] = p;

  put_u64(out, model.params().size() + model.buffers().size() +
                   qat.observers().size());
  for (const auto& p : model.params()) {
    auto it = wq.find(p.name);
    if (it != wq.end()) {
      put_record_header(out, p.name, 0, &p.t, it->second.s, it->second.z);
      for (int64_t i = 0; i < p.t.numel(); ++i)
        out.push_back(static_cast<uint8_t>(
            static_cast<int8_t>(quantize(p.t.data()[i], it->second))));
    } else {
      put_record_header(out, p.name, 1, &p.t, 1.0, 0);
      for (int64_t i = 0; i < p.t.numel(); ++i) put_f32(out, static_cast<float>(p.t.data()[i]));
    }
  }
  for (const auto& b : model.buffers()) {
    put_record_header(out, b.name, 1, &b.t, 1.0, 0);
    for (int64_t i = 0; i < b.t.numel(); ++i) put_f32(out, static_cast<float>(b.t.data()[i]));
  }
  for (const auto& [name, obs] : qat.observers()) {
    QuantParams p = asymmetric_params(obs.running_min, obs.running_max);
    put_record_header(out, name, 2, nullptr, p.s, p.z);
  }
  return out;
}

double quantized_eval(const std::vector<uint8_t>& bytes, const Dataset& data, int threads) {
  Reader r{bytes};
  if (r.str(8) != std::string(kMagic, 8)) raise(Errc::CorruptQuantFile, "bad magic");
  if (r.u16() != kVersion) raise(Errc::CorruptQuantFile, "unsupported version");
  const uint32_t spec_len = r.u32();
  json spec_j = json::parse(r.str(spec_len), nullptr, false);
  if (spec_j.is_discarded()) raise(Errc::CorruptQuantFile, "bad spec blob");

  QatModel qat;
  qat.deployed_ = Model::build(ModelSpec::from_json(spec_j), 0);
  Model& model = qat.deployed_;

  const uint64_t count = r.u64();
  for (uint64_t rec = 0; rec < count; ++rec) {
    const uint16_t name_len = r.u16();
    const std::string name = r.str(name_len);
    r.need(2);
    const uint8_t kind = bytes[r.pos++];
    const uint8_t rank = bytes[r.pos++];
    std::vector<int64_t> extents(rank);
    for (uint8_t i = 0; i < rank; ++i) extents[i] = static_cast<int64_t>(r.u32());
    const double s = r.f64();
    const int32_t z = r.i32();

    if (kind == 2) {
      QuantParams p;
      p.symmetric = false;
      p.qmin = 0;
      p.qmax = 255;
      p.s = s;
      p.z = z;
      p.alpha = s * static_cast<double>(z);
      p.beta = s * (static_cast<double>(z) + 255.0);
      qat.act_params_[name] = p;
      continue;
    }

    Tensor* dst = nullptr;
    for (auto& p : model.params())
      if (p.name == name) dst = &p.t;
    if (!dst)
      for (auto& b : model.buffers())
        if (b.name == name) dst = &b.t;
    if (!dst) raise(Errc::CorruptQuantFile, "unexpected tensor " + name);
    if (static_cast<int64_t>(rank) != dst->rank())
      raise(Errc::CorruptQuantFile, "rank mismatch for " + name);
    for (uint8_t i = 0; i < rank; ++i)
      if (extents[i] != dst->extent(i)) raise(Errc::CorruptQuantFile, "extent mismatch for " + name);

    if (kind == 0) {
      QuantParams p;
      p.s = s;
      p.z = z;
      r.need(static_cast<size_t>(dst->numel()));
      for (int64_t i = 0; i < dst->numel(); ++i)
        dst->data()[i] = dequantize(static_cast<int8_t>(bytes[r.pos++]), p);
    } else if (kind == 1) {
      for (int64_t i = 0; i < dst->numel(); ++i) dst->data()[i] = static_cast<double>(r.f32());
    } else {
      raise(Errc::CorruptQuantFile, "unknown record kind");
    }
  }
  if (r.pos != bytes.size()) raise(Errc::CorruptQuantFile, "trailing bytes");

  qat.frozen_ = true;
  return qat.deployed_accuracy(data, threads);
}

}  // namespace hesskit
