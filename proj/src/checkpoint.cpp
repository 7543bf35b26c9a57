#include "hesskit/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "hesskit/json_util.hpp"

namespace hesskit {
namespace {

constexpr char kMagic[8] = {'E', 'H', 'A', 'P', 'C', 'K', 'P', 'T'};
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

struct Reader {
  const std::vector<uint8_t>& b;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > b.size()) raise(Errc::CorruptCheckpoint, "truncated checkpoint");
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
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  }
};

void put_tensor(std::vector<uint8_t>& out, const std::string& name, const Tensor& t) {
  put_u16(out, static_cast<uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(0);  // dtype FP32
  out.push_back(static_cast<uint8_t>(t.rank()));
  for (int64_t i = 0; i < t.rank(); ++i) put_u32(out, static_cast<uint32_t>(t.extent(i)));
  for (int64_t i = 0; i < t.numel(); ++i) put_f32(out, static_cast<float>(t.data()[i]));
}

}  // namespace

std::vector<uint8_t> save_checkpoint(const Model& model) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 8);
  put_u16(out, kVersion);
  const std::string spec = canonical_dump(model.spec().to_json());
  put_u32(out, static_cast<uint32_t>(spec.size()));
  out.insert(out.end(), spec.begin(), spec.end());
  put_u64(out, model.params().size() + model.buffers().size());
  for (const auto& p : model.params()) put_tensor(out, p.name, p.t);
  for (const auto& b : model.buffers()) put_tensor(out, b.name, b.t);
  return out;
}

Model load_checkpoint(const std::vector<uint8_t>& bytes) {
  Reader r{bytes};
  if (r.str(8) != std::string(kMagic, 8)) raise(Errc::CorruptCheckpoint, "bad magic");
  if (r.u16() != kVersion) raise(Errc::CorruptCheckpoint, "unsupported version");
  const uint32_t spec_len = r.u32();
  json spec_j = json::parse(r.str(spec_len), nullptr, false);
  if (spec_j.is_discarded()) raise(Errc::CorruptCheckpoint, "bad spec blob");
  Model model = Model::build(ModelSpec::from_json(spec_j), 0);

  const uint64_t count = r.u64();
  if (count != model.params().size() + model.buffers().size())
    raise(Errc::CorruptCheckpoint, "tensor record count does not match spec");

  auto read_into = [&](const std::string& name, Tensor& t) {
    r.need(2);
    const uint8_t dtype = bytes[r.pos++];
    if (dtype != 0) raise(Errc::CorruptCheckpoint, "unsupported dtype for " + name);
    const uint8_t rank = bytes[r.pos++];
    if (rank != t.rank()) raise(Errc::CorruptCheckpoint, "rank mismatch for " + name);
    for (int64_t i = 0; i < t.rank(); ++i)
      if (static_cast<int64_t>(r.u32()) != t.extent(i))
        raise(Errc::CorruptCheckpoint, "extent mismatch for " + name);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<double>(r.f32());
  };

  for (uint64_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16();
    const std::string name = r.str(name_len);
    bool found = false;
    for (auto& p : model.params())
      if (p.name == name) {
        read_into(name, p.t);
        found = true;
        break;
      }
    if (!found)
      for (auto& b : model.buffers())
        if (b.name == name) {
          read_into(name, b.t);
          found = true;
          break;
        }
    if (!found) raise(Errc::CorruptCheckpoint, "unexpected tensor " + name);
  }
  if (r.pos != bytes.size()) raise(Errc::CorruptCheckpoint, "trailing bytes");
  return model;
}

void save_checkpoint_file(const Model& model, const std::string& path) {
  auto bytes = save_checkpoint(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) raise(Errc::MissingArtifact, "cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Model load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(Errc::MissingArtifact, "cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

}  // namespace hesskit
