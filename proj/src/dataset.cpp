#include "hesskit/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "hesskit/errors.hpp"
#include "hesskit/rng.hpp"

namespace hesskit {
namespace {

constexpr double kTau = 6.283185307179586476925286766559;

Tensor gather(const std::vector<double>& x, const std::vector<int64_t>& sample_shape,
              const std::vector<int64_t>& idx) {
  const int64_t d = shape_numel(sample_shape);
  std::vector<int64_t> shape;
  shape.push_back(static_cast<int64_t>(idx.size()));
  for (int64_t e : sample_shape) shape.push_back(e);
  Tensor out = Tensor::zeros(shape);
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.data() + static_cast<int64_t>(i) * d, x.data() + idx[i] * d,
                static_cast<size_t>(d) * sizeof(double));
  return out;
}

// Deterministic split: the tail of a seeded shuffle becomes the test set.
Dataset split(std::vector<double> xs, std::vector<int> ys, std::vector<int64_t> sample_shape,
              int64_t classes, double test_fraction, uint64_t seed) {
  Dataset d;
  d.sample_shape = std::move(sample_shape);
  d.num_classes = classes;
  const int64_t n = static_cast<int64_t>(ys.size());
  const int64_t dim = d.sample_numel();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(mix_seed(seed, 0xD5));
  shuffle_inplace(order, rng);
  int64_t n_test = static_cast<int64_t>(std::llround(test_fraction * static_cast<double>(n)));
  n_test = std::min(std::max<int64_t>(n_test, 0), n - 1);
  const int64_t n_train = n - n_test;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    auto& dst_x = i < n_train ? d.train_x : d.test_x;
    auto& dst_y = i < n_train ? d.train_y : d.test_y;
    dst_x.insert(dst_x.end(), xs.begin() + src * dim, xs.begin() + (src + 1) * dim);
    dst_y.push_back(ys[static_cast<size_t>(src)]);
  }
  return d;
}

uint32_t read_be32(std::istream& in, const std::string& path) {
  uint8_t b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    raise(Errc::CorruptDataset, "truncated header in " + path);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
  uint8_t b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

struct IdxPair {
  std::vector<double> x;
  std::vector<int> y;
  int64_t rows = 0, cols = 0;
};

IdxPair read_idx_pair(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) raise(Errc::CorruptDataset, "cannot open " + images_path);
  if (read_be32(fi, images_path) != 0x00000803u)
    raise(Errc::CorruptDataset, "bad IDX image magic in " + images_path);
  const int64_t n = read_be32(fi, images_path);
  const int64_t rows = read_be32(fi, images_path);
  const int64_t cols = read_be32(fi, images_path);
  std::vector<uint8_t> pix(static_cast<size_t>(n * rows * cols));
  if (!fi.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size())))
    raise(Errc::CorruptDataset, "truncated IDX pixel payload in " + images_path);

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) raise(Errc::CorruptDataset, "cannot open " + labels_path);
  if (read_be32(fl, labels_path) != 0x00000801u)
    raise(Errc::CorruptDataset, "bad IDX label magic in " + labels_path);
  const int64_t nl = read_be32(fl, labels_path);
  if (nl != n) raise(Errc::CorruptDataset, "IDX image/label count mismatch");
  std::vector<uint8_t> lab(static_cast<size_t>(n));
  if (!fl.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size())))
    raise(Errc::CorruptDataset, "truncated IDX label payload in " + labels_path);

  IdxPair out;
  out.rows = rows;
  out.cols = cols;
  out.x.resize(pix.size());
  for (size_t i = 0; i < pix.size(); ++i) out.x[i] = static_cast<double>(pix[i]) / 255.0;
  out.y.assign(lab.begin(), lab.end());
  return out;
}

}  // namespace

Tensor Dataset::gather_train(const std::vector<int64_t>& idx) const {
  return gather(train_x, sample_shape, idx);
}

Tensor Dataset::gather_test(int64_t begin, int64_t count) const {
  std::vector<int64_t> idx(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = begin + i;
  return gather(test_x, sample_shape, idx);
}

std::vector<int> Dataset::labels_train(const std::vector<int64_t>& idx) const {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = train_y[static_cast<size_t>(idx[i])];
  return out;
}

Dataset make_blobs(int64_t n, int64_t classes, uint64_t seed, double test_fraction, double noise) {
  Rng rng(mix_seed(seed, 0xB1));
  std::vector<double> xs;
  std::vector<int> ys;
  xs.reserve(static_cast<size_t>(2 * n));
  for (int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);
    const double a = kTau * static_cast<double>(c) / static_cast<double>(classes);
    xs.push_back(1.5 * std::cos(a) + noise * rng.normal());
    xs.push_back(1.5 * std::sin(a) + noise * rng.normal());
    ys.push_back(c);
  }
  return split(std::move(xs), std::move(ys), {2}, classes, test_fraction, seed);
}

Dataset make_rings(int64_t n, int64_t classes, uint64_t seed, double test_fraction, double noise) {
  Rng rng(mix_seed(seed, 0xB2));
  std::vector<double> xs;
  std::vector<int> ys;
  for (int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);
    const double r = 1.0 + static_cast<double>(c) + noise * rng.normal();
    const double a = kTau * rng.uniform();
    xs.push_back(r * std::cos(a));
    xs.push_back(r * std::sin(a));
    ys.push_back(c);
  }
  return split(std::move(xs), std::move(ys), {2}, classes, test_fraction, seed);
}

Dataset make_images(int64_t n, int64_t classes, uint64_t seed, double test_fraction,
                    double noise) {
  if (classes < 2 || classes > 4) raise(Errc::InvalidSpec, "image task supports 2..4 classes");
  const int64_t hw = 12;
  Rng rng(mix_seed(seed, 0xB3));
  std::vector<double> xs;
  std::vector<int> ys;
  xs.reserve(static_cast<size_t>(n * hw * hw));
  // class = quadrant holding a bright gaussian bump, plus pixel noise
  const double centers[4][2] = {{3.0, 3.0}, {3.0, 9.0}, {9.0, 3.0}, {9.0, 9.0}};
  for (int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);
    const double cy = centers[c][0] + 0.8 * rng.normal();
    const double cx = centers[c][1] + 0.8 * rng.normal();
    const double amp = 0.8 + 0.2 * rng.uniform();
    for (int64_t y = 0; y < hw; ++y)
      for (int64_t x = 0; x < hw; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        double v = amp * std::exp(-(dx * dx + dy * dy) / 8.0) + noise * rng.uniform();
        v = std::min(1.0, std::max(0.0, v));
        // snap to the u8 grid so the in-memory task matches file round trips
        xs.push_back(std::floor(v * 255.0 + 0.5) / 255.0);
      }
    ys.push_back(c);
  }
  return split(std::move(xs), std::move(ys), {1, hw, hw}, classes, test_fraction, seed);
}

void write_idx_images(const std::string& path, const std::vector<uint8_t>& pixels, int64_t n,
                      int64_t rows, int64_t cols) {
  if (static_cast<int64_t>(pixels.size()) != n * rows * cols)
    raise(Errc::CorruptDataset, "pixel count does not match dimensions");
  std::ofstream f(path, std::ios::binary);
  if (!f) raise(Errc::CorruptDataset, "cannot open for writing: " + path);
  write_be32(f, 0x00000803u);
  write_be32(f, static_cast<uint32_t>(n));
  write_be32(f, static_cast<uint32_t>(rows));
  write_be32(f, static_cast<uint32_t>(cols));
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) raise(Errc::CorruptDataset, "cannot open for writing: " + path);
  write_be32(f, 0x00000801u);
  write_be32(f, static_cast<uint32_t>(labels.size()));
  f.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

Dataset load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "synthetic-blobs")
    return make_blobs(spec.size, spec.classes, spec.seed, spec.test_fraction, spec.noise);
  if (spec.kind == "synthetic-rings")
    return make_rings(spec.size, spec.classes, spec.seed, spec.test_fraction, spec.noise);
  if (spec.kind == "synthetic-images")
    return make_images(spec.size, spec.classes, spec.seed, spec.test_fraction, spec.noise);

  if (spec.kind == "idx-images") {
    IdxPair train = read_idx_pair(spec.images_path, spec.labels_path);
    int64_t classes = 0;
    for (int y : train.y) classes = std::max<int64_t>(classes, y + 1);
    if (!spec.test_images_path.empty()) {
      IdxPair test = read_idx_pair(spec.test_images_path, spec.test_labels_path);
      if (test.rows != train.rows || test.cols != train.cols)
        raise(Errc::CorruptDataset, "train/test IDX image dimensions differ");
      for (int y : test.y) classes = std::max<int64_t>(classes, y + 1);
      Dataset d;
      d.sample_shape = {1, train.rows, train.cols};
      d.num_classes = classes;
      d.train_x = std::move(train.x);
      d.train_y = std::move(train.y);
      d.test_x = std::move(test.x);
      d.test_y = std::move(test.y);
      return d;
    }
    return split(std::move(train.x), std::move(train.y), {1, train.rows, train.cols}, classes,
                 spec.test_fraction, spec.seed);
  }

  if (spec.kind == "cifar10-binary") {
    // 1 label byte + 3072 pixel bytes per record
    std::vector<double> xs;
    std::vector<int> ys;
    for (const auto& path : spec.files) {
      std::ifstream f(path, std::ios::binary);
      if (!f) raise(Errc::CorruptDataset, "cannot open " + path);
      std::vector<uint8_t> rec(3073);
      while (f.read(reinterpret_cast<char*>(rec.data()), 3073)) {
        if (rec[0] > 9) raise(Errc::CorruptDataset, "label out of range in " + path);
        ys.push_back(rec[0]);
        for (size_t i = 1; i < rec.size(); ++i) xs.push_back(static_cast<double>(rec[i]) / 255.0);
      }
      if (f.gcount() != 0) raise(Errc::CorruptDataset, "trailing partial record in " + path);
    }
    if (ys.empty()) raise(Errc::CorruptDataset, "no records found");
    return split(std::move(xs), std::move(ys), {3, 32, 32}, 10, spec.test_fraction, spec.seed);
  }

  raise(Errc::UnsupportedFormat, "unknown dataset kind '" + spec.kind + "'");
}

}  // namespace hesskit
