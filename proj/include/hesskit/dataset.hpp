#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hesskit/tensor.hpp"

namespace hesskit {

// In-memory supervised dataset with a fixed train/test split. Samples are
// row-major, labels are class indices.
struct Dataset {
  std::vector<int64_t> sample_shape;  // [d] or [C,H,W]
  int64_t num_classes = 0;
  std::vector<double> train_x;
  std::vector<int> train_y;
  std::vector<double> test_x;
  std::vector<int> test_y;

  int64_t sample_numel() const { return shape_numel(sample_shape); }
  int64_t train_size() const { return static_cast<int64_t>(train_y.size()); }
  int64_t test_size() const { return static_cast<int64_t>(test_y.size()); }

  // Gathers samples by train-split index into a batch tensor [B, ...].
  Tensor gather_train(const std::vector<int64_t>& idx) const;
  Tensor gather_test(int64_t begin, int64_t count) const;
  std::vector<int> labels_train(const std::vector<int64_t>& idx) const;
};

struct DatasetSpec {
  std::string kind;  // synthetic-blobs | synthetic-rings | synthetic-images |
                     // idx-images | cifar10-binary
  int64_t size = 2000;
  int64_t classes = 2;
  uint64_t seed = 0;
  double test_fraction = 0.25;
  double noise = 0.15;
  // file-backed kinds
  std::string images_path, labels_path;            // idx train pair
  std::string test_images_path, test_labels_path;  // idx test pair (optional)
  std::vector<std::string> files;                  // cifar10 binary batches
};

Dataset load_dataset(const DatasetSpec& spec);

// Synthetic generators, also used directly by tests.
Dataset make_blobs(int64_t n, int64_t classes, uint64_t seed, double test_fraction, double noise);
Dataset make_rings(int64_t n, int64_t classes, uint64_t seed, double test_fraction, double noise);
// Grayscale quadrant-bump images, the desk-scale image classification task.
Dataset make_images(int64_t n, int64_t classes, uint64_t seed, double test_fraction, double noise);

// IDX (big-endian) readers and writers; pixels are uint8.
void write_idx_images(const std::string& path, const std::vector<uint8_t>& pixels, int64_t n,
                      int64_t rows, int64_t cols);
void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels);

}  // namespace hesskit
