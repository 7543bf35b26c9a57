#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hesskit/model.hpp"

namespace hesskit {

// Versioned binary layout: magic "EHAPCKPT", version u16, u32-length-prefixed
// canonical-JSON spec blob, tensor record count u64, then per tensor:
// name length u16 + UTF-8 name, dtype u8 (0 = FP32), rank u8, extents u32
// each, little-endian FP32 payload. Trainable parameters come first, then
// batch-norm running statistics.
std::vector<uint8_t> save_checkpoint(const Model& model);
Model load_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint_file(const Model& model, const std::string& path);
Model load_checkpoint_file(const std::string& path);

}  // namespace hesskit
