#pragma once

#include <string>

#include "model.hpp"

namespace memlab::lm {

// Checkpoint layout: 8-byte magic "MEMLABM1", u32 format version, u32 header
// length, header JSON (config + tensor manifest + optional adapter manifest),
// then raw little-endian f64 tensor data in manifest order (base tensors
// first, adapter tensors after). Loading validates shapes against the header.
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

}  // namespace memlab::lm
