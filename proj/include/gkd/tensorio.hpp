// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "gkd/tensor.hpp"

namespace gkd {

// Tensor file layout, little-endian throughout:
//   bytes 0..3   magic "GKDT"
//   u32          rank
//   u32 * rank   dimensions
//   f32 * n      payload, row-major
// Values are stored as f32; doubles are truncated on write and widened on
// read, so a write/read round trip is exact only at f32 precision.

void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

}  // namespace gkd
