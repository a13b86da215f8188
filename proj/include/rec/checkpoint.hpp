#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rec/tensor.hpp"

namespace rec {

// Checkpoint container: plain-text header listing name/shape/byte-offset per
// tensor, followed by raw little-endian float32 buffers. Round trips are
// bit-exact.
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path);

}  // namespace rec
