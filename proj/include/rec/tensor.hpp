#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace rec {

// Dense row-major float32 tensor. Plain value type: copying copies the buffer.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<float> d);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float value);

  size_t numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // Rank-2 row access.
  float* row(int r) { return data.data() + static_cast<size_t>(r) * static_cast<size_t>(shape[1]); }
  const float* row(int r) const {
    return data.data() + static_cast<size_t>(r) * static_cast<size_t>(shape[1]);
  }

  float& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;

  bool all_finite() const;
  // NaN/Inf is an error state for public results; callers use this at
  // operation boundaries where poisoning is plausible.
  void require_finite(const char* where) const;

  void fill(float v);
};

size_t shape_numel(const std::vector<int>& shape);

// Boolean attention-permission matrix: at(i,j) says whether row i may attend
// to column j.
struct MaskMatrix {
  int n = 0;
  std::vector<uint8_t> allow;

  MaskMatrix() = default;
  explicit MaskMatrix(int size) : n(size), allow(static_cast<size_t>(size) * size, 0) {}

  uint8_t at(int i, int j) const { return allow[static_cast<size_t>(i) * n + j]; }
  void set(int i, int j, bool v) { allow[static_cast<size_t>(i) * n + j] = v ? 1 : 0; }
};

}  // namespace rec
