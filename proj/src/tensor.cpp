#include "rec/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace rec {

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::runtime_error("tensor: negative extent");
    n *= static_cast<size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size()) {
    throw std::runtime_error("tensor: shape does not match buffer length");
  }
}

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  t.data.assign(shape_numel(shape), 0.0f);
  t.shape = std::move(shape);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t;
  t.data.assign(shape_numel(shape), value);
  t.shape = std::move(shape);
  return t;
}

size_t Tensor::numel() const { return data.size(); }

std::string Tensor::shape_str() const {
  std::ostringstream ss;
  ss << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) ss << "x";
    ss << shape[i];
  }
  ss << "]";
  return ss.str();
}

bool Tensor::all_finite() const {
  for (float v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::require_finite(const char* where) const {
  if (!all_finite()) {
    throw std::runtime_error(std::string(where) + ": non-finite value in tensor " + shape_str());
  }
}

void Tensor::fill(float v) {
  for (float& x : data) x = v;
}

}  // namespace rec
