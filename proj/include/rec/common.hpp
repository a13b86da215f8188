#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rec {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent seed for a named substream. Chaining splitmix64
// keeps every derived stream reproducible across platforms.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t s = splitmix64(seed ^ 0x5bf03635d3c1a7c9ull);
  s = splitmix64(s ^ splitmix64(a));
  s = splitmix64(s ^ splitmix64(b));
  s = splitmix64(s ^ splitmix64(c));
  return s;
}

// xoshiro256** with hand-rolled distributions. std:: distributions are not
// specified bit-for-bit across standard libraries; these are.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  double next_double();  // uniform [0,1)
  float next_float();    // uniform [0,1)
  uint64_t below(uint64_t n);  // uniform [0,n), rejection sampled
  double normal(double mu, double sigma);
  double log_normal(double log_mu, double log_sigma);
  // Index draw proportional to non-negative weights; weights must sum > 0.
  size_t categorical(const std::vector<double>& weights);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = static_cast<size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64(const std::string& s);
uint64_t fnv1a64_file(const std::string& path);

std::string trim(const std::string& s);
std::vector<std::string> split(const std::string& s, char sep);

std::string read_file(const std::string& path);
// Writes through a temp file in the same directory, then renames.
void atomic_write_file(const std::string& path, const std::string& contents);

std::string format_double(double v);  // canonical shortest round-trip text

}  // namespace rec
