#include "rec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "rec/common.hpp"

namespace rec {

namespace {
constexpr const char* kMagic = "reckpt 1";

void append_le32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

uint32_t read_le32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
}  // namespace

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::ostringstream header;
  header << kMagic << "\n";
  size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (name.find_first_of(" \t\n") != std::string::npos) {
      throw std::runtime_error("save_tensors: tensor name contains whitespace: " + name);
    }
    header << "tensor " << name << " " << t->rank();
    for (int d : t->shape) header << " " << d;
    header << " " << offset << "\n";
    offset += t->numel() * 4;
  }
  header << "data\n";

  std::string blob = header.str();
  blob.reserve(blob.size() + offset);
  for (const auto& [name, t] : tensors) {
    (void)name;
    for (float f : t->data) append_le32(blob, std::bit_cast<uint32_t>(f));
  }
  atomic_write_file(path, blob);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path) {
  const std::string blob = read_file(path);
  std::istringstream in(blob);
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw std::runtime_error("load_tensors: bad magic/version in " + path);
  }
  struct Entry {
    std::string name;
    std::vector<int> shape;
    size_t offset;
  };
  std::vector<Entry> entries;
  while (std::getline(in, line)) {
    if (line == "data") break;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != "tensor") throw std::runtime_error("load_tensors: unexpected header line: " + line);
    Entry e;
    int rank = 0;
    ls >> e.name >> rank;
    if (!ls || rank < 0 || rank > 8) throw std::runtime_error("load_tensors: bad rank");
    e.shape.resize(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) ls >> e.shape[static_cast<size_t>(i)];
    ls >> e.offset;
    if (!ls) throw std::runtime_error("load_tensors: malformed header line: " + line);
    entries.push_back(std::move(e));
  }
  if (line != "data") throw std::runtime_error("load_tensors: missing data section");
  const size_t data_start = static_cast<size_t>(in.tellg());

  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(entries.size());
  for (const Entry& e : entries) {
    const size_t n = shape_numel(e.shape);
    const size_t begin = data_start + e.offset;
    if (begin + n * 4 > blob.size()) {
      throw std::runtime_error("load_tensors: truncated data for " + e.name);
    }
    Tensor t = Tensor::zeros(e.shape);
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data() + begin);
    for (size_t i = 0; i < n; ++i) {
      t.data[i] = std::bit_cast<float>(read_le32(p + i * 4));
    }
    out.emplace_back(e.name, std::move(t));
  }
  return out;
}

}  // namespace rec
