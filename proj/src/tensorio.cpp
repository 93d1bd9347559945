// SPDX-License-Identifier: Apache-2.0
#include "gkd/tensorio.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace gkd {

namespace {

constexpr char kMagic[4] = {'G', 'K', 'D', 'T'};
constexpr std::uint32_t kMaxRank = 8;

void write_u32(std::ofstream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& is, const std::string& path) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError("tensor file truncated: " + path);
  return v;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write(kMagic, 4);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i)
    write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  std::vector<float> buf(static_cast<std::size_t>(t.size()));
  for (Eigen::Index i = 0; i < t.size(); ++i)
    buf[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw IoError("write failed: " + path);
}

Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad tensor magic: " + path);
  const std::uint32_t rank = read_u32(is, path);
  if (rank > kMaxRank) throw IoError("implausible tensor rank: " + path);
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i)
    shape[i] = static_cast<int>(read_u32(is, path));
  Tensor t(shape);
  std::vector<float> buf(static_cast<std::size_t>(t.size()));
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!is) throw IoError("tensor payload truncated: " + path);
  char extra = 0;
  if (is.read(&extra, 1)) throw IoError("trailing bytes in tensor file: " + path);
  for (Eigen::Index i = 0; i < t.size(); ++i)
    t[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]);
  return t;
}

}  // namespace gkd
