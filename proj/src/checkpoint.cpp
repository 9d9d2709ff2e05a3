#include "mole/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mole {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'L', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated checkpoint: " + path.string());
  }
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  std::uint64_t count = 0;
  for ([[maybe_unused]] const auto& p : store) ++count;
  put<std::uint64_t>(out, count);
  for (const auto& [id, p] : store) {
    put<std::uint64_t>(out, id.size());
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    put<std::uint8_t>(out, p.frozen ? 1 : 0);
    put<std::uint64_t>(out, p.value.rank());
    for (std::size_t d : p.value.shape()) put<std::uint64_t>(out, d);
    const auto data = p.value.data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint not found: " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a MoLE checkpoint: " + path.string());
  }
  const auto version = take<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = take<std::uint64_t>(in, path);
  ParamStore store;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = take<std::uint64_t>(in, path);
    if (len > (1u << 16)) throw std::runtime_error("corrupt checkpoint id length");
    std::string id(len, '\0');
    if (!in.read(id.data(), static_cast<std::streamsize>(len))) {
      throw std::runtime_error("truncated checkpoint: " + path.string());
    }
    const bool frozen = take<std::uint8_t>(in, path) != 0;
    const auto rank = take<std::uint64_t>(in, path);
    if (rank > 3) throw std::runtime_error("corrupt checkpoint rank for " + id);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(in, path);
    std::vector<double> data(shape_numel(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw std::runtime_error("truncated checkpoint: " + path.string());
    }
    store.add(id, Tensor(std::move(shape), std::move(data)), frozen);
  }
  return store;
}

}  // namespace mole
