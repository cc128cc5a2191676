#include "ctxprune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "ctxprune/errors.hpp"

namespace ctxprune {

static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");

namespace {

constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(path.string() + ": truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write("CTXP", 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CTXP", 4) != 0) throw FormatError(path.string() + ": not a checkpoint");
  const auto version = take<std::uint32_t>(in, path);
  if (version != kVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const auto count = take<std::uint32_t>(in, path);
  if (count != store.size()) {
    throw FormatError(path.string() + ": holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(store.size()));
  }
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = take<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(take<std::uint64_t>(in, path));
    if (!store.contains(name)) throw FormatError(path.string() + ": unknown parameter '" + name + "'");
    if (!seen.insert(name).second) throw FormatError(path.string() + ": parameter '" + name + "' repeated");
    Tensor t = store.get(name);
    if (t.shape() != shape) {
      throw FormatError(path.string() + ": '" + name + "' is " + shape_string(shape) + ", model expects " +
                        shape_string(t.shape()));
    }
    auto dst = t.mutable_data();
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!in) throw FormatError(path.string() + ": truncated checkpoint");
  }
}

}  // namespace ctxprune
