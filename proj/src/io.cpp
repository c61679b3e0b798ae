#include "fhvae/io.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>

#include "fhvae/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary corpus/checkpoint formats are little-endian");

namespace fhvae::io {

namespace {

constexpr char kMagic[4] = {'F', 'H', 'V', 'Z'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("checkpoint truncated");
  return v;
}

}  // namespace

void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

void save_checkpoint(const net::ParamStore<float>& store, const std::filesystem::path& path) {
  std::string out;
  out.append(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& name = store.name(i);
    const Mat<float>& a = store[i];
    if (name.size() > 0xffff) throw IoError("parameter name too long: " + name);
    put(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    put(out, static_cast<std::uint8_t>(0));  // dtype float32
    put(out, static_cast<std::uint8_t>(2));  // ndim
    put(out, static_cast<std::uint32_t>(a.rows()));
    put(out, static_cast<std::uint32_t>(a.cols()));
    out.append(reinterpret_cast<const char*>(a.data()), a.size() * sizeof(float));
  }
  atomic_write_file(path, out);
}

std::vector<std::pair<std::string, Mat<float>>> read_checkpoint_arrays(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != std::string_view(kMagic, 4))
    throw IoError("not a checkpoint file: " + path.string());
  auto version = take<std::uint32_t>(in);
  if (version != kVersion) throw IoError("unsupported checkpoint version");
  auto count = take<std::uint32_t>(in);
  std::vector<std::pair<std::string, Mat<float>>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = take<std::uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    auto dtype = take<std::uint8_t>(in);
    if (dtype != 0) throw IoError("unsupported dtype tag in checkpoint");
    auto ndim = take<std::uint8_t>(in);
    std::uint64_t total = 1;
    std::vector<std::uint32_t> dims(ndim);
    for (auto& d : dims) {
      d = take<std::uint32_t>(in);
      total *= d;
    }
    if (ndim != 2) throw IoError("unsupported checkpoint array rank");
    Mat<float> a(dims[0], dims[1]);
    in.read(reinterpret_cast<char*>(a.data()),
            static_cast<std::streamsize>(total * sizeof(float)));
    if (!in) throw IoError("checkpoint truncated");
    out.emplace_back(std::move(name), std::move(a));
  }
  return out;
}

void load_checkpoint(const std::filesystem::path& path, net::ParamStore<float>& store) {
  auto arrays = read_checkpoint_arrays(path);
  if (arrays.size() != store.size())
    throw DataError("checkpoint has " + std::to_string(arrays.size()) + " arrays, expected " +
                    std::to_string(store.size()));
  for (auto& [name, a] : arrays) {
    int id = store.find(name);
    if (id < 0) throw DataError("checkpoint array not in model: " + name);
    Mat<float>& dst = store[static_cast<std::size_t>(id)];
    if (dst.rows() != a.rows() || dst.cols() != a.cols())
      throw DataError("checkpoint shape mismatch for " + name);
    dst = std::move(a);
  }
}

}  // namespace fhvae::io
