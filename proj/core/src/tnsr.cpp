#include "tmt/tnsr.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace tmt {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr int kMaxRank = 8;
constexpr int64_t kMaxElements = 1'000'000'000;

void put_u32(std::ostream& out, uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4))
    throw FormatError(msg("truncated input while reading ", what));
  return static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
         (static_cast<uint32_t>(bytes[2]) << 16) | (static_cast<uint32_t>(bytes[3]) << 24);
}

void expect_eof(std::istream& in, const std::string& path) {
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError(msg("trailing bytes after the end of ", path));
}

}  // namespace

void write_tnsr(std::ostream& out, const Tensor& t) {
  out.write(kMagic, 4);
  put_u32(out, static_cast<uint32_t>(t.rank()));
  for (int e : t.shape()) put_u32(out, static_cast<uint32_t>(e));
  for (double v : t.data()) put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
}

Tensor read_tnsr(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad tensor magic, expected TNSR");
  const uint32_t rank = get_u32(in, "rank");
  if (rank > kMaxRank) throw FormatError(msg("tensor rank ", rank, " exceeds limit ", kMaxRank));
  Shape shape;
  int64_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const uint32_t e = get_u32(in, "extent");
    count *= static_cast<int64_t>(e);
    if (count > kMaxElements)
      throw FormatError(msg("tensor extents overflow the element limit ", kMaxElements));
    shape.push_back(static_cast<int>(e));
  }
  std::vector<double> values(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i)
    values[static_cast<size_t>(i)] =
        static_cast<double>(std::bit_cast<float>(get_u32(in, "payload")));
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(msg("cannot write tensor file ", path));
  write_tnsr(out, t);
  if (!out) throw FormatError(msg("write failed on tensor file ", path));
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(msg("cannot open tensor file ", path));
  Tensor t = read_tnsr(in);
  expect_eof(in, path);
  return t;
}

Tensor load_features(const std::string& path) {
  Tensor t = load_tensor_file(path);
  if (t.rank() != 2)
    throw FormatError(msg("feature file ", path, " has rank ", t.rank(), ", expected 2"));
  if (t.extent(0) < 1) throw FormatError(msg("feature file ", path, " has zero rows"));
  return t;
}

Tensor quantize_f32(const Tensor& t) {
  Tensor out = t.detached();
  for (double& v : out.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

void checkpoint_save(const std::string& path, const ParamStore& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(msg("cannot write checkpoint ", path));
  uint32_t count = 0;
  for (const std::string& name : store.names()) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tnsr(out, store.raw(name));
    ++count;
  }
  put_u32(out, count);
  if (!out) throw CheckpointError(msg("write failed on checkpoint ", path));
}

void checkpoint_load(const std::string& path, ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(msg("cannot open checkpoint ", path));
  in.seekg(0, std::ios::end);
  const std::streamoff size = in.tellg();
  in.seekg(0, std::ios::beg);
  if (size < 4) throw CheckpointError(msg("checkpoint ", path, " is too short"));

  std::map<std::string, Tensor> loaded;
  uint32_t records = 0;
  try {
    while (in.tellg() < size - 4) {
      const uint32_t name_len = get_u32(in, "name length");
      if (name_len == 0 || name_len > 4096)
        throw FormatError(msg("implausible name length ", name_len));
      std::string name(name_len, '\0');
      if (!in.read(name.data(), name_len)) throw FormatError("truncated parameter name");
      Tensor t = read_tnsr(in);
      if (!loaded.emplace(std::move(name), std::move(t)).second)
        throw FormatError("duplicate parameter name");
      ++records;
    }
    const uint32_t declared = get_u32(in, "record count");
    if (declared != records)
      throw FormatError(msg("record count ", declared, " but ", records, " records present"));
    expect_eof(in, path);
  } catch (const FormatError& e) {
    throw CheckpointError(msg("checkpoint ", path, ": ", e.what()));
  }

  std::string missing, unexpected, mismatched;
  for (const std::string& name : store.names()) {
    auto it = loaded.find(name);
    if (it == loaded.end()) {
      missing += " " + name;
    } else if (it->second.shape() != store.raw(name).shape()) {
      mismatched += " " + name + "(file " + shape_str(it->second.shape()) + ", model " +
                    shape_str(store.raw(name).shape()) + ")";
    }
  }
  for (const auto& [name, t] : loaded)
    if (!store.has(name)) unexpected += " " + name;
  if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
    std::string detail;
    if (!missing.empty()) detail += " missing:" + missing;
    if (!unexpected.empty()) detail += " unexpected:" + unexpected;
    if (!mismatched.empty()) detail += " shape:" + mismatched;
    throw CheckpointError(msg("checkpoint ", path, " does not match the model;", detail));
  }
  for (auto& [name, t] : loaded) store.raw(name) = std::move(t);
}

}  // namespace tmt
