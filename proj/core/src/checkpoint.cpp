#include "fusiondepth/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "fusiondepth/error.hpp"

namespace fusiondepth {

namespace {

constexpr char kMagic[8] = {'F', 'D', 'C', 'K', 'P', 'T', '0', '1'};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::f32 : DType::f64;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot create " + path.string());
  }

  template <typename U>
  void scalar(U value) {
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    out_.write(reinterpret_cast<const char*>(bytes), sizeof(U));
  }

  void string(const std::string& s) {
    scalar(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void finish() {
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path.string());
  }

  void bytes(void* dst, std::size_t n) {
    if (!in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n))) {
      throw FormatError(path_.string() + ": truncated checkpoint");
    }
  }

  template <typename U>
  U scalar() {
    unsigned char raw[sizeof(U)];
    bytes(raw, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    U value;
    std::memcpy(&value, raw, sizeof(U));
    return value;
  }

  std::string string(std::uint32_t limit) {
    const auto n = scalar<std::uint32_t>();
    if (n > limit) throw FormatError(path_.string() + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::string& config_text, const StateList<T>& state) {
  Writer w(path);
  for (char c : kMagic) w.scalar(c);
  w.scalar(kCheckpointVersion);
  w.string(config_text);
  w.scalar(static_cast<std::uint32_t>(state.params.size() + state.buffers.size()));
  const auto put = [&](const NamedTensor<T>& nt, bool buffer) {
    w.string(nt.name);
    w.scalar(static_cast<std::uint8_t>(buffer ? 1 : 0));
    w.scalar(static_cast<std::uint8_t>(dtype_of<T>()));
    w.scalar(static_cast<std::uint32_t>(nt.tensor.ndim()));
    for (auto d : nt.tensor.shape()) w.scalar(static_cast<std::int64_t>(d));
    for (T v : nt.tensor.data()) w.scalar(v);
  };
  for (const auto& p : state.params) put(p, false);
  for (const auto& b : state.buffers) put(b, true);
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError(path.string() + ": not a checkpoint file");
  Checkpoint ck;
  ck.version = r.scalar<std::uint32_t>();
  if (ck.version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(ck.version));
  }
  ck.config_text = r.string(1u << 24);
  const auto count = r.scalar<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.string(4096);
    e.is_buffer = r.scalar<std::uint8_t>() != 0;
    const auto dtype = static_cast<DType>(r.scalar<std::uint8_t>());
    if (dtype != DType::f32 && dtype != DType::f64) throw FormatError(path.string() + ": unknown dtype in " + e.name);
    const auto ndim = r.scalar<std::uint32_t>();
    if (ndim == 0 || ndim > 8) throw FormatError(path.string() + ": bad rank for " + e.name);
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dim = r.scalar<std::int64_t>();
      if (dim < 1 || dim > (1LL << 31)) throw FormatError(path.string() + ": bad dimension for " + e.name);
      e.shape.push_back(dim);
      numel *= dim;
      if (numel > (1LL << 31)) throw FormatError(path.string() + ": tensor too large: " + e.name);
    }
    e.values.resize(static_cast<std::size_t>(numel));
    for (auto& v : e.values) v = dtype == DType::f32 ? r.scalar<float>() : r.scalar<double>();
    ck.entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after checkpoint payload");
  return ck;
}

template <typename T>
void apply_checkpoint(const Checkpoint& checkpoint, const StateList<T>& state) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : checkpoint.entries) by_name[e.name] = &e;
  const auto load = [&](const NamedTensor<T>& nt) {
    const auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw FormatError("checkpoint has no tensor named " + nt.name);
    const auto& e = *it->second;
    if (e.shape != nt.tensor.shape()) {
      throw FormatError("checkpoint tensor " + nt.name + " has shape " + shape_str(e.shape) + ", model expects " +
                        shape_str(nt.tensor.shape()));
    }
    Tensor<T> handle = nt.tensor;
    auto dst = handle.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
  };
  for (const auto& p : state.params) load(p);
  for (const auto& b : state.buffers) load(b);
}

template void save_checkpoint<float>(const std::filesystem::path&, const std::string&, const StateList<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const std::string&, const StateList<double>&);
template void apply_checkpoint<float>(const Checkpoint&, const StateList<float>&);
template void apply_checkpoint<double>(const Checkpoint&, const StateList<double>&);

}  // namespace fusiondepth
