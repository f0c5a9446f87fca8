#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fusiondepth/rng.hpp"
#include "fusiondepth/tensor.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    fusiondepth::Rng rng(std::hash<std::string>{}(tag) ^ reinterpret_cast<std::uintptr_t>(this));
    do {
      path_ = base / ("fusiondepth_" + tag + "_" + std::to_string(rng.next() % 1000000007ULL));
    } while (std::filesystem::exists(path_));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f << bytes;
}

template <typename T = double>
fusiondepth::Tensor<T> random_tensor(fusiondepth::Rng& rng, fusiondepth::Shape shape, double lo = -1.0,
                                     double hi = 1.0) {
  std::vector<T> v(static_cast<std::size_t>(fusiondepth::shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return fusiondepth::Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <typename T>
std::vector<double> values(const fusiondepth::Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace testing
