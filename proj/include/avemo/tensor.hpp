#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include "avemo/error.hpp"
#include "avemo/hash.hpp"

namespace avemo {

/// Row-major dynamic matrix; rows are sequence positions, columns features.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

template <class To, class From>
Mat<To> cast(const Mat<From>& m) {
  return m.template cast<To>();
}

/// Order-sensitive digest of a set of matrices; equal iff bit-identical.
template <class T>
std::string checksum(const std::vector<const Mat<T>*>& mats) {
  Sha256 h;
  for (const auto* m : mats) {
    const std::int64_t r = m->rows(), c = m->cols();
    h.update_pod(r).update_pod(c);
    h.update(m->data(), sizeof(T) * static_cast<std::size_t>(m->size()));
  }
  return h.hex();
}

namespace detail {

inline std::filesystem::path temp_sibling(const std::filesystem::path& target) {
  static std::atomic<unsigned long> counter{0};
  auto name = target.filename().string() + ".tmp." + std::to_string(::getpid()) + "." +
              std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + "." +
              std::to_string(counter++);
  return target.parent_path() / name;
}

template <class T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorCode::kDecodeError, "truncated binary container");
  return v;
}

}  // namespace detail

/// Write `bytes` to `target` via a temporary file and rename(2), so readers
/// never see a partially written file and concurrent writers are safe.
inline void atomic_write(const std::filesystem::path& target, const std::string& bytes) {
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const auto tmp = detail::temp_sibling(target);
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorCode::kIoError, "cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) fail(ErrorCode::kIoError, "short write " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Feature cache container: magic, version, shape header, config hash, then
/// little-endian float32 payload. Rank is 2 or 4 (crop stacks: N,H,W,C).
struct ArrayFile {
  static constexpr char kMagic[8] = {'A', 'V', 'E', 'M', 'O', 'A', 'R', 'R'};
  static constexpr std::uint32_t kVersion = 1;

  std::vector<std::uint64_t> shape;
  std::string config_hash;  // 64 hex chars
  std::vector<float> data;

  std::string serialize() const {
    std::ostringstream os(std::ios::binary);
    os.write(kMagic, 8);
    detail::write_raw(os, kVersion);
    detail::write_raw(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) detail::write_raw(os, d);
    std::string h = config_hash;
    h.resize(64, '0');
    os.write(h.data(), 64);
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(float)));
    return os.str();
  }

  static ArrayFile parse(const std::string& bytes) {
    std::istringstream is(bytes, std::ios::binary);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) fail(ErrorCode::kDecodeError, "bad array magic");
    if (detail::read_raw<std::uint32_t>(is) != kVersion) fail(ErrorCode::kDecodeError, "bad array version");
    ArrayFile f;
    const auto rank = detail::read_raw<std::uint32_t>(is);
    if (rank == 0 || rank > 8) fail(ErrorCode::kDecodeError, "bad array rank");
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      f.shape.push_back(detail::read_raw<std::uint64_t>(is));
      n *= f.shape.back();
    }
    f.config_hash.resize(64);
    is.read(f.config_hash.data(), 64);
    f.data.resize(n);
    is.read(reinterpret_cast<char*>(f.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) fail(ErrorCode::kDecodeError, "truncated array payload");
    return f;
  }

  static ArrayFile from_matrix(const MatF& m, std::string config_hash) {
    ArrayFile f;
    f.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    f.config_hash = std::move(config_hash);
    f.data.assign(m.data(), m.data() + m.size());
    return f;
  }

  MatF to_matrix() const {
    if (shape.size() != 2) fail(ErrorCode::kShapeMismatch, "array is not rank 2");
    MatF m(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
    std::copy(data.begin(), data.end(), m.data());
    return m;
  }
};

/// Named tensor bundle used for checkpoint groups.
class TensorBundle {
 public:
  static constexpr char kMagic[8] = {'A', 'V', 'E', 'M', 'O', 'C', 'K', 'P'};
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, const MatF& m) { tensors_[name] = m; }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const MatF& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) fail(ErrorCode::kDecodeError, "missing tensor " + name);
    return it->second;
  }
  const std::map<std::string, MatF>& tensors() const { return tensors_; }

  std::string serialize() const {
    std::ostringstream os(std::ios::binary);
    os.write(kMagic, 8);
    detail::write_raw(os, kVersion);
    detail::write_raw(os, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& [name, m] : tensors_) {
      detail::write_raw(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_raw(os, static_cast<std::uint64_t>(m.rows()));
      detail::write_raw(os, static_cast<std::uint64_t>(m.cols()));
      os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    }
    return os.str();
  }

  static TensorBundle parse(const std::string& bytes) {
    std::istringstream is(bytes, std::ios::binary);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) fail(ErrorCode::kDecodeError, "bad bundle magic");
    if (detail::read_raw<std::uint32_t>(is) != kVersion) fail(ErrorCode::kDecodeError, "bad bundle version");
    TensorBundle b;
    const auto count = detail::read_raw<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = detail::read_raw<std::uint32_t>(is);
      std::string name(len, '\0');
      is.read(name.data(), len);
      const auto rows = detail::read_raw<std::uint64_t>(is);
      const auto cols = detail::read_raw<std::uint64_t>(is);
      MatF m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
      if (!is) fail(ErrorCode::kDecodeError, "truncated bundle tensor " + name);
      b.tensors_.emplace(std::move(name), std::move(m));
    }
    return b;
  }

 private:
  std::map<std::string, MatF> tensors_;
};

}  // namespace avemo
