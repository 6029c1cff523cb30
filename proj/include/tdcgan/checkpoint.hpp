#pragma once

// Checkpoint container: a single little-endian binary file.
//
//   magic "TDCG" | version u32 | config digest u64 | step u64
//   | strings section (counted key/value pairs: RNG states, counters)
//   | tensor table (name, dtype, shape, byte offset into the data block)
//   | data block
//
// Writes go to "<path>.tmp" and are renamed into place, so a crash never
// leaves a half-written file under the final name.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tdcgan/models.hpp"
#include "tdcgan/tensor.hpp"

namespace tdcgan {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

template <typename V>
void put(std::string& buf, V v) {
  static_assert(std::is_trivially_copyable_v<V>);
  char tmp[sizeof(V)];
  std::memcpy(tmp, &v, sizeof(V));
  buf.append(tmp, sizeof(V));  // host order; little-endian targets assumed
}

inline void put_str(std::string& buf, const std::string& s) {
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
  buf.append(s);
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  template <typename V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::string get_str() {
    auto n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw DataError("checkpoint '" + path_ + "' is truncated (needed " +
                      std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ")");
  }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
struct Checkpoint {
  std::uint64_t config_digest = 0;
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, std::string>> strings;
  ParamList<T> tensors;

  const std::string* find_string(const std::string& key) const {
    for (const auto& [k, v] : strings)
      if (k == key) return &v;
    return nullptr;
  }

  const Tensor<T>* find_tensor(const std::string& name) const {
    for (const auto& p : tensors)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }
};

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  const std::uint8_t dtype = std::is_same_v<T, float> ? 0 : 1;
  std::string head;
  head.append("TDCG");
  detail::put<std::uint32_t>(head, kCheckpointVersion);
  detail::put<std::uint64_t>(head, ck.config_digest);
  detail::put<std::uint64_t>(head, ck.step);
  detail::put<std::uint32_t>(head, static_cast<std::uint32_t>(ck.strings.size()));
  for (const auto& [k, v] : ck.strings) {
    detail::put_str(head, k);
    detail::put_str(head, v);
  }
  detail::put<std::uint32_t>(head, static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& p : ck.tensors) {
    detail::put_str(head, p.name);
    detail::put<std::uint8_t>(head, dtype);
    const auto& shape = p.tensor.shape();
    detail::put<std::uint32_t>(head, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) detail::put<std::int64_t>(head, d);
    detail::put<std::uint64_t>(head, offset);
    offset += static_cast<std::uint64_t>(p.tensor.numel()) * sizeof(T);
  }
  detail::put<std::uint64_t>(head, offset);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp + "' for writing");
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& p : ck.tensors) {
      auto vals = p.tensor.values();
      out.write(reinterpret_cast<const char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * sizeof(T)));
    }
    if (!out) throw DataError("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataError("cannot move '" + tmp + "' into place at '" + path + "'");
}

// expect_digest, when given, must match the stored digest exactly.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path,
                              std::optional<std::uint64_t> expect_digest = {}) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    bytes = ss.str();
  }
  detail::Reader r(bytes, path);
  r.need(4);
  if (bytes.compare(0, 4, "TDCG") != 0)
    throw DataError("'" + path + "' is not a checkpoint file (bad magic)");
  (void)r.get<std::uint32_t>();  // advance past the magic
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError("checkpoint '" + path + "' has format version " +
                    std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  Checkpoint<T> ck;
  ck.config_digest = r.get<std::uint64_t>();
  if (expect_digest && *expect_digest != ck.config_digest)
    throw DataError("checkpoint '" + path +
                    "' was written under a different configuration (digest mismatch)");
  ck.step = r.get<std::uint64_t>();
  const auto n_strings = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_strings; ++i) {
    auto k = r.get_str();
    auto v = r.get_str();
    ck.strings.emplace_back(std::move(k), std::move(v));
  }
  struct Row {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  const std::uint8_t want_dtype = std::is_same_v<T, float> ? 0 : 1;
  std::vector<Row> rows;
  const auto n_tensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    Row row;
    row.name = r.get_str();
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != want_dtype)
      throw DataError("checkpoint tensor '" + row.name + "' in '" + path +
                      "' has dtype tag " + std::to_string(dtype) +
                      ", expected " + std::to_string(want_dtype));
    const auto ndims = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < ndims; ++d) row.shape.push_back(r.get<std::int64_t>());
    row.offset = r.get<std::uint64_t>();
    rows.push_back(std::move(row));
  }
  const auto data_size = r.get<std::uint64_t>();
  r.need(data_size);
  const std::size_t data_start = r.pos();
  for (auto& row : rows) {
    const std::uint64_t count = static_cast<std::uint64_t>(numel_of(row.shape));
    if (row.offset + count * sizeof(T) > data_size)
      throw DataError("checkpoint '" + path + "' is truncated (tensor '" + row.name +
                      "' overruns the data block)");
    std::vector<T> vals(count);
    std::memcpy(vals.data(), bytes.data() + data_start + row.offset, count * sizeof(T));
    ck.tensors.push_back({row.name, Tensor<T>::from(row.shape, std::move(vals))});
  }
  return ck;
}

// Copy checkpointed values into live tensors by name; every destination must
// be present with a matching shape.
template <typename T>
void restore_tensors(const Checkpoint<T>& ck, ParamList<T>& dst,
                     const std::string& prefix) {
  for (auto& p : dst) {
    const Tensor<T>* src = ck.find_tensor(prefix + p.name);
    if (!src)
      throw DataError("checkpoint is missing tensor '" + prefix + p.name + "'");
    if (src->shape() != p.tensor.shape())
      throw DataError("checkpoint tensor '" + prefix + p.name + "' has shape " +
                      shape_str(src->shape()) + ", model wants " +
                      shape_str(p.tensor.shape()));
    auto d = p.tensor.values();
    auto s = src->values();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

}  // namespace tdcgan
