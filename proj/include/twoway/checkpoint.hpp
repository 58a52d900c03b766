#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "twoway/optimizer.hpp"
#include "twoway/tensor.hpp"

namespace twoway {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline void write_f32(std::ostream& os, const std::vector<float>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Container layout: magic "TWCK", version, config fingerprint, optimizer step
// counter, then per tensor its name, trainable flag, shape and the value and
// Adam moment data as 32-bit little-endian floats.
template <class T>
void save_checkpoint(const std::string& path, const ParameterSet<T>& ps,
                     std::uint64_t config_fingerprint) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write("TWCK", 4);
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, config_fingerprint);
  detail::write_pod(os, ps.steps());
  detail::write_pod(os, static_cast<std::uint32_t>(ps.size()));
  auto write_tensor_data = [&](const Tensor<T>& t) {
    std::vector<float> f(t.count());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(t.data[i]);
    detail::write_f32(os, f);
  };
  for (const auto& e : ps.entries()) {
    detail::write_pod(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_pod(os, static_cast<std::uint8_t>(e.trainable ? 1 : 0));
    detail::write_pod(os, static_cast<std::uint32_t>(e.value.shape.size()));
    for (int d : e.value.shape) detail::write_pod(os, static_cast<std::int32_t>(d));
    write_tensor_data(e.value);
    write_tensor_data(e.m);
    write_tensor_data(e.v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <class T>
struct LoadedCheckpoint {
  ParameterSet<T> params;
  std::uint64_t config_fingerprint = 0;
};

// Load a checkpoint. When expected_fingerprint is nonzero a mismatch with the
// stored value is an error, guarding against restoring into the wrong model.
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path,
                                    std::uint64_t expected_fingerprint = 0) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TWCK", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  LoadedCheckpoint<T> out;
  out.config_fingerprint = detail::read_pod<std::uint64_t>(is);
  if (expected_fingerprint != 0 && out.config_fingerprint != expected_fingerprint)
    throw std::runtime_error("checkpoint: config fingerprint mismatch in " + path);
  const auto steps = detail::read_pod<std::uint64_t>(is);
  const auto n = detail::read_pod<std::uint32_t>(is);
  auto read_tensor_data = [&](Tensor<T>& t) {
    std::vector<float> f(t.count());
    is.read(reinterpret_cast<char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    for (std::size_t i = 0; i < f.size(); ++i) t.data[i] = static_cast<T>(f[i]);
  };
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    const bool trainable = detail::read_pod<std::uint8_t>(is) != 0;
    const auto ndim = detail::read_pod<std::uint32_t>(is);
    std::vector<int> shape(ndim);
    for (auto& d : shape) {
      d = detail::read_pod<std::int32_t>(is);
      if (d <= 0) throw std::runtime_error("checkpoint: invalid tensor extent");
    }
    const int idx = out.params.add(name, Tensor<T>(shape), trainable);
    auto& e = out.params.entry(idx);
    read_tensor_data(e.value);
    read_tensor_data(e.m);
    read_tensor_data(e.v);
  }
  out.params.set_steps(steps);
  return out;
}

// Copy values, moments and the step counter from `src` into `dst`, which must
// have identical structure (same names, shapes, order, flags).
template <class T>
void restore_into(ParameterSet<T>& dst, const ParameterSet<T>& src) {
  if (dst.size() != src.size())
    throw std::runtime_error("checkpoint: parameter count mismatch on restore");
  for (int i = 0; i < dst.size(); ++i) {
    auto& d = dst.entry(i);
    const auto& s = src.entry(i);
    if (d.name != s.name || d.value.shape != s.value.shape || d.trainable != s.trainable)
      throw std::runtime_error("checkpoint: structure mismatch at " + d.name);
    d.value.data = s.value.data;
    d.m.data = s.m.data;
    d.v.data = s.v.data;
  }
  dst.set_steps(src.steps());
}

}  // namespace twoway
