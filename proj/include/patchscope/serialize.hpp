#pragma once

// Flat binary tensor container ("PSCP1"). Layout, all integers little-endian:
//   magic "PSCP1"
//   u32 header_len, header bytes (key=value text; empty for bare containers)
//   u64 record count
//   per record: u32 name_len, name bytes, u32 rank, u64 dims[rank],
//               f64 payload (little-endian), row-major
// The payload is always 64-bit; f32 tensors widen exactly on save and narrow
// exactly on load, so round-trips are bit-exact at either run precision.

#include <cstdint>
#include <string>
#include <vector>

#include "patchscope/tensor.hpp"

namespace patchscope {

struct NamedArray {
  std::string name;
  std::vector<std::int64_t> dims;
  std::vector<double> values;
};

struct Container {
  std::string header;
  std::vector<NamedArray> tensors;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

template <typename T>
NamedArray to_named_array(const std::string& name, const Tensor<T>& t) {
  NamedArray a;
  a.name = name;
  a.dims = t.shape();
  a.values.assign(t.vec().begin(), t.vec().end());
  return a;
}

template <typename T>
Tensor<T> from_named_array(const NamedArray& a) {
  std::vector<T> data(a.values.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<T>(a.values[i]);
  }
  return Tensor<T>::from_vector(a.dims, std::move(data));
}

}  // namespace patchscope
