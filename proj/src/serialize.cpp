#include "patchscope/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace patchscope {

namespace {

constexpr char kMagic[5] = {'P', 'S', 'C', 'P', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) {
      throw IoError("truncated container: " + path);
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i]))
           << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i]))
           << (8 * i);
    }
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void write_container(const std::string& path, const Container& c) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, static_cast<std::uint32_t>(c.header.size()));
  out += c.header;
  put_u64(out, c.tensors.size());
  for (const auto& t : c.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    std::uint64_t n = 1;
    for (auto d : t.dims) {
      put_u64(out, static_cast<std::uint64_t>(d));
      n *= static_cast<std::uint64_t>(d);
    }
    if (n != t.values.size()) {
      throw ConfigError("container record '" + t.name +
                        "' dims do not match value count");
    }
    for (double v : t.values) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write container: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path);
}

Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open container: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  Reader r{buf, 0, path};
  const std::string magic = r.bytes(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a PSCP1 container: " + path);
  }
  Container c;
  c.header = r.bytes(r.u32());
  const std::uint64_t count = r.u64();
  c.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64();
      a.dims.push_back(static_cast<std::int64_t>(dim));
      n *= dim;
    }
    a.values.resize(n);
    for (auto& v : a.values) v = r.f64();
    c.tensors.push_back(std::move(a));
  }
  return c;
}

}  // namespace patchscope
