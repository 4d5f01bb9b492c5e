#include "tcl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "tcl/errors.hpp"

namespace tcl::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes(b) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
};

}  // namespace

void Container::put(std::string name, const Matrix& m, DType dtype) {
  blobs.push_back({std::move(name), dtype, m});
}

const Blob* Container::find(const std::string& name) const {
  for (const auto& b : blobs)
    if (b.name == name) return &b;
  return nullptr;
}

const Blob& Container::at(const std::string& name) const {
  const Blob* b = find(name);
  require(b != nullptr, "checkpoint: missing blob '" + name + "'");
  return *b;
}

const std::string& Container::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  require(it != meta.end(), "checkpoint: missing meta entry '" + key + "'");
  return it->second;
}

std::vector<std::uint8_t> serialize(const Container& c) {
  Writer w;
  w.out.insert(w.out.end(), {'T', 'C', 'L', 'K'});
  w.pod(kVersion);
  w.pod(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    w.str(k);
    w.str(v);
  }
  w.pod(static_cast<std::uint32_t>(c.blobs.size()));
  for (const auto& b : c.blobs) {
    w.str(b.name);
    w.pod(static_cast<std::uint8_t>(b.dtype));
    w.pod(static_cast<std::uint64_t>(b.value.rows()));
    w.pod(static_cast<std::uint64_t>(b.value.cols()));
    for (double v : b.value.storage()) {
      if (b.dtype == DType::f32)
        w.pod(static_cast<float>(v));
      else
        w.pod(v);
    }
  }
  return std::move(w.out);
}

Container deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), "TCLK", 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  r.pos = 4;
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Container c;
  const auto n_meta = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    c.meta[k] = r.str();
  }
  const auto n_blobs = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_blobs; ++i) {
    Blob b;
    b.name = r.str();
    const auto dtype = r.pod<std::uint8_t>();
    if (dtype > 1) throw std::runtime_error("checkpoint: unknown dtype in blob " + b.name);
    b.dtype = static_cast<DType>(dtype);
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    b.value = Matrix(rows, cols);
    for (double& v : b.value.storage())
      v = b.dtype == DType::f32 ? static_cast<double>(r.pod<float>()) : r.pod<double>();
    c.blobs.push_back(std::move(b));
  }
  if (r.pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return c;
}

void save(const std::filesystem::path& path, const Container& c) {
  const auto bytes = serialize(c);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Container load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint not found: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace tcl::checkpoint
