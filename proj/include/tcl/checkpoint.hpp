#pragma once

// Checkpoint container.
//
// Little-endian layout:
//   magic "TCLK" | u32 version
//   u32 meta count, then per entry: u32 key length, key, u32 value length, value
//   u32 blob count, then per blob: u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//                                  u64 rows, u64 cols, rows*cols values
// Meta entries carry the config echo, step counter, seeds and queue ring
// state; blobs carry named parameter and optimizer tensors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tcl/matrix.hpp"

namespace tcl::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct Blob {
  std::string name;
  DType dtype = DType::f64;
  Matrix value;
};

struct Container {
  std::map<std::string, std::string> meta;
  std::vector<Blob> blobs;

  void put(std::string name, const Matrix& m, DType dtype = DType::f64);
  const Blob* find(const std::string& name) const;
  const Blob& at(const std::string& name) const;  // throws ContractViolation when missing
  const std::string& meta_at(const std::string& key) const;
};

std::vector<std::uint8_t> serialize(const Container& c);
Container deserialize(const std::vector<std::uint8_t>& bytes);

void save(const std::filesystem::path& path, const Container& c);
Container load(const std::filesystem::path& path);

}  // namespace tcl::checkpoint
