#pragma once

// Tensor archive, format "clover-v1":
//   [u64 LE header length L][L bytes compact JSON][zero padding][payload]
// The payload starts at the first 64-byte boundary after the header. Each
// tensor is a little-endian binary64 buffer whose `offset` (relative to the
// payload start) is a multiple of 64. JSON keys are sorted, so identical
// content always serializes to identical bytes.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "clover/tensor.hpp"

namespace clover {

inline constexpr const char* kArchiveFormat = "clover-v1";
inline constexpr std::size_t kArchiveAlign = 64;

enum class ArchiveErrorKind {
  io,            // open/read/write/rename failed
  version,       // missing or unknown format string
  truncated,     // file shorter than the header or a tensor extent
  overlap,       // two tensors share payload bytes
  non_finite,    // NaN or Inf in a tensor (on read or write)
  malformed,     // bad JSON, bad entry fields, misaligned offset, trailing bytes
  duplicate,     // repeated tensor name
  invalid_name,  // empty name or the reserved "meta"
};

std::string to_string(ArchiveErrorKind kind);

class ArchiveError : public std::runtime_error {
 public:
  ArchiveError(ArchiveErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ArchiveErrorKind kind() const { return kind_; }

 private:
  ArchiveErrorKind kind_;
};

struct TensorArchive {
  std::vector<std::pair<std::string, Tensor>> tensors;  // sorted by name after a read
  nlohmann::json meta = nlohmann::json::object();     // "format" is filled in on write

  void add(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;  // throws ArchiveError(malformed) if absent
};

std::string encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(std::string_view bytes);

// Atomic: writes `<path>.tmp` then renames over `path`.
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace clover
