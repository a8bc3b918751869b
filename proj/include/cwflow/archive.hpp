#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cwflow/tensor.hpp"

namespace cwflow {

// Binary tensor archive shared by datasets, checkpoints and volume outputs.
//
// Layout (little-endian):
//   bytes 0..3   magic "CWFA"
//   bytes 4..7   format version (u32, currently 1)
//   bytes 8..11  header length in bytes (u32)
//   header       UTF-8 JSON: {"entries":[{"name","dtype","shape"},...]}
//   payloads     raw entry data in header order, each 8-byte aligned
//
// dtype is "f32" for tensors (payload = shape product * 4 bytes) and "json"
// for embedded JSON blocks (shape = [byte length]).
inline constexpr uint32_t kArchiveVersion = 1;

struct ArchiveEntry {
  std::string name;
  std::string dtype;
  Shape shape;
};

class ArchiveWriter {
 public:
  void add(const std::string& name, const Tensor& t);
  void add_json(const std::string& name, const nlohmann::json& j);
  void write(const std::string& path) const;

 private:
  struct Pending {
    ArchiveEntry entry;
    std::vector<char> bytes;
  };
  std::vector<Pending> pending_;
};

class Archive {
 public:
  static Archive load(const std::string& path);

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& tensor(const std::string& name) const;
  nlohmann::json json_entry(const std::string& name) const;
  const std::vector<ArchiveEntry>& entries() const { return entries_; }
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;

 private:
  std::vector<ArchiveEntry> entries_;
  std::map<std::string, size_t> index_;
  std::vector<Tensor> tensors_;            // parallel to entries_ (empty for json)
  std::vector<std::string> json_blobs_;    // parallel to entries_ (empty for f32)
};

}  // namespace cwflow
