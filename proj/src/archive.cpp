#include "cwflow/archive.hpp"

#include <cstring>
#include <fstream>

namespace cwflow {

namespace {

constexpr char kMagic[4] = {'C', 'W', 'F', 'A'};

void put_u32(std::vector<char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

size_t aligned8(size_t off) { return (off + 7u) & ~static_cast<size_t>(7); }

}  // namespace

void ArchiveWriter::add(const std::string& name, const Tensor& t) {
  Pending p;
  p.entry = {name, "f32", t.shape()};
  p.bytes.resize(static_cast<size_t>(t.size()) * sizeof(float));
  std::memcpy(p.bytes.data(), t.data(), p.bytes.size());
  pending_.push_back(std::move(p));
}

void ArchiveWriter::add_json(const std::string& name, const nlohmann::json& j) {
  Pending p;
  std::string s = j.dump();
  p.entry = {name, "json", {static_cast<int>(s.size())}};
  p.bytes.assign(s.begin(), s.end());
  pending_.push_back(std::move(p));
}

void ArchiveWriter::write(const std::string& path) const {
  nlohmann::json header;
  header["entries"] = nlohmann::json::array();
  for (const auto& p : pending_) {
    header["entries"].push_back(
        {{"name", p.entry.name}, {"dtype", p.entry.dtype}, {"shape", p.entry.shape}});
  }
  std::string hs = header.dump();

  std::vector<char> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kArchiveVersion);
  put_u32(out, static_cast<uint32_t>(hs.size()));
  out.insert(out.end(), hs.begin(), hs.end());
  for (const auto& p : pending_) {
    out.resize(aligned8(out.size()), 0);
    out.insert(out.end(), p.bytes.begin(), p.bytes.end());
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("write failed: " + path);
}

Archive Archive::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open archive: " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw DataError("bad archive magic in " + path);
  }
  uint32_t version = get_u32(buf.data() + 4);
  if (version != kArchiveVersion) {
    throw DataError("unsupported archive version " + std::to_string(version) + " in " + path +
                    " (expected " + std::to_string(kArchiveVersion) + ")");
  }
  uint32_t hlen = get_u32(buf.data() + 8);
  if (12u + hlen > buf.size()) throw DataError("truncated archive header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(std::string(buf.data() + 12, buf.data() + 12 + hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad archive header JSON in " + path + ": " + e.what());
  }

  Archive a;
  size_t off = 12u + hlen;
  for (const auto& je : header.at("entries")) {
    ArchiveEntry e;
    e.name = je.at("name").get<std::string>();
    e.dtype = je.at("dtype").get<std::string>();
    e.shape = je.at("shape").get<Shape>();
    off = aligned8(off);

    size_t nbytes;
    if (e.dtype == "f32") {
      nbytes = static_cast<size_t>(shape_numel(e.shape)) * sizeof(float);
    } else if (e.dtype == "json") {
      nbytes = static_cast<size_t>(shape_numel(e.shape));
    } else {
      throw DataError("unknown dtype '" + e.dtype + "' in " + path);
    }
    if (off + nbytes > buf.size()) throw DataError("truncated payload for '" + e.name + "' in " + path);

    if (e.dtype == "f32") {
      std::vector<float> data(static_cast<size_t>(shape_numel(e.shape)));
      std::memcpy(data.data(), buf.data() + off, nbytes);
      a.tensors_.emplace_back(e.shape, std::move(data));
      a.json_blobs_.emplace_back();
    } else {
      a.tensors_.emplace_back();
      a.json_blobs_.emplace_back(buf.data() + off, buf.data() + off + nbytes);
    }
    a.index_[e.name] = a.entries_.size();
    a.entries_.push_back(std::move(e));
    off += nbytes;
  }
  return a;
}

const Tensor& Archive::tensor(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw DataError("archive entry not found: " + name);
  if (entries_[it->second].dtype != "f32") throw DataError("entry is not a tensor: " + name);
  return tensors_[it->second];
}

nlohmann::json Archive::json_entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw DataError("archive entry not found: " + name);
  if (entries_[it->second].dtype != "json") throw DataError("entry is not JSON: " + name);
  try {
    return nlohmann::json::parse(json_blobs_[it->second]);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad JSON in entry '" + name + "': " + e.what());
  }
}

std::vector<std::string> Archive::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
  }
  return out;
}

}  // namespace cwflow
