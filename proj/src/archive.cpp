#include "clover/archive.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace clover {

using nlohmann::json;

std::string to_string(ArchiveErrorKind kind) {
  switch (kind) {
    case ArchiveErrorKind::io: return "io";
    case ArchiveErrorKind::version: return "version";
    case ArchiveErrorKind::truncated: return "truncated";
    case ArchiveErrorKind::overlap: return "overlap";
    case ArchiveErrorKind::non_finite: return "non_finite";
    case ArchiveErrorKind::malformed: return "malformed";
    case ArchiveErrorKind::duplicate: return "duplicate";
    case ArchiveErrorKind::invalid_name: return "invalid_name";
  }
  return "unknown";
}

bool TensorArchive::contains(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& e) { return e.first == name; });
}

const Tensor& TensorArchive::get(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ArchiveError(ArchiveErrorKind::malformed, "archive has no tensor '" + std::string(name) + "'");
}

namespace {

constexpr std::size_t align_up(std::size_t n) { return (n + kArchiveAlign - 1) / kArchiveAlign * kArchiveAlign; }

void put_u64(std::string& out, std::size_t pos, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[pos + i] = static_cast<char>((v >> (8 * i)) & 0xFF);
}

std::uint64_t get_u64(std::string_view in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, std::size_t pos, double d) { put_u64(out, pos, std::bit_cast<std::uint64_t>(d)); }
double get_f64(std::string_view in, std::size_t pos) { return std::bit_cast<double>(get_u64(in, pos)); }

[[noreturn]] void fail(ArchiveErrorKind kind, const std::string& msg) { throw ArchiveError(kind, msg); }

// JSON parse that rejects repeated keys in the top-level object.
json parse_header(std::string_view text) {
  std::set<std::string> seen;
  std::string duplicate;
  auto cb = [&](int depth, json::parse_event_t event, json& parsed) {
    if (depth == 1 && event == json::parse_event_t::key) {
      const std::string key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };
  json header;
  try {
    header = json::parse(text.begin(), text.end(), cb);
  } catch (const json::exception& e) {
    fail(ArchiveErrorKind::malformed, std::string("archive header is not valid JSON: ") + e.what());
  }
  if (!duplicate.empty()) fail(ArchiveErrorKind::duplicate, "archive header repeats tensor '" + duplicate + "'");
  if (!header.is_object()) fail(ArchiveErrorKind::malformed, "archive header is not a JSON object");
  return header;
}

struct Entry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t length = 0;
};

Entry parse_entry(const std::string& name, const json& j) {
  auto bad = [&](const std::string& why) { fail(ArchiveErrorKind::malformed, "tensor '" + name + "': " + why); };
  if (!j.is_object()) bad("entry is not an object");
  for (const char* key : {"dtype", "shape", "offset", "length"})
    if (!j.contains(key)) bad(std::string("missing '") + key + "'");
  if (j.size() != 4) bad("unexpected fields");
  if (j["dtype"] != "f64") bad("dtype must be \"f64\"");
  const json& shape = j["shape"];
  if (!shape.is_array() || shape.empty()) bad("shape must be a non-empty array");
  Entry e;
  e.name = name;
  std::size_t numel = 1;
  for (const json& d : shape) {
    if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) bad("extents must be positive integers");
    const std::uint64_t extent = d.get<std::uint64_t>();
    if (numel > (std::uint64_t{1} << 40) / extent) bad("shape is too large");
    numel *= extent;
    e.shape.push_back(extent);
  }
  if (!j["offset"].is_number_unsigned() || !j["length"].is_number_unsigned()) bad("offset/length must be unsigned");
  e.offset = j["offset"].get<std::uint64_t>();
  e.length = j["length"].get<std::uint64_t>();
  if (e.length != 8 * numel) bad("length " + std::to_string(e.length) + " != 8 * " + std::to_string(numel));
  if (e.offset % kArchiveAlign != 0) bad("offset " + std::to_string(e.offset) + " is not 64-byte aligned");
  return e;
}

void check_name(const std::string& name) {
  if (name.empty()) fail(ArchiveErrorKind::invalid_name, "tensor names must be non-empty");
  if (name == "meta") fail(ArchiveErrorKind::invalid_name, "tensor name 'meta' is reserved");
}

}  // namespace

std::string encode_archive(const TensorArchive& archive) {
  std::vector<const std::pair<std::string, Tensor>*> order;
  std::set<std::string> names;
  for (const auto& entry : archive.tensors) {
    check_name(entry.first);
    if (!names.insert(entry.first).second) fail(ArchiveErrorKind::duplicate, "duplicate tensor name '" + entry.first + "'");
    if (entry.second.empty()) fail(ArchiveErrorKind::malformed, "tensor '" + entry.first + "' is empty");
    if (!entry.second.all_finite()) fail(ArchiveErrorKind::non_finite, "tensor '" + entry.first + "' has non-finite values");
    order.push_back(&entry);
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->first < b->first; });
  if (!archive.meta.is_object()) fail(ArchiveErrorKind::malformed, "archive meta must be a JSON object");

  json header = json::object();
  json meta = archive.meta;
  meta["format"] = kArchiveFormat;
  header["meta"] = std::move(meta);
  std::size_t cursor = 0;
  for (const auto* entry : order) {
    const std::size_t length = 8 * entry->second.size();
    header[entry->first] = {{"dtype", "f64"}, {"shape", entry->second.shape()}, {"offset", cursor}, {"length", length}};
    cursor = align_up(cursor + length);
  }
  const std::string text = header.dump();
  const std::size_t base = align_up(8 + text.size());
  std::size_t total = base;
  if (!order.empty()) {
    const auto& last = header[order.back()->first];
    total += last["offset"].get<std::size_t>() + last["length"].get<std::size_t>();
  } else {
    total = 8 + text.size();
  }

  std::string out(total, '\0');
  put_u64(out, 0, text.size());
  std::memcpy(out.data() + 8, text.data(), text.size());
  for (const auto* entry : order) {
    std::size_t pos = base + header[entry->first]["offset"].get<std::size_t>();
    for (double v : entry->second.values()) {
      put_f64(out, pos, v);
      pos += 8;
    }
  }
  return out;
}

TensorArchive decode_archive(std::string_view bytes) {
  if (bytes.size() < 8) fail(ArchiveErrorKind::truncated, "archive is shorter than its 8-byte header length");
  const std::uint64_t header_len = get_u64(bytes, 0);
  if (header_len > bytes.size() - 8) {
    fail(ArchiveErrorKind::truncated, "declared header length " + std::to_string(header_len) + " exceeds file size");
  }
  json header = parse_header(bytes.substr(8, header_len));

  if (!header.contains("meta") || !header["meta"].is_object()) fail(ArchiveErrorKind::version, "archive has no meta object");
  const json& meta = header["meta"];
  if (!meta.contains("format") || meta["format"] != kArchiveFormat) {
    const std::string found = meta.contains("format") ? meta["format"].dump() : "none";
    fail(ArchiveErrorKind::version, std::string("unsupported archive format ") + found + ", expected \"" + kArchiveFormat + "\"");
  }

  std::vector<Entry> entries;
  for (const auto& [name, value] : header.items()) {
    if (name == "meta") continue;
    check_name(name);
    entries.push_back(parse_entry(name, value));
  }

  const std::size_t base = align_up(8 + header_len);
  const std::size_t payload = bytes.size() > base ? bytes.size() - base : 0;
  std::vector<const Entry*> by_offset;
  for (const Entry& e : entries) {
    if (e.offset > payload || e.length > payload - e.offset) {
      fail(ArchiveErrorKind::truncated, "tensor '" + e.name + "' extends past the end of the file");
    }
    by_offset.push_back(&e);
  }
  std::sort(by_offset.begin(), by_offset.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
  for (std::size_t k = 1; k < by_offset.size(); ++k) {
    const Entry& prev = *by_offset[k - 1];
    if (prev.offset + prev.length > by_offset[k]->offset) {
      fail(ArchiveErrorKind::overlap, "tensors '" + prev.name + "' and '" + by_offset[k]->name + "' overlap");
    }
  }
  const std::size_t end = by_offset.empty() ? 8 + header_len : base + by_offset.back()->offset + by_offset.back()->length;
  if (bytes.size() != end) fail(ArchiveErrorKind::malformed, "archive has trailing bytes after the last tensor");

  TensorArchive out;
  out.meta = meta;
  for (const Entry& e : entries) {
    std::vector<double> data(e.length / 8);
    for (std::size_t k = 0; k < data.size(); ++k) {
      data[k] = get_f64(bytes, base + e.offset + 8 * k);
      if (!std::isfinite(data[k])) fail(ArchiveErrorKind::non_finite, "tensor '" + e.name + "' has non-finite values");
    }
    out.add(e.name, Tensor(e.shape, std::move(data)));
  }
  return out;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const std::string bytes = encode_archive(archive);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ArchiveErrorKind::io, "cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os.flush()) fail(ArchiveErrorKind::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ArchiveErrorKind::io, "cannot rename archive into " + path.string());
  }
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ArchiveErrorKind::io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  if (is.bad()) fail(ArchiveErrorKind::io, "read failed for " + path.string());
  try {
    return decode_archive(buf.str());
  } catch (const ArchiveError& e) {
    throw ArchiveError(e.kind(), path.string() + ": " + e.what());
  }
}

}  // namespace clover
