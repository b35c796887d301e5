#pragma once

// Binary container shared by model checkpoints ("SPYR") and loss-network
// weight files ("SPLN"):
//
//   magic[4] | u32 version | u32 text_len | text (key = value lines)
//   then until EOF, per tensor:
//   u16 name_len | name | u8 rank | u32 dims[rank] | f32 payload (little-endian)

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spyr/arch.hpp"
#include "spyr/error.hpp"
#include "spyr/tensor.hpp"

namespace spyr {

inline constexpr std::uint32_t kRecordVersion = 1;

struct RecordFile {
  std::map<std::string, std::string> text;
  std::map<std::string, Tensor<float>> tensors;
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  bool at_end() const { return pos_ == b_.size(); }

  void need(std::size_t n, const char* what) const {
    require(b_.size() - pos_ >= n, "truncated", std::string("file truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint8_t>(b_[pos_]) | (static_cast<std::uint8_t>(b_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string format_kv(const std::map<std::string, std::string>& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config", "line " + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::string encode_records(const std::string& magic, const RecordFile& rf) {
  require(magic.size() == 4, "format", "magic must be four bytes");
  std::string out = magic;
  detail::put_u32(out, kRecordVersion);
  const std::string text = format_kv(rf.text);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [name, t] : rf.tensors) {
    require(name.size() <= 0xffff, "format", "tensor name too long");
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline RecordFile decode_records(const std::string& magic, const std::string& bytes) {
  require(bytes.size() >= 4 && bytes.compare(0, 4, magic) == 0, "bad_magic",
          "not a " + magic + " file (magic bytes do not match)");
  detail::Reader r(bytes);
  r.bytes(4, "magic");
  const std::uint32_t version = r.u32("version");
  require(version == kRecordVersion, "version_mismatch",
          "unsupported version " + std::to_string(version) + " (expected " + std::to_string(kRecordVersion) + ")");
  RecordFile rf;
  const std::uint32_t text_len = r.u32("text length");
  rf.text = parse_kv(r.bytes(text_len, "text block"));
  while (!r.at_end()) {
    const std::uint16_t name_len = r.u16("tensor name length");
    std::string name = r.bytes(name_len, "tensor name");
    const std::uint8_t rank = r.u8("tensor rank");
    require(rank <= 4, "format", "tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint8_t i = 0; i < rank; ++i) shape.push_back(r.u32("tensor dims"));
    const std::size_t n = shape_size(shape);
    r.need(n * 4, "tensor payload");
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(r.u32("tensor payload"));
    require(!rf.tensors.contains(name), "format", "duplicate tensor '" + name + "'");
    rf.tensors.emplace(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  return rf;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "io", "cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "io", "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), "io", "write to '" + path + "' failed");
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace spyr
