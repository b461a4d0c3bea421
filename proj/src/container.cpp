#include "w2bench/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace w2bench {

using nlohmann::json;
using ad::Index;
using ad::Matrix;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return v;
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("truncated file");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const std::uint8_t* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() { return get_u64(take(8)); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

const Matrix& Container::section(const std::string& name) const {
  auto it = sections.find(name);
  if (it == sections.end()) throw FormatError("missing section: " + name);
  return it->second;
}

std::vector<std::uint8_t> pack_container(const char (&magic)[9], json header,
                                         const std::vector<NamedMatrix>& sections) {
  std::vector<std::uint8_t> payload;
  json list = json::array();
  for (const NamedMatrix& s : sections) {
    const std::size_t start = payload.size();
    for (Index i = 0; i < s.data.rows(); ++i)
      for (Index j = 0; j < s.data.cols(); ++j) put_u64(payload, std::bit_cast<std::uint64_t>(s.data(i, j)));
    list.push_back({{"name", s.name},
                    {"rows", s.data.rows()},
                    {"cols", s.data.cols()},
                    {"crc32", crc32_of(payload.data() + start, payload.size() - start)}});
  }
  header["sections"] = std::move(list);
  header["payload_bytes"] = payload.size();
  header["payload_crc32"] = crc32_of(payload.data(), payload.size());
  const std::string text = header.dump(1);

  std::vector<std::uint8_t> out(magic, magic + 8);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  put_u32(out, crc32_of(text.data(), text.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Container unpack_container(const char (&magic)[9], const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  const std::uint8_t* tag = in.take(8);
  if (std::memcmp(tag, magic, 6) != 0) throw FormatError("unrecognized file type");
  if (std::memcmp(tag + 6, magic + 6, 2) != 0) {
    throw FormatError("version mismatch: file is " + std::string(reinterpret_cast<const char*>(tag), 8) +
                      ", expected " + std::string(magic, 8));
  }
  const std::uint64_t header_len = in.u64();
  if (header_len > in.remaining()) throw FormatError("truncated file");
  const std::uint8_t* header_bytes = in.take(static_cast<std::size_t>(header_len));
  if (crc32_of(header_bytes, header_len) != in.u32()) throw FormatError("header checksum mismatch");

  Container c;
  try {
    c.header = json::parse(header_bytes, header_bytes + header_len);
    const auto payload_bytes = c.header.at("payload_bytes").get<std::size_t>();
    if (in.remaining() < payload_bytes) throw FormatError("truncated file");
    if (in.remaining() > payload_bytes) throw FormatError("trailing bytes after payload");
    const std::uint8_t* payload = in.take(payload_bytes);
    if (crc32_of(payload, payload_bytes) != c.header.at("payload_crc32").get<std::uint32_t>())
      throw FormatError("payload checksum mismatch");

    std::size_t offset = 0;
    for (const json& s : c.header.at("sections")) {
      const auto name = s.at("name").get<std::string>();
      const auto rows = s.at("rows").get<Index>();
      const auto cols = s.at("cols").get<Index>();
      if (rows < 0 || cols < 0) throw FormatError("negative shape in section " + name);
      const std::size_t len = static_cast<std::size_t>(rows * cols) * 8;
      if (payload_bytes - offset < len) throw FormatError("section overruns payload: " + name);
      if (crc32_of(payload + offset, len) != s.at("crc32").get<std::uint32_t>())
        throw FormatError("section checksum mismatch: " + name);
      Matrix m(rows, cols);
      const std::uint8_t* p = payload + offset;
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j, p += 8) m(i, j) = std::bit_cast<double>(get_u64(p));
      c.sections[name] = std::move(m);
      offset += len;
    }
    if (offset != payload_bytes) throw FormatError("payload size does not match sections");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  return c;
}

json icnn_header(const IcnnPotential& psi) {
  const IcnnSpec& s = psi.spec();
  return {{"prefix", psi.prefix()}, {"dim", s.dim},   {"widths", s.widths},
          {"rank", s.rank},         {"beta", s.beta}, {"constrained", s.constrained}};
}

void append_icnn_sections(std::vector<NamedMatrix>& sections, const std::string& section_prefix,
                          const IcnnPotential& psi) {
  for (const auto& [name, value] : psi.params()) sections.push_back({section_prefix + name, value});
}

IcnnPotential read_icnn(const Container& c, const json& entry, const std::string& section_prefix) {
  try {
    IcnnSpec spec;
    spec.dim = entry.at("dim").get<Index>();
    spec.widths = entry.at("widths").get<std::vector<Index>>();
    spec.rank = entry.at("rank").get<Index>();
    spec.beta = entry.at("beta").get<double>();
    spec.constrained = entry.at("constrained").get<bool>();
    if (spec.dim < 1 || spec.rank < 1 || spec.widths.empty()) throw FormatError("invalid network spec");
    IcnnPotential psi(spec, entry.at("prefix").get<std::string>());
    for (auto& [name, value] : psi.params()) {
      const Matrix& stored = c.section(section_prefix + name);
      if (stored.rows() != value.rows() || stored.cols() != value.cols())
        throw FormatError("shape mismatch in section " + section_prefix + name);
      value = stored;
    }
    return psi;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed network entry: ") + e.what());
  }
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace w2bench
