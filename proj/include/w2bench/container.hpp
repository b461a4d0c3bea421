#pragma once

// Binary container shared by pair files and solver artifacts.
//
//   8 bytes   magic (6-byte tag + 2-digit version, e.g. "W2PAIR01")
//   u64       header length L
//   L bytes   UTF-8 JSON header
//   u32       CRC-32 of the header bytes
//   ...       f64 sections, row-major, in the order listed in the header
//
// All integers and floats are little-endian. The header gains a "sections"
// list ({name, rows, cols, crc32}), "payload_bytes" and "payload_crc32".

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "w2bench/icnn.hpp"

namespace w2bench {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedMatrix {
  std::string name;
  ad::Matrix data;
};

struct Container {
  nlohmann::json header;
  std::map<std::string, ad::Matrix> sections;

  /// Throws FormatError naming the section when absent.
  const ad::Matrix& section(const std::string& name) const;
};

std::uint32_t crc32_of(const void* data, std::size_t size);

std::vector<std::uint8_t> pack_container(const char (&magic)[9], nlohmann::json header,
                                         const std::vector<NamedMatrix>& sections);
/// Throws FormatError on a wrong tag, version mismatch, checksum failure or
/// truncation.
Container unpack_container(const char (&magic)[9], const std::vector<std::uint8_t>& bytes);

/// ICNN spec as a header object ({prefix, dim, widths, rank, beta,
/// constrained}) and its parameters as sections named section_prefix + name.
nlohmann::json icnn_header(const IcnnPotential& psi);
void append_icnn_sections(std::vector<NamedMatrix>& sections, const std::string& section_prefix,
                          const IcnnPotential& psi);
IcnnPotential read_icnn(const Container& c, const nlohmann::json& entry, const std::string& section_prefix);

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

}  // namespace w2bench
