#pragma once

// Versioned little-endian container of named sections.
//
//   magic      4 bytes ("SAEP" for checkpoints, "SAEG" for ground truth)
//   version    u32 = 1
//   count      u32 number of sections
//   per section:
//     name_len u32, name bytes (UTF-8, 1..255 bytes)
//     dtype    u32 (1 = f32, 2 = f64, 3 = u64, 4 = utf8 text)
//     rows     u64
//     cols     u64
//     length   u64 payload bytes (rows * cols * element size; text: rows = 1, cols = bytes)
//     payload
//
// Readers validate every length against the remaining file size before
// allocating, and errors name the offending section.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sae/numerics.hpp"

namespace sae {

enum class SectionType : std::uint32_t { F32 = 1, F64 = 2, U64 = 3, Text = 4 };

struct TensorSection {
  std::string name;
  SectionType type = SectionType::F64;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<std::uint8_t> payload;
};

class TensorFile {
 public:
  static constexpr std::uint32_t kVersion = 1;

  explicit TensorFile(std::string_view magic);

  void put_matrix(std::string name, const Matrix& m);
  void put_u64s(std::string name, const std::vector<std::uint64_t>& values);
  void put_text(std::string name, std::string_view text);

  bool has(std::string_view name) const;
  Matrix get_matrix(std::string_view name) const;
  std::vector<std::uint64_t> get_u64s(std::string_view name) const;
  std::string get_text(std::string_view name) const;

  const std::vector<TensorSection>& sections() const { return sections_; }

  std::vector<std::uint8_t> encode() const;
  static TensorFile decode(std::string_view magic, const std::vector<std::uint8_t>& bytes);

  void write(const std::filesystem::path& path) const;
  static TensorFile read(std::string_view magic, const std::filesystem::path& path);

 private:
  const TensorSection& find(std::string_view name, SectionType type) const;

  std::array<char, 4> magic_{};
  std::vector<TensorSection> sections_;
};

// Little-endian primitives shared by the on-disk formats.
namespace le {
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
void put_f64(std::vector<std::uint8_t>& out, double v);
std::uint32_t get_u32(const std::uint8_t* p);
std::uint64_t get_u64(const std::uint8_t* p);
float get_f32(const std::uint8_t* p);
double get_f64(const std::uint8_t* p);
}  // namespace le

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace sae
