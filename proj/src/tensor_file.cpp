#include "sae/tensor_file.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "sae/errors.hpp"

namespace sae {

namespace le {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int b = 3; b >= 0; --b) v = (v << 8) | p[b];
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int b = 7; b >= 0; --b) v = (v << 8) | p[b];
  return v;
}

float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }
double get_f64(const std::uint8_t* p) { return std::bit_cast<double>(get_u64(p)); }

}  // namespace le

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw FormatError(FormatErrorKind::Io, "cannot read " + path.string());
  }
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::Io, "write failed for " + path.string());
}

namespace {

std::size_t element_size(SectionType type) {
  switch (type) {
    case SectionType::F32: return 4;
    case SectionType::F64: return 8;
    case SectionType::U64: return 8;
    case SectionType::Text: return 1;
  }
  return 0;
}

const char* type_name(SectionType type) {
  switch (type) {
    case SectionType::F32: return "f32";
    case SectionType::F64: return "f64";
    case SectionType::U64: return "u64";
    case SectionType::Text: return "text";
  }
  return "?";
}

class Cursor {
 public:
  Cursor(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  const std::uint8_t* take(std::size_t n, const std::string& context) {
    if (n > remaining()) {
      throw FormatError(FormatErrorKind::Truncated,
                        context + ": expected " + std::to_string(n) + " bytes, " +
                            std::to_string(remaining()) + " available");
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::array<char, 4> to_magic(std::string_view magic) {
  if (magic.size() != 4) throw ConfigError("tensor file magic must be 4 bytes");
  std::array<char, 4> out{};
  std::copy(magic.begin(), magic.end(), out.begin());
  return out;
}

}  // namespace

TensorFile::TensorFile(std::string_view magic) : magic_(to_magic(magic)) {}

void TensorFile::put_matrix(std::string name, const Matrix& m) {
  TensorSection s{std::move(name), SectionType::F64, m.rows(), m.cols(), {}};
  s.payload.reserve(m.size() * 8);
  for (double v : m.values()) le::put_f64(s.payload, v);
  sections_.push_back(std::move(s));
}

void TensorFile::put_u64s(std::string name, const std::vector<std::uint64_t>& values) {
  TensorSection s{std::move(name), SectionType::U64, 1, values.size(), {}};
  for (auto v : values) le::put_u64(s.payload, v);
  sections_.push_back(std::move(s));
}

void TensorFile::put_text(std::string name, std::string_view text) {
  TensorSection s{std::move(name), SectionType::Text, 1, text.size(), {}};
  s.payload.assign(text.begin(), text.end());
  sections_.push_back(std::move(s));
}

bool TensorFile::has(std::string_view name) const {
  return std::any_of(sections_.begin(), sections_.end(),
                     [&](const TensorSection& s) { return s.name == name; });
}

const TensorSection& TensorFile::find(std::string_view name, SectionType type) const {
  for (const auto& s : sections_) {
    if (s.name != name) continue;
    if (s.type != type) {
      throw FormatError(FormatErrorKind::BadSection,
                        "section '" + s.name + "' has dtype " + type_name(s.type) + ", expected " +
                            type_name(type));
    }
    return s;
  }
  throw FormatError(FormatErrorKind::BadSection, "missing section '" + std::string(name) + "'");
}

Matrix TensorFile::get_matrix(std::string_view name) const {
  const auto& s = find(name, SectionType::F64);
  Matrix m(s.rows, s.cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = le::get_f64(s.payload.data() + 8 * i);
  return m;
}

std::vector<std::uint64_t> TensorFile::get_u64s(std::string_view name) const {
  const auto& s = find(name, SectionType::U64);
  std::vector<std::uint64_t> out(s.rows * s.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = le::get_u64(s.payload.data() + 8 * i);
  return out;
}

std::string TensorFile::get_text(std::string_view name) const {
  const auto& s = find(name, SectionType::Text);
  return {s.payload.begin(), s.payload.end()};
}

std::vector<std::uint8_t> TensorFile::encode() const {
  std::vector<std::uint8_t> out(magic_.begin(), magic_.end());
  le::put_u32(out, kVersion);
  le::put_u32(out, static_cast<std::uint32_t>(sections_.size()));
  for (const auto& s : sections_) {
    le::put_u32(out, static_cast<std::uint32_t>(s.name.size()));
    out.insert(out.end(), s.name.begin(), s.name.end());
    le::put_u32(out, static_cast<std::uint32_t>(s.type));
    le::put_u64(out, s.rows);
    le::put_u64(out, s.cols);
    le::put_u64(out, s.payload.size());
    out.insert(out.end(), s.payload.begin(), s.payload.end());
  }
  return out;
}

TensorFile TensorFile::decode(std::string_view magic, const std::vector<std::uint8_t>& bytes) {
  TensorFile file(magic);
  Cursor cur(bytes);
  const std::uint8_t* head = cur.take(4, "header");
  if (!std::equal(file.magic_.begin(), file.magic_.end(), head)) {
    throw FormatError(FormatErrorKind::BadMagic,
                      "expected '" + std::string(magic) + "', found '" +
                          std::string(reinterpret_cast<const char*>(head), 4) + "'");
  }
  const std::uint32_t version = le::get_u32(cur.take(4, "header"));
  if (version != kVersion) {
    throw FormatError(FormatErrorKind::BadVersion, "version " + std::to_string(version) +
                                                       " (supported: " + std::to_string(kVersion) + ")");
  }
  const std::uint32_t count = le::get_u32(cur.take(4, "header"));
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string where = "section #" + std::to_string(k);
    const std::uint32_t name_len = le::get_u32(cur.take(4, where));
    if (name_len == 0 || name_len > 255) {
      throw FormatError(FormatErrorKind::BadSection,
                        where + ": name length " + std::to_string(name_len) + " out of range");
    }
    const std::uint8_t* name_bytes = cur.take(name_len, where + " name");
    TensorSection s;
    s.name.assign(reinterpret_cast<const char*>(name_bytes), name_len);
    const std::string label = "section '" + s.name + "'";
    const std::uint32_t dtype = le::get_u32(cur.take(4, label));
    if (dtype < 1 || dtype > 4) {
      throw FormatError(FormatErrorKind::BadDtype, label + ": dtype tag " + std::to_string(dtype));
    }
    s.type = static_cast<SectionType>(dtype);
    s.rows = le::get_u64(cur.take(8, label));
    s.cols = le::get_u64(cur.take(8, label));
    const std::uint64_t length = le::get_u64(cur.take(8, label));
    const std::size_t elem = element_size(s.type);
    const bool overflow = s.cols != 0 && s.rows > UINT64_MAX / s.cols / elem;
    if (overflow || s.rows * s.cols * elem != length) {
      throw FormatError(FormatErrorKind::BadSection,
                        label + ": corrupted section length " + std::to_string(length) +
                            " for " + std::to_string(s.rows) + "x" + std::to_string(s.cols) + " " +
                            type_name(s.type));
    }
    if (length > cur.remaining()) {
      throw FormatError(FormatErrorKind::Truncated,
                        label + ": expected " + std::to_string(length) + " payload bytes, " +
                            std::to_string(cur.remaining()) + " available");
    }
    const std::uint8_t* payload = cur.take(static_cast<std::size_t>(length), label);
    s.payload.assign(payload, payload + length);
    file.sections_.push_back(std::move(s));
  }
  if (cur.remaining() != 0) {
    throw FormatError(FormatErrorKind::DimMismatch,
                      std::to_string(cur.remaining()) + " trailing bytes after last section");
  }
  return file;
}

void TensorFile::write(const std::filesystem::path& path) const { write_file_bytes(path, encode()); }

TensorFile TensorFile::read(std::string_view magic, const std::filesystem::path& path) {
  return decode(magic, read_file_bytes(path));
}

}  // namespace sae
