#include "dadet/common.hpp"

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace dadet {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ConfigFile parse_flat_config(const std::string& text) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string raw, section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    ": empty section name");
      cfg.sections[section];
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": empty key");
    cfg.sections[section].emplace_back(key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

void append_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void append_u16le(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void append_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f32le(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  append_u32le(out, bits);
}

void append_f32_span(std::string& out, const float* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) append_f32le(out, data[i]);
}

void ByteReader::require(std::size_t n) const {
  if (pos + n > buf.size()) throw std::runtime_error("truncated buffer");
}

std::uint8_t ByteReader::read_u8() {
  require(1);
  return static_cast<std::uint8_t>(buf[pos++]);
}

std::uint16_t ByteReader::read_u16le() {
  require(2);
  std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) |
                    (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos + 1])) << 8);
  pos += 2;
  return v;
}

std::uint32_t ByteReader::read_u32le() {
  require(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

float ByteReader::read_f32le() {
  std::uint32_t bits = read_u32le();
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void ByteReader::read_f32_span(float* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) data[i] = read_f32le();
}

std::string ByteReader::read_bytes(std::size_t n) {
  require(n);
  std::string s = buf.substr(pos, n);
  pos += n;
  return s;
}

int job_threads() {
  const char* env = std::getenv("DA_DETECT_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1 || v > 256)
    throw std::runtime_error("DA_DETECT_THREADS must be an integer in [1,256]");
  return static_cast<int>(v);
}

}  // namespace dadet
