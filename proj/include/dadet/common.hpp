#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace dadet {

inline constexpr const char* kToolVersion = "0.1.0";

// Deterministic 64-bit PRNG (splitmix64). All dataset generation and training
// randomness is derived from explicit instances of this generator so that a
// seed fully determines every output, independent of platform or library
// versions. Uniform floats are built from the top 24 bits of the state with
// integer arithmetic only.
struct SplitMix64 {
  std::uint64_t state = 0;

  SplitMix64() = default;
  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 24 bits of resolution, exact in float.
  float uniform() { return static_cast<float>(next() >> 40) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) { return static_cast<int>(next() % static_cast<std::uint64_t>(n)); }

  // Approximate standard normal as a sum of 12 uniforms. Avoids transcendental
  // functions so the stream stays bit-stable everywhere it is replayed.
  float normal() {
    float s = 0.0f;
    for (int i = 0; i < 12; ++i) s += uniform();
    return s - 6.0f;
  }

  // Independent child stream; deterministic in (state, tag).
  SplitMix64 fork(std::uint64_t tag) const {
    SplitMix64 mixer(state ^ (0x9E3779B97F4A7C15ull * (tag + 1)));
    return SplitMix64(mixer.next());
  }
};

// Derives a stream seed from a base seed and an index (sample index,
// training iteration, ...).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  SplitMix64 mixer(seed ^ (0x9E3779B97F4A7C15ull * (index + 1)));
  return mixer.next();
}

// In-place Fisher-Yates shuffle driven by the given stream.
template <typename T>
void shuffle(std::vector<T>& v, SplitMix64& rng) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
    int j = rng.uniform_int(i + 1);
    std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
  }
}

// 64-bit FNV-1a, used as the content digest for dataset and checkpoint
// payloads.
inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v);

// Reduction mode for losses that aggregate over elements.
enum class Reduction { kMean, kSum };

// Little-endian binary IO helpers shared by the dataset and checkpoint
// formats.
void append_u8(std::string& out, std::uint8_t v);
void append_u16le(std::string& out, std::uint16_t v);
void append_u32le(std::string& out, std::uint32_t v);
void append_f32le(std::string& out, float v);
void append_f32_span(std::string& out, const float* data, std::size_t n);

// Cursor-based reader over a byte buffer; throws on truncation.
struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  explicit ByteReader(const std::string& b) : buf(b) {}
  void require(std::size_t n) const;
  std::uint8_t read_u8();
  std::uint16_t read_u16le();
  std::uint32_t read_u32le();
  float read_f32le();
  void read_f32_span(float* data, std::size_t n);
  std::string read_bytes(std::size_t n);
  bool exhausted() const { return pos == buf.size(); }
};

// Environment-controlled cap on experiment job parallelism. Defaults to 1 so
// runs are deterministic unless the user opts in.
int job_threads();

// Flat key = value configuration text with [section] headers. Keys before the
// first header land in section "". Order within a section is preserved;
// comments start with # or ;.
struct ConfigFile {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
};

ConfigFile parse_flat_config(const std::string& text);

}  // namespace dadet
