#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fedhf {

using Rng = std::mt19937_64;

// 64-bit FNV-1a; used for stream names and config hashing.
constexpr std::uint64_t fnv1a(std::string_view text,
                              std::uint64_t hash = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

// All randomness in a run derives from one master seed; each component asks
// for a named stream ("partition", "init", "client-3", ...) so adding draws
// in one component never shifts another component's sequence.
inline Rng make_stream(std::uint64_t master_seed, std::string_view name) {
  const std::uint64_t tag = fnv1a(name);
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                    static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(tag),
                    static_cast<std::uint32_t>(tag >> 32)};
  return Rng(seq);
}

}  // namespace fedhf
