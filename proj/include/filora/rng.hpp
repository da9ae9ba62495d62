#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace filora {

/// Deterministic random source. The engine is std::mt19937_64 (its output
/// sequence is pinned by the standard); the distributions are implemented
/// here because the std ones are implementation-defined and would break
/// bitwise reproducibility across toolchains.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller. Two uniforms per draw, no cached
    /// spare, so the stream position is a pure function of the call count.
    double normal();

    /// Uniform index in [0, n) by rejection.
    std::size_t index(std::size_t n);

    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.empty()) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = index(i + 1);
            std::swap(v[i], v[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
};

/// Derives an independent stream seed from a base seed, a purpose tag and an
/// index. FNV-1a over the tag, then splitmix64 finalization.
std::uint64_t mix_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

/// FNV-1a 64-bit over raw bytes; used for content hashes and checksums.
std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull);

std::string hash_hex(std::uint64_t h);

}  // namespace filora
