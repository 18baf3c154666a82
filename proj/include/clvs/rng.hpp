#pragma once

#include <cstdint>
#include <random>

namespace clvs {

// All randomness in the project flows through std::mt19937_64 (constants are
// fixed by the C++ standard, so streams are identical on every platform) and
// the explicit mappings below. std::uniform_real_distribution and friends are
// implementation-defined and must not be used anywhere golden files depend on.

using Rng = std::mt19937_64;

// Uniform double in [0, 1): top 53 bits of the raw draw.
inline double uniform_unit(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform double in [-1, 1).
inline double uniform_symmetric(Rng& rng) {
    return 2.0 * uniform_unit(rng) - 1.0;
}

// Uniform integer in [0, n). Modulo bias is irrelevant at the sizes used here
// (n << 2^64) and keeps the mapping trivially portable.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    return rng() % n;
}

} // namespace clvs
