#include "gdssm/rng.hpp"

#include <cmath>

namespace gdssm {

namespace {
constexpr uint32_t kPhiloxW32A = 0x9E3779B9u;
constexpr uint32_t kPhiloxW32B = 0xBB67AE85u;
constexpr uint32_t kPhiloxM4x32A = 0xD2511F53u;
constexpr uint32_t kPhiloxM4x32B = 0xCD9E8D57u;

inline void mul_hi_lo(uint32_t a, uint32_t b, uint32_t& lo, uint32_t& hi) {
    const uint64_t p = static_cast<uint64_t>(a) * b;
    lo = static_cast<uint32_t>(p);
    hi = static_cast<uint32_t>(p >> 32);
}

inline void philox_round(uint32_t ctr[4], const uint32_t key[2]) {
    uint32_t lo0, hi0, lo1, hi1;
    mul_hi_lo(kPhiloxM4x32A, ctr[0], lo0, hi0);
    mul_hi_lo(kPhiloxM4x32B, ctr[2], lo1, hi1);
    const uint32_t r0 = hi1 ^ ctr[1] ^ key[0];
    const uint32_t r1 = lo1;
    const uint32_t r2 = hi0 ^ ctr[3] ^ key[1];
    const uint32_t r3 = lo0;
    ctr[0] = r0;
    ctr[1] = r1;
    ctr[2] = r2;
    ctr[3] = r3;
}
} // namespace

uint64_t RngStream::mix(uint64_t x) {
    // splitmix64 finalizer; spreads substream indices across the key space
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

void RngStream::refill() {
    uint32_t ctr[4] = {static_cast<uint32_t>(counter_), static_cast<uint32_t>(counter_ >> 32),
                       static_cast<uint32_t>(stream_), static_cast<uint32_t>(stream_ >> 32)};
    uint32_t key[2] = {static_cast<uint32_t>(seed_), static_cast<uint32_t>(seed_ >> 32)};
    for (int round = 0; round < 10; ++round) {
        philox_round(ctr, key);
        key[0] += kPhiloxW32A;
        key[1] += kPhiloxW32B;
    }
    buf_[0] = ctr[0];
    buf_[1] = ctr[1];
    buf_[2] = ctr[2];
    buf_[3] = ctr[3];
    buf_pos_ = 0;
    ++counter_;
}

uint32_t RngStream::next_u32() {
    if (buf_pos_ >= 4) refill();
    return buf_[buf_pos_++];
}

uint64_t RngStream::next_u64() {
    const uint64_t lo = next_u32();
    const uint64_t hi = next_u32();
    return (hi << 32) | lo;
}

double RngStream::next_uniform() {
    // (0,1): 53-bit mantissa, never exactly 0
    const uint64_t bits = next_u64() >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

double RngStream::next_normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
}

} // namespace gdssm
