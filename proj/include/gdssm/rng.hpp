#pragma once

#include <cstdint>

namespace gdssm {

/// Counter-based Philox 4x32-10 stream. A (seed, stream) pair fully
/// determines the sequence; independent substreams come from distinct stream
/// ids, so adding particles never reshuffles earlier ones.
class RngStream {
public:
    RngStream(uint64_t seed, uint64_t stream = 0) : seed_(seed), stream_(stream) {}

    /// Independent substream (e.g. one per particle).
    RngStream substream(uint64_t idx) const { return RngStream(seed_, stream_ ^ mix(idx)); }

    uint32_t next_u32();
    uint64_t next_u64();
    /// Uniform on (0, 1), 53-bit resolution.
    double next_uniform();
    /// Standard normal via Box-Muller (pairs cached).
    double next_normal();

private:
    static uint64_t mix(uint64_t x);
    void refill();

    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_ = 0;
    uint32_t buf_[4] = {0, 0, 0, 0};
    int buf_pos_ = 4;
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

} // namespace gdssm
