#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tileforge {

// Interleaved row-major RGB8 raster.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pix; // width*height*3

    ImageU8() = default;
    ImageU8(int w, int h, uint8_t fill = 0)
        : width(w), height(h), pix(static_cast<size_t>(w) * h * 3, fill) {}

    uint8_t* at(int x, int y) {
        return pix.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
    const uint8_t* at(int x, int y) const {
        return pix.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
    bool same_size(const ImageU8& o) const {
        return width == o.width && height == o.height;
    }
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

// Deterministic counter-based uniform stream; draw order is part of the contract.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return splitmix64(state_);
    }
    // uniform in [0,1)
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }
    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_unit();
    }
    uint64_t next_below(uint64_t n) { // n > 0
        return next_u64() % n;
    }

private:
    uint64_t state_;
};

// Runs fn(i) for i in [0,n); chunked over at most `jobs` threads.
// Each index is visited exactly once, so writes to disjoint slots are safe.
inline void parallel_for(size_t n, int jobs, const std::function<void(size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    size_t workers = std::min<size_t>(jobs, n);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    std::vector<std::exception_ptr> errors(workers);
    for (size_t t = 0; t < workers; ++t) {
        threads.emplace_back([&, t] {
            try {
                for (size_t i = t; i < n; i += workers) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : threads) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace tileforge
