#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokmem {

using TokenId = int32_t;

// Reserved token ids. The generators work over a fixed 64-symbol alphabet
// that starts right after the reserved block.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr int kNumSpecials = 4;
inline constexpr int kAlphabetSize = 64;
inline constexpr int kToyVocabSize = kNumSpecials + kAlphabetSize;

inline TokenId alpha_token(int symbol) { return kNumSpecials + symbol; }
inline int alpha_symbol(TokenId id) { return static_cast<int>(id) - kNumSpecials; }

// ----------------------------- errors -----------------------------

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LengthError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------- rng -----------------------------
//
// Self-contained xoshiro256++ with a splitmix64 seeder. Keeps every random
// draw identical across standard libraries and platforms, which the
// reproducibility contracts rely on.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            si = z ^ (z >> 31);
        }
    }

    uint64_t u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Unbiased draw in [0, n).
    uint64_t u64_below(uint64_t n) {
        if (n == 0) throw InputError("rng: u64_below(0)");
        const uint64_t limit = ~uint64_t{0} - (~uint64_t{0} % n + 1) % n;
        uint64_t v = u64();
        while (v > limit) v = u64();
        return v % n;
    }

    int index(size_t n) { return static_cast<int>(u64_below(n)); }

    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = u64_below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stable derivation of sub-seeds so independent streams never alias.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// ----------------------------- matrix -----------------------------

template <class S>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<S> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, S(0)) {}

    S* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
    const S* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }
    S& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    S at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return a.size(); }
    void zero() { std::fill(a.begin(), a.end(), S(0)); }

    bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && a == o.a; }
};

// FNV-1a over raw bytes; used for bitwise-identity checks on tensors.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

template <class S>
uint64_t checksum(const Mat<S>& m, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(m.a.data(), m.a.size() * sizeof(S), h);
}

template <class S>
uint64_t checksum(const std::vector<S>& v, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(v.data(), v.size() * sizeof(S), h);
}

}  // namespace tokmem
