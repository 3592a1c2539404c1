#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include "tokmem/common.hpp"

// Little-endian binary primitives for the TKMCKPT / TKMBANK containers.

namespace tokmem::io {

static_assert(std::endian::native == std::endian::little,
              "file containers assume a little-endian host");

inline void put_u32(std::ostream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_u64(std::ostream& f, uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_f32(std::ostream& f, float v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_f32_array(std::ostream& f, const float* p, size_t n) {
    f.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
}

inline uint32_t get_u32(std::istream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f) throw FormatError("binary read: truncated u32");
    return v;
}
inline uint64_t get_u64(std::istream& f) {
    uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f) throw FormatError("binary read: truncated u64");
    return v;
}
inline float get_f32(std::istream& f) {
    float v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f) throw FormatError("binary read: truncated f32");
    return v;
}
inline void get_f32_array(std::istream& f, float* p, size_t n) {
    f.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
    if (!f) throw FormatError("binary read: truncated tensor");
}

}  // namespace tokmem::io
