#pragma once

// Little-endian binary file helpers shared by the container, weight and
// cache-dump formats. Readers parse an in-memory buffer and report byte
// offsets in every error.

#include <cstdint>
#include <string>

namespace diffstream::detail {

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

struct ByteWriter {
    std::string buf;

    void magic(const char m[4]);
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void f32(float v);
    void f32_array(const float* src, std::size_t n);
};

struct ByteReader {
    const std::string& buf;
    std::string what;  // format name for error messages
    std::size_t off = 0;

    void need(std::size_t n, const char* field);
    void magic(const char expect[4]);
    std::uint16_t u16(const char* field);
    std::uint32_t u32(const char* field);
    float f32(const char* field);
    void f32_array(float* dst, std::size_t n, const char* field);
    void done();  // rejects trailing bytes
};

}  // namespace diffstream::detail
