#include "diffstream/binary_io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace diffstream::detail {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw std::runtime_error("read failed for " + path);
    return bytes;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(bytes.data(), (std::streamsize)bytes.size());
    if (!out) throw std::runtime_error("write failed for " + path);
}

void ByteWriter::magic(const char m[4]) { buf.append(m, 4); }

void ByteWriter::u16(std::uint16_t v) {
    buf.push_back((char)(v & 0xff));
    buf.push_back((char)(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back((char)((v >> (8 * i)) & 0xff));
}

void ByteWriter::f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
}

void ByteWriter::f32_array(const float* src, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f32(src[i]);
}

void ByteReader::need(std::size_t n, const char* field) {
    if (off + n > buf.size())
        throw std::runtime_error(what + ": truncated " + field + " at offset " + std::to_string(off) +
                                 " (need " + std::to_string(n) + " bytes, have " +
                                 std::to_string(buf.size() - off) + ")");
}

void ByteReader::magic(const char expect[4]) {
    need(4, "magic");
    if (std::memcmp(buf.data() + off, expect, 4) != 0)
        throw std::runtime_error(what + ": bad magic at offset " + std::to_string(off));
    off += 4;
}

std::uint16_t ByteReader::u16(const char* field) {
    need(2, field);
    const auto* p = (const unsigned char*)buf.data() + off;
    off += 2;
    return (std::uint16_t)(p[0] | (p[1] << 8));
}

std::uint32_t ByteReader::u32(const char* field) {
    need(4, field);
    const auto* p = (const unsigned char*)buf.data() + off;
    off += 4;
    return (std::uint32_t)p[0] | ((std::uint32_t)p[1] << 8) | ((std::uint32_t)p[2] << 16) |
           ((std::uint32_t)p[3] << 24);
}

float ByteReader::f32(const char* field) {
    const std::uint32_t bits = u32(field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void ByteReader::f32_array(float* dst, std::size_t n, const char* field) {
    need(4 * n, field);
    for (std::size_t i = 0; i < n; ++i) dst[i] = f32(field);
}

void ByteReader::done() {
    if (off != buf.size())
        throw std::runtime_error(what + ": trailing data at offset " + std::to_string(off));
}

}  // namespace diffstream::detail
