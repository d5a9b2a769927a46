#pragma once

// On-disk formats: binary PPM/PGM images, raw f32 depth with an 8-byte
// header, and the "LFRD" feature-stack dump.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lfr/tensor.hpp"

namespace lfr {

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};
struct PathError : std::runtime_error {
    explicit PathError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("truncated payload: expected u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
    std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u32(os, static_cast<std::uint32_t>(bits & 0xffffffffu));
    write_u32(os, static_cast<std::uint32_t>(bits >> 32));
}

inline double read_f64(std::istream& is) {
    std::uint64_t lo = read_u32(is);
    std::uint64_t hi = read_u32(is);
    std::uint64_t bits = lo | (hi << 32);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw PathError("cannot open for writing: " + path.string());
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw PathError("cannot open for reading: " + path.string());
    return is;
}

// pixels: H*W*3 values in [0,1], row-major RGB
inline void write_ppm(const std::filesystem::path& path, int h, int w, const std::vector<double>& pixels) {
    auto os = open_out(path);
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(pixels.size());
    for (size_t i = 0; i < pixels.size(); ++i) {
        double v = pixels[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        buf[i] = static_cast<unsigned char>(v * 255.0 + 0.5);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_ppm(const std::filesystem::path& path, int& h, int& w) {
    auto is = open_in(path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw FormatError("bad magic in PPM: " + path.string());
    int maxv;
    is >> w >> h >> maxv;
    is.get();
    std::vector<unsigned char> buf(static_cast<size_t>(h) * w * 3);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw FormatError("truncated payload in PPM: " + path.string());
    std::vector<double> px(buf.size());
    for (size_t i = 0; i < buf.size(); ++i) px[i] = buf[i] / 255.0;
    return px;
}

// values in [0,1] mapped to 0..255
inline void write_pgm8(const std::filesystem::path& path, int h, int w, const std::vector<double>& values) {
    auto os = open_out(path);
    os << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        double v = values[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        buf[i] = static_cast<unsigned char>(v * 255.0 + 0.5);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

// 16-bit big-endian PGM (PGM convention), values scaled by 1000 (millimeters)
inline void write_pgm16_depth(const std::filesystem::path& path, int h, int w,
                              const std::vector<double>& depth) {
    auto os = open_out(path);
    os << "P5\n" << w << " " << h << "\n65535\n";
    for (double d : depth) {
        double v = d * 1000.0;
        v = v < 0.0 ? 0.0 : (v > 65535.0 ? 65535.0 : v);
        const auto u = static_cast<std::uint16_t>(v + 0.5);
        unsigned char b[2] = {static_cast<unsigned char>(u >> 8), static_cast<unsigned char>(u & 0xff)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
}

// raw f32 little-endian depth: u32 H, u32 W, then H*W f32
inline void write_depth_raw(const std::filesystem::path& path, int h, int w,
                            const std::vector<double>& depth) {
    auto os = open_out(path);
    write_u32(os, static_cast<std::uint32_t>(h));
    write_u32(os, static_cast<std::uint32_t>(w));
    for (double d : depth) write_f32(os, static_cast<float>(d));
}

inline std::vector<double> read_depth_raw(const std::filesystem::path& path, int& h, int& w) {
    auto is = open_in(path);
    h = static_cast<int>(read_u32(is));
    w = static_cast<int>(read_u32(is));
    std::vector<double> depth(static_cast<size_t>(h) * w);
    for (auto& d : depth) d = read_f32(is);
    return depth;
}

}  // namespace io
}  // namespace lfr
