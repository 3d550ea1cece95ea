#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "loraserve/errors.hpp"

namespace loraserve::detail {

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

// Raw little-endian IEEE-754 binary64 payloads.
inline void write_f64_le(const std::filesystem::path& path, std::span<const double> values) {
    std::vector<unsigned char> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int k = 0; k < 8; ++k) bytes[i * 8 + k] = static_cast<unsigned char>(bits >> (8 * k));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

inline std::vector<double> read_f64_le(const std::filesystem::path& path, std::size_t count) {
    const std::string raw = read_text(path);
    const std::size_t expected = count * 8;
    if (raw.size() < expected) {
        throw ParseError(path.filename().string() + ": truncated tensor payload, expected " +
                             std::to_string(expected) + " bytes",
                         raw.size());
    }
    if (raw.size() > expected) {
        throw ParseError(path.filename().string() + ": trailing bytes after tensor payload", expected);
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= std::uint64_t(static_cast<unsigned char>(raw[i * 8 + k])) << (8 * k);
        values[i] = std::bit_cast<double>(bits);
    }
    return values;
}

}  // namespace loraserve::detail
