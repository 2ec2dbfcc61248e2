#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdiag {

// Raised when an expected input file or directory is absent.
class MissingInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {
inline std::uint32_t to_little(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    else return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}
}  // namespace detail

// Raw little-endian float32 payload, no header.
inline void write_f32(std::ostream& os, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(float)));
    } else {
        for (float v : values) {
            const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(v));
            os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
        }
    }
}

inline void read_f32(std::istream& is, std::span<float> out) {
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * sizeof(float)));
    if (!is) throw std::runtime_error("read_f32: truncated payload");
    if constexpr (std::endian::native != std::endian::little) {
        for (float& v : out) v = std::bit_cast<float>(detail::to_little(std::bit_cast<std::uint32_t>(v)));
    }
}

inline void write_f32_file(const std::filesystem::path& path, std::span<const float> values) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    write_f32(os, values);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<float> read_f32_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingInput("cannot open: " + path.string());
    is.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(is.tellg());
    if (bytes % sizeof(float) != 0) throw std::runtime_error("not a float32 payload: " + path.string());
    is.seekg(0);
    std::vector<float> out(bytes / sizeof(float));
    read_f32(is, out);
    return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingInput("cannot open: " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace fdiag
