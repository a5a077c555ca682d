#include "slm/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "slm/error.hpp"

namespace slm {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string out;
    f.seekg(0, std::ios::end);
    out.resize(static_cast<std::size_t>(f.tellg()));
    f.seekg(0);
    f.read(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("read failed: " + path);
    return out;
}

void write_file_atomic(const std::string& path, std::string_view contents) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) ensure_dir(target.parent_path());
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for write: " + tmp.string());
        f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        f.flush();
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("rename failed: " + tmp.string() + " -> " + path + ": " + ec.message());
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir.string() + ": " + ec.message());
}

bool file_exists(const std::string& path) {
    std::error_code ec;
    return std::filesystem::is_regular_file(path, ec);
}

void BinaryWriter::u16(std::uint16_t v) {
    char b[2] = {char(v & 0xff), char(v >> 8)};
    buf_.append(b, 2);
}

void BinaryWriter::u32(std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    buf_.append(b, 4);
}

void BinaryWriter::u64(std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    buf_.append(b, 8);
}

void BinaryWriter::f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
}

void BinaryWriter::f32_array(const float* data, std::size_t n) {
    // x86 is little-endian; bulk-append and fall back elementwise elsewhere.
    if constexpr (std::endian::native == std::endian::little) {
        buf_.append(reinterpret_cast<const char*>(data), n * 4);
    } else {
        for (std::size_t i = 0; i < n; ++i) f32(data[i]);
    }
}

const char* BinaryReader::need(std::size_t n) {
    if (pos_ + n > data_.size()) {
        throw FormatError("truncated data" + (name_.empty() ? "" : " in " + name_) +
                              " at byte " + std::to_string(pos_),
                          static_cast<std::int64_t>(pos_));
    }
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
}

void BinaryReader::expect_magic(const char tag[4]) {
    const std::size_t at = pos_;
    const char* p = need(4);
    if (std::memcmp(p, tag, 4) != 0) {
        throw FormatError("bad magic" + (name_.empty() ? "" : " in " + name_) + ", expected '" +
                              std::string(tag, 4) + "'",
                          static_cast<std::int64_t>(at));
    }
}

std::uint8_t BinaryReader::u8() { return static_cast<std::uint8_t>(*need(1)); }

std::uint16_t BinaryReader::u16() {
    const auto* p = reinterpret_cast<const std::uint8_t*>(need(2));
    return std::uint16_t(p[0] | (std::uint16_t(p[1]) << 8));
}

std::uint32_t BinaryReader::u32() {
    const auto* p = reinterpret_cast<const std::uint8_t*>(need(4));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    return v;
}

std::uint64_t BinaryReader::u64() {
    const auto* p = reinterpret_cast<const std::uint8_t*>(need(8));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
}

float BinaryReader::f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void BinaryReader::f32_array(float* out, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        const char* p = need(n * 4);
        std::memcpy(out, p, n * 4);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = f32();
    }
}

std::string BinaryReader::bytes(std::size_t n) {
    const char* p = need(n);
    return std::string(p, n);
}

}  // namespace slm
