#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace slm {

std::string read_file(const std::string& path);

/// Writes via a temporary file in the same directory, then renames.
/// Readers never observe a half-written file.
void write_file_atomic(const std::string& path, std::string_view contents);

void ensure_dir(const std::filesystem::path& dir);

bool file_exists(const std::string& path);

/// Little-endian binary encoder over an in-memory buffer.
class BinaryWriter {
public:
    void magic(const char tag[4]) { buf_.append(tag, 4); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f32_array(const float* data, std::size_t n);
    void bytes(std::string_view s) { buf_.append(s.data(), s.size()); }
    const std::string& buffer() const { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

/// Little-endian binary decoder. Throws FormatError with the byte offset
/// on truncation; callers add their own range checks for values.
class BinaryReader {
public:
    explicit BinaryReader(std::string_view data, std::string name = "")
        : data_(data), name_(std::move(name)) {}

    void expect_magic(const char tag[4]);
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    void f32_array(float* out, std::size_t n);
    std::string bytes(std::size_t n);
    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    const char* need(std::size_t n);
    std::string_view data_;
    std::string name_;
    std::size_t pos_ = 0;
};

}  // namespace slm
