#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace slm {

/// Streaming SHA-256 (FIPS 180-4). Self-contained so digests recorded in
/// manifests and cache keys do not depend on an external crypto library.
class Sha256 {
public:
    Sha256();
    void update(const void* data, std::size_t len);
    void update(std::string_view s) { update(s.data(), s.size()); }
    /// Finalizes and returns the 32-byte digest. The object must not be
    /// updated afterwards.
    std::array<std::uint8_t, 32> finish();

private:
    void process_block(const std::uint8_t* block);
    std::array<std::uint32_t, 8> state_;
    std::array<std::uint8_t, 64> buffer_;
    std::uint64_t total_len_ = 0;
    std::size_t buffer_len_ = 0;
};

/// Hex digest of a byte string.
std::string sha256_hex(std::string_view data);

/// Hex digest of a file's contents. Throws IoError if unreadable.
std::string sha256_hex_file(const std::string& path);

}  // namespace slm
