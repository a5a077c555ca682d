#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slm/rvq.hpp"

namespace slm::tokens {

using TokenId = std::int32_t;

enum class TokenKind { kText, kAudioOpen, kAudioClose, kAudio };

/// Single id space over text tokens, the two audio delimiters, and one
/// block of K ids per quantizer level:
///   [0, text_size)                      text
///   text_size                            <audio>
///   text_size + 1                        </audio>
///   text_size + 2 + (q-1)*K + c          audio level q (1-based), code c
struct UnifiedVocab {
    std::int32_t text_size = 0;
    std::int32_t q_levels = 0;      // Q
    std::int32_t codebook_size = 0; // K

    void validate() const;

    std::int32_t audio_open() const { return text_size; }
    std::int32_t audio_close() const { return text_size + 1; }
    std::int32_t total_size() const { return text_size + 2 + q_levels * codebook_size; }

    std::int32_t audio_id(int level, std::int32_t code) const;  // level is 1-based
    TokenKind kind_of(TokenId id) const;
    bool is_audio(TokenId id) const;
    /// 1-based level of an audio token, 0 for anything else (never throws).
    int level_of(TokenId id) const;
    /// Code of an audio token within its level block.
    std::int32_t code_of(TokenId id) const;
};

using InterleavedSeq = std::vector<TokenId>;

/// <audio> y1_1 .. yQ_1 y1_2 .. yQ_2 ... </audio> : frame-major, quantizer-minor.
InterleavedSeq interleave(const UnifiedVocab& vocab, const rvq::TokenGrid& grid);

/// Inverse of interleave. Throws FormatError for missing delimiters or an
/// interior length not divisible by Q, OrderError (with the interior index)
/// for a token that is not the expected-level audio token.
rvq::TokenGrid deinterleave(const UnifiedVocab& vocab, std::span<const TokenId> ids);

struct OrderReport {
    bool well_formed = false;
    std::int64_t interior_length = 0;
    std::int64_t violation_count = 0;
    std::int64_t first_violation = -1;  // interior index, -1 if none
};

/// Diagnostic pass over a possibly malformed sequence; never throws.
/// A violation is any interior position whose token is not the audio token
/// of the expected cyclic level.
OrderReport validate_order(const UnifiedVocab& vocab, std::span<const TokenId> ids);

/// ITS1 file: magic, u16 version, u16 Q, u16 K, u32 round(frame_rate_hz*100),
/// u32 T', then Q*T' u16 codes frame-major.
void write_stream(const std::string& path, const UnifiedVocab& vocab, const rvq::TokenGrid& grid,
                  double frame_rate_hz);
rvq::TokenGrid read_stream(const std::string& path, const UnifiedVocab& vocab,
                           double* frame_rate_hz = nullptr);

struct StreamMeta {
    int q_levels = 0;
    int codebook_size = 0;
    double frame_rate_hz = 0.0;
};

/// Header-described variant: shape comes from the file itself.
rvq::TokenGrid read_stream_any(const std::string& path, StreamMeta* meta = nullptr);

std::string encode_stream(const UnifiedVocab& vocab, const rvq::TokenGrid& grid,
                          double frame_rate_hz);
rvq::TokenGrid decode_stream(const std::string& bytes, int expect_k, StreamMeta* meta,
                             const std::string& name);

}  // namespace slm::tokens
