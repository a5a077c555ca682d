#include "slm/tokenstream.hpp"

#include <cmath>
#include <sstream>

#include "slm/error.hpp"
#include "slm/io.hpp"

namespace slm::tokens {

void UnifiedVocab::validate() const {
    if (text_size < 1) throw ConfigError("vocab: text_size must be >= 1");
    if (q_levels < 1) throw ConfigError("vocab: q_levels must be >= 1");
    if (codebook_size < 2) throw ConfigError("vocab: codebook_size must be >= 2");
}

std::int32_t UnifiedVocab::audio_id(int level, std::int32_t code) const {
    if (level < 1 || level > q_levels) {
        std::ostringstream os;
        os << "audio_id: level " << level << " outside [1, " << q_levels << "]";
        throw RangeError(os.str());
    }
    if (code < 0 || code >= codebook_size) {
        std::ostringstream os;
        os << "audio_id: code " << code << " outside [0, " << codebook_size << ")";
        throw RangeError(os.str());
    }
    return text_size + 2 + static_cast<std::int32_t>(level - 1) * codebook_size + code;
}

TokenKind UnifiedVocab::kind_of(TokenId id) const {
    if (id < 0 || id >= total_size()) {
        std::ostringstream os;
        os << "kind_of: id " << id << " outside [0, " << total_size() << ")";
        throw RangeError(os.str());
    }
    if (id < text_size) return TokenKind::kText;
    if (id == audio_open()) return TokenKind::kAudioOpen;
    if (id == audio_close()) return TokenKind::kAudioClose;
    return TokenKind::kAudio;
}

bool UnifiedVocab::is_audio(TokenId id) const {
    return id >= text_size + 2 && id < total_size();
}

int UnifiedVocab::level_of(TokenId id) const {
    if (!is_audio(id)) return 0;
    return 1 + static_cast<int>((id - text_size - 2) / codebook_size);
}

std::int32_t UnifiedVocab::code_of(TokenId id) const {
    if (!is_audio(id)) {
        std::ostringstream os;
        os << "code_of: id " << id << " is not an audio token";
        throw RangeError(os.str());
    }
    return (id - text_size - 2) % codebook_size;
}

InterleavedSeq interleave(const UnifiedVocab& vocab, const rvq::TokenGrid& grid) {
    vocab.validate();
    if (grid.q_levels() != vocab.q_levels) {
        std::ostringstream os;
        os << "interleave: grid has " << grid.q_levels() << " levels, vocab expects "
           << vocab.q_levels;
        throw LayoutError(os.str());
    }
    InterleavedSeq out;
    out.reserve(static_cast<std::size_t>(grid.codes.size()) + 2);
    out.push_back(vocab.audio_open());
    for (Eigen::Index t = 0; t < grid.n_frames(); ++t) {
        for (Eigen::Index q = 0; q < grid.q_levels(); ++q) {
            out.push_back(vocab.audio_id(static_cast<int>(q) + 1, grid.codes(q, t)));
        }
    }
    out.push_back(vocab.audio_close());
    return out;
}

rvq::TokenGrid deinterleave(const UnifiedVocab& vocab, std::span<const TokenId> ids) {
    vocab.validate();
    if (ids.empty() || ids.front() != vocab.audio_open()) {
        throw FormatError("deinterleave: sequence does not start with <audio>");
    }
    const std::int64_t q = vocab.q_levels;
    std::vector<std::int32_t> codes;
    codes.reserve(ids.size());
    bool closed = false;
    for (std::size_t i = 1; i < ids.size(); ++i) {
        const TokenId id = ids[i];
        if (id == vocab.audio_close()) {
            if (i + 1 != ids.size()) {
                std::ostringstream os;
                os << "deinterleave: " << (ids.size() - i - 1) << " token(s) after </audio>";
                throw FormatError(os.str());
            }
            closed = true;
            break;
        }
        const std::int64_t interior = static_cast<std::int64_t>(i) - 1;
        const int expected = 1 + static_cast<int>(interior % q);
        const int level = (id >= 0 && id < vocab.total_size()) ? vocab.level_of(id) : 0;
        if (level != expected) {
            std::ostringstream os;
            if (id >= 0 && id < vocab.text_size) {
                os << "deinterleave: text token " << id << " inside audio span at interior index "
                   << interior;
            } else {
                os << "deinterleave: expected level-" << expected << " audio token at interior index "
                   << interior << ", got id " << id;
            }
            throw OrderError(os.str(), interior);
        }
        codes.push_back(vocab.code_of(id));
    }
    if (!closed) throw FormatError("deinterleave: missing </audio> delimiter");
    const std::int64_t n = static_cast<std::int64_t>(codes.size());
    if (n % q != 0) {
        std::ostringstream os;
        os << "deinterleave: interior length " << n << " not divisible by Q=" << q;
        throw FormatError(os.str());
    }
    rvq::TokenGrid grid;
    grid.codes.resize(q, n / q);
    for (std::int64_t j = 0; j < n; ++j) {
        grid.codes(j % q, j / q) = codes[static_cast<std::size_t>(j)];
    }
    return grid;
}

OrderReport validate_order(const UnifiedVocab& vocab, std::span<const TokenId> ids) {
    OrderReport rep;
    const std::int64_t q = vocab.q_levels;
    bool structure_ok = !ids.empty() && ids.front() == vocab.audio_open();
    std::size_t start = structure_ok ? 1 : 0;
    bool closed = false;
    std::int64_t interior = 0;
    for (std::size_t i = start; i < ids.size(); ++i) {
        const TokenId id = ids[i];
        if (id == vocab.audio_close()) {
            closed = true;
            if (i + 1 != ids.size()) structure_ok = false;
            break;
        }
        const int expected = 1 + static_cast<int>(interior % q);
        const int level = (id >= 0 && id < vocab.total_size()) ? vocab.level_of(id) : 0;
        if (level != expected) {
            ++rep.violation_count;
            if (rep.first_violation < 0) rep.first_violation = interior;
        }
        ++interior;
    }
    rep.interior_length = interior;
    if (!closed) structure_ok = false;
    if (interior % q != 0) structure_ok = false;
    rep.well_formed = structure_ok && rep.violation_count == 0;
    return rep;
}

namespace {
constexpr char kStreamMagic[] = "ITS1";
constexpr std::uint16_t kStreamVersion = 1;
}  // namespace

std::string encode_stream(const UnifiedVocab& vocab, const rvq::TokenGrid& grid,
                          double frame_rate_hz) {
    vocab.validate();
    if (grid.q_levels() != vocab.q_levels) {
        throw LayoutError("write_stream: grid level count does not match vocab");
    }
    if (grid.n_frames() < 1) throw FormatError("write_stream: empty grid");
    if (frame_rate_hz <= 0.0) throw ConfigError("write_stream: frame_rate_hz must be positive");
    for (Eigen::Index t = 0; t < grid.n_frames(); ++t) {
        for (Eigen::Index q = 0; q < grid.q_levels(); ++q) {
            const std::int32_t c = grid.codes(q, t);
            if (c < 0 || c >= vocab.codebook_size) {
                std::ostringstream os;
                os << "write_stream: code " << c << " at level " << (q + 1) << ", frame " << t
                   << " outside [0, " << vocab.codebook_size << ")";
                throw RangeError(os.str());
            }
        }
    }
    BinaryWriter w;
    w.magic(kStreamMagic);
    w.u16(kStreamVersion);
    w.u16(static_cast<std::uint16_t>(vocab.q_levels));
    w.u16(static_cast<std::uint16_t>(vocab.codebook_size));
    w.u32(static_cast<std::uint32_t>(std::lround(frame_rate_hz * 100.0)));
    w.u32(static_cast<std::uint32_t>(grid.n_frames()));
    for (Eigen::Index t = 0; t < grid.n_frames(); ++t) {
        for (Eigen::Index q = 0; q < grid.q_levels(); ++q) {
            w.u16(static_cast<std::uint16_t>(grid.codes(q, t)));
        }
    }
    return std::move(w).take();
}

rvq::TokenGrid decode_stream(const std::string& bytes, int expect_k, StreamMeta* meta,
                             const std::string& name) {
    BinaryReader r(bytes, name);
    r.expect_magic(kStreamMagic);
    const std::uint16_t version = r.u16();
    if (version != kStreamVersion) {
        std::ostringstream os;
        os << "token stream " << name << ": unsupported version " << version;
        throw FormatError(os.str(), 4);
    }
    const std::uint16_t q = r.u16();
    const std::uint16_t k = r.u16();
    const std::uint32_t rate_centi = r.u32();
    const std::uint32_t n_frames = r.u32();
    if (q == 0 || k == 0) throw FormatError("token stream " + name + ": zero Q or K in header", 6);
    if (n_frames == 0) throw FormatError("token stream " + name + ": zero frame count", 14);
    if (expect_k > 0 && k != expect_k) {
        std::ostringstream os;
        os << "token stream " << name << ": header K=" << k << ", expected K=" << expect_k;
        throw FormatError(os.str(), 8);
    }
    if (meta) {
        meta->q_levels = q;
        meta->codebook_size = k;
        meta->frame_rate_hz = rate_centi / 100.0;
    }
    rvq::TokenGrid grid;
    grid.codes.resize(q, n_frames);
    const int k_check = expect_k > 0 ? expect_k : static_cast<int>(k);
    const std::int64_t total = static_cast<std::int64_t>(q) * n_frames;
    for (std::int64_t j = 0; j < total; ++j) {
        const std::int64_t offset = r.offset();
        const std::uint16_t c = r.u16();
        if (c >= k_check) {
            std::ostringstream os;
            os << "token stream " << name << ": code " << c << " >= K=" << k_check
               << " at byte offset " << offset;
            throw RangeError(os.str());
        }
        grid.codes(j % q, j / q) = c;
    }
    if (!r.at_end()) {
        std::ostringstream os;
        os << "token stream " << name << ": " << r.remaining() << " trailing byte(s)";
        throw FormatError(os.str(), r.offset());
    }
    return grid;
}

void write_stream(const std::string& path, const UnifiedVocab& vocab, const rvq::TokenGrid& grid,
                  double frame_rate_hz) {
    write_file_atomic(path, encode_stream(vocab, grid, frame_rate_hz));
}

rvq::TokenGrid read_stream(const std::string& path, const UnifiedVocab& vocab,
                           double* frame_rate_hz) {
    vocab.validate();
    StreamMeta meta;
    rvq::TokenGrid grid = decode_stream(read_file(path), vocab.codebook_size, &meta, path);
    if (meta.q_levels != vocab.q_levels) {
        std::ostringstream os;
        os << "token stream " << path << ": header Q=" << meta.q_levels << ", vocab expects Q="
           << vocab.q_levels;
        throw FormatError(os.str(), 6);
    }
    if (frame_rate_hz) *frame_rate_hz = meta.frame_rate_hz;
    return grid;
}

rvq::TokenGrid read_stream_any(const std::string& path, StreamMeta* meta) {
    return decode_stream(read_file(path), 0, meta, path);
}

}  // namespace slm::tokens
