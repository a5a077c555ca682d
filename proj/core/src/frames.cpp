#include "slm/frames.hpp"

#include "slm/error.hpp"
#include "slm/io.hpp"

namespace slm {

std::string encode_frames(const FeatureFrameSeq& seq) {
    BinaryWriter w;
    w.magic("SFR1");
    w.u32(static_cast<std::uint32_t>(seq.frames.rows()));
    w.u32(static_cast<std::uint32_t>(seq.frames.cols()));
    using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const RowMajor rm = seq.frames;
    w.f32_array(rm.data(), static_cast<std::size_t>(rm.size()));
    return w.take();
}

FeatureFrameSeq decode_frames(const std::string& bytes, const std::string& name,
                              double frame_rate_hz) {
    BinaryReader r(bytes, name);
    r.expect_magic("SFR1");
    const std::uint32_t t = r.u32();
    const std::uint32_t d = r.u32();
    using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    RowMajor rm(t, d);
    r.f32_array(rm.data(), std::size_t(t) * d);
    if (!r.at_end()) {
        throw FormatError("trailing bytes in frame file" + (name.empty() ? "" : " " + name),
                          static_cast<std::int64_t>(r.offset()));
    }
    FeatureFrameSeq seq;
    seq.frames = rm;
    seq.frame_rate_hz = frame_rate_hz;
    return seq;
}

void write_frames(const std::string& path, const FeatureFrameSeq& seq) {
    write_file_atomic(path, encode_frames(seq));
}

FeatureFrameSeq read_frames(const std::string& path, double frame_rate_hz) {
    return decode_frames(read_file(path), path, frame_rate_hz);
}

}  // namespace slm
