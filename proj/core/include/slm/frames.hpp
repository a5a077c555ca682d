#pragma once

#include <Eigen/Dense>
#include <string>

namespace slm {

/// Fixed-rate frame matrix standing in for a waveform: one row per frame,
/// one column per feature dimension.
struct FeatureFrameSeq {
    Eigen::MatrixXf frames;  // T' x D
    double frame_rate_hz = 12.5;

    Eigen::Index n_frames() const { return frames.rows(); }
    Eigen::Index dims() const { return frames.cols(); }
};

/// SFR1 frame file: magic "SFR1", u32 T', u32 D, then T'*D f32
/// little-endian values in row-major order.
void write_frames(const std::string& path, const FeatureFrameSeq& seq);
FeatureFrameSeq read_frames(const std::string& path, double frame_rate_hz = 12.5);

std::string encode_frames(const FeatureFrameSeq& seq);
FeatureFrameSeq decode_frames(const std::string& bytes, const std::string& name = "",
                              double frame_rate_hz = 12.5);

}  // namespace slm
