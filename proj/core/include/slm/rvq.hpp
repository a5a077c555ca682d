#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "slm/frames.hpp"

namespace slm::rvq {

/// Q x T' grid of per-level codes for one utterance. Row q holds the
/// level-(q+1) code of every frame; the grid is always rectangular.
struct TokenGrid {
    Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic> codes;  // Q x T'

    Eigen::Index q_levels() const { return codes.rows(); }
    Eigen::Index n_frames() const { return codes.cols(); }

    bool operator==(const TokenGrid& o) const { return codes == o.codes; }
};

struct RvqConfig {
    int q_levels = 4;        // Q
    int codebook_size = 64;  // K, including the reserved zero code
    int kmeans_iters = 50;
    int max_fit_frames = 120000;  // fitting subsamples beyond this
    std::uint64_t seed = 0;

    void validate() const;
};

/// Residual vector quantizer. Level 1 is fitted and matched in a designated
/// semantic subspace; levels 2..Q quantize the running residual in the full
/// feature space. Code 0 is the zero vector at every level, so using a code
/// never increases the residual norm.
struct RvqCodec {
    RvqConfig config;
    Eigen::MatrixXf semantic_projection;     // Ds x D, orthonormal rows
    std::vector<Eigen::MatrixXf> codebooks;  // per level: K x D, row per centroid

    int q_levels() const { return static_cast<int>(codebooks.size()); }
    int codebook_size() const { return config.codebook_size; }
    int dims() const { return static_cast<int>(semantic_projection.cols()); }
    int semantic_dims() const { return static_cast<int>(semantic_projection.rows()); }

    /// Throws if the reserved code or projection invariants are broken.
    void check_invariants() const;
};

/// Projection matrix selecting the first `semantic_dims` coordinates.
Eigen::MatrixXf semantic_axes_projection(int dims, int semantic_dims);

/// Fits the codec. `frames` is N x D training data; `teacher_phonemes`
/// (one label per frame) seeds the level-1 codebook with per-label means
/// before k-means refinement in the semantic subspace. Deterministic for
/// a fixed config.
RvqCodec fit_codec(const Eigen::MatrixXf& frames, const std::vector<int>& teacher_phonemes,
                   const Eigen::MatrixXf& semantic_projection, const RvqConfig& config);

TokenGrid encode(const RvqCodec& codec, const FeatureFrameSeq& seq);
Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic> encode_frames_matrix(
    const RvqCodec& codec, const Eigen::MatrixXf& frames);

/// Sums the selected centroids. `grid.q_levels()` may be smaller than the
/// codec's Q (coarse decode).
FeatureFrameSeq decode(const RvqCodec& codec, const TokenGrid& grid, double frame_rate_hz = 12.5);

/// Mean squared error per matrix element between `frames` and the
/// `levels_used`-level decode of their encoding.
double recon_mse(const RvqCodec& codec, const Eigen::MatrixXf& frames, int levels_used);

/// RVQ1 file: magic, version, Q, K, D, Ds as u32 LE, then the projection
/// and the codebooks as f32 LE in declared order.
void save_codec(const std::string& path, const RvqCodec& codec);
RvqCodec load_codec(const std::string& path);
std::string encode_codec(const RvqCodec& codec);
RvqCodec decode_codec(const std::string& bytes, const std::string& name = "");

}  // namespace slm::rvq
