#include "slm/rvq.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "slm/error.hpp"
#include "slm/io.hpp"
#include "slm/rng.hpp"

namespace slm::rvq {

namespace {

using RowMajorF =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_projection(const Eigen::MatrixXf& proj) {
    if (proj.rows() < 1 || proj.cols() < 1 || proj.rows() > proj.cols()) {
        std::ostringstream os;
        os << "semantic projection must be Ds x D with 1 <= Ds <= D, got " << proj.rows() << " x "
           << proj.cols();
        throw LayoutError(os.str());
    }
    Eigen::MatrixXf gram = proj * proj.transpose();
    gram.diagonal().array() -= 1.0f;
    const float dev = gram.cwiseAbs().maxCoeff();
    if (dev > 1e-6f) {
        std::ostringstream os;
        os << "semantic projection rows not orthonormal (max deviation " << dev << ")";
        throw LayoutError(os.str());
    }
}

/// Picks the centroid row minimizing the distance to `x`; ties go to the
/// lowest index. Row 0 of every codebook is the zero vector.
int pick_nearest(const Eigen::MatrixXf& codebook, const Eigen::VectorXf& x) {
    int best = 0;
    float best_d = x.squaredNorm();  // distance to the reserved zero code
    for (int k = 1; k < codebook.rows(); ++k) {
        const float d = (codebook.row(k).transpose() - x).squaredNorm();
        if (d < best_d) {
            best = k;
            best_d = d;
        }
    }
    return best;
}

/// One quantization step on the running residual: selects a code (level 1 in
/// the projected subspace, later levels in full space) and subtracts the
/// centroid. Falls back to the zero code if rounding would let the residual
/// norm grow, which keeps the per-frame norm sequence non-increasing exactly.
int quantize_step(const Eigen::MatrixXf& codebook, const Eigen::MatrixXf* projected_codebook,
                  const Eigen::MatrixXf* projection, Eigen::VectorXf& residual) {
    int best;
    if (projected_codebook) {
        const Eigen::VectorXf z = (*projection) * residual;
        best = pick_nearest(*projected_codebook, z);
    } else {
        best = pick_nearest(codebook, residual);
    }
    if (best != 0) {
        Eigen::VectorXf next = residual - codebook.row(best).transpose();
        if (next.squaredNorm() > residual.squaredNorm()) {
            best = 0;
        } else {
            residual = std::move(next);
            return best;
        }
    }
    return best;
}

/// Lloyd iterations over rows of `x`. The centroid set is {0} + `centroids`;
/// only the movable centroids are updated. Empty clusters are reseeded at the
/// point farthest from its assigned centroid. Fully deterministic.
Eigen::MatrixXf lloyd(const Eigen::MatrixXf& x, Eigen::MatrixXf centroids, int iters) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    const Eigen::Index m = centroids.rows();  // movable centroids
    Eigen::MatrixXf full(m + 1, d);
    std::vector<int> assign(static_cast<std::size_t>(n));
    std::vector<float> dist(static_cast<std::size_t>(n));
    Eigen::VectorXf x_norm2 = x.rowwise().squaredNorm();
    for (int iter = 0; iter < iters; ++iter) {
        full.row(0).setZero();
        full.bottomRows(m) = centroids;
        // score(i, k) = x_i . c_k - 0.5 ||c_k||^2; argmax == nearest centroid
        Eigen::VectorXf half_norm2 = 0.5f * full.rowwise().squaredNorm();
        Eigen::MatrixXf scores = x * full.transpose();
        scores.rowwise() -= half_norm2.transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            float best_s = scores(i, 0);
            for (Eigen::Index k = 1; k <= m; ++k) {
                if (scores(i, k) > best_s) {
                    best = static_cast<int>(k);
                    best_s = scores(i, k);
                }
            }
            assign[static_cast<std::size_t>(i)] = best;
            dist[static_cast<std::size_t>(i)] = x_norm2(i) - 2.0f * best_s;
        }
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(m + 1, d);
        Eigen::VectorXi counts = Eigen::VectorXi::Zero(m + 1);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int a = assign[static_cast<std::size_t>(i)];
            sums.row(a) += x.row(i).cast<double>();
            ++counts(a);
        }
        for (Eigen::Index k = 1; k <= m; ++k) {
            if (counts(k) > 0) {
                centroids.row(k - 1) = (sums.row(k) / counts(k)).cast<float>();
            } else {
                Eigen::Index far = 0;
                float far_d = -1.0f;
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (dist[static_cast<std::size_t>(i)] > far_d) {
                        far = i;
                        far_d = dist[static_cast<std::size_t>(i)];
                    }
                }
                centroids.row(k - 1) = x.row(far);
                dist[static_cast<std::size_t>(far)] = -1.0f;
            }
        }
    }
    return centroids;
}

/// Greedy max-min-distance seeding; the implicit zero centroid counts as
/// already chosen when `count_zero` is set.
Eigen::MatrixXf farthest_point_init(const Eigen::MatrixXf& x, int m, bool count_zero) {
    const Eigen::Index n = x.rows();
    Eigen::MatrixXf seeds(m, x.cols());
    Eigen::VectorXf min_d(n);
    int placed = 0;
    if (count_zero) {
        min_d = x.rowwise().squaredNorm();
    } else {
        min_d.setConstant(std::numeric_limits<float>::max());
    }
    while (placed < m) {
        Eigen::Index far = 0;
        float far_d = -1.0f;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (min_d(i) > far_d) {
                far = i;
                far_d = min_d(i);
            }
        }
        seeds.row(placed) = x.row(far);
        for (Eigen::Index i = 0; i < n; ++i) {
            const float d = (x.row(i) - seeds.row(placed)).squaredNorm();
            if (d < min_d(i)) min_d(i) = d;
        }
        ++placed;
    }
    return seeds;
}

std::int64_t count_distinct_rows(const Eigen::MatrixXf& x) {
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(static_cast<std::size_t>(x.rows()) * 2);
    std::vector<float> row(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        std::uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            std::uint32_t bits;
            const float v = x(i, j);
            std::memcpy(&bits, &v, sizeof bits);
            h = rng::mix64(h ^ bits);
        }
        seen.insert(h);
    }
    return static_cast<std::int64_t>(seen.size());
}

}  // namespace

void RvqConfig::validate() const {
    if (q_levels < 1) throw ConfigError("rvq: q_levels must be >= 1");
    if (codebook_size < 2) throw ConfigError("rvq: codebook_size must be >= 2");
    if (kmeans_iters < 1) throw ConfigError("rvq: kmeans_iters must be >= 1");
    if (max_fit_frames < 1) throw ConfigError("rvq: max_fit_frames must be >= 1");
}

void RvqCodec::check_invariants() const {
    config.validate();
    check_projection(semantic_projection);
    if (static_cast<int>(codebooks.size()) != config.q_levels) {
        throw LayoutError("codec: codebook count does not match q_levels");
    }
    for (std::size_t q = 0; q < codebooks.size(); ++q) {
        const Eigen::MatrixXf& cb = codebooks[q];
        if (cb.rows() != config.codebook_size || cb.cols() != semantic_projection.cols()) {
            std::ostringstream os;
            os << "codec: codebook " << (q + 1) << " has shape " << cb.rows() << " x " << cb.cols();
            throw LayoutError(os.str());
        }
        if (cb.row(0).cwiseAbs().maxCoeff() != 0.0f) {
            std::ostringstream os;
            os << "codec: reserved zero code of level " << (q + 1) << " is not the zero vector";
            throw LayoutError(os.str());
        }
    }
}

Eigen::MatrixXf semantic_axes_projection(int dims, int semantic_dims) {
    if (semantic_dims < 1 || semantic_dims > dims) {
        throw ConfigError("semantic_axes_projection: need 1 <= semantic_dims <= dims");
    }
    Eigen::MatrixXf proj = Eigen::MatrixXf::Zero(semantic_dims, dims);
    for (int i = 0; i < semantic_dims; ++i) proj(i, i) = 1.0f;
    return proj;
}

RvqCodec fit_codec(const Eigen::MatrixXf& frames, const std::vector<int>& teacher_phonemes,
                   const Eigen::MatrixXf& semantic_projection, const RvqConfig& config) {
    config.validate();
    check_projection(semantic_projection);
    const Eigen::Index n_all = frames.rows();
    const Eigen::Index d = frames.cols();
    if (n_all < 1) throw DataError("fit_codec: no training frames");
    if (d != semantic_projection.cols()) {
        std::ostringstream os;
        os << "fit_codec: frames have " << d << " dims, projection expects "
           << semantic_projection.cols();
        throw LayoutError(os.str());
    }
    if (!teacher_phonemes.empty() &&
        teacher_phonemes.size() != static_cast<std::size_t>(n_all)) {
        throw DataError("fit_codec: teacher label count does not match frame count");
    }
    const int k = config.codebook_size;
    const std::int64_t distinct = count_distinct_rows(frames);
    if (k - 1 > distinct) {
        std::ostringstream os;
        os << "fit_codec: cannot place " << (k - 1) << " movable centroids on " << distinct
           << " distinct frame(s)";
        throw FitError(os.str());
    }

    // Deterministic subsample when the corpus is larger than the fit budget.
    Eigen::MatrixXf x;
    std::vector<int> labels;
    if (n_all > config.max_fit_frames) {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n_all));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
        rng::Rng pick(rng::derive_seed(config.seed, "fit-subsample"));
        for (int i = 0; i < config.max_fit_frames; ++i) {
            const std::int64_t j =
                i + static_cast<std::int64_t>(pick.uniform_int(static_cast<std::uint64_t>(
                        static_cast<std::int64_t>(idx.size()) - i)));
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }
        idx.resize(static_cast<std::size_t>(config.max_fit_frames));
        std::sort(idx.begin(), idx.end());
        x.resize(config.max_fit_frames, d);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            x.row(static_cast<Eigen::Index>(i)) = frames.row(idx[i]);
            if (!teacher_phonemes.empty()) {
                labels.push_back(teacher_phonemes[static_cast<std::size_t>(idx[i])]);
            }
        }
    } else {
        x = frames;
        labels = teacher_phonemes;
    }
    const Eigen::Index n = x.rows();

    RvqCodec codec;
    codec.config = config;
    codec.semantic_projection = semantic_projection;
    codec.codebooks.resize(static_cast<std::size_t>(config.q_levels));

    // Level 1: cluster in the semantic subspace, seeded by teacher-label means.
    Eigen::MatrixXf z = x * semantic_projection.transpose();  // n x Ds
    Eigen::MatrixXf seeds;
    if (!labels.empty()) {
        int max_label = 0;
        for (int l : labels) {
            if (l < 0) throw DataError("fit_codec: negative teacher label");
            max_label = std::max(max_label, l);
        }
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(max_label + 1, z.cols());
        Eigen::VectorXi counts = Eigen::VectorXi::Zero(max_label + 1);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(labels[static_cast<std::size_t>(i)]) += z.row(i).cast<double>();
            ++counts(labels[static_cast<std::size_t>(i)]);
        }
        std::vector<Eigen::VectorXf> rows;
        for (int l = 0; l <= max_label && static_cast<int>(rows.size()) < k - 1; ++l) {
            if (counts(l) > 0) rows.push_back((sums.row(l) / counts(l)).cast<float>());
        }
        seeds.resize(static_cast<Eigen::Index>(rows.size()), z.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            seeds.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
        }
    } else {
        seeds.resize(0, z.cols());
    }
    if (seeds.rows() < k - 1) {
        // Top up with greedy farthest-point picks relative to what exists
        // (the implicit zero centroid counts as already placed).
        Eigen::MatrixXf merged(k - 1, z.cols());
        merged.topRows(seeds.rows()) = seeds;
        Eigen::VectorXf min_d(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            float best = z.row(i).squaredNorm();
            for (Eigen::Index s = 0; s < seeds.rows(); ++s) {
                best = std::min(best, (z.row(i) - seeds.row(s)).squaredNorm());
            }
            min_d(i) = best;
        }
        for (Eigen::Index sidx = seeds.rows(); sidx < k - 1; ++sidx) {
            Eigen::Index far = 0;
            float far_d = -1.0f;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (min_d(i) > far_d) {
                    far = i;
                    far_d = min_d(i);
                }
            }
            merged.row(sidx) = z.row(far);
            for (Eigen::Index i = 0; i < n; ++i) {
                const float dd = (z.row(i) - merged.row(sidx)).squaredNorm();
                if (dd < min_d(i)) min_d(i) = dd;
            }
        }
        seeds = merged;
    }
    Eigen::MatrixXf c1 = lloyd(z, seeds, config.kmeans_iters);
    Eigen::MatrixXf& cb1 = codec.codebooks[0];
    cb1 = Eigen::MatrixXf::Zero(k, d);
    cb1.bottomRows(k - 1) = c1 * semantic_projection;  // embed subspace centroids

    // Residual pass with the real encode rule, then fit the remaining levels
    // on the running residual in full feature space.
    Eigen::MatrixXf residual(n, d);
    {
        Eigen::MatrixXf proj_cb = cb1 * semantic_projection.transpose();
        Eigen::VectorXf r(d);
        for (Eigen::Index i = 0; i < n; ++i) {
            r = x.row(i).transpose();
            quantize_step(cb1, &proj_cb, &semantic_projection, r);
            residual.row(i) = r.transpose();
        }
    }
    for (int q = 2; q <= config.q_levels; ++q) {
        Eigen::MatrixXf init = farthest_point_init(residual, k - 1, true);
        Eigen::MatrixXf cq = lloyd(residual, init, config.kmeans_iters);
        Eigen::MatrixXf& cb = codec.codebooks[static_cast<std::size_t>(q - 1)];
        cb = Eigen::MatrixXf::Zero(k, d);
        cb.bottomRows(k - 1) = cq;
        Eigen::VectorXf r(d);
        for (Eigen::Index i = 0; i < n; ++i) {
            r = residual.row(i).transpose();
            quantize_step(cb, nullptr, nullptr, r);
            residual.row(i) = r.transpose();
        }
    }
    codec.check_invariants();
    return codec;
}

Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic> encode_frames_matrix(
    const RvqCodec& codec, const Eigen::MatrixXf& frames) {
    if (frames.cols() != codec.dims()) {
        std::ostringstream os;
        os << "encode: frames have " << frames.cols() << " dims, codec expects " << codec.dims();
        throw LayoutError(os.str());
    }
    const int q_levels = codec.q_levels();
    Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic> codes(q_levels, frames.rows());
    Eigen::MatrixXf proj_cb1 = codec.codebooks[0] * codec.semantic_projection.transpose();
    Eigen::VectorXf r(codec.dims());
    for (Eigen::Index t = 0; t < frames.rows(); ++t) {
        r = frames.row(t).transpose();
        for (int q = 0; q < q_levels; ++q) {
            const bool semantic = q == 0;
            codes(q, t) = quantize_step(codec.codebooks[static_cast<std::size_t>(q)],
                                        semantic ? &proj_cb1 : nullptr,
                                        semantic ? &codec.semantic_projection : nullptr, r);
        }
    }
    return codes;
}

TokenGrid encode(const RvqCodec& codec, const FeatureFrameSeq& seq) {
    TokenGrid grid;
    grid.codes = encode_frames_matrix(codec, seq.frames);
    return grid;
}

FeatureFrameSeq decode(const RvqCodec& codec, const TokenGrid& grid, double frame_rate_hz) {
    if (grid.q_levels() < 1 || grid.q_levels() > codec.q_levels()) {
        std::ostringstream os;
        os << "decode: grid has " << grid.q_levels() << " level(s), codec has "
           << codec.q_levels();
        throw LayoutError(os.str());
    }
    FeatureFrameSeq seq;
    seq.frame_rate_hz = frame_rate_hz;
    seq.frames = Eigen::MatrixXf::Zero(grid.n_frames(), codec.dims());
    for (Eigen::Index t = 0; t < grid.n_frames(); ++t) {
        for (Eigen::Index q = 0; q < grid.q_levels(); ++q) {
            const std::int32_t c = grid.codes(q, t);
            if (c < 0 || c >= codec.codebook_size()) {
                std::ostringstream os;
                os << "decode: code " << c << " at level " << (q + 1) << ", frame " << t
                   << " outside [0, " << codec.codebook_size() << ")";
                throw RangeError(os.str());
            }
            seq.frames.row(t) += codec.codebooks[static_cast<std::size_t>(q)].row(c);
        }
    }
    return seq;
}

double recon_mse(const RvqCodec& codec, const Eigen::MatrixXf& frames, int levels_used) {
    if (levels_used < 1 || levels_used > codec.q_levels()) {
        std::ostringstream os;
        os << "recon_mse: levels_used " << levels_used << " outside [1, " << codec.q_levels()
           << "]";
        throw RangeError(os.str());
    }
    if (frames.rows() < 1) throw DataError("recon_mse: no frames");
    auto codes = encode_frames_matrix(codec, frames);
    double total = 0.0;
    Eigen::VectorXf recon(codec.dims());
    for (Eigen::Index t = 0; t < frames.rows(); ++t) {
        recon.setZero();
        for (int q = 0; q < levels_used; ++q) {
            recon += codec.codebooks[static_cast<std::size_t>(q)].row(codes(q, t)).transpose();
        }
        total += (frames.row(t).transpose() - recon).squaredNorm();
    }
    return total / (static_cast<double>(frames.rows()) * codec.dims());
}

namespace {
constexpr char kCodecMagic[] = "RVQ1";
constexpr std::uint32_t kCodecVersion = 1;

void write_row_major(BinaryWriter& w, const Eigen::MatrixXf& m) {
    RowMajorF tmp = m;
    w.f32_array(tmp.data(), static_cast<std::size_t>(tmp.size()));
}

Eigen::MatrixXf read_row_major(BinaryReader& r, Eigen::Index rows, Eigen::Index cols) {
    RowMajorF tmp(rows, cols);
    r.f32_array(tmp.data(), static_cast<std::size_t>(tmp.size()));
    return tmp;
}
}  // namespace

std::string encode_codec(const RvqCodec& codec) {
    codec.check_invariants();
    BinaryWriter w;
    w.magic(kCodecMagic);
    w.u32(kCodecVersion);
    w.u32(static_cast<std::uint32_t>(codec.config.q_levels));
    w.u32(static_cast<std::uint32_t>(codec.config.codebook_size));
    w.u32(static_cast<std::uint32_t>(codec.dims()));
    w.u32(static_cast<std::uint32_t>(codec.semantic_dims()));
    write_row_major(w, codec.semantic_projection);
    for (const Eigen::MatrixXf& cb : codec.codebooks) write_row_major(w, cb);
    return std::move(w).take();
}

RvqCodec decode_codec(const std::string& bytes, const std::string& name) {
    BinaryReader r(bytes, name);
    r.expect_magic(kCodecMagic);
    const std::uint32_t version = r.u32();
    if (version != kCodecVersion) {
        std::ostringstream os;
        os << "codec " << name << ": unsupported version " << version;
        throw FormatError(os.str(), 4);
    }
    RvqCodec codec;
    codec.config.q_levels = static_cast<int>(r.u32());
    codec.config.codebook_size = static_cast<int>(r.u32());
    const std::uint32_t d = r.u32();
    const std::uint32_t ds = r.u32();
    if (codec.config.q_levels < 1 || codec.config.q_levels > 64 ||
        codec.config.codebook_size < 2 || d < 1 || ds < 1 || ds > d) {
        throw FormatError("codec " + name + ": implausible header", 8);
    }
    codec.semantic_projection = read_row_major(r, ds, d);
    codec.codebooks.resize(static_cast<std::size_t>(codec.config.q_levels));
    for (Eigen::MatrixXf& cb : codec.codebooks) {
        cb = read_row_major(r, codec.config.codebook_size, d);
    }
    if (!r.at_end()) {
        std::ostringstream os;
        os << "codec " << name << ": " << r.remaining() << " trailing byte(s)";
        throw FormatError(os.str(), r.offset());
    }
    codec.check_invariants();
    return codec;
}

void save_codec(const std::string& path, const RvqCodec& codec) {
    write_file_atomic(path, encode_codec(codec));
}

RvqCodec load_codec(const std::string& path) { return decode_codec(read_file(path), path); }

}  // namespace slm::rvq
