#include "slm/lm.hpp"

#include <nlohmann/json.hpp>

#include "slm/digest.hpp"
#include "slm/io.hpp"

namespace slm::lm {

using nlohmann::json;

void LmConfig::validate() const {
    const auto fail = [](const std::string& msg) { throw ConfigError("lm config: " + msg); };
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (d_model < 2) fail("d_model must be >= 2");
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (n_heads < 1) fail("n_heads must be >= 1");
    if (d_model % n_heads != 0) {
        std::ostringstream os;
        os << "d_model " << d_model << " is not divisible by n_heads " << n_heads;
        throw LayoutError(os.str());
    }
    if (head_dim() % 2 != 0) {
        std::ostringstream os;
        os << "head dim " << head_dim() << " must be even for rotary pairs";
        throw LayoutError(os.str());
    }
    if (d_ff < 1) fail("d_ff must be >= 1");
    if (max_seq_len < 2) fail("max_seq_len must be >= 2");
    if (rope_base <= 1.0) fail("rope_base must exceed 1");
    if (norm_eps <= 0.0) fail("norm_eps must be positive");
}

std::string lm_config_to_json(const LmConfig& c) {
    json j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["d_ff"] = c.d_ff;
    j["max_seq_len"] = c.max_seq_len;
    j["rope_base"] = c.rope_base;
    j["norm_eps"] = c.norm_eps;
    j["seed"] = c.seed;
    return j.dump();
}

LmConfig lm_config_from_json(const std::string& json_text) {
    try {
        const json j = json::parse(json_text);
        LmConfig c;
        j.at("vocab_size").get_to(c.vocab_size);
        j.at("d_model").get_to(c.d_model);
        j.at("n_layers").get_to(c.n_layers);
        j.at("n_heads").get_to(c.n_heads);
        j.at("d_ff").get_to(c.d_ff);
        j.at("max_seq_len").get_to(c.max_seq_len);
        j.at("rope_base").get_to(c.rope_base);
        j.at("norm_eps").get_to(c.norm_eps);
        j.at("seed").get_to(c.seed);
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("lm config json: ") + e.what());
    }
}

std::vector<std::uint8_t> resolve_mask(const ScoreMask& mask, const tokens::UnifiedVocab& vocab,
                                       std::span<const tokens::TokenId> ids) {
    std::vector<std::uint8_t> include(ids.size(), 0);
    switch (mask.mode) {
        case ScoreMask::Mode::kAll:
            for (std::size_t j = 1; j < ids.size(); ++j) include[j] = 1;
            break;
        case ScoreMask::Mode::kSemanticOnly:
            for (std::size_t j = 1; j < ids.size(); ++j) {
                include[j] = vocab.level_of(ids[j]) == 1 ? 1 : 0;
            }
            break;
        case ScoreMask::Mode::kCustom:
            if (mask.include.size() != ids.size()) {
                std::ostringstream os;
                os << "score mask has " << mask.include.size() << " flags for " << ids.size()
                   << " positions";
                throw LayoutError(os.str());
            }
            include = mask.include;
            include[0] = 0;
            break;
    }
    return include;
}

LmParams extend_vocab(const LmParams& text_params, const tokens::UnifiedVocab& vocab,
                      std::uint64_t seed, double noise_scale) {
    vocab.validate();
    const LmConfig& old = text_params.config;
    if (old.vocab_size != vocab.text_size) {
        std::ostringstream os;
        os << "extend_vocab: text model has vocab " << old.vocab_size
           << " but the unified layout expects text_size " << vocab.text_size;
        throw LayoutError(os.str());
    }
    LmConfig config = old;
    config.vocab_size = vocab.total_size();
    LmParams p = zero_model<float>(config);
    p.layers = text_params.layers;
    p.final_norm = text_params.final_norm;
    p.tok_emb.leftCols(old.vocab_size) = text_params.tok_emb;
    p.head.topRows(old.vocab_size) = text_params.head;

    // New rows/columns start at the text centroid plus small seeded noise so
    // early audio logits stay in-distribution.
    const Eigen::VectorXf emb_mean = text_params.tok_emb.rowwise().mean();
    const Eigen::VectorXf head_mean = text_params.head.colwise().mean().transpose();
    for (int v = old.vocab_size; v < config.vocab_size; ++v) {
        rng::Rng rng(rng::derive_seed(seed, "extend_vocab", static_cast<std::uint64_t>(v)));
        p.tok_emb.col(v) = emb_mean;
        for (int i = 0; i < config.d_model; ++i) {
            p.tok_emb(i, v) += static_cast<float>(noise_scale * rng.normal());
        }
        p.head.row(v) = head_mean.transpose();
        for (int i = 0; i < config.d_model; ++i) {
            p.head(v, i) += static_cast<float>(noise_scale * rng.normal());
        }
    }
    return p;
}

Decoder::Decoder(const LmParams& params) : params_(&params) {
    const LmConfig& c = params.config;
    c.validate();
    k_cache_.assign(static_cast<std::size_t>(c.n_layers),
                    Eigen::MatrixXf(c.d_model, c.max_seq_len));
    v_cache_.assign(static_cast<std::size_t>(c.n_layers),
                    Eigen::MatrixXf(c.d_model, c.max_seq_len));
}

void Decoder::reset() { pos_ = 0; }

Eigen::VectorXf Decoder::step(tokens::TokenId id) {
    const LmConfig& c = params_->config;
    if (pos_ >= c.max_seq_len) {
        std::ostringstream os;
        os << "decoder: position " << pos_ << " reached max_seq_len " << c.max_seq_len;
        throw RangeError(os.str());
    }
    if (id < 0 || id >= c.vocab_size) {
        std::ostringstream os;
        os << "decoder: token id " << id << " outside [0, " << c.vocab_size << ")";
        throw RangeError(os.str());
    }
    const Eigen::Index d = c.d_model;
    const Eigen::Index hd = c.head_dim();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    Eigen::MatrixXf x = params_->tok_emb.col(id);  // d x 1
    Eigen::MatrixXf normed;
    Eigen::VectorXf inv;
    for (std::size_t l = 0; l < params_->layers.size(); ++l) {
        const LayerParamsT<float>& lay = params_->layers[l];
        detail::rmsnorm_forward<float>(x, lay.attn_norm, static_cast<float>(c.norm_eps), normed,
                                       inv);
        Eigen::MatrixXf q = lay.wq * normed;
        Eigen::MatrixXf k = lay.wk * normed;
        Eigen::VectorXf v = lay.wv * normed;
        detail::apply_rotary<float>(q, c.n_heads, static_cast<float>(c.rope_base), pos_, false);
        detail::apply_rotary<float>(k, c.n_heads, static_cast<float>(c.rope_base), pos_, false);
        k_cache_[l].col(pos_) = k;
        v_cache_[l].col(pos_) = v;
        Eigen::VectorXf ctx(d);
        for (int h = 0; h < c.n_heads; ++h) {
            auto keys = k_cache_[l].block(h * hd, 0, hd, pos_ + 1);
            auto vals = v_cache_[l].block(h * hd, 0, hd, pos_ + 1);
            Eigen::VectorXf scores = keys.transpose() * q.col(0).segment(h * hd, hd) * scale;
            const float m = scores.maxCoeff();
            scores = (scores.array() - m).exp();
            scores /= scores.sum();
            ctx.segment(h * hd, hd) = vals * scores;
        }
        x += lay.wo * ctx;
        detail::rmsnorm_forward<float>(x, lay.mlp_norm, static_cast<float>(c.norm_eps), normed,
                                       inv);
        Eigen::VectorXf gate = lay.w_gate * normed;
        Eigen::VectorXf up = lay.w_up * normed;
        Eigen::VectorXf act =
            gate.unaryExpr([](float g) { return detail::silu(g); }).cwiseProduct(up);
        x += lay.w_down * act;
    }
    detail::rmsnorm_forward<float>(x, params_->final_norm, static_cast<float>(c.norm_eps), normed,
                                   inv);
    ++pos_;
    return params_->head * normed.col(0);
}

std::string params_digest(const LmParams& params) {
    Sha256 h;
    const std::string config_json = lm_config_to_json(params.config);
    h.update(config_json);
    params.for_each_tensor([&h](const std::string& name, const float* data, Eigen::Index size) {
        h.update(name);
        h.update(":", 1);
        h.update(data, static_cast<std::size_t>(size) * sizeof(float));
    });
    const auto bytes = h.finish();
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (std::uint8_t b : bytes) {
        out.push_back(hex[b >> 4]);
        out.push_back(hex[b & 0xf]);
    }
    return out;
}

namespace {
constexpr char kCheckpointMagic[] = "LMC1";
constexpr std::uint32_t kCheckpointVersion = 1;

void write_section(BinaryWriter& w, const std::string& name, const float* data,
                   std::int64_t size) {
    if (name.size() > 0xffff) throw LayoutError("checkpoint: section name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u64(static_cast<std::uint64_t>(size));
    w.f32_array(data, static_cast<std::size_t>(size));
}
}  // namespace

void save_checkpoint(const std::string& path, const LmParams& params,
                     const OptimizerState* opt) {
    params.config.validate();
    BinaryWriter w;
    w.magic(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    const std::string config_json = lm_config_to_json(params.config);
    w.u32(static_cast<std::uint32_t>(config_json.size()));
    w.bytes(config_json);

    std::uint32_t n_sections = 0;
    params.for_each_tensor(
        [&n_sections](const std::string&, const float*, Eigen::Index) { ++n_sections; });
    w.u32(n_sections);
    params.for_each_tensor([&w](const std::string& name, const float* data, Eigen::Index size) {
        write_section(w, name, data, size);
    });

    w.u8(opt ? 1 : 0);
    if (opt) {
        w.u64(static_cast<std::uint64_t>(opt->step));
        w.u32(static_cast<std::uint32_t>(opt->slots.size()));
        for (const auto& [name, values] : opt->slots) {
            write_section(w, name, values.data(), values.size());
        }
    }
    write_file_atomic(path, std::move(w).take());
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    BinaryReader r(bytes, path);
    r.expect_magic(kCheckpointMagic);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        std::ostringstream os;
        os << "checkpoint " << path << ": unsupported version " << version;
        throw FormatError(os.str(), 4);
    }
    const std::uint32_t json_len = r.u32();
    const std::string config_json = r.bytes(json_len);
    Checkpoint ckpt;
    ckpt.params = zero_model<float>(lm_config_from_json(config_json));

    const std::uint32_t n_sections = r.u32();
    std::uint32_t filled = 0;
    for (std::uint32_t s = 0; s < n_sections; ++s) {
        const std::uint16_t name_len = r.u16();
        const std::string name = r.bytes(name_len);
        const std::uint64_t count = r.u64();
        bool found = false;
        ckpt.params.for_each_tensor([&](const std::string& tname, float* data,
                                        Eigen::Index size) {
            if (tname != name) return;
            found = true;
            if (static_cast<std::uint64_t>(size) != count) {
                std::ostringstream os;
                os << "checkpoint " << path << ": section '" << name << "' holds " << count
                   << " values, model expects " << size;
                throw FormatError(os.str(), r.offset());
            }
            r.f32_array(data, static_cast<std::size_t>(count));
        });
        if (!found) {
            std::ostringstream os;
            os << "checkpoint " << path << ": unknown section '" << name << "'";
            throw FormatError(os.str(), r.offset());
        }
        ++filled;
    }
    std::uint32_t expected = 0;
    ckpt.params.for_each_tensor(
        [&expected](const std::string&, const float*, Eigen::Index) { ++expected; });
    if (filled != expected) {
        std::ostringstream os;
        os << "checkpoint " << path << ": " << filled << " of " << expected
           << " weight sections present";
        throw FormatError(os.str(), r.offset());
    }

    const std::uint8_t has_opt = r.u8();
    if (has_opt) {
        OptimizerState opt;
        opt.step = static_cast<std::int64_t>(r.u64());
        const std::uint32_t n_slots = r.u32();
        for (std::uint32_t s = 0; s < n_slots; ++s) {
            const std::uint16_t name_len = r.u16();
            std::string name = r.bytes(name_len);
            const std::uint64_t count = r.u64();
            Eigen::VectorXf values(static_cast<Eigen::Index>(count));
            r.f32_array(values.data(), static_cast<std::size_t>(count));
            opt.slots.emplace_back(std::move(name), std::move(values));
        }
        ckpt.opt = std::move(opt);
    }
    if (!r.at_end()) {
        std::ostringstream os;
        os << "checkpoint " << path << ": " << r.remaining() << " trailing byte(s)";
        throw FormatError(os.str(), r.offset());
    }
    return ckpt;
}

}  // namespace slm::lm
