#include "slm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "slm/error.hpp"

namespace slm::sample {

void SampleConfig::validate() const {
    if (temperature <= 0.0) throw ConfigError("sample: temperature must be positive");
    if (max_new_tokens < 0) throw ConfigError("sample: max_new_tokens must be >= 0");
}

namespace {

/// Draws from softmax(logits / T) restricted to the k largest entries.
/// Exact ties prefer the lower id, matching greedy decoding conventions.
tokens::TokenId sample_from_logits(const Eigen::VectorXf& logits, double temperature, int top_k,
                                   rng::Rng& rng, double* chosen_log_prob) {
    const Eigen::Index v = logits.size();
    std::vector<std::int32_t> order(static_cast<std::size_t>(v));
    for (Eigen::Index i = 0; i < v; ++i) order[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
    const int k = top_k > 0 ? std::min<int>(top_k, static_cast<int>(v)) : static_cast<int>(v);
    const auto better = [&logits](std::int32_t a, std::int32_t b) {
        if (logits(a) != logits(b)) return logits(a) > logits(b);
        return a < b;
    };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), better);
    order.resize(static_cast<std::size_t>(k));
    if (!std::isfinite(logits(order.front()))) {
        throw DataError("sample: the constrained distribution has no admissible token");
    }

    // log-softmax over the kept set, in double
    std::vector<double> scaled(order.size());
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < order.size(); ++i) {
        scaled[i] = static_cast<double>(logits(order[i])) / temperature;
        m = std::max(m, scaled[i]);
    }
    double z = 0.0;
    for (double& s : scaled) {
        s = std::exp(s - m);
        z += s;
    }
    const double u = rng.uniform() * z;
    double acc = 0.0;
    std::size_t pick = order.size() - 1;
    for (std::size_t i = 0; i < order.size(); ++i) {
        acc += scaled[i];
        if (u < acc) {
            pick = i;
            break;
        }
    }
    if (chosen_log_prob) *chosen_log_prob = std::log(scaled[pick] / z);
    return order[pick];
}

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

}  // namespace

GenResult generate(const lm::LmParams& params, const tokens::UnifiedVocab& vocab,
                   std::span<const tokens::TokenId> prompt, tokens::TokenId stop_id,
                   const SampleConfig& config) {
    config.validate();
    vocab.validate();
    if (params.config.vocab_size != vocab.total_size()) {
        std::ostringstream os;
        os << "generate: model vocab " << params.config.vocab_size
           << " does not match unified vocab " << vocab.total_size();
        throw LayoutError(os.str());
    }
    if (prompt.empty()) throw DataError("generate: empty prompt");

    // In constrained mode the prompt must itself be a well-ordered audio
    // prefix, otherwise "the expected level" is undefined.
    std::int64_t interior = -1;  // interior tokens seen so far; -1 = not in audio span
    if (config.constrain_order) {
        if (prompt.front() != vocab.audio_open()) {
            throw DataError("generate: constrained decoding needs a prompt starting at <audio>");
        }
        interior = 0;
        for (std::size_t i = 1; i < prompt.size(); ++i) {
            const int expected = 1 + static_cast<int>(interior % vocab.q_levels);
            if (vocab.level_of(prompt[i]) != expected) {
                std::ostringstream os;
                os << "generate: prompt breaks the level order at interior index " << (i - 1);
                throw OrderError(os.str(), static_cast<std::int64_t>(i) - 1);
            }
            ++interior;
        }
    }

    GenResult out;
    out.ids.assign(prompt.begin(), prompt.end());
    rng::Rng rng(rng::derive_seed(config.seed, "generate"));
    lm::Decoder decoder(params);
    Eigen::VectorXf logits;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        if (decoder.position() >= params.config.max_seq_len) {
            throw RangeError("generate: prompt alone exceeds max_seq_len");
        }
        logits = decoder.step(prompt[i]);
    }
    const int budget = config.max_new_tokens;
    out.stop_reason = "budget";
    for (int produced = 0; produced < budget; ++produced) {
        if (config.constrain_order) {
            const int expected = 1 + static_cast<int>(interior % vocab.q_levels);
            const bool boundary = interior % vocab.q_levels == 0;
            Eigen::VectorXf masked = Eigen::VectorXf::Constant(logits.size(), kNegInf);
            const Eigen::Index block = vocab.audio_id(expected, 0);
            masked.segment(block, vocab.codebook_size) =
                logits.segment(block, vocab.codebook_size);
            if (boundary) masked(stop_id) = logits(stop_id);
            logits = masked;
        }
        double lp = 0.0;
        const tokens::TokenId id =
            sample_from_logits(logits, config.temperature, config.top_k, rng, &lp);
        out.ids.push_back(id);
        out.generated.push_back(id);
        out.chosen_log_probs.push_back(lp);
        if (id == stop_id) {
            out.stop_reason = "stop_token";
            break;
        }
        if (interior >= 0) ++interior;
        if (decoder.position() >= params.config.max_seq_len) {
            out.stop_reason = "context";
            break;
        }
        logits = decoder.step(id);
    }
    return out;
}

ViolationStats order_violation_rate(const lm::LmParams& params, const tokens::UnifiedVocab& vocab,
                                    const std::vector<std::vector<tokens::TokenId>>& prompts,
                                    int n_samples, const SampleConfig& config) {
    if (prompts.empty()) throw DataError("order_violation_rate: no prompts");
    if (n_samples < 1) throw ConfigError("order_violation_rate: n_samples must be >= 1");
    ViolationStats stats;
    for (int s = 0; s < n_samples; ++s) {
        const std::vector<tokens::TokenId>& prompt =
            prompts[static_cast<std::size_t>(s) % prompts.size()];
        // The prompt's own interior offset anchors the expected level cycle.
        std::int64_t offset = 0;
        if (!prompt.empty() && prompt.front() == vocab.audio_open()) {
            offset = static_cast<std::int64_t>(prompt.size()) - 1;
        }
        SampleConfig cfg = config;
        cfg.seed = rng::derive_seed(config.seed, "violation-sample", static_cast<std::uint64_t>(s));
        const GenResult gen = generate(params, vocab, prompt, vocab.audio_close(), cfg);
        std::size_t n = gen.generated.size();
        if (n > 0 && gen.generated.back() == vocab.audio_close()) --n;
        for (std::size_t i = 0; i < n; ++i) {
            const int expected = 1 + static_cast<int>((offset + static_cast<std::int64_t>(i)) %
                                                      vocab.q_levels);
            ++stats.positions;
            if (vocab.level_of(gen.generated[i]) != expected) ++stats.violations;
        }
        ++stats.samples;
    }
    return stats;
}

ContinueResult continue_audio(const lm::LmParams& params, const rvq::RvqCodec& codec,
                              const tokens::UnifiedVocab& vocab, const FeatureFrameSeq& prompt,
                              double prompt_seconds, const SampleConfig& config) {
    if (prompt_seconds <= 0.0) throw ConfigError("continue_audio: prompt_seconds must be positive");
    const int want =
        static_cast<int>(std::floor(prompt_seconds * prompt.frame_rate_hz));
    if (want < 1 || prompt.n_frames() < want) {
        std::ostringstream os;
        os << "continue_audio: prompt has " << prompt.n_frames() << " frames, needs at least "
           << want << " (" << prompt_seconds << " s at " << prompt.frame_rate_hz << " Hz)";
        throw RangeError(os.str());
    }
    FeatureFrameSeq head;
    head.frame_rate_hz = prompt.frame_rate_hz;
    head.frames = prompt.frames.topRows(want);
    const rvq::TokenGrid prompt_grid = rvq::encode(codec, head);

    // <audio> + interleaved prompt interior, with the closing tag cut off so
    // the model keeps talking.
    std::vector<tokens::TokenId> ids = tokens::interleave(vocab, prompt_grid);
    ids.pop_back();

    SampleConfig cfg = config;
    if (cfg.max_new_tokens <= 0) {
        const std::int64_t room = params.config.max_seq_len - static_cast<std::int64_t>(ids.size());
        cfg.max_new_tokens = static_cast<int>(std::max<std::int64_t>(room, 0));
    }
    ContinueResult out;
    out.prompt_frames = want;
    out.gen = generate(params, vocab, ids, vocab.audio_close(), cfg);

    std::size_t n = out.gen.generated.size();
    if (n > 0 && out.gen.generated.back() == vocab.audio_close()) --n;
    const std::int64_t full = static_cast<std::int64_t>(n) / vocab.q_levels;
    out.dropped_partial = static_cast<int>(static_cast<std::int64_t>(n) % vocab.q_levels);
    out.grid.codes.resize(vocab.q_levels, full);
    for (std::int64_t j = 0; j < full * vocab.q_levels; ++j) {
        const tokens::TokenId id = out.gen.generated[static_cast<std::size_t>(j)];
        const int expected = 1 + static_cast<int>(j % vocab.q_levels);
        std::int32_t code = 0;
        if (vocab.level_of(id) == expected) {
            code = vocab.code_of(id);
        } else {
            ++out.repaired;  // off-order token: fall back to the silent code
        }
        out.grid.codes(j % vocab.q_levels, j / vocab.q_levels) = code;
    }
    out.continuation = rvq::decode(codec, out.grid, prompt.frame_rate_hz);
    return out;
}

}  // namespace slm::sample
