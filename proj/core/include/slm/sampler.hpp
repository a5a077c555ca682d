#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slm/lm.hpp"
#include "slm/rvq.hpp"
#include "slm/tokenstream.hpp"

namespace slm::sample {

struct SampleConfig {
    double temperature = 0.8;
    int top_k = 30;          // <= 0 means the full vocabulary
    int max_new_tokens = 0;  // <= 0 derives Q * max_frames + 1 from the vocab caller side
    bool constrain_order = false;
    std::uint64_t seed = 0;

    void validate() const;
};

struct GenResult {
    std::vector<tokens::TokenId> ids;        // prompt + generated
    std::vector<tokens::TokenId> generated;  // new tokens only, stop token included
    std::vector<double> chosen_log_probs;    // log prob of each generated token
    std::string stop_reason;                 // "stop_token" | "budget" | "context"
};

/// Autoregressive sampling from `prompt`. Logits are optionally masked to
/// the level block the frame-major order expects, then temperature-scaled;
/// the draw walks the CDF of the top-k renormalized distribution (ties
/// toward lower ids). Generation ends at `stop_id`, the token budget, or
/// the context limit.
GenResult generate(const lm::LmParams& params, const tokens::UnifiedVocab& vocab,
                   std::span<const tokens::TokenId> prompt, tokens::TokenId stop_id,
                   const SampleConfig& config);

struct ViolationStats {
    std::int64_t positions = 0;
    std::int64_t violations = 0;
    std::int64_t samples = 0;
    double rate() const { return positions == 0 ? 0.0 : static_cast<double>(violations) / static_cast<double>(positions); }
};

/// Samples continuations of each prompt (cycling) and counts generated
/// interior tokens that break the cyclic level order. Delimiter handling:
/// a final stop token is not a position; everything else counts.
ViolationStats order_violation_rate(const lm::LmParams& params, const tokens::UnifiedVocab& vocab,
                                    const std::vector<std::vector<tokens::TokenId>>& prompts,
                                    int n_samples, const SampleConfig& config);

struct ContinueResult {
    FeatureFrameSeq continuation;  // decoded generated frames (may be empty)
    rvq::TokenGrid grid;           // generated full frames
    GenResult gen;
    int prompt_frames = 0;
    int dropped_partial = 0;  // trailing tokens short of a full frame
    int repaired = 0;         // off-order tokens coerced to the zero code
};

/// Speech continuation: encodes the first floor(seconds * rate) prompt
/// frames, decodes token-by-token, and converts the generated tokens back
/// to frames positionally (level = position in cycle; misplaced tokens are
/// repaired to code 0 and counted).
ContinueResult continue_audio(const lm::LmParams& params, const rvq::RvqCodec& codec,
                              const tokens::UnifiedVocab& vocab, const FeatureFrameSeq& prompt,
                              double prompt_seconds, const SampleConfig& config);

}  // namespace slm::sample
