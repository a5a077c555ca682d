#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "slm/corpus.hpp"
#include "slm/lm.hpp"
#include "slm/rvq.hpp"

namespace slm::judge {

struct Transcript {
    std::vector<int> words;
    std::vector<int> phonemes;  // collapsed per-frame labels, silence removed
    std::string text;
};

/// Oracle transcription of a token grid: level-1 codes map to their nearest
/// phoneme template in the semantic subspace (or silence, for codes at the
/// origin), runs collapse, and a DP segmentation explains the phoneme string
/// as the lowest-edit-cost word sequence. Exact on clean renders.
Transcript transcribe(const rvq::RvqCodec& codec, const corpus::Language& lang,
                      const rvq::TokenGrid& grid);

/// Edit distance over word ids divided by the reference length.
double word_error_rate(const std::vector<int>& ref, const std::vector<int>& hyp);

/// The judging instruction with {prefix}/{suffix} spliced in. Single-pass:
/// placeholder-shaped text inside the transcripts is left alone.
std::string render_judge_prompt(std::string_view prefix, std::string_view suffix);

struct JudgeConfig {
    std::string endpoint;  // e.g. http://127.0.0.1:8807/v1/chat/completions
    std::string model = "gpt-4o";
    std::string cache_dir;
    std::string api_key_env = "SLM_JUDGE_API_KEY";
    int max_retries = 3;
    int retry_backoff_ms = 250;
    int timeout_sec = 30;

    void validate() const;
};

struct JudgeScore {
    int score = 0;  // integer in [1, 10]
    bool cached = false;
    std::string digest;       // cache key (prompt + model + temperature)
    std::string raw_content;  // model text before parsing
};

/// Chat-completion client pinned to temperature 0, with a content-addressed
/// response cache: a repeated prompt never reaches the network.
class JudgeClient {
  public:
    explicit JudgeClient(JudgeConfig config);

    JudgeScore judge(std::string_view prefix, std::string_view suffix);
    JudgeScore judge_prompt(const std::string& prompt);

    const JudgeConfig& config() const { return config_; }

  private:
    JudgeConfig config_;
    std::string api_key_;
};

/// Mean next-word surprisal of the transcript under the text model,
/// exponentiated. Needs at least two words; ids must be in-lexicon.
double transcript_perplexity(const lm::LmParams& text_lm, const std::vector<int>& word_ids);

}  // namespace slm::judge
