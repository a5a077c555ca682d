#include "slm/judge.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "slm/digest.hpp"
#include "slm/error.hpp"
#include "slm/io.hpp"

namespace slm::judge {

using nlohmann::json;

namespace {

int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

}  // namespace

Transcript transcribe(const rvq::RvqCodec& codec, const corpus::Language& lang,
                      const rvq::TokenGrid& grid) {
    if (grid.q_levels() < 1) throw LayoutError("transcribe: grid has no levels");
    if (lang.config.feature_dims != codec.dims()) {
        throw LayoutError("transcribe: language and codec dimensions differ");
    }
    // Level-1 centroids and phoneme templates compared in the semantic
    // subspace; template -1 is silence (the origin).
    const Eigen::MatrixXf cb_sem =
        codec.codebooks[0] * codec.semantic_projection.transpose();  // K x Ds
    const Eigen::MatrixXf tmpl =
        lang.phoneme_bases * codec.semantic_projection.transpose();  // P x Ds

    std::vector<int> labels;  // collapsed, silence dropped
    int prev = std::numeric_limits<int>::min();
    for (Eigen::Index t = 0; t < grid.n_frames(); ++t) {
        const std::int32_t code = grid.codes(0, t);
        if (code < 0 || code >= codec.codebook_size()) {
            std::ostringstream os;
            os << "transcribe: level-1 code " << code << " at frame " << t << " outside [0, "
               << codec.codebook_size() << ")";
            throw RangeError(os.str());
        }
        const Eigen::RowVectorXf c = cb_sem.row(code);
        int label = -1;
        float best = c.squaredNorm();  // silence template at the origin
        for (Eigen::Index p = 0; p < tmpl.rows(); ++p) {
            const float d = (tmpl.row(p) - c).squaredNorm();
            if (d < best) {
                best = d;
                label = static_cast<int>(p);
            }
        }
        if (label != prev) {
            if (label >= 0) labels.push_back(label);
            prev = label;
        }
    }

    Transcript out;
    out.phonemes = labels;
    if (labels.empty()) return out;

    // Segment into words: dp[i] = cheapest explanation of labels[0..i).
    const int m = static_cast<int>(labels.size());
    int max_len = 1;
    for (const corpus::Word& w : lang.lexicon) {
        max_len = std::max(max_len, static_cast<int>(w.phonemes.size()));
    }
    max_len += 2;  // allow noisy insertions
    constexpr int kInf = std::numeric_limits<int>::max() / 2;
    std::vector<int> dp(static_cast<std::size_t>(m) + 1, kInf);
    std::vector<int> from(static_cast<std::size_t>(m) + 1, -1);
    std::vector<int> via(static_cast<std::size_t>(m) + 1, -1);
    dp[0] = 0;
    for (int i = 1; i <= m; ++i) {
        for (int j = std::max(0, i - max_len); j < i; ++j) {
            if (dp[static_cast<std::size_t>(j)] >= kInf) continue;
            const std::vector<int> piece(labels.begin() + j, labels.begin() + i);
            for (std::size_t w = 0; w < lang.lexicon.size(); ++w) {
                const int cost = dp[static_cast<std::size_t>(j)] +
                                 levenshtein(piece, lang.lexicon[w].phonemes);
                if (cost < dp[static_cast<std::size_t>(i)]) {
                    dp[static_cast<std::size_t>(i)] = cost;
                    from[static_cast<std::size_t>(i)] = j;
                    via[static_cast<std::size_t>(i)] = static_cast<int>(w);
                }
            }
        }
    }
    std::vector<int> words;
    for (int i = m; i > 0; i = from[static_cast<std::size_t>(i)]) {
        words.push_back(via[static_cast<std::size_t>(i)]);
    }
    std::reverse(words.begin(), words.end());
    out.words = std::move(words);
    out.text = lang.words_text(out.words);
    return out;
}

double word_error_rate(const std::vector<int>& ref, const std::vector<int>& hyp) {
    if (ref.empty()) throw DataError("word_error_rate: empty reference");
    return static_cast<double>(levenshtein(ref, hyp)) / static_cast<double>(ref.size());
}

namespace {
constexpr std::string_view kJudgeTemplate =
    "Given the following prompt and completion, rate the quality of the completion on a scale "
    "from 1 to 10, where 10 is the best possible completion. Consider relevance, coherence, "
    "fluency, and informativeness. Output only the score as an integer.\n"
    "Prompt: {prefix}\n"
    "Completion: {suffix}";
}  // namespace

std::string render_judge_prompt(std::string_view prefix, std::string_view suffix) {
    // Substitution points are located in the template, not the output, so
    // transcript text that happens to contain "{suffix}" survives verbatim.
    std::string out;
    out.reserve(kJudgeTemplate.size() + prefix.size() + suffix.size());
    std::size_t cursor = 0;
    const std::size_t at_prefix = kJudgeTemplate.find("{prefix}");
    const std::size_t at_suffix = kJudgeTemplate.find("{suffix}");
    out.append(kJudgeTemplate.substr(cursor, at_prefix - cursor));
    out.append(prefix);
    cursor = at_prefix + 8;
    out.append(kJudgeTemplate.substr(cursor, at_suffix - cursor));
    out.append(suffix);
    cursor = at_suffix + 8;
    out.append(kJudgeTemplate.substr(cursor));
    return out;
}

void JudgeConfig::validate() const {
    if (endpoint.empty()) throw ConfigError("judge: endpoint must be set");
    if (model.empty()) throw ConfigError("judge: model must be set");
    if (max_retries < 0) throw ConfigError("judge: max_retries must be >= 0");
    if (timeout_sec < 1) throw ConfigError("judge: timeout_sec must be >= 1");
}

JudgeClient::JudgeClient(JudgeConfig config) : config_(std::move(config)) {
    config_.validate();
    if (!config_.api_key_env.empty()) {
        if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
    }
}

JudgeScore JudgeClient::judge(std::string_view prefix, std::string_view suffix) {
    return judge_prompt(render_judge_prompt(prefix, suffix));
}

namespace {

struct ParsedUrl {
    std::string base;  // scheme://host[:port]
    std::string path;
};

ParsedUrl split_url(const std::string& url) {
    const std::size_t scheme = url.find("://");
    if (scheme == std::string::npos) throw ConfigError("judge: endpoint '" + url + "' has no scheme");
    const std::size_t slash = url.find('/', scheme + 3);
    ParsedUrl out;
    if (slash == std::string::npos) {
        out.base = url;
        out.path = "/v1/chat/completions";
    } else {
        out.base = url.substr(0, slash);
        out.path = url.substr(slash);
    }
    return out;
}

int parse_score_content(const std::string& content) {
    std::string t = content;
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    t.erase(t.begin(), std::find_if(t.begin(), t.end(), not_space));
    t.erase(std::find_if(t.rbegin(), t.rend(), not_space).base(), t.end());
    if (t.empty()) throw ParseError("judge: empty response content");
    std::size_t i = (t[0] == '-' || t[0] == '+') ? 1 : 0;
    if (i == t.size()) throw ParseError("judge: response '" + content + "' is not an integer");
    for (; i < t.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(t[i]))) {
            throw ParseError("judge: response '" + content + "' is not a bare integer");
        }
    }
    const long v = std::strtol(t.c_str(), nullptr, 10);
    if (v < 1 || v > 10) {
        std::ostringstream os;
        os << "judge: score " << v << " outside [1, 10]";
        throw RangeError(os.str());
    }
    return static_cast<int>(v);
}

}  // namespace

// The HTTP transport lives in judge_http.cpp to keep httplib (and its
// OpenSSL surface) out of every other translation unit.
std::string judge_http_post(const std::string& base, const std::string& path,
                            const std::string& body, const std::string& api_key, int timeout_sec,
                            int max_retries, int retry_backoff_ms);

JudgeScore JudgeClient::judge_prompt(const std::string& prompt) {
    json request;
    request["model"] = config_.model;
    request["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});
    request["temperature"] = 0;
    const std::string body = request.dump();

    JudgeScore result;
    result.digest = sha256_hex(prompt + '\0' + config_.model + "\0temperature=0");
    const std::string cache_path =
        config_.cache_dir.empty() ? "" : config_.cache_dir + "/" + result.digest + ".json";
    if (!cache_path.empty() && file_exists(cache_path)) {
        try {
            const json cached = json::parse(read_file(cache_path));
            result.score = cached.at("score").get<int>();
            result.raw_content = cached.value("content", "");
            result.cached = true;
            return result;
        } catch (const std::exception&) {
            // unreadable cache entry: fall through and refresh it
        }
    }

    const ParsedUrl url = split_url(config_.endpoint);
    const std::string response_body =
        judge_http_post(url.base, url.path, body, api_key_, config_.timeout_sec,
                        config_.max_retries, config_.retry_backoff_ms);
    std::string content;
    try {
        const json response = json::parse(response_body);
        content = response.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("judge: malformed chat completion response: ") + e.what());
    }
    result.raw_content = content;
    result.score = parse_score_content(content);
    result.cached = false;
    if (!cache_path.empty()) {
        ensure_dir(config_.cache_dir);
        json entry;
        entry["digest"] = result.digest;
        entry["model"] = config_.model;
        entry["temperature"] = 0;
        entry["prompt"] = prompt;
        entry["content"] = content;
        entry["score"] = result.score;
        write_file_atomic(cache_path, entry.dump(2) + "\n");
    }
    return result;
}

double transcript_perplexity(const lm::LmParams& text_lm, const std::vector<int>& word_ids) {
    if (word_ids.size() < 2) {
        throw DataError("transcript_perplexity: needs at least two words");
    }
    std::vector<tokens::TokenId> ids;
    ids.reserve(word_ids.size());
    for (int w : word_ids) {
        if (w < 0 || w >= text_lm.config.vocab_size) {
            std::ostringstream os;
            os << "transcript_perplexity: word id " << w << " outside the text vocabulary [0, "
               << text_lm.config.vocab_size << ")";
            throw DataError(os.str());
        }
        ids.push_back(w);
    }
    tokens::UnifiedVocab dummy;
    dummy.text_size = text_lm.config.vocab_size;
    dummy.q_levels = 1;
    dummy.codebook_size = 2;
    const lm::ScoreResult r = lm::score(text_lm, dummy, ids, lm::ScoreMask::all());
    return r.perplexity();
}

}  // namespace slm::judge
