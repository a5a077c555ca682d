#include "slm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "slm/error.hpp"
#include "slm/io.hpp"

namespace slm::corpus {

using nlohmann::json;

void CorpusConfig::validate() const {
    const auto fail = [](const std::string& msg) { throw ConfigError("corpus config: " + msg); };
    if (n_utterances < 1) fail("n_utterances must be >= 1");
    if (p_phonemes < 1) fail("p_phonemes must be >= 1");
    if (feature_dims < 3) fail("feature_dims must be >= 3");
    if (semantic_dims < 1) fail("semantic_dims must be >= 1");
    if (speaker_dims < 1) fail("speaker_dims must be >= 1");
    if (ambient_dims() < 1) {
        fail("semantic_dims + speaker_dims must leave at least one ambient dimension");
    }
    if (lexicon_size < 1) fail("lexicon_size must be >= 1");
    if (min_word_len < 1 || max_word_len < min_word_len) {
        fail("need 1 <= min_word_len <= max_word_len");
    }
    if (n_topics < 1) fail("n_topics must be >= 1");
    if (n_speakers < 1) fail("n_speakers must be >= 1");
    if (n_sentiments < 1) fail("n_sentiments must be >= 1");
    if (n_backgrounds < 1) fail("n_backgrounds must be >= 1");
    if (room_values.empty()) fail("room_values must be non-empty");
    for (double r : room_values) {
        if (!(r >= 0.0 && r < 1.0)) fail("room_values entries must lie in [0, 1)");
    }
    if (speaker_scale < 0 || sentiment_scale < 0 || background_scale < 0 || jitter_scale < 0) {
        fail("factor scales must be >= 0");
    }
    if (frame_rate_hz <= 0) fail("frame_rate_hz must be positive");
    if (min_phoneme_frames < 1 || max_phoneme_frames < min_phoneme_frames) {
        fail("need 1 <= min_phoneme_frames <= max_phoneme_frames");
    }
    if (min_frames < 1 || max_frames < min_frames) fail("need 1 <= min_frames <= max_frames");
    if (max_frames < max_word_len * max_phoneme_frames) {
        fail("max_frames cannot hold even one longest word");
    }
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
        fail("train_fraction must lie in (0, 1]");
    }
}

double Language::sentiment_value(int level) const {
    if (level < 0 || level >= config.n_sentiments) {
        std::ostringstream os;
        os << "sentiment level " << level << " outside [0, " << config.n_sentiments << ")";
        throw RangeError(os.str());
    }
    if (config.n_sentiments == 1) return 0.0;
    return -1.0 + 2.0 * level / (config.n_sentiments - 1);
}

namespace {

constexpr char kConsonants[] = "bdfghjklmnprstvwyz";  // 18
constexpr char kVowels[] = "aeiou";                   // 5
constexpr int kNumConsonants = 18;
constexpr int kNumVowels = 5;
constexpr int kMaxSpellable = kNumConsonants * kNumVowels;

std::string syllable(int phoneme) {
    if (phoneme < 0 || phoneme >= kMaxSpellable) {
        std::ostringstream os;
        os << "phoneme " << phoneme << " has no spelling (max " << kMaxSpellable << " phonemes)";
        throw ConfigError(os.str());
    }
    std::string s;
    s += kConsonants[phoneme % kNumConsonants];
    s += kVowels[(phoneme / kNumConsonants) % kNumVowels];
    return s;
}

std::string raw_key(const std::vector<int>& phonemes) {
    std::string key;
    for (int p : phonemes) {
        key += std::to_string(p);
        key += '.';
    }
    return key;
}

std::vector<int> collapse_runs(const std::vector<int>& phonemes) {
    std::vector<int> out;
    for (int p : phonemes) {
        if (out.empty() || out.back() != p) out.push_back(p);
    }
    return out;
}

bool is_prefix(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() > b.size()) return false;
    return std::equal(a.begin(), a.end(), b.begin());
}

/// Distinct phoneme strings with lengths in [lo, hi], saturating at 2^62.
std::uint64_t string_capacity(int p, int lo, int hi) {
    constexpr std::uint64_t kCap = 1ULL << 62;
    std::uint64_t total = 0;
    for (int len = lo; len <= hi; ++len) {
        std::uint64_t count = 1;
        for (int i = 0; i < len; ++i) {
            if (count > kCap / static_cast<std::uint64_t>(p)) return kCap;
            count *= static_cast<std::uint64_t>(p);
        }
        if (total > kCap - count) return kCap;
        total += count;
    }
    return total;
}

std::vector<int> sample_phoneme_string(rng::Rng& rng, int p, int len, bool avoid_repeats) {
    std::vector<int> out(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
        if (avoid_repeats && i > 0 && p > 1) {
            // Uniform over the p-1 values that differ from the predecessor.
            int v = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p - 1)));
            if (v >= out[static_cast<std::size_t>(i - 1)]) ++v;
            out[static_cast<std::size_t>(i)] = v;
        } else {
            out[static_cast<std::size_t>(i)] =
                static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p)));
        }
    }
    return out;
}

struct LexiconBuilder {
    const CorpusConfig& config;
    std::vector<Word> words;
    std::unordered_set<std::string> raw_seen;
    std::unordered_set<std::string> collapsed_seen;
    bool clean = true;

    bool violates_best_effort(const std::vector<int>& cand) const {
        for (std::size_t i = 1; i < cand.size(); ++i) {
            if (cand[i] == cand[i - 1]) return true;
        }
        if (collapsed_seen.count(raw_key(collapse_runs(cand)))) return true;
        for (const Word& w : words) {
            if (is_prefix(w.phonemes, cand) || is_prefix(cand, w.phonemes)) return true;
        }
        return false;
    }

    /// Draws one new word of length `len` (0 = random length). Falls back to
    /// raw-distinctness only after the strict attempt budget, flipping the
    /// clean flag; throws CapacityError when even that fails.
    Word draw(rng::Rng& rng, int len) {
        constexpr int kStrictAttempts = 200;
        constexpr int kTotalAttempts = 4000;
        for (int attempt = 0; attempt < kTotalAttempts; ++attempt) {
            const int l = len > 0 ? len
                                  : static_cast<int>(rng.uniform_int(
                                        static_cast<std::uint64_t>(config.min_word_len),
                                        static_cast<std::uint64_t>(config.max_word_len)));
            const bool strict = attempt < kStrictAttempts;
            std::vector<int> cand = sample_phoneme_string(rng, config.p_phonemes, l, strict);
            if (raw_seen.count(raw_key(cand))) continue;
            if (strict && violates_best_effort(cand)) continue;
            if (!strict) clean = false;
            raw_seen.insert(raw_key(cand));
            collapsed_seen.insert(raw_key(collapse_runs(cand)));
            words.push_back(Word{std::move(cand)});
            return words.back();
        }
        std::ostringstream os;
        os << "lexicon: could not draw word " << (words.size() + 1) << " of " << config.lexicon_size
           << " (phoneme string space exhausted)";
        throw CapacityError(os.str());
    }
};

Eigen::VectorXf block_vector(rng::Rng& rng, int dims, int offset, int width) {
    Eigen::VectorXf v = Eigen::VectorXf::Zero(dims);
    for (int i = 0; i < width; ++i) v(offset + i) = static_cast<float>(rng.normal());
    return v;
}

int last_phoneme(const Language& lang, int word_id) {
    return lang.lexicon[static_cast<std::size_t>(word_id)].phonemes.back();
}
int first_phoneme(const Language& lang, int word_id) {
    return lang.lexicon[static_cast<std::size_t>(word_id)].phonemes.front();
}

/// Picks from `cands`, preferring words that do not start with `prev_last`.
int pick_word_avoiding(const Language& lang, rng::Rng& rng, const std::vector<int>& cands,
                       int prev_last) {
    std::vector<int> ok;
    for (int w : cands) {
        if (first_phoneme(lang, w) != prev_last) ok.push_back(w);
    }
    const std::vector<int>& pool = ok.empty() ? cands : ok;
    return pool[rng.uniform_int(pool.size())];
}

std::vector<int> topics_with_nouns(const Language& lang) {
    std::set<int> t(lang.noun_topic.begin(), lang.noun_topic.end());
    return {t.begin(), t.end()};
}

}  // namespace

std::string Language::word_text(int word_id) const {
    if (word_id < 0 || word_id >= static_cast<int>(lexicon.size())) {
        std::ostringstream os;
        os << "word id " << word_id << " outside lexicon of size " << lexicon.size();
        throw RangeError(os.str());
    }
    std::string out;
    for (int p : lexicon[static_cast<std::size_t>(word_id)].phonemes) out += syllable(p);
    return out;
}

std::string Language::words_text(const std::vector<int>& word_ids) const {
    std::string out;
    for (std::size_t i = 0; i < word_ids.size(); ++i) {
        if (i > 0) out += ' ';
        out += word_text(word_ids[i]);
    }
    return out;
}

int Language::parse_word_text(std::string_view text) const {
    if (text.empty() || text.size() % 2 != 0) {
        throw DataError("cannot parse word spelling '" + std::string(text) + "'");
    }
    std::vector<int> phonemes;
    for (std::size_t i = 0; i < text.size(); i += 2) {
        const char* c = std::strchr(kConsonants, text[i]);
        const char* v = std::strchr(kVowels, text[i + 1]);
        if (!c || !v || text[i] == '\0' || text[i + 1] == '\0') {
            throw DataError("cannot parse word spelling '" + std::string(text) + "'");
        }
        phonemes.push_back(static_cast<int>(c - kConsonants) +
                           kNumConsonants * static_cast<int>(v - kVowels));
    }
    const std::string key = raw_key(phonemes);
    for (std::size_t w = 0; w < lexicon.size(); ++w) {
        if (raw_key(lexicon[w].phonemes) == key) return static_cast<int>(w);
    }
    throw DataError("word '" + std::string(text) + "' is not in the lexicon");
}

Language build_language(const CorpusConfig& config) {
    config.validate();
    const std::uint64_t capacity =
        string_capacity(config.p_phonemes, config.min_word_len, config.max_word_len);
    if (static_cast<std::uint64_t>(config.lexicon_size) > capacity) {
        std::ostringstream os;
        os << "lexicon_size " << config.lexicon_size << " exceeds the " << capacity
           << " distinct phoneme strings of length " << config.min_word_len << ".."
           << config.max_word_len << " over " << config.p_phonemes << " phoneme(s)";
        throw CapacityError(os.str());
    }

    Language lang;
    lang.config = config;
    rng::Rng rng(rng::derive_seed(config.seed, "language"));

    lang.phoneme_bases = Eigen::MatrixXf::Zero(config.p_phonemes, config.feature_dims);
    for (int p = 0; p < config.p_phonemes; ++p) {
        for (int i = 0; i < config.semantic_dims; ++i) {
            lang.phoneme_bases(p, i) = static_cast<float>(rng.normal());
        }
    }

    // Lexicon: noun pairs, then verb pairs, then object-only leftovers.
    // Paired words share a phoneme length so minimal pairs are length-fair.
    LexiconBuilder builder{config, {}, {}, {}, true};
    const int n_pairs = config.lexicon_size / 4;
    for (int p = 0; p < 2 * n_pairs; ++p) {
        const int len = static_cast<int>(
            rng.uniform_int(static_cast<std::uint64_t>(config.min_word_len),
                            static_cast<std::uint64_t>(config.max_word_len)));
        builder.draw(rng, len);
        builder.draw(rng, len);
        const int base = static_cast<int>(builder.words.size()) - 2;
        if (p < n_pairs) {
            lang.noun_sg.push_back(base);
            lang.noun_pl.push_back(base + 1);
            lang.noun_topic.push_back(p % config.n_topics);
        } else {
            lang.verb_sg.push_back(base);
            lang.verb_pl.push_back(base + 1);
        }
    }
    while (static_cast<int>(builder.words.size()) < config.lexicon_size) {
        builder.draw(rng, 0);
        lang.extra_nouns.push_back(static_cast<int>(builder.words.size()) - 1);
        lang.extra_noun_topic.push_back(static_cast<int>(lang.extra_nouns.size() - 1) %
                                        config.n_topics);
    }
    lang.lexicon = std::move(builder.words);
    lang.clean_decodable = builder.clean;

    const int spk_off = config.semantic_dims;
    const int amb_off = config.semantic_dims + config.speaker_dims;
    lang.speaker_vecs.resize(config.n_speakers, config.feature_dims);
    for (int s = 0; s < config.n_speakers; ++s) {
        lang.speaker_vecs.row(s) =
            block_vector(rng, config.feature_dims, spk_off, config.speaker_dims).transpose();
    }
    lang.background_vecs.resize(config.n_backgrounds, config.feature_dims);
    for (int b = 0; b < config.n_backgrounds; ++b) {
        lang.background_vecs.row(b) =
            block_vector(rng, config.feature_dims, amb_off, config.ambient_dims()).transpose();
    }
    lang.prosody_basis = block_vector(rng, config.feature_dims, amb_off, config.ambient_dims());
    const float norm = lang.prosody_basis.norm();
    if (norm > 0) lang.prosody_basis /= norm;
    return lang;
}

Word sample_pseudo_word(const Language& lang, rng::Rng& rng, int length) {
    const CorpusConfig& config = lang.config;
    if (length != 0 && (length < config.min_word_len || length > config.max_word_len)) {
        std::ostringstream os;
        os << "pseudo-word length " << length << " outside [" << config.min_word_len << ", "
           << config.max_word_len << "]";
        throw RangeError(os.str());
    }
    std::unordered_set<std::string> raw;
    for (const Word& w : lang.lexicon) raw.insert(raw_key(w.phonemes));
    constexpr int kAttempts = 4000;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        const int l = length > 0 ? length
                                 : static_cast<int>(rng.uniform_int(
                                       static_cast<std::uint64_t>(config.min_word_len),
                                       static_cast<std::uint64_t>(config.max_word_len)));
        std::vector<int> cand =
            sample_phoneme_string(rng, config.p_phonemes, l, attempt < kAttempts / 2);
        if (!raw.count(raw_key(cand))) return Word{std::move(cand)};
    }
    throw CapacityError("pseudo-word: every candidate string already spells a lexicon word");
}

std::vector<int> sample_sentence(const Language& lang, rng::Rng& rng, int topic) {
    if (!lang.has_grammar()) {
        throw CapacityError("lexicon too small for grammar (needs at least 4 words)");
    }
    const std::vector<int> topics = topics_with_nouns(lang);
    if (topic < 0) {
        topic = topics[rng.uniform_int(topics.size())];
    } else if (std::find(topics.begin(), topics.end(), topic) == topics.end()) {
        std::ostringstream os;
        os << "topic " << topic << " has no nouns";
        throw CapacityError(os.str());
    }
    std::vector<int> pairs;
    for (std::size_t p = 0; p < lang.noun_topic.size(); ++p) {
        if (lang.noun_topic[p] == topic) pairs.push_back(static_cast<int>(p));
    }
    const int subj_pair = pairs[rng.uniform_int(pairs.size())];
    const bool plural = rng.uniform_int(2) == 1;
    const int subject = plural ? lang.noun_pl[static_cast<std::size_t>(subj_pair)]
                               : lang.noun_sg[static_cast<std::size_t>(subj_pair)];
    const std::size_t verb_pair = rng.uniform_int(lang.verb_sg.size());
    std::vector<int> verb_cands = {plural ? lang.verb_pl[verb_pair] : lang.verb_sg[verb_pair]};
    std::vector<int> sentence = {subject};
    sentence.push_back(pick_word_avoiding(lang, rng, verb_cands, last_phoneme(lang, subject)));
    if (rng.uniform_int(2) == 1) {
        std::vector<int> objects;
        for (std::size_t p = 0; p < lang.noun_topic.size(); ++p) {
            if (lang.noun_topic[p] != topic) continue;
            objects.push_back(lang.noun_sg[p]);
            objects.push_back(lang.noun_pl[p]);
        }
        for (std::size_t e = 0; e < lang.extra_nouns.size(); ++e) {
            if (lang.extra_noun_topic[e] == topic) objects.push_back(lang.extra_nouns[e]);
        }
        sentence.push_back(
            pick_word_avoiding(lang, rng, objects, last_phoneme(lang, sentence.back())));
    }
    return sentence;
}

AgreementPair make_agreement_pair(const Language& lang, rng::Rng& rng, int topic) {
    AgreementPair pair;
    pair.good = sample_sentence(lang, rng, topic);
    pair.verb_slot = 1;
    const int verb = pair.good[1];
    pair.bad = pair.good;
    for (std::size_t v = 0; v < lang.verb_sg.size(); ++v) {
        if (lang.verb_sg[v] == verb) {
            pair.bad[1] = lang.verb_pl[v];
            return pair;
        }
        if (lang.verb_pl[v] == verb) {
            pair.bad[1] = lang.verb_sg[v];
            return pair;
        }
    }
    throw DataError("sentence verb slot does not hold a verb");  // unreachable
}

TopicPair make_topic_pair(const Language& lang, rng::Rng& rng) {
    const std::vector<int> topics = topics_with_nouns(lang);
    if (topics.size() < 2) {
        throw CapacityError("topic pairs need at least two topics with nouns");
    }
    TopicPair pair;
    pair.topic = topics[rng.uniform_int(topics.size())];
    std::vector<int> others;
    for (int t : topics) {
        if (t != pair.topic) others.push_back(t);
    }
    pair.other_topic = others[rng.uniform_int(others.size())];
    pair.prompt = sample_sentence(lang, rng, pair.topic);
    pair.coherent = sample_sentence(lang, rng, pair.topic);
    const auto phoneme_count = [&lang](const std::vector<int>& ws) {
        std::size_t n = 0;
        for (int w : ws) n += lang.lexicon[static_cast<std::size_t>(w)].phonemes.size();
        return n;
    };
    // Prefer an off-topic continuation of matching length so the pair
    // differs in content, not duration.
    const std::size_t want = phoneme_count(pair.coherent);
    for (int attempt = 0; attempt < 16; ++attempt) {
        pair.incoherent = sample_sentence(lang, rng, pair.other_topic);
        if (phoneme_count(pair.incoherent) == want) break;
    }
    return pair;
}

namespace {

struct FactorTracks {
    std::vector<int> speaker;
    std::vector<int> background;
    std::vector<double> sentiment;
    std::vector<double> room;
};

std::vector<int> words_to_phonemes(const Language& lang, const std::vector<int>& words) {
    std::vector<int> phonemes;
    for (int w : words) {
        if (w < 0 || w >= static_cast<int>(lang.lexicon.size())) {
            std::ostringstream os;
            os << "word id " << w << " outside lexicon of size " << lang.lexicon.size();
            throw RangeError(os.str());
        }
        const Word& word = lang.lexicon[static_cast<std::size_t>(w)];
        phonemes.insert(phonemes.end(), word.phonemes.begin(), word.phonemes.end());
    }
    return phonemes;
}

/// Per-phoneme frame counts are a pure function of (seed, phoneme index), so
/// callers can price out prefixes without consuming any generator state.
int duration_at(const CorpusConfig& config, std::uint64_t seed, std::int64_t phoneme_index) {
    const int span = config.max_phoneme_frames - config.min_phoneme_frames + 1;
    const std::uint64_t h =
        rng::derive_seed(seed, "duration", static_cast<std::uint64_t>(phoneme_index));
    return config.min_phoneme_frames + static_cast<int>(h % static_cast<std::uint64_t>(span));
}

FeatureFrameSeq render_with_tracks(const Language& lang, const std::vector<int>& phonemes,
                                   const std::vector<int>& durations, const FactorTracks& tracks,
                                   std::uint64_t seed) {
    const CorpusConfig& config = lang.config;
    std::int64_t total = 0;
    for (int d : durations) total += d;
    FeatureFrameSeq seq;
    seq.frame_rate_hz = config.frame_rate_hz;
    Eigen::MatrixXf mix(total, config.feature_dims);
    const int amb_off = config.semantic_dims + config.speaker_dims;
    std::int64_t t = 0;
    for (std::size_t s = 0; s < phonemes.size(); ++s) {
        const Eigen::RowVectorXf base = lang.phoneme_bases.row(phonemes[s]);
        for (int f = 0; f < durations[s]; ++f, ++t) {
            mix.row(t) = base;
            mix.row(t) += static_cast<float>(config.speaker_scale) *
                          lang.speaker_vecs.row(tracks.speaker[static_cast<std::size_t>(t)]);
            mix.row(t) += static_cast<float>(tracks.sentiment[static_cast<std::size_t>(t)] *
                                             config.sentiment_scale) *
                          lang.prosody_basis.transpose();
            mix.row(t) += static_cast<float>(config.background_scale) *
                          lang.background_vecs.row(tracks.background[static_cast<std::size_t>(t)]);
            rng::Rng jitter(rng::derive_seed(seed, "jitter", static_cast<std::uint64_t>(t)));
            for (int a = 0; a < config.ambient_dims(); ++a) {
                mix(t, amb_off + a) +=
                    static_cast<float>(config.jitter_scale * jitter.normal());
            }
        }
    }
    // One-pole smoothing over the speaker and ambient blocks; the coefficient
    // is a per-frame track so a factor switch can change the room
    // mid-utterance. The semantic block stays crisp: the room is strictly
    // paralinguistic, so content never depends on where it was spoken.
    seq.frames = mix;
    const int tail = config.feature_dims - config.semantic_dims;
    for (std::int64_t i = 1; i < total; ++i) {
        const float a = static_cast<float>(tracks.room[static_cast<std::size_t>(i)]);
        seq.frames.row(i).tail(tail) =
            (1.0f - a) * mix.row(i).tail(tail) + a * seq.frames.row(i - 1).tail(tail);
    }
    return seq;
}

}  // namespace

Utterance render_utterance(const Language& lang, const std::vector<int>& words, int speaker_id,
                           double sentiment, int background_id, double room_coeff,
                           std::uint64_t seed) {
    if (words.empty()) throw DataError("render: empty word sequence");
    Utterance utt = render_phonemes(lang, words_to_phonemes(lang, words), speaker_id, sentiment,
                                    background_id, room_coeff, seed);
    utt.words = words;
    return utt;
}

Utterance render_phonemes(const Language& lang, const std::vector<int>& phonemes, int speaker_id,
                          double sentiment, int background_id, double room_coeff,
                          std::uint64_t seed) {
    const CorpusConfig& config = lang.config;
    if (phonemes.empty()) throw DataError("render: empty phoneme sequence");
    for (std::size_t j = 0; j < phonemes.size(); ++j) {
        if (phonemes[j] < 0 || phonemes[j] >= config.p_phonemes) {
            std::ostringstream os;
            os << "render: phoneme " << phonemes[j] << " at position " << j << " outside [0, "
               << config.p_phonemes << ")";
            throw RangeError(os.str());
        }
    }
    if (speaker_id < 0 || speaker_id >= config.n_speakers) {
        std::ostringstream os;
        os << "render: speaker_id " << speaker_id << " outside [0, " << config.n_speakers << ")";
        throw RangeError(os.str());
    }
    if (background_id < 0 || background_id >= config.n_backgrounds) {
        std::ostringstream os;
        os << "render: background_id " << background_id << " outside [0, " << config.n_backgrounds
           << ")";
        throw RangeError(os.str());
    }
    if (!(sentiment >= -1.0 && sentiment <= 1.0)) {
        throw RangeError("render: sentiment outside [-1, 1]");
    }
    if (!(room_coeff >= 0.0 && room_coeff < 1.0)) {
        throw RangeError("render: room_coeff outside [0, 1)");
    }
    Utterance utt;
    utt.phonemes = phonemes;
    utt.durations.resize(utt.phonemes.size());
    std::int64_t total = 0;
    for (std::size_t j = 0; j < utt.phonemes.size(); ++j) {
        utt.durations[j] = duration_at(config, seed, static_cast<std::int64_t>(j));
        total += utt.durations[j];
    }
    utt.speaker_id = speaker_id;
    utt.sentiment = sentiment;
    utt.background_id = background_id;
    utt.room_coeff = room_coeff;
    utt.render_seed = seed;
    FactorTracks tracks;
    tracks.speaker.assign(static_cast<std::size_t>(total), speaker_id);
    tracks.background.assign(static_cast<std::size_t>(total), background_id);
    tracks.sentiment.assign(static_cast<std::size_t>(total), sentiment);
    tracks.room.assign(static_cast<std::size_t>(total), room_coeff);
    utt.frames = render_with_tracks(lang, utt.phonemes, utt.durations, tracks, seed);
    return utt;
}

std::string_view factor_axis_name(FactorAxis axis) {
    switch (axis) {
        case FactorAxis::kSpeaker: return "speaker";
        case FactorAxis::kSentiment: return "sentiment";
        case FactorAxis::kBackground: return "background";
        case FactorAxis::kRoom: return "room";
    }
    return "?";
}

Utterance make_consistency_negative(const Language& lang, const Utterance& utt, FactorAxis axis,
                                    int switch_frame, std::uint64_t seed) {
    const CorpusConfig& config = lang.config;
    const int total = utt.n_frames();
    if (switch_frame < 1 || switch_frame >= total) {
        std::ostringstream os;
        os << "switch_frame " << switch_frame << " outside [1, " << total << ")";
        throw RangeError(os.str());
    }
    rng::Rng rng(rng::derive_seed(seed, "negative"));
    FactorTracks tracks;
    tracks.speaker.assign(static_cast<std::size_t>(total), utt.speaker_id);
    tracks.background.assign(static_cast<std::size_t>(total), utt.background_id);
    tracks.sentiment.assign(static_cast<std::size_t>(total), utt.sentiment);
    tracks.room.assign(static_cast<std::size_t>(total), utt.room_coeff);

    const auto pick_other_int = [&rng](int current, int count, std::string_view what) {
        std::vector<int> cands;
        for (int v = 0; v < count; ++v) {
            if (v != current) cands.push_back(v);
        }
        if (cands.empty()) {
            throw CapacityError("consistency negative: no alternative " + std::string(what) +
                                " value exists");
        }
        return cands[rng.uniform_int(cands.size())];
    };

    std::ostringstream tag;
    tag << utt.id << "#neg-" << factor_axis_name(axis) << "@" << switch_frame;
    switch (axis) {
        case FactorAxis::kSpeaker: {
            const int alt = pick_other_int(utt.speaker_id, config.n_speakers, "speaker");
            std::fill(tracks.speaker.begin() + switch_frame, tracks.speaker.end(), alt);
            break;
        }
        case FactorAxis::kBackground: {
            const int alt = pick_other_int(utt.background_id, config.n_backgrounds, "background");
            std::fill(tracks.background.begin() + switch_frame, tracks.background.end(), alt);
            break;
        }
        case FactorAxis::kSentiment: {
            std::vector<double> cands;
            for (int l = 0; l < config.n_sentiments; ++l) {
                const double v = lang.sentiment_value(l);
                if (v != utt.sentiment) cands.push_back(v);
            }
            if (cands.empty()) {
                throw CapacityError(
                    "consistency negative: no alternative sentiment value exists");
            }
            const double alt = cands[rng.uniform_int(cands.size())];
            std::fill(tracks.sentiment.begin() + switch_frame, tracks.sentiment.end(), alt);
            break;
        }
        case FactorAxis::kRoom: {
            std::vector<double> cands;
            for (double v : config.room_values) {
                if (v != utt.room_coeff) cands.push_back(v);
            }
            if (cands.empty()) {
                throw CapacityError("consistency negative: no alternative room value exists");
            }
            const double alt = cands[rng.uniform_int(cands.size())];
            std::fill(tracks.room.begin() + switch_frame, tracks.room.end(), alt);
            break;
        }
    }
    Utterance neg = utt;
    neg.id = tag.str();
    neg.frames = render_with_tracks(lang, utt.phonemes, utt.durations, tracks, utt.render_seed);
    return neg;
}

namespace {

std::string utterance_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "utt%06d", index);
    return buf;
}

std::string split_of(const CorpusConfig& config, const std::string& id) {
    const std::uint64_t h = rng::derive_seed(config.seed, id, 0);
    const double frac = static_cast<double>(h >> 11) * 0x1.0p-53;
    return frac < config.train_fraction ? "train" : "heldout";
}

json record_to_json(const UtteranceRecord& rec) {
    json j;
    j["id"] = rec.id;
    j["words"] = rec.words;
    j["phonemes"] = rec.phonemes;
    j["durations"] = rec.durations;
    j["speaker_id"] = rec.speaker_id;
    j["sentiment"] = rec.sentiment;
    j["background_id"] = rec.background_id;
    j["room_coeff"] = rec.room_coeff;
    j["render_seed"] = rec.render_seed;
    j["frames_path"] = rec.frames_path;
    j["n_frames"] = rec.n_frames;
    j["split"] = rec.split;
    return j;
}

UtteranceRecord record_from_json(const json& j) {
    UtteranceRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.words = j.at("words").get<std::vector<int>>();
    rec.phonemes = j.at("phonemes").get<std::vector<int>>();
    rec.durations = j.at("durations").get<std::vector<int>>();
    rec.speaker_id = j.at("speaker_id").get<int>();
    rec.sentiment = j.at("sentiment").get<double>();
    rec.background_id = j.at("background_id").get<int>();
    rec.room_coeff = j.at("room_coeff").get<double>();
    rec.render_seed = j.at("render_seed").get<std::uint64_t>();
    rec.frames_path = j.at("frames_path").get<std::string>();
    rec.n_frames = j.at("n_frames").get<int>();
    rec.split = j.at("split").get<std::string>();
    return rec;
}

}  // namespace

std::string corpus_config_to_json(const CorpusConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["n_utterances"] = c.n_utterances;
    j["p_phonemes"] = c.p_phonemes;
    j["feature_dims"] = c.feature_dims;
    j["semantic_dims"] = c.semantic_dims;
    j["speaker_dims"] = c.speaker_dims;
    j["lexicon_size"] = c.lexicon_size;
    j["min_word_len"] = c.min_word_len;
    j["max_word_len"] = c.max_word_len;
    j["n_topics"] = c.n_topics;
    j["n_speakers"] = c.n_speakers;
    j["n_sentiments"] = c.n_sentiments;
    j["n_backgrounds"] = c.n_backgrounds;
    j["room_values"] = c.room_values;
    j["speaker_scale"] = c.speaker_scale;
    j["sentiment_scale"] = c.sentiment_scale;
    j["background_scale"] = c.background_scale;
    j["jitter_scale"] = c.jitter_scale;
    j["frame_rate_hz"] = c.frame_rate_hz;
    j["min_frames"] = c.min_frames;
    j["max_frames"] = c.max_frames;
    j["min_phoneme_frames"] = c.min_phoneme_frames;
    j["max_phoneme_frames"] = c.max_phoneme_frames;
    j["train_fraction"] = c.train_fraction;
    return j.dump();
}

CorpusConfig corpus_config_from_json(const std::string& json_text) {
    try {
        const json j = json::parse(json_text);
        CorpusConfig c;
        j.at("seed").get_to(c.seed);
        j.at("n_utterances").get_to(c.n_utterances);
        j.at("p_phonemes").get_to(c.p_phonemes);
        j.at("feature_dims").get_to(c.feature_dims);
        j.at("semantic_dims").get_to(c.semantic_dims);
        j.at("speaker_dims").get_to(c.speaker_dims);
        j.at("lexicon_size").get_to(c.lexicon_size);
        j.at("min_word_len").get_to(c.min_word_len);
        j.at("max_word_len").get_to(c.max_word_len);
        j.at("n_topics").get_to(c.n_topics);
        j.at("n_speakers").get_to(c.n_speakers);
        j.at("n_sentiments").get_to(c.n_sentiments);
        j.at("n_backgrounds").get_to(c.n_backgrounds);
        j.at("room_values").get_to(c.room_values);
        j.at("speaker_scale").get_to(c.speaker_scale);
        j.at("sentiment_scale").get_to(c.sentiment_scale);
        j.at("background_scale").get_to(c.background_scale);
        j.at("jitter_scale").get_to(c.jitter_scale);
        j.at("frame_rate_hz").get_to(c.frame_rate_hz);
        j.at("min_frames").get_to(c.min_frames);
        j.at("max_frames").get_to(c.max_frames);
        j.at("min_phoneme_frames").get_to(c.min_phoneme_frames);
        j.at("max_phoneme_frames").get_to(c.max_phoneme_frames);
        j.at("train_fraction").get_to(c.train_fraction);
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("corpus config json: ") + e.what());
    }
}

std::vector<const UtteranceRecord*> Corpus::split_records(std::string_view split) const {
    std::vector<const UtteranceRecord*> out;
    for (const UtteranceRecord& r : records) {
        if (r.split == split) out.push_back(&r);
    }
    return out;
}

Corpus gen_corpus(const CorpusConfig& config, const std::string& out_dir) {
    const Language lang = build_language(config);
    ensure_dir(out_dir);
    ensure_dir(out_dir + "/frames");

    Corpus corpus;
    corpus.config = config;
    corpus.root = out_dir;

    std::ostringstream index;
    {
        json header;
        header["kind"] = "slm-corpus-index";
        header["version"] = 1;
        header["config"] = json::parse(corpus_config_to_json(config));
        index << header.dump() << '\n';
    }
    for (int i = 0; i < config.n_utterances; ++i) {
        rng::Rng rng(rng::derive_seed(config.seed, "utterance", static_cast<std::uint64_t>(i)));
        const std::uint64_t render_seed =
            rng::derive_seed(config.seed, "render", static_cast<std::uint64_t>(i));
        const int speaker = static_cast<int>(rng.uniform_int(config.n_speakers));
        const int sent_level = static_cast<int>(rng.uniform_int(config.n_sentiments));
        const int background = static_cast<int>(rng.uniform_int(config.n_backgrounds));
        const double room = config.room_values[rng.uniform_int(config.room_values.size())];
        const int target = static_cast<int>(
            rng.uniform_int(static_cast<std::uint64_t>(config.min_frames),
                            static_cast<std::uint64_t>(config.max_frames)));

        // Append topic-coherent sentences until the target length is met;
        // a word that would overflow max_frames ends the utterance.
        std::vector<int> words;
        std::int64_t phoneme_index = 0;
        std::int64_t frames_used = 0;
        const std::vector<int> topics = topics_with_nouns(lang);
        const int utt_topic = topics[rng.uniform_int(topics.size())];
        bool full = false;
        while (!full && frames_used < target) {
            std::vector<int> sentence = sample_sentence(lang, rng, utt_topic);
            if (!words.empty()) {
                for (int retry = 0; retry < 8; ++retry) {
                    if (first_phoneme(lang, sentence.front()) != last_phoneme(lang, words.back())) {
                        break;
                    }
                    sentence = sample_sentence(lang, rng, utt_topic);
                }
            }
            for (int w : sentence) {
                const Word& word = lang.lexicon[static_cast<std::size_t>(w)];
                std::int64_t word_frames = 0;
                for (std::size_t p = 0; p < word.phonemes.size(); ++p) {
                    word_frames += duration_at(config, render_seed,
                                               phoneme_index + static_cast<std::int64_t>(p));
                }
                if (frames_used + word_frames > config.max_frames) {
                    full = true;
                    break;
                }
                words.push_back(w);
                phoneme_index += static_cast<std::int64_t>(word.phonemes.size());
                frames_used += word_frames;
                if (frames_used >= target) break;
            }
        }

        Utterance utt = render_utterance(lang, words, speaker,
                                         lang.sentiment_value(sent_level), background, room,
                                         render_seed);
        utt.id = utterance_id(i);

        UtteranceRecord rec;
        rec.id = utt.id;
        rec.words = utt.words;
        rec.phonemes = utt.phonemes;
        rec.durations = utt.durations;
        rec.speaker_id = utt.speaker_id;
        rec.sentiment = utt.sentiment;
        rec.background_id = utt.background_id;
        rec.room_coeff = utt.room_coeff;
        rec.render_seed = utt.render_seed;
        rec.frames_path = "frames/" + utt.id + ".sfr";
        rec.n_frames = utt.n_frames();
        rec.split = split_of(config, utt.id);
        write_frames(out_dir + "/" + rec.frames_path, utt.frames);
        index << record_to_json(rec).dump() << '\n';
        corpus.records.push_back(std::move(rec));
    }
    write_file_atomic(out_dir + "/index.jsonl", index.str());
    return corpus;
}

Corpus load_corpus(const std::string& dir) {
    const std::string index_path = dir + "/index.jsonl";
    std::ifstream in(index_path, std::ios::binary);
    if (!in) throw IoError("cannot open " + index_path);
    Corpus corpus;
    corpus.root = dir;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            std::ostringstream os;
            os << index_path << ":" << line_no << ": " << e.what();
            throw FormatError(os.str());
        }
        if (line_no == 1) {
            if (j.value("kind", "") != "slm-corpus-index") {
                throw FormatError(index_path + ": first line is not a corpus index header");
            }
            corpus.config = corpus_config_from_json(j.at("config").dump());
            continue;
        }
        try {
            corpus.records.push_back(record_from_json(j));
        } catch (const json::exception& e) {
            std::ostringstream os;
            os << index_path << ":" << line_no << ": " << e.what();
            throw FormatError(os.str());
        }
    }
    if (line_no == 0) throw FormatError(index_path + ": empty index");
    return corpus;
}

FeatureFrameSeq load_record_frames(const Corpus& corpus, const UtteranceRecord& rec) {
    FeatureFrameSeq seq = read_frames(corpus.root + "/" + rec.frames_path);
    if (seq.n_frames() != rec.n_frames || seq.dims() != corpus.config.feature_dims) {
        throw DataError("frames file " + rec.frames_path + " does not match its index record");
    }
    seq.frame_rate_hz = corpus.config.frame_rate_hz;
    return seq;
}

Utterance utterance_from_record(const Language& lang, const UtteranceRecord& rec) {
    Utterance utt = render_utterance(lang, rec.words, rec.speaker_id, rec.sentiment,
                                     rec.background_id, rec.room_coeff, rec.render_seed);
    utt.id = rec.id;
    if (utt.phonemes != rec.phonemes || utt.durations != rec.durations ||
        utt.n_frames() != rec.n_frames) {
        throw DataError("record " + rec.id + " is inconsistent with the renderer");
    }
    return utt;
}

}  // namespace slm::corpus
