#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "slm/frames.hpp"
#include "slm/rng.hpp"

namespace slm::corpus {

/// Shape of the synthetic speech world. The feature space of width
/// `feature_dims` is split into three blocks: phonetic content lives in the
/// leading `semantic_dims` coordinates, speaker identity in the next
/// `speaker_dims`, and everything else (prosody, background, jitter) in the
/// remaining "ambient" coordinates.
struct CorpusConfig {
    std::uint64_t seed = 42;
    int n_utterances = 1000;

    int p_phonemes = 20;   // P
    int feature_dims = 16; // D
    int semantic_dims = 8;
    int speaker_dims = 4;

    int lexicon_size = 256;
    int min_word_len = 2;
    int max_word_len = 4;
    int n_topics = 8;

    int n_speakers = 64;
    int n_sentiments = 5;  // sentiment levels, values evenly spaced in [-1, 1]
    int n_backgrounds = 8;
    std::vector<double> room_values = {0.0, 0.5};

    double speaker_scale = 0.8;
    double sentiment_scale = 0.4;
    double background_scale = 0.5;
    double jitter_scale = 0.15;

    double frame_rate_hz = 12.5;
    int min_frames = 24;
    int max_frames = 250;
    int min_phoneme_frames = 2;
    int max_phoneme_frames = 4;

    double train_fraction = 0.9;

    int ambient_dims() const { return feature_dims - semantic_dims - speaker_dims; }
    void validate() const;
};

struct Word {
    std::vector<int> phonemes;
};

/// Grammatical categories. Nouns and verbs come in singular/plural pairs of
/// equal phoneme length; leftover lexicon entries become object-only nouns.
struct Language {
    CorpusConfig config;
    Eigen::MatrixXf phoneme_bases;  // P x D, ambient/speaker blocks zero
    std::vector<Word> lexicon;
    bool clean_decodable = false;  // all best-effort lexicon constraints held

    std::vector<int> noun_sg, noun_pl;  // paired by index
    std::vector<int> verb_sg, verb_pl;  // paired by index
    std::vector<int> extra_nouns;       // object-only
    std::vector<int> noun_topic;        // topic per noun pair
    std::vector<int> extra_noun_topic;

    Eigen::MatrixXf speaker_vecs;     // n_speakers x D, speaker block only
    Eigen::MatrixXf background_vecs;  // n_backgrounds x D, ambient block only
    Eigen::VectorXf prosody_basis;    // D, ambient block only

    double sentiment_value(int level) const;
    bool has_grammar() const { return !noun_sg.empty() && !verb_sg.empty(); }

    /// Spelled form, one syllable per phoneme ("ka.ri.so").
    std::string word_text(int word_id) const;
    std::string words_text(const std::vector<int>& word_ids) const;
    /// Inverse of word_text; throws DataError for an unknown spelling.
    int parse_word_text(std::string_view text) const;
};

/// Deterministic language construction. Throws CapacityError when the
/// requested lexicon cannot exist (more words than distinct phoneme strings
/// of the allowed lengths).
Language build_language(const CorpusConfig& config);

/// A phoneme string of lexicon-like shape that spells no lexicon word.
Word sample_pseudo_word(const Language& lang, rng::Rng& rng, int length = 0);

/// Subject-verb(-object) sentence; all content words share `topic`
/// (-1 picks a topic at random). Adjacent equal phonemes across word
/// boundaries are avoided best-effort.
std::vector<int> sample_sentence(const Language& lang, rng::Rng& rng, int topic = -1);

struct AgreementPair {
    std::vector<int> good, bad;  // differ in exactly the verb slot
    int verb_slot = 0;
};
AgreementPair make_agreement_pair(const Language& lang, rng::Rng& rng, int topic = -1);

struct TopicPair {
    std::vector<int> prompt;      // first sentence
    std::vector<int> coherent;    // same-topic continuation
    std::vector<int> incoherent;  // other-topic continuation
    int topic = 0, other_topic = 0;
};
TopicPair make_topic_pair(const Language& lang, rng::Rng& rng);

struct Utterance {
    std::string id;
    std::vector<int> words;
    std::vector<int> phonemes;
    std::vector<int> durations;  // frames per phoneme
    int speaker_id = 0;
    double sentiment = 0.0;  // value in [-1, 1]
    int background_id = 0;
    double room_coeff = 0.0;
    std::uint64_t render_seed = 0;
    FeatureFrameSeq frames;

    int n_frames() const { return static_cast<int>(frames.n_frames()); }
};

/// Renders words to feature frames: per-frame factor mixture followed by
/// one-pole smoothing with coefficient `room_coeff`
/// (out[0] = in[0]; out[t] = (1-a)*in[t] + a*out[t-1]).
Utterance render_utterance(const Language& lang, const std::vector<int>& words, int speaker_id,
                           double sentiment, int background_id, double room_coeff,
                           std::uint64_t seed);

/// Same rendering for a raw phoneme sequence (no lexicon lookup); the
/// result's `words` stays empty. Lets callers voice out-of-lexicon items
/// such as pseudo-words.
Utterance render_phonemes(const Language& lang, const std::vector<int>& phonemes, int speaker_id,
                          double sentiment, int background_id, double room_coeff,
                          std::uint64_t seed);

enum class FactorAxis { kSpeaker, kSentiment, kBackground, kRoom };
std::string_view factor_axis_name(FactorAxis axis);

/// Re-renders `utt` with one factor switched to a different value from
/// `switch_frame` on. Everything else (durations, other factors, jitter
/// realization) is bit-identical to the input's rendering.
Utterance make_consistency_negative(const Language& lang, const Utterance& utt, FactorAxis axis,
                                    int switch_frame, std::uint64_t seed);

struct UtteranceRecord {
    std::string id;
    std::vector<int> words;
    std::vector<int> phonemes;
    std::vector<int> durations;
    int speaker_id = 0;
    double sentiment = 0.0;
    int background_id = 0;
    double room_coeff = 0.0;
    std::uint64_t render_seed = 0;
    std::string frames_path;  // relative to the corpus root
    int n_frames = 0;
    std::string split;  // "train" | "heldout"
};

struct Corpus {
    CorpusConfig config;
    std::string root;
    std::vector<UtteranceRecord> records;

    std::vector<const UtteranceRecord*> split_records(std::string_view split) const;
};

/// Generates and persists a corpus: frames/<id>.sfr plus index.jsonl (a
/// header line with the config echo, then one record per line). Identical
/// config produces byte-identical output.
Corpus gen_corpus(const CorpusConfig& config, const std::string& out_dir);

Corpus load_corpus(const std::string& dir);
FeatureFrameSeq load_record_frames(const Corpus& corpus, const UtteranceRecord& rec);
/// Reconstructs the full utterance (frames re-rendered from the record).
Utterance utterance_from_record(const Language& lang, const UtteranceRecord& rec);

std::string corpus_config_to_json(const CorpusConfig& config);
CorpusConfig corpus_config_from_json(const std::string& json_text);

}  // namespace slm::corpus
