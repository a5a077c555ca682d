#include "slm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "slm/digest.hpp"
#include "slm/error.hpp"
#include "slm/io.hpp"
#include "slm/kahan.hpp"
#include "slm/rng.hpp"

namespace slm::eval {

using nlohmann::json;

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

std::string_view task_name(Task task) {
    switch (task) {
        case Task::kSpeaker: return "speaker";
        case Task::kSentiment: return "sentiment";
        case Task::kBackground: return "background";
        case Task::kRoom: return "room";
        case Task::kLexical: return "lexical";
        case Task::kSyntax: return "syntax";
        case Task::kTopic: return "topic";
    }
    return "?";
}

Task task_from_name(std::string_view name) {
    for (Task t : all_tasks()) {
        if (task_name(t) == name) return t;
    }
    throw ConfigError("eval: unknown task '" + std::string(name) + "'");
}

const std::vector<Task>& all_tasks() {
    static const std::vector<Task> tasks = {Task::kSpeaker, Task::kSentiment, Task::kBackground,
                                            Task::kRoom,    Task::kLexical,   Task::kSyntax,
                                            Task::kTopic};
    return tasks;
}

bool is_consistency_task(Task task) {
    switch (task) {
        case Task::kSpeaker:
        case Task::kSentiment:
        case Task::kBackground:
        case Task::kRoom: return true;
        default: return false;
    }
}

namespace {

corpus::FactorAxis axis_for(Task task) {
    switch (task) {
        case Task::kSpeaker: return corpus::FactorAxis::kSpeaker;
        case Task::kSentiment: return corpus::FactorAxis::kSentiment;
        case Task::kBackground: return corpus::FactorAxis::kBackground;
        case Task::kRoom: return corpus::FactorAxis::kRoom;
        default: throw ConfigError("eval: task has no factor axis");
    }
}

/// Switch frames live in the middle third, clamped to the valid [1, T)
/// range; [lo, hi) is never empty for T >= 2.
int switch_lo(int n_frames) { return std::max(1, n_frames / 3); }
int switch_hi(int n_frames) { return std::max(switch_lo(n_frames) + 1, 2 * n_frames / 3); }

std::uint64_t axis_alternatives(const corpus::CorpusConfig& config, Task task) {
    switch (task) {
        case Task::kSpeaker: return static_cast<std::uint64_t>(std::max(0, config.n_speakers - 1));
        case Task::kSentiment:
            return static_cast<std::uint64_t>(std::max(0, config.n_sentiments - 1));
        case Task::kBackground:
            return static_cast<std::uint64_t>(std::max(0, config.n_backgrounds - 1));
        case Task::kRoom:
            return config.room_values.empty()
                       ? 0
                       : static_cast<std::uint64_t>(config.room_values.size() - 1);
        default: return 0;
    }
}

tokens::InterleavedSeq encode_to_ids(const rvq::RvqCodec& codec,
                                     const tokens::UnifiedVocab& vocab,
                                     const FeatureFrameSeq& frames) {
    return tokens::interleave(vocab, rvq::encode(codec, frames));
}

struct FactorDraw {
    int speaker, background;
    double sentiment, room;
};

FactorDraw draw_factors(const corpus::Language& lang, rng::Rng& rng) {
    const corpus::CorpusConfig& c = lang.config;
    FactorDraw f;
    f.speaker = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c.n_speakers)));
    f.sentiment = lang.sentiment_value(
        static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c.n_sentiments))));
    f.background = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c.n_backgrounds)));
    f.room = c.room_values[rng.uniform_int(c.room_values.size())];
    return f;
}

/// Fresh eval renders obey the same length cap as corpus utterances, so any
/// model sized for the corpus can score them.
bool render_fits(const corpus::Language& lang, const corpus::Utterance& utt) {
    return utt.n_frames() <= lang.config.max_frames;
}

[[noreturn]] void render_too_long(const char* task) {
    throw CapacityError(std::string("eval: every ") + task +
                        " draw rendered longer than corpus max_frames; raise max_frames or "
                        "shorten sentences");
}

std::vector<EvalPair> build_consistency_pairs(const corpus::Corpus& corpus,
                                              const corpus::Language& lang,
                                              const rvq::RvqCodec& codec,
                                              const tokens::UnifiedVocab& vocab, Task task, int n,
                                              std::uint64_t seed) {
    std::vector<const corpus::UtteranceRecord*> records = corpus.split_records("heldout");
    if (records.empty()) {
        records.reserve(corpus.records.size());
        for (const corpus::UtteranceRecord& rec : corpus.records) records.push_back(&rec);
    }
    std::vector<const corpus::UtteranceRecord*> usable;
    for (const corpus::UtteranceRecord* rec : records) {
        if (rec->n_frames >= 2) usable.push_back(rec);
    }
    const std::uint64_t alts = axis_alternatives(lang.config, task);
    constexpr std::uint64_t kCap = 1ULL << 62;
    std::uint64_t combos = 0;
    for (const corpus::UtteranceRecord* rec : usable) {
        const std::uint64_t window =
            static_cast<std::uint64_t>(switch_hi(rec->n_frames) - switch_lo(rec->n_frames));
        if (alts != 0 && window > (kCap - combos) / alts) {
            combos = kCap;
            break;
        }
        combos += alts * window;
    }
    if (static_cast<std::uint64_t>(n) > combos) {
        std::ostringstream os;
        os << "eval: task " << task_name(task) << " offers " << combos
           << " distinct switch combinations, requested " << n;
        throw CapacityError(os.str());
    }

    std::vector<EvalPair> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        rng::Rng rng(rng::derive_seed(seed, task_name(task), static_cast<std::uint64_t>(i)));
        const corpus::UtteranceRecord* rec = usable[rng.uniform_int(usable.size())];
        const corpus::Utterance utt = corpus::utterance_from_record(lang, *rec);
        const int lo = switch_lo(utt.n_frames());
        const int hi = switch_hi(utt.n_frames());
        const int switch_frame =
            lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo)));
        const corpus::Utterance neg = corpus::make_consistency_negative(
            lang, utt, axis_for(task), switch_frame, rng.next_u64());

        EvalPair p;
        p.task = task;
        p.pos_ids = encode_to_ids(codec, vocab, utt.frames);
        p.neg_ids = encode_to_ids(codec, vocab, neg.frames);
        p.pos_label = utt.id;
        p.neg_label = neg.id;
        p.switch_frame = switch_frame;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

std::vector<EvalPair> build_lexical_pairs(const corpus::Language& lang,
                                          const rvq::RvqCodec& codec,
                                          const tokens::UnifiedVocab& vocab, int n,
                                          std::uint64_t seed) {
    if (!lang.has_grammar()) {
        throw CapacityError("eval: lexical pairs need sentences to embed the pseudo-word in");
    }
    std::vector<EvalPair> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        rng::Rng rng(rng::derive_seed(seed, "lexical", static_cast<std::uint64_t>(i)));
        std::vector<int> words;
        std::size_t slot = 0;
        corpus::Word pseudo;
        FactorDraw f;
        std::uint64_t render_seed = 0;
        corpus::Utterance pos;
        bool fits = false;
        for (int attempt = 0; attempt < 64 && !fits; ++attempt) {
            words = corpus::sample_sentence(lang, rng);
            slot = rng.uniform_int(words.size());
            const corpus::Word& real = lang.lexicon[static_cast<std::size_t>(words[slot])];
            pseudo =
                corpus::sample_pseudo_word(lang, rng, static_cast<int>(real.phonemes.size()));
            f = draw_factors(lang, rng);
            render_seed = rng.next_u64();
            pos = corpus::render_utterance(lang, words, f.speaker, f.sentiment, f.background,
                                           f.room, render_seed);
            fits = render_fits(lang, pos);
        }
        if (!fits) render_too_long("lexical");
        // The pseudo-word shares the real word's phoneme count, so the
        // negative render has identical durations and fits whenever the
        // positive does.
        std::vector<int> neg_phonemes;
        neg_phonemes.reserve(pos.phonemes.size());
        for (std::size_t w = 0; w < words.size(); ++w) {
            const std::vector<int>& src =
                w == slot ? pseudo.phonemes
                          : lang.lexicon[static_cast<std::size_t>(words[w])].phonemes;
            neg_phonemes.insert(neg_phonemes.end(), src.begin(), src.end());
        }
        const corpus::Utterance neg = corpus::render_phonemes(
            lang, neg_phonemes, f.speaker, f.sentiment, f.background, f.room, render_seed);

        EvalPair p;
        p.task = Task::kLexical;
        p.pos_ids = encode_to_ids(codec, vocab, pos.frames);
        p.neg_ids = encode_to_ids(codec, vocab, neg.frames);
        p.pos_label = lang.words_text(words);
        p.neg_label = p.pos_label + "#pseudo@" + std::to_string(slot);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

std::vector<EvalPair> build_syntax_pairs(const corpus::Language& lang,
                                         const rvq::RvqCodec& codec,
                                         const tokens::UnifiedVocab& vocab, int n,
                                         std::uint64_t seed) {
    if (!lang.has_grammar()) {
        throw CapacityError("eval: syntax pairs need nouns and verbs in the lexicon");
    }
    std::vector<EvalPair> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        rng::Rng rng(rng::derive_seed(seed, "syntax", static_cast<std::uint64_t>(i)));
        corpus::AgreementPair ap;
        FactorDraw f;
        std::uint64_t render_seed = 0;
        corpus::Utterance pos;
        bool fits = false;
        for (int attempt = 0; attempt < 64 && !fits; ++attempt) {
            ap = corpus::make_agreement_pair(lang, rng);
            f = draw_factors(lang, rng);
            render_seed = rng.next_u64();
            pos = corpus::render_utterance(lang, ap.good, f.speaker, f.sentiment, f.background,
                                           f.room, render_seed);
            fits = render_fits(lang, pos);
        }
        if (!fits) render_too_long("syntax");
        // Paired word forms share a phoneme count, so flipping the verb
        // keeps every duration and the bad render fits whenever good does.
        const corpus::Utterance neg = corpus::render_utterance(
            lang, ap.bad, f.speaker, f.sentiment, f.background, f.room, render_seed);

        EvalPair p;
        p.task = Task::kSyntax;
        p.pos_ids = encode_to_ids(codec, vocab, pos.frames);
        p.neg_ids = encode_to_ids(codec, vocab, neg.frames);
        p.pos_label = lang.words_text(ap.good);
        p.neg_label = lang.words_text(ap.bad);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

std::vector<EvalPair> build_topic_pairs(const corpus::Language& lang, const rvq::RvqCodec& codec,
                                        const tokens::UnifiedVocab& vocab, int n,
                                        std::uint64_t seed) {
    const auto phoneme_count = [&lang](const std::vector<int>& ws) {
        std::size_t total = 0;
        for (int w : ws) total += lang.lexicon[static_cast<std::size_t>(w)].phonemes.size();
        return total;
    };
    std::vector<EvalPair> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        rng::Rng rng(rng::derive_seed(seed, "topic", static_cast<std::uint64_t>(i)));
        corpus::TopicPair tp;
        std::vector<int> pos_words;
        FactorDraw f;
        std::uint64_t render_seed = 0;
        corpus::Utterance pos;
        bool matched = false;
        for (int attempt = 0; attempt < 64 && !matched; ++attempt) {
            tp = corpus::make_topic_pair(lang, rng);
            if (phoneme_count(tp.coherent) != phoneme_count(tp.incoherent)) continue;
            pos_words = tp.prompt;
            pos_words.insert(pos_words.end(), tp.coherent.begin(), tp.coherent.end());
            f = draw_factors(lang, rng);
            render_seed = rng.next_u64();
            pos = corpus::render_utterance(lang, pos_words, f.speaker, f.sentiment, f.background,
                                           f.room, render_seed);
            matched = render_fits(lang, pos);
        }
        if (!matched) {
            throw CapacityError(
                "eval: could not draw a length-matched off-topic continuation that fits "
                "max_frames; topics are too sparse or sentences too long");
        }
        std::vector<int> neg_words = tp.prompt;
        neg_words.insert(neg_words.end(), tp.incoherent.begin(), tp.incoherent.end());
        // The matched continuation shares the coherent one's phoneme count,
        // so the negative render fits whenever the positive does.
        const corpus::Utterance neg = corpus::render_utterance(
            lang, neg_words, f.speaker, f.sentiment, f.background, f.room, render_seed);

        // Durations are a pure function of (seed, phoneme index), so the
        // shared prompt occupies the same frames in both renderings.
        const std::size_t prompt_phonemes = phoneme_count(tp.prompt);
        int prompt_frames = 0;
        for (std::size_t j = 0; j < prompt_phonemes; ++j) prompt_frames += pos.durations[j];

        EvalPair p;
        p.task = Task::kTopic;
        p.pos_ids = encode_to_ids(codec, vocab, pos.frames);
        p.neg_ids = encode_to_ids(codec, vocab, neg.frames);
        p.pos_label = lang.words_text(pos_words);
        p.neg_label = lang.words_text(neg_words);
        p.prompt_token_count = 1 + vocab.q_levels * prompt_frames;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace

std::vector<EvalPair> build_pairs(const corpus::Corpus& corpus, const corpus::Language& lang,
                                  const rvq::RvqCodec& codec, const tokens::UnifiedVocab& vocab,
                                  Task task, int n, std::uint64_t seed) {
    if (n < 1) throw RangeError("eval: pair count must be >= 1");
    vocab.validate();
    codec.check_invariants();
    if (vocab.q_levels != codec.q_levels() || vocab.codebook_size != codec.codebook_size()) {
        std::ostringstream os;
        os << "eval: vocab (Q=" << vocab.q_levels << ", K=" << vocab.codebook_size
           << ") does not match codec (Q=" << codec.q_levels() << ", K=" << codec.codebook_size()
           << ")";
        throw LayoutError(os.str());
    }
    std::vector<EvalPair> pairs;
    switch (task) {
        case Task::kSpeaker:
        case Task::kSentiment:
        case Task::kBackground:
        case Task::kRoom:
            pairs = build_consistency_pairs(corpus, lang, codec, vocab, task, n, seed);
            break;
        case Task::kLexical: pairs = build_lexical_pairs(lang, codec, vocab, n, seed); break;
        case Task::kSyntax: pairs = build_syntax_pairs(lang, codec, vocab, n, seed); break;
        case Task::kTopic: pairs = build_topic_pairs(lang, codec, vocab, n, seed); break;
    }
    for (const EvalPair& p : pairs) {
        if (p.pos_ids.size() != p.neg_ids.size()) {
            throw DataError("eval: pair '" + p.pos_label + "' is not length-matched");
        }
    }
    return pairs;
}

double accuracy_from_margins(const std::vector<double>& margins) {
    if (margins.empty()) throw DataError("eval: no margins to score");
    double wins = 0.0;
    for (double m : margins) {
        if (m > 0.0) {
            wins += 1.0;
        } else if (m == 0.0) {
            wins += 0.5;
        }
    }
    return wins / static_cast<double>(margins.size());
}

EvalReport paired_accuracy(const lm::LmParams& params, const tokens::UnifiedVocab& vocab,
                           const std::vector<EvalPair>& pairs, MaskMode mask_mode) {
    if (pairs.empty()) throw DataError("eval: empty pair set");
    EvalReport report;
    report.mask_mode = mask_mode;
    report.model_digest = lm::params_digest(params);
    report.config_digest = sha256_hex(lm::lm_config_to_json(params.config));

    const auto task_slot = [&report](Task t) -> TaskReport& {
        for (TaskReport& tr : report.tasks) {
            if (tr.task == t) return tr;
        }
        report.tasks.emplace_back();
        report.tasks.back().task = t;
        return report.tasks.back();
    };

    for (const EvalPair& pair : pairs) {
        if (pair.pos_ids.size() != pair.neg_ids.size()) {
            throw DataError("eval: pair '" + pair.pos_label + "' is not length-matched");
        }
        const lm::ScoreResult pos =
            lm::score(params, vocab, pair.pos_ids, lm::ScoreMask::all());
        const lm::ScoreResult neg =
            lm::score(params, vocab, pair.neg_ids, lm::ScoreMask::all());
        const std::size_t len = pair.pos_ids.size();
        const std::size_t start =
            std::max<std::size_t>(1, static_cast<std::size_t>(pair.prompt_token_count));
        KahanSum full_pos, full_neg, sem_pos, sem_neg;
        for (std::size_t j = start; j < len; ++j) {
            full_pos.add(pos.token_log_probs[j]);
            full_neg.add(neg.token_log_probs[j]);
            if (vocab.level_of(pair.pos_ids[j]) == 1) {
                sem_pos.add(pos.token_log_probs[j]);
                sem_neg.add(neg.token_log_probs[j]);
            }
        }
        PairMargins m;
        m.full = full_pos.value() - full_neg.value();
        m.semantic = sem_pos.value() - sem_neg.value();
        task_slot(pair.task).margins.push_back(m);
    }

    for (TaskReport& tr : report.tasks) {
        const bool use_full = mask_mode == MaskMode::kFull ||
                              (mask_mode == MaskMode::kPerPaper && is_consistency_task(tr.task));
        std::vector<double> deciding, full, semantic;
        for (const PairMargins& m : tr.margins) {
            full.push_back(m.full);
            semantic.push_back(m.semantic);
            deciding.push_back(use_full ? m.full : m.semantic);
        }
        tr.n_pairs = static_cast<std::int64_t>(tr.margins.size());
        for (double m : deciding) {
            if (m > 0.0) {
                ++tr.wins;
            } else if (m == 0.0) {
                ++tr.ties;
            }
        }
        tr.accuracy = accuracy_from_margins(deciding);
        tr.accuracy_full = accuracy_from_margins(full);
        tr.accuracy_semantic = accuracy_from_margins(semantic);
    }
    return report;
}

std::string_view mask_mode_name(MaskMode mode) {
    switch (mode) {
        case MaskMode::kPerPaper: return "per-paper";
        case MaskMode::kFull: return "full";
        case MaskMode::kSemanticOnly: return "semantic-only";
    }
    return "?";
}

MaskMode mask_mode_from_name(std::string_view name) {
    for (MaskMode m : {MaskMode::kPerPaper, MaskMode::kFull, MaskMode::kSemanticOnly}) {
        if (name == mask_mode_name(m)) return m;
    }
    throw ConfigError("eval: unknown mask mode \"" + std::string(name) +
                      "\" (expected per-paper, full or semantic-only)");
}

std::string eval_report_to_json(const EvalReport& report) {
    json j;
    j["mask_mode"] = std::string(mask_mode_name(report.mask_mode));
    j["model_digest"] = report.model_digest;
    j["config_digest"] = report.config_digest;
    j["tasks"] = json::array();
    for (const TaskReport& tr : report.tasks) {
        json t;
        t["task"] = std::string(task_name(tr.task));
        t["n_pairs"] = tr.n_pairs;
        t["wins"] = tr.wins;
        t["ties"] = tr.ties;
        t["accuracy"] = tr.accuracy;
        t["accuracy_full"] = tr.accuracy_full;
        t["accuracy_semantic"] = tr.accuracy_semantic;
        t["margins"] = json::array();
        for (const PairMargins& m : tr.margins) {
            t["margins"].push_back(json{{"full", m.full}, {"semantic", m.semantic}});
        }
        j["tasks"].push_back(std::move(t));
    }
    return j.dump(2) + "\n";
}

EvalReport eval_report_from_json(std::string_view text) {
    try {
        const json j = json::parse(text);
        EvalReport report;
        report.mask_mode = mask_mode_from_name(j.at("mask_mode").get<std::string>());
        report.model_digest = j.at("model_digest").get<std::string>();
        report.config_digest = j.at("config_digest").get<std::string>();
        for (const json& t : j.at("tasks")) {
            TaskReport tr;
            tr.task = task_from_name(t.at("task").get<std::string>());
            tr.n_pairs = t.at("n_pairs").get<std::int64_t>();
            tr.wins = t.at("wins").get<std::int64_t>();
            tr.ties = t.at("ties").get<std::int64_t>();
            tr.accuracy = t.at("accuracy").get<double>();
            tr.accuracy_full = t.at("accuracy_full").get<double>();
            tr.accuracy_semantic = t.at("accuracy_semantic").get<double>();
            for (const json& m : t.at("margins")) {
                tr.margins.push_back({m.at("full").get<double>(), m.at("semantic").get<double>()});
            }
            report.tasks.push_back(std::move(tr));
        }
        return report;
    } catch (const json::exception& e) {
        throw FormatError(std::string("eval report: ") + e.what());
    }
}

std::string render_eval_table(const EvalReport& report) {
    std::ostringstream os;
    os << std::left << std::setw(12) << "task" << std::right << std::setw(7) << "pairs"
       << std::setw(10) << "accuracy" << std::setw(12) << "scoring" << std::setw(10) << "full"
       << std::setw(10) << "semantic" << "\n";
    const auto row = [&os](const TaskReport& tr, bool full_scored) {
        os << std::left << std::setw(12) << std::string(task_name(tr.task)) << std::right
           << std::setw(7) << tr.n_pairs << std::setw(10) << std::fixed << std::setprecision(4)
           << tr.accuracy << std::setw(12) << (full_scored ? "full" : "semantic") << std::setw(10)
           << tr.accuracy_full << std::setw(10) << tr.accuracy_semantic << "\n";
    };
    for (const TaskReport& tr : report.tasks) {
        if (is_consistency_task(tr.task)) {
            row(tr, report.mask_mode != MaskMode::kSemanticOnly);
        }
    }
    for (const TaskReport& tr : report.tasks) {
        if (!is_consistency_task(tr.task)) {
            row(tr, report.mask_mode == MaskMode::kFull);
        }
    }
    return os.str();
}

double speaker_similarity(const corpus::CorpusConfig& config, const FeatureFrameSeq& prompt,
                          const FeatureFrameSeq& continuation) {
    config.validate();
    if (prompt.n_frames() == 0 || continuation.n_frames() == 0) {
        throw DataError("speaker probe: empty frame segment");
    }
    const auto check_width = [&config](const FeatureFrameSeq& seq, std::string_view name) {
        if (seq.dims() != config.feature_dims) {
            std::ostringstream os;
            os << "speaker probe: " << name << " has " << seq.dims() << " dims, expected "
               << config.feature_dims;
            throw LayoutError(os.str());
        }
    };
    check_width(prompt, "prompt");
    check_width(continuation, "continuation");

    const auto recover = [&config](const FeatureFrameSeq& seq) {
        return seq.frames.middleCols(config.semantic_dims, config.speaker_dims)
            .colwise()
            .mean()
            .transpose()
            .cast<double>()
            .eval();
    };
    const Eigen::VectorXd a = recover(prompt);
    const Eigen::VectorXd b = recover(continuation);
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) {
        throw DataError("speaker probe: recovered speaker component has zero norm");
    }
    return a.dot(b) / (na * nb);
}

double median(std::vector<double> values) {
    values.erase(std::remove_if(values.begin(), values.end(),
                                [](double v) { return std::isnan(v); }),
                 values.end());
    if (values.empty()) return kNaN;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

void AblationConfig::validate() const {
    if (q_list.empty()) throw ConfigError("ablation: q_list must not be empty");
    for (int q : q_list) {
        if (q < 1 || q > 64) throw ConfigError("ablation: quantizer counts must be in [1, 64]");
    }
    if (n_seeds < 1) throw ConfigError("ablation: n_seeds must be >= 1");
    if (n_syntax_pairs < 1) throw ConfigError("ablation: n_syntax_pairs must be >= 1");
    if (n_prompts < 0) throw ConfigError("ablation: n_prompts must be >= 0");
    if (prompt_seconds <= 0.0) throw ConfigError("ablation: prompt_seconds must be positive");
    if (max_fit_records < 0 || max_train_records < 0 || max_heldout_records < 0) {
        throw ConfigError("ablation: record caps must be >= 0");
    }
    train.validate();
    sampling.validate();
}

namespace {

/// Deterministic subset: shuffle indices with `seed`, take `cap` (0 = all),
/// and restore ascending order so downstream iteration is stable.
std::vector<std::size_t> pick_subset(std::size_t n, int cap, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (cap > 0 && static_cast<std::size_t>(cap) < n) {
        rng::Rng rng(seed);
        rng.shuffle(idx);
        idx.resize(static_cast<std::size_t>(cap));
        std::sort(idx.begin(), idx.end());
    }
    return idx;
}

double mean_of(const std::vector<double>& values) {
    if (values.empty()) return kNaN;
    KahanSum sum;
    for (double v : values) sum.add(v);
    return sum.value() / static_cast<double>(values.size());
}

AblationCell run_cell(const corpus::Corpus& corpus, const corpus::Language& lang,
                      const AblationConfig& config, int q_levels, int seed_index,
                      judge::JudgeClient* judge_client, train::MetricsSink& sink,
                      const std::string& cell_dir) {
    const std::uint64_t cell_seed = rng::derive_seed(
        config.seed, "ablation-cell",
        (static_cast<std::uint64_t>(q_levels) << 16) | static_cast<std::uint64_t>(seed_index));
    AblationCell cell;
    cell.q_levels = q_levels;
    cell.seed = cell_seed;

    const std::vector<const corpus::UtteranceRecord*> train_recs = corpus.split_records("train");
    const std::vector<const corpus::UtteranceRecord*> held_recs = corpus.split_records("heldout");
    if (train_recs.empty()) throw DataError("ablation: corpus has no train records");
    if (held_recs.empty()) throw DataError("ablation: corpus has no held-out records");

    // Data subsets are keyed by seed index alone, so cells that share a seed
    // see the same utterances at every quantizer count.
    const std::uint64_t data_seed = rng::derive_seed(config.seed, "ablation-data",
                                                     static_cast<std::uint64_t>(seed_index));

    // Codec fitting: frames plus per-frame phoneme labels from the train split.
    const std::vector<std::size_t> fit_idx =
        pick_subset(train_recs.size(), config.max_fit_records, rng::derive_seed(data_seed, "fit"));
    std::int64_t fit_rows = 0;
    for (std::size_t i : fit_idx) fit_rows += train_recs[i]->n_frames;
    Eigen::MatrixXf fit_frames(fit_rows, lang.config.feature_dims);
    std::vector<int> fit_labels;
    fit_labels.reserve(static_cast<std::size_t>(fit_rows));
    std::int64_t at = 0;
    for (std::size_t i : fit_idx) {
        const corpus::UtteranceRecord& rec = *train_recs[i];
        const FeatureFrameSeq seq = corpus::load_record_frames(corpus, rec);
        fit_frames.middleRows(at, seq.n_frames()) = seq.frames;
        at += seq.n_frames();
        for (std::size_t ph = 0; ph < rec.phonemes.size(); ++ph) {
            fit_labels.insert(fit_labels.end(), static_cast<std::size_t>(rec.durations[ph]),
                              rec.phonemes[ph]);
        }
    }
    rvq::RvqConfig rc = config.rvq;
    rc.q_levels = q_levels;
    rc.seed = rng::derive_seed(cell_seed, "codec");
    const Eigen::MatrixXf projection =
        rvq::semantic_axes_projection(lang.config.feature_dims, lang.config.semantic_dims);
    const rvq::RvqCodec codec = rvq::fit_codec(fit_frames, fit_labels, projection, rc);

    tokens::UnifiedVocab vocab;
    vocab.text_size = static_cast<std::int32_t>(lang.lexicon.size());
    vocab.q_levels = q_levels;
    vocab.codebook_size = rc.codebook_size;

    lm::LmConfig lmc = config.lm;
    lmc.vocab_size = vocab.total_size();
    lmc.max_seq_len = q_levels * lang.config.max_frames + 2;
    lmc.seed = rng::derive_seed(cell_seed, "init");

    const auto tokenize_subset = [&](const std::vector<const corpus::UtteranceRecord*>& recs,
                                     int cap, std::string_view tag) {
        const std::vector<std::size_t> idx =
            pick_subset(recs.size(), cap, rng::derive_seed(data_seed, tag));
        train::SeqData data;
        std::vector<FeatureFrameSeq> frames;
        data.names.reserve(idx.size());
        data.seqs.reserve(idx.size());
        frames.reserve(idx.size());
        for (std::size_t i : idx) {
            FeatureFrameSeq seq = corpus::load_record_frames(corpus, *recs[i]);
            data.names.push_back(recs[i]->id);
            data.seqs.push_back(encode_to_ids(codec, vocab, seq));
            frames.push_back(std::move(seq));
        }
        return std::pair(std::move(data), std::move(frames));
    };
    auto [train_data, train_frames] =
        tokenize_subset(train_recs, config.max_train_records, "train");
    auto [held_data, held_frames] =
        tokenize_subset(held_recs, config.max_heldout_records, "heldout");

    train::TrainConfig tc = config.train;
    tc.seed = rng::derive_seed(cell_seed, "train");
    lm::LmParams params = lm::init_model<float>(lmc);
    const train::TrainResult result =
        train::train_lm(std::move(params), vocab, train_data, held_data, tc, "", sink);
    cell.initial_loss = result.initial_loss;
    cell.final_loss = result.final_loss;
    cell.final_heldout_loss =
        result.heldout_curve.empty() ? kNaN : result.heldout_curve.back().loss;
    // A cell that has not cut its starting loss by 10% is reported, not failed.
    cell.converged = result.final_loss <= 0.9 * result.initial_loss;

    if (!cell_dir.empty()) {
        ensure_dir(cell_dir);
        rvq::save_codec(cell_dir + "/codec.rvq", codec);
        lm::save_checkpoint(cell_dir + "/model.lmc", result.params);
    }

    std::int64_t held_rows = 0;
    for (const FeatureFrameSeq& seq : held_frames) held_rows += seq.n_frames();
    Eigen::MatrixXf held_concat(held_rows, lang.config.feature_dims);
    at = 0;
    for (const FeatureFrameSeq& seq : held_frames) {
        held_concat.middleRows(at, seq.n_frames()) = seq.frames;
        at += seq.n_frames();
    }
    cell.recon_mse = rvq::recon_mse(codec, held_concat, q_levels);

    // Generation probes: continuations of held-out prompts, shared across Q.
    const int want_frames =
        static_cast<int>(std::floor(config.prompt_seconds * lang.config.frame_rate_hz));
    std::vector<std::size_t> probe_order(held_frames.size());
    for (std::size_t i = 0; i < probe_order.size(); ++i) probe_order[i] = i;
    rng::Rng probe_rng(rng::derive_seed(data_seed, "probes"));
    probe_rng.shuffle(probe_order);
    std::vector<double> sims;
    std::vector<double> judge_scores;
    int probes_done = 0;
    for (std::size_t i : probe_order) {
        if (probes_done >= config.n_prompts) break;
        if (held_frames[i].n_frames() < want_frames || want_frames < 1) continue;
        ++probes_done;
        sample::SampleConfig sc = config.sampling;
        sc.seed = rng::derive_seed(cell_seed, "gen", static_cast<std::uint64_t>(probes_done));
        const sample::ContinueResult res = sample::continue_audio(
            result.params, codec, vocab, held_frames[i], config.prompt_seconds, sc);
        if (res.continuation.n_frames() == 0) continue;
        FeatureFrameSeq head;
        head.frame_rate_hz = held_frames[i].frame_rate_hz;
        head.frames = held_frames[i].frames.topRows(want_frames);
        sims.push_back(speaker_similarity(lang.config, head, res.continuation));
        if (judge_client != nullptr) {
            const judge::Transcript prefix =
                judge::transcribe(codec, lang, rvq::encode(codec, head));
            const judge::Transcript suffix = judge::transcribe(codec, lang, res.grid);
            judge_scores.push_back(
                static_cast<double>(judge_client->judge(prefix.text, suffix.text).score));
        }
    }
    cell.speaker_sim = mean_of(sims);

    const std::vector<EvalPair> syntax_pairs =
        build_pairs(corpus, lang, codec, vocab, Task::kSyntax, config.n_syntax_pairs,
                    rng::derive_seed(data_seed, "syntax-pairs"));
    const EvalReport syntax_report =
        paired_accuracy(result.params, vocab, syntax_pairs, MaskMode::kPerPaper);
    cell.syntax_acc = syntax_report.tasks.front().accuracy;

    if (judge_client != nullptr && !judge_scores.empty()) {
        cell.content_score = mean_of(judge_scores);
        cell.content_kind = "judge";
    } else {
        cell.content_score = cell.syntax_acc;
        cell.content_kind = "syntax-proxy";
    }
    return cell;
}

}  // namespace

AblationTable run_ablation(const corpus::Corpus& corpus, const corpus::Language& lang,
                           const AblationConfig& config, judge::JudgeClient* judge_client,
                           train::MetricsSink sink, const std::string& artifact_dir) {
    config.validate();
    std::vector<int> qs = config.q_list;
    std::sort(qs.begin(), qs.end());
    qs.erase(std::unique(qs.begin(), qs.end()), qs.end());

    AblationTable table;
    for (int q : qs) {
        AblationRow row;
        row.q_levels = q;
        for (int s = 0; s < config.n_seeds; ++s) {
            const std::string cell_dir =
                artifact_dir.empty() ? std::string()
                                     : artifact_dir + "/q" + std::to_string(q) + "/seed" +
                                           std::to_string(s);
            row.cells.push_back(run_cell(corpus, lang, config, q, s, judge_client, sink,
                                         cell_dir));
        }
        std::vector<double> recon, sim, syn, content;
        for (const AblationCell& cell : row.cells) {
            recon.push_back(cell.recon_mse);
            sim.push_back(cell.speaker_sim);
            syn.push_back(cell.syntax_acc);
            content.push_back(cell.content_score);
            row.all_converged = row.all_converged && cell.converged;
        }
        row.recon_mse = median(recon);
        row.speaker_sim = median(sim);
        row.syntax_acc = median(syn);
        row.content_score = median(content);
        row.content_kind = row.cells.front().content_kind;
        if (std::isnan(row.speaker_sim)) {
            row.note = "no sampled continuation produced frames";
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string ablation_to_json(const AblationTable& table) {
    json j;
    j["rows"] = json::array();
    const auto number_or_null = [](double v) {
        return std::isnan(v) ? json(nullptr) : json(v);
    };
    for (const AblationRow& row : table.rows) {
        json r;
        r["q_levels"] = row.q_levels;
        r["recon_mse"] = number_or_null(row.recon_mse);
        r["speaker_sim"] = number_or_null(row.speaker_sim);
        r["syntax_acc"] = number_or_null(row.syntax_acc);
        r["content_score"] = number_or_null(row.content_score);
        r["content_kind"] = row.content_kind;
        r["all_converged"] = row.all_converged;
        r["note"] = row.note;
        r["cells"] = json::array();
        for (const AblationCell& cell : row.cells) {
            json c;
            c["q_levels"] = cell.q_levels;
            c["seed"] = cell.seed;
            c["recon_mse"] = number_or_null(cell.recon_mse);
            c["speaker_sim"] = number_or_null(cell.speaker_sim);
            c["syntax_acc"] = number_or_null(cell.syntax_acc);
            c["content_score"] = number_or_null(cell.content_score);
            c["content_kind"] = cell.content_kind;
            c["converged"] = cell.converged;
            c["initial_loss"] = number_or_null(cell.initial_loss);
            c["final_loss"] = number_or_null(cell.final_loss);
            c["final_heldout_loss"] = number_or_null(cell.final_heldout_loss);
            r["cells"].push_back(std::move(c));
        }
        j["rows"].push_back(std::move(r));
    }
    return j.dump(2) + "\n";
}

AblationTable ablation_from_json(std::string_view text) {
    const auto number = [](const json& v) {
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    try {
        const json j = json::parse(text);
        AblationTable table;
        for (const json& r : j.at("rows")) {
            AblationRow row;
            row.q_levels = r.at("q_levels").get<int>();
            row.recon_mse = number(r.at("recon_mse"));
            row.speaker_sim = number(r.at("speaker_sim"));
            row.syntax_acc = number(r.at("syntax_acc"));
            row.content_score = number(r.at("content_score"));
            row.content_kind = r.at("content_kind").get<std::string>();
            row.all_converged = r.at("all_converged").get<bool>();
            row.note = r.at("note").get<std::string>();
            for (const json& c : r.at("cells")) {
                AblationCell cell;
                cell.q_levels = c.at("q_levels").get<int>();
                cell.seed = c.at("seed").get<std::uint64_t>();
                cell.recon_mse = number(c.at("recon_mse"));
                cell.speaker_sim = number(c.at("speaker_sim"));
                cell.syntax_acc = number(c.at("syntax_acc"));
                cell.content_score = number(c.at("content_score"));
                cell.content_kind = c.at("content_kind").get<std::string>();
                cell.converged = c.at("converged").get<bool>();
                cell.initial_loss = number(c.at("initial_loss"));
                cell.final_loss = number(c.at("final_loss"));
                cell.final_heldout_loss = number(c.at("final_heldout_loss"));
                row.cells.push_back(std::move(cell));
            }
            table.rows.push_back(std::move(row));
        }
        return table;
    } catch (const json::exception& e) {
        throw FormatError(std::string("ablation table: ") + e.what());
    }
}

std::string render_ablation_table(const AblationTable& table) {
    std::ostringstream os;
    os << std::left << std::setw(4) << "Q" << std::right << std::setw(12) << "recon_mse"
       << std::setw(13) << "speaker_sim" << std::setw(12) << "syntax_acc" << std::setw(10)
       << "content" << "  kind\n";
    const auto cellf = [&os](double v) {
        if (std::isnan(v)) {
            os << std::setw(12) << "—";
        } else {
            os << std::setw(12) << std::fixed << std::setprecision(4) << v;
        }
    };
    for (const AblationRow& row : table.rows) {
        os << std::left << std::setw(4) << row.q_levels << std::right;
        cellf(row.recon_mse);
        os << " ";
        cellf(row.speaker_sim);
        cellf(row.syntax_acc);
        if (std::isnan(row.content_score)) {
            os << std::setw(10) << "—";
        } else {
            os << std::setw(10) << std::fixed << std::setprecision(4) << row.content_score;
        }
        os << "  " << row.content_kind;
        if (!row.note.empty()) os << "  (" << row.note << ")";
        os << "\n";
    }
    return os.str();
}

}  // namespace slm::eval
