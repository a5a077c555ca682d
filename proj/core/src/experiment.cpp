#include "slm/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "slm/digest.hpp"
#include "slm/error.hpp"
#include "slm/io.hpp"
#include "slm/kahan.hpp"
#include "slm/rng.hpp"

namespace slm::exp {

using nlohmann::json;

ExperimentConfig::ExperimentConfig() {
    // Pipeline defaults complete the schedule within the run; the raw
    // module defaults leave a short run entirely inside the plateau.
    train.schedule.total_steps = train.steps;
    train.schedule.warmup_steps = 300;

    text_lm.d_model = 64;
    text_lm.n_layers = 2;
    text_lm.n_heads = 2;
    text_lm.d_ff = 256;
    text_train.steps = 500;
    text_train.batch_size = 16;
    text_train.schedule.total_steps = 500;
    text_train.schedule.warmup_steps = 50;

    ablation.lm.d_model = 64;
    ablation.lm.n_layers = 2;
    ablation.lm.n_heads = 2;
    ablation.lm.d_ff = 256;
    ablation.train.steps = 800;
    ablation.train.batch_size = 8;
    ablation.train.schedule.total_steps = 800;
    ablation.train.schedule.warmup_steps = 80;
}

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
    std::ostringstream os;
    os << "config: key '" << key << "' expects " << want << ", got '" << value << "'";
    throw ConfigError(os.str());
}

template <typename T>
T parse_integer(std::string_view key, std::string_view raw, std::string_view want) {
    const std::string v = trim(raw);
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, raw, want);
    return out;
}

double parse_double(std::string_view key, std::string_view raw) {
    const std::string v = trim(raw);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, raw, "a number");
    return out;
}

bool parse_bool(std::string_view key, std::string_view raw) {
    const std::string v = trim(raw);
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    bad_value(key, raw, "a boolean");
}

std::vector<std::string> split_list(std::string_view raw) {
    std::vector<std::string> parts;
    std::string item;
    for (char c : raw) {
        if (c == ',') {
            parts.push_back(trim(item));
            item.clear();
        } else {
            item.push_back(c);
        }
    }
    const std::string last = trim(item);
    if (!last.empty() || !parts.empty()) parts.push_back(last);
    if (parts.size() == 1 && parts[0].empty()) parts.clear();
    return parts;
}

struct Field {
    std::string key;
    std::function<void(ExperimentConfig&, std::string_view)> set;
    std::function<json(const ExperimentConfig&)> get;
};
using Registry = std::vector<Field>;

// Getters reuse the mutable accessor; they only read through it.
template <typename Acc>
auto& deref(const Acc& acc, const ExperimentConfig& c) {
    return acc(const_cast<ExperimentConfig&>(c));
}

template <typename Acc>
void add_int(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [key, acc](ExperimentConfig& c, std::string_view v) {
                       acc(c) = parse_integer<int>(key, v, "an integer");
                   },
                   [acc](const ExperimentConfig& c) { return json(deref(acc, c)); }});
}

template <typename Acc>
void add_i64(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [key, acc](ExperimentConfig& c, std::string_view v) {
                       acc(c) = parse_integer<std::int64_t>(key, v, "an integer");
                   },
                   [acc](const ExperimentConfig& c) { return json(deref(acc, c)); }});
}

template <typename Acc>
void add_u64(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [key, acc](ExperimentConfig& c, std::string_view v) {
                       acc(c) = parse_integer<std::uint64_t>(key, v, "an unsigned integer");
                   },
                   [acc](const ExperimentConfig& c) { return json(deref(acc, c)); }});
}

template <typename Acc>
void add_double(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [key, acc](ExperimentConfig& c, std::string_view v) {
                       acc(c) = parse_double(key, v);
                   },
                   [acc](const ExperimentConfig& c) { return json(deref(acc, c)); }});
}

template <typename Acc>
void add_bool(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [key, acc](ExperimentConfig& c, std::string_view v) {
                       acc(c) = parse_bool(key, v);
                   },
                   [acc](const ExperimentConfig& c) { return json(deref(acc, c)); }});
}

template <typename Acc>
void add_string(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [acc](ExperimentConfig& c, std::string_view v) { acc(c) = trim(v); },
                   [acc](const ExperimentConfig& c) { return json(deref(acc, c)); }});
}

template <typename Acc>
void add_double_list(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [key, acc](ExperimentConfig& c, std::string_view v) {
                       std::vector<double> out;
                       for (const std::string& part : split_list(v)) {
                           out.push_back(parse_double(key, part));
                       }
                       acc(c) = std::move(out);
                   },
                   [acc](const ExperimentConfig& c) { return json(deref(acc, c)); }});
}

template <typename Acc>
void add_int_list(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [key, acc](ExperimentConfig& c, std::string_view v) {
                       std::vector<int> out;
                       for (const std::string& part : split_list(v)) {
                           out.push_back(parse_integer<int>(key, part, "integers"));
                       }
                       acc(c) = std::move(out);
                   },
                   [acc](const ExperimentConfig& c) { return json(deref(acc, c)); }});
}

template <typename Acc>
void add_mask(Registry& reg, std::string key, Acc acc) {
    reg.push_back({key,
                   [key, acc](ExperimentConfig& c, std::string_view v) {
                       const std::string name = trim(v);
                       if (name == "all") {
                           acc(c) = lm::ScoreMask::all();
                       } else if (name == "semantic-only") {
                           acc(c) = lm::ScoreMask::semantic_only();
                       } else {
                           bad_value(key, v, "'all' or 'semantic-only'");
                       }
                   },
                   [acc](const ExperimentConfig& c) {
                       const lm::ScoreMask& m = deref(acc, c);
                       return json(m.mode == lm::ScoreMask::Mode::kSemanticOnly ? "semantic-only"
                                                                                : "all");
                   }});
}

template <typename Acc>
void add_lm_fields(Registry& reg, const std::string& prefix, Acc acc) {
    add_int(reg, prefix + ".d_model", [acc](ExperimentConfig& c) -> int& { return acc(c).d_model; });
    add_int(reg, prefix + ".n_layers",
            [acc](ExperimentConfig& c) -> int& { return acc(c).n_layers; });
    add_int(reg, prefix + ".n_heads", [acc](ExperimentConfig& c) -> int& { return acc(c).n_heads; });
    add_int(reg, prefix + ".d_ff", [acc](ExperimentConfig& c) -> int& { return acc(c).d_ff; });
    add_int(reg, prefix + ".max_seq_len",
            [acc](ExperimentConfig& c) -> int& { return acc(c).max_seq_len; });
    add_double(reg, prefix + ".rope_base",
               [acc](ExperimentConfig& c) -> double& { return acc(c).rope_base; });
    add_double(reg, prefix + ".norm_eps",
               [acc](ExperimentConfig& c) -> double& { return acc(c).norm_eps; });
}

template <typename Acc>
void add_train_fields(Registry& reg, const std::string& prefix, Acc acc) {
    add_i64(reg, prefix + ".steps",
            [acc](ExperimentConfig& c) -> std::int64_t& { return acc(c).steps; });
    add_int(reg, prefix + ".batch_size",
            [acc](ExperimentConfig& c) -> int& { return acc(c).batch_size; });
    add_i64(reg, prefix + ".log_every",
            [acc](ExperimentConfig& c) -> std::int64_t& { return acc(c).log_every; });
    add_i64(reg, prefix + ".eval_every",
            [acc](ExperimentConfig& c) -> std::int64_t& { return acc(c).eval_every; });
    add_int(reg, prefix + ".eval_sequences",
            [acc](ExperimentConfig& c) -> int& { return acc(c).eval_sequences; });
    add_i64(reg, prefix + ".checkpoint_every",
            [acc](ExperimentConfig& c) -> std::int64_t& { return acc(c).checkpoint_every; });
    add_mask(reg, prefix + ".loss_mask",
             [acc](ExperimentConfig& c) -> lm::ScoreMask& { return acc(c).loss_mask; });
    add_i64(reg, prefix + ".schedule.total_steps",
            [acc](ExperimentConfig& c) -> std::int64_t& { return acc(c).schedule.total_steps; });
    add_i64(reg, prefix + ".schedule.warmup_steps",
            [acc](ExperimentConfig& c) -> std::int64_t& { return acc(c).schedule.warmup_steps; });
    add_double(reg, prefix + ".schedule.peak_lr",
               [acc](ExperimentConfig& c) -> double& { return acc(c).schedule.peak_lr; });
    add_double(reg, prefix + ".schedule.end_lr",
               [acc](ExperimentConfig& c) -> double& { return acc(c).schedule.end_lr; });
    add_double(reg, prefix + ".schedule.stable_fraction",
               [acc](ExperimentConfig& c) -> double& { return acc(c).schedule.stable_fraction; });
    add_double(reg, prefix + ".adam.beta1",
               [acc](ExperimentConfig& c) -> double& { return acc(c).adam.beta1; });
    add_double(reg, prefix + ".adam.beta2",
               [acc](ExperimentConfig& c) -> double& { return acc(c).adam.beta2; });
    add_double(reg, prefix + ".adam.eps",
               [acc](ExperimentConfig& c) -> double& { return acc(c).adam.eps; });
    add_double(reg, prefix + ".adam.weight_decay",
               [acc](ExperimentConfig& c) -> double& { return acc(c).adam.weight_decay; });
    add_double(reg, prefix + ".adam.clip_norm",
               [acc](ExperimentConfig& c) -> double& { return acc(c).adam.clip_norm; });
}

template <typename Acc>
void add_rvq_fields(Registry& reg, const std::string& prefix, Acc acc) {
    add_int(reg, prefix + ".q_levels",
            [acc](ExperimentConfig& c) -> int& { return acc(c).q_levels; });
    add_int(reg, prefix + ".codebook_size",
            [acc](ExperimentConfig& c) -> int& { return acc(c).codebook_size; });
    add_int(reg, prefix + ".kmeans_iters",
            [acc](ExperimentConfig& c) -> int& { return acc(c).kmeans_iters; });
    add_int(reg, prefix + ".max_fit_frames",
            [acc](ExperimentConfig& c) -> int& { return acc(c).max_fit_frames; });
}

template <typename Acc>
void add_sampling_fields(Registry& reg, const std::string& prefix, Acc acc) {
    add_double(reg, prefix + ".temperature",
               [acc](ExperimentConfig& c) -> double& { return acc(c).temperature; });
    add_int(reg, prefix + ".top_k", [acc](ExperimentConfig& c) -> int& { return acc(c).top_k; });
    add_int(reg, prefix + ".max_new_tokens",
            [acc](ExperimentConfig& c) -> int& { return acc(c).max_new_tokens; });
    add_bool(reg, prefix + ".constrain_order",
             [acc](ExperimentConfig& c) -> bool& { return acc(c).constrain_order; });
}

Registry build_registry() {
    Registry reg;
    add_u64(reg, "seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.seed; });
    add_bool(reg, "twist_init", [](ExperimentConfig& c) -> bool& { return c.twist_init; });
    add_int(reg, "n_sample_prompts",
            [](ExperimentConfig& c) -> int& { return c.n_sample_prompts; });
    add_double(reg, "prompt_seconds",
               [](ExperimentConfig& c) -> double& { return c.prompt_seconds; });
    add_int(reg, "eval_pairs", [](ExperimentConfig& c) -> int& { return c.eval_pairs; });
    add_bool(reg, "ablate", [](ExperimentConfig& c) -> bool& { return c.ablate; });

    const auto corp = [](ExperimentConfig& c) -> corpus::CorpusConfig& { return c.corpus; };
    add_int(reg, "corpus.n_utterances",
            [corp](ExperimentConfig& c) -> int& { return corp(c).n_utterances; });
    add_int(reg, "corpus.p_phonemes",
            [corp](ExperimentConfig& c) -> int& { return corp(c).p_phonemes; });
    add_int(reg, "corpus.feature_dims",
            [corp](ExperimentConfig& c) -> int& { return corp(c).feature_dims; });
    add_int(reg, "corpus.semantic_dims",
            [corp](ExperimentConfig& c) -> int& { return corp(c).semantic_dims; });
    add_int(reg, "corpus.speaker_dims",
            [corp](ExperimentConfig& c) -> int& { return corp(c).speaker_dims; });
    add_int(reg, "corpus.lexicon_size",
            [corp](ExperimentConfig& c) -> int& { return corp(c).lexicon_size; });
    add_int(reg, "corpus.min_word_len",
            [corp](ExperimentConfig& c) -> int& { return corp(c).min_word_len; });
    add_int(reg, "corpus.max_word_len",
            [corp](ExperimentConfig& c) -> int& { return corp(c).max_word_len; });
    add_int(reg, "corpus.n_topics", [corp](ExperimentConfig& c) -> int& { return corp(c).n_topics; });
    add_int(reg, "corpus.n_speakers",
            [corp](ExperimentConfig& c) -> int& { return corp(c).n_speakers; });
    add_int(reg, "corpus.n_sentiments",
            [corp](ExperimentConfig& c) -> int& { return corp(c).n_sentiments; });
    add_int(reg, "corpus.n_backgrounds",
            [corp](ExperimentConfig& c) -> int& { return corp(c).n_backgrounds; });
    add_double_list(reg, "corpus.room_values",
                    [corp](ExperimentConfig& c) -> std::vector<double>& {
                        return corp(c).room_values;
                    });
    add_double(reg, "corpus.speaker_scale",
               [corp](ExperimentConfig& c) -> double& { return corp(c).speaker_scale; });
    add_double(reg, "corpus.sentiment_scale",
               [corp](ExperimentConfig& c) -> double& { return corp(c).sentiment_scale; });
    add_double(reg, "corpus.background_scale",
               [corp](ExperimentConfig& c) -> double& { return corp(c).background_scale; });
    add_double(reg, "corpus.jitter_scale",
               [corp](ExperimentConfig& c) -> double& { return corp(c).jitter_scale; });
    add_double(reg, "corpus.frame_rate_hz",
               [corp](ExperimentConfig& c) -> double& { return corp(c).frame_rate_hz; });
    add_int(reg, "corpus.min_frames",
            [corp](ExperimentConfig& c) -> int& { return corp(c).min_frames; });
    add_int(reg, "corpus.max_frames",
            [corp](ExperimentConfig& c) -> int& { return corp(c).max_frames; });
    add_int(reg, "corpus.min_phoneme_frames",
            [corp](ExperimentConfig& c) -> int& { return corp(c).min_phoneme_frames; });
    add_int(reg, "corpus.max_phoneme_frames",
            [corp](ExperimentConfig& c) -> int& { return corp(c).max_phoneme_frames; });
    add_double(reg, "corpus.train_fraction",
               [corp](ExperimentConfig& c) -> double& { return corp(c).train_fraction; });

    add_rvq_fields(reg, "rvq", [](ExperimentConfig& c) -> rvq::RvqConfig& { return c.rvq; });
    add_lm_fields(reg, "lm", [](ExperimentConfig& c) -> lm::LmConfig& { return c.lm; });
    add_train_fields(reg, "train",
                     [](ExperimentConfig& c) -> train::TrainConfig& { return c.train; });
    add_lm_fields(reg, "text_lm", [](ExperimentConfig& c) -> lm::LmConfig& { return c.text_lm; });
    add_train_fields(reg, "text_train",
                     [](ExperimentConfig& c) -> train::TrainConfig& { return c.text_train; });
    add_sampling_fields(reg, "sampling",
                        [](ExperimentConfig& c) -> sample::SampleConfig& { return c.sampling; });

    const auto abl = [](ExperimentConfig& c) -> eval::AblationConfig& { return c.ablation; };
    add_int_list(reg, "ablation.q_list",
                 [abl](ExperimentConfig& c) -> std::vector<int>& { return abl(c).q_list; });
    add_int(reg, "ablation.n_seeds", [abl](ExperimentConfig& c) -> int& { return abl(c).n_seeds; });
    add_int(reg, "ablation.max_fit_records",
            [abl](ExperimentConfig& c) -> int& { return abl(c).max_fit_records; });
    add_int(reg, "ablation.max_train_records",
            [abl](ExperimentConfig& c) -> int& { return abl(c).max_train_records; });
    add_int(reg, "ablation.max_heldout_records",
            [abl](ExperimentConfig& c) -> int& { return abl(c).max_heldout_records; });
    add_int(reg, "ablation.n_syntax_pairs",
            [abl](ExperimentConfig& c) -> int& { return abl(c).n_syntax_pairs; });
    add_int(reg, "ablation.n_prompts",
            [abl](ExperimentConfig& c) -> int& { return abl(c).n_prompts; });
    add_double(reg, "ablation.prompt_seconds",
               [abl](ExperimentConfig& c) -> double& { return abl(c).prompt_seconds; });
    add_rvq_fields(reg, "ablation.rvq",
                   [abl](ExperimentConfig& c) -> rvq::RvqConfig& { return abl(c).rvq; });
    add_lm_fields(reg, "ablation.lm",
                  [abl](ExperimentConfig& c) -> lm::LmConfig& { return abl(c).lm; });
    add_train_fields(reg, "ablation.train",
                     [abl](ExperimentConfig& c) -> train::TrainConfig& { return abl(c).train; });
    add_sampling_fields(reg, "ablation.sampling",
                        [abl](ExperimentConfig& c) -> sample::SampleConfig& {
                            return abl(c).sampling;
                        });

    const auto jdg = [](ExperimentConfig& c) -> judge::JudgeConfig& { return c.judge; };
    add_string(reg, "judge.endpoint",
               [jdg](ExperimentConfig& c) -> std::string& { return jdg(c).endpoint; });
    add_string(reg, "judge.model",
               [jdg](ExperimentConfig& c) -> std::string& { return jdg(c).model; });
    add_string(reg, "judge.cache_dir",
               [jdg](ExperimentConfig& c) -> std::string& { return jdg(c).cache_dir; });
    add_string(reg, "judge.api_key_env",
               [jdg](ExperimentConfig& c) -> std::string& { return jdg(c).api_key_env; });
    add_int(reg, "judge.max_retries",
            [jdg](ExperimentConfig& c) -> int& { return jdg(c).max_retries; });
    add_int(reg, "judge.retry_backoff_ms",
            [jdg](ExperimentConfig& c) -> int& { return jdg(c).retry_backoff_ms; });
    add_int(reg, "judge.timeout_sec",
            [jdg](ExperimentConfig& c) -> int& { return jdg(c).timeout_sec; });

    std::sort(reg.begin(), reg.end(),
              [](const Field& a, const Field& b) { return a.key < b.key; });
    return reg;
}

const Registry& registry() {
    static const Registry reg = build_registry();
    return reg;
}

const Field* find_field(std::string_view key) {
    const Registry& reg = registry();
    const auto it = std::lower_bound(reg.begin(), reg.end(), key,
                                     [](const Field& f, std::string_view k) { return f.key < k; });
    if (it == reg.end() || it->key != key) return nullptr;
    return &*it;
}

}  // namespace

void apply_override(ExperimentConfig& config, std::string_view key, std::string_view value) {
    const std::string k = trim(key);
    const Field* field = find_field(k);
    if (field == nullptr) throw ConfigError("config: unknown key '" + k + "'");
    field->set(config, value);
}

ExperimentConfig parse_config(std::string_view text) {
    ExperimentConfig config;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string_view line =
            text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;

        const std::size_t hash = line.find('#');
        if (hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            std::ostringstream os;
            os << "config: line " << line_no << " is not 'key = value': '" << stripped << "'";
            throw ConfigError(os.str());
        }
        try {
            apply_override(config, std::string_view(stripped).substr(0, eq),
                           std::string_view(stripped).substr(eq + 1));
        } catch (const ConfigError& e) {
            std::ostringstream os;
            os << e.what() << " (line " << line_no << ")";
            throw ConfigError(os.str());
        }
    }
    return config;
}

ExperimentConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

std::string config_to_json(const ExperimentConfig& config) {
    json j;
    for (const Field& f : registry()) j[f.key] = f.get(config);
    return j.dump(2) + "\n";
}

std::string config_to_text(const ExperimentConfig& config) {
    std::ostringstream os;
    for (const Field& f : registry()) {
        const json v = f.get(config);
        os << f.key << " = ";
        if (v.is_string()) {
            os << v.get<std::string>();
        } else if (v.is_array()) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (i > 0) os << ",";
                os << v[i].dump();
            }
        } else {
            os << v.dump();
        }
        os << "\n";
    }
    return os.str();
}

tokens::UnifiedVocab vocab_for(const ExperimentConfig& config) {
    tokens::UnifiedVocab vocab;
    vocab.text_size = config.corpus.lexicon_size;
    vocab.q_levels = config.rvq.q_levels;
    vocab.codebook_size = config.rvq.codebook_size;
    return vocab;
}

ExperimentConfig resolve_config(const ExperimentConfig& config) {
    ExperimentConfig r = config;
    r.corpus.seed = rng::derive_seed(r.seed, "corpus");
    r.rvq.seed = rng::derive_seed(r.seed, "codec");
    r.lm.seed = rng::derive_seed(r.seed, "lm-init");
    r.train.seed = rng::derive_seed(r.seed, "train");
    r.text_lm.seed = rng::derive_seed(r.seed, "text-lm-init");
    r.text_train.seed = rng::derive_seed(r.seed, "text-train");
    r.sampling.seed = rng::derive_seed(r.seed, "sampling");
    r.ablation.seed = rng::derive_seed(r.seed, "ablation");

    r.lm.vocab_size = vocab_for(r).total_size();
    if (r.lm.max_seq_len <= 0) {
        r.lm.max_seq_len = r.rvq.q_levels * r.corpus.max_frames + 2;
    }
    r.text_lm.vocab_size = r.corpus.lexicon_size;
    // Longest possible transcript: every word at the minimum phoneme count,
    // every phoneme at the minimum duration.
    const int shortest_word = r.corpus.min_word_len * r.corpus.min_phoneme_frames;
    r.text_lm.max_seq_len =
        std::max(2, shortest_word > 0 ? r.corpus.max_frames / shortest_word : 2);
    return r;
}

void ExperimentConfig::validate() const {
    const ExperimentConfig r = resolve_config(*this);
    r.corpus.validate();
    r.rvq.validate();
    r.lm.validate();
    r.train.validate();
    r.sampling.validate();
    if (r.twist_init) {
        r.text_lm.validate();
        r.text_train.validate();
        // The audio model inherits the text model's blocks wholesale, so the
        // two architectures must agree field by field.
        const auto same = [](std::string_view name, auto a, auto b) {
            if (a != b) {
                std::ostringstream os;
                os << "config: twist_init requires lm." << name << " (" << a
                   << ") == text_lm." << name << " (" << b << ")";
                throw ConfigError(os.str());
            }
        };
        same("d_model", r.lm.d_model, r.text_lm.d_model);
        same("n_layers", r.lm.n_layers, r.text_lm.n_layers);
        same("n_heads", r.lm.n_heads, r.text_lm.n_heads);
        same("d_ff", r.lm.d_ff, r.text_lm.d_ff);
        same("rope_base", r.lm.rope_base, r.text_lm.rope_base);
        same("norm_eps", r.lm.norm_eps, r.text_lm.norm_eps);
        if (r.text_train.loss_mask.mode != lm::ScoreMask::Mode::kAll) {
            throw ConfigError(
                "config: text_train.loss_mask must be 'all'; transcripts have no audio levels");
        }
    }
    if (eval_pairs < 1) throw ConfigError("config: eval_pairs must be >= 1");
    if (n_sample_prompts < 0) throw ConfigError("config: n_sample_prompts must be >= 0");
    if (prompt_seconds <= 0.0) throw ConfigError("config: prompt_seconds must be positive");
    if (ablate) r.ablation.validate();
    if (!judge.endpoint.empty()) judge.validate();

    const int need = r.rvq.q_levels * r.corpus.max_frames + 2;
    if (r.lm.max_seq_len < need) {
        std::ostringstream os;
        os << "config: lm.max_seq_len (" << r.lm.max_seq_len
           << ") cannot hold an interleaved utterance; rvq.q_levels * corpus.max_frames + 2 = "
           << need;
        throw ConfigError(os.str());
    }
    if (!ablate) return;
    for (int q : r.ablation.q_list) {
        const int cell_need = q * r.corpus.max_frames + 2;
        if (r.ablation.lm.max_seq_len > 0 && r.ablation.lm.max_seq_len < cell_need) {
            std::ostringstream os;
            os << "config: ablation.lm.max_seq_len (" << r.ablation.lm.max_seq_len
               << ") cannot hold ablation.q_list entry " << q << " * corpus.max_frames + 2 = "
               << cell_need;
            throw ConfigError(os.str());
        }
    }
}

namespace {

std::string rvq_config_json(const rvq::RvqConfig& c) {
    json j;
    j["q_levels"] = c.q_levels;
    j["codebook_size"] = c.codebook_size;
    j["kmeans_iters"] = c.kmeans_iters;
    j["max_fit_frames"] = c.max_fit_frames;
    j["seed"] = c.seed;
    return j.dump();
}

std::string train_config_json(const train::TrainConfig& c) {
    json j;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["loss_mask"] =
        c.loss_mask.mode == lm::ScoreMask::Mode::kSemanticOnly ? "semantic-only" : "all";
    j["schedule"] = {{"total_steps", c.schedule.total_steps},
                     {"warmup_steps", c.schedule.warmup_steps},
                     {"peak_lr", c.schedule.peak_lr},
                     {"end_lr", c.schedule.end_lr},
                     {"stable_fraction", c.schedule.stable_fraction}};
    j["adam"] = {{"beta1", c.adam.beta1},
                 {"beta2", c.adam.beta2},
                 {"eps", c.adam.eps},
                 {"weight_decay", c.adam.weight_decay},
                 {"clip_norm", c.adam.clip_norm}};
    return j.dump();
}

std::string sample_config_json(const sample::SampleConfig& c) {
    json j;
    j["temperature"] = c.temperature;
    j["top_k"] = c.top_k;
    j["max_new_tokens"] = c.max_new_tokens;
    j["constrain_order"] = c.constrain_order;
    j["seed"] = c.seed;
    return j.dump();
}

std::string ablation_config_json(const eval::AblationConfig& c) {
    json j;
    j["q_list"] = c.q_list;
    j["n_seeds"] = c.n_seeds;
    j["seed"] = c.seed;
    j["rvq"] = json::parse(rvq_config_json(c.rvq));
    j["lm"] = json::parse(lm::lm_config_to_json(c.lm));
    j["train"] = json::parse(train_config_json(c.train));
    j["max_fit_records"] = c.max_fit_records;
    j["max_train_records"] = c.max_train_records;
    j["max_heldout_records"] = c.max_heldout_records;
    j["n_syntax_pairs"] = c.n_syntax_pairs;
    j["n_prompts"] = c.n_prompts;
    j["prompt_seconds"] = c.prompt_seconds;
    j["sampling"] = json::parse(sample_config_json(c.sampling));
    return j.dump();
}

}  // namespace

StageKeys stage_keys(const ExperimentConfig& r) {
    StageKeys keys;
    keys.corpus = sha256_hex("corpus:" + corpus::corpus_config_to_json(r.corpus));
    keys.codec = sha256_hex("codec:" + rvq_config_json(r.rvq) + "|" + keys.corpus);
    keys.text_lm = sha256_hex("text-lm:" + lm::lm_config_to_json(r.text_lm) + "|" +
                              train_config_json(r.text_train) + "|" + keys.corpus);
    keys.lm = sha256_hex("lm:" + lm::lm_config_to_json(r.lm) + "|" + train_config_json(r.train) +
                         "|" + keys.codec + "|" +
                         (r.twist_init ? keys.text_lm : std::string("fresh-init")));
    keys.samples = sha256_hex("samples:" + keys.lm + "|" + sample_config_json(r.sampling) + "|" +
                              std::to_string(r.n_sample_prompts) + "|" +
                              json(r.prompt_seconds).dump());
    keys.eval = sha256_hex("eval:" + keys.lm + "|" + std::to_string(r.eval_pairs) + "|" +
                           std::to_string(rng::derive_seed(r.seed, "eval-pairs")));
    keys.ablation = sha256_hex("ablation:" + keys.corpus + "|" + ablation_config_json(r.ablation) +
                               "|" + r.judge.endpoint + "|" + r.judge.model);
    return keys;
}

void write_manifest(const std::string& path, const ExperimentConfig& resolved,
                    const std::vector<std::pair<std::string, std::string>>& artifacts) {
    json j;
    j["kind"] = "slm-manifest";
    j["version"] = 1;
    j["seed"] = resolved.seed;
    j["config"] = json::parse(config_to_json(resolved));
    j["config_digest"] = sha256_hex(config_to_json(resolved));
    j["versions"] = {{"slm", "0.1.0"},
                     {"formats", {{"sfr", 1}, {"rvq", 1}, {"its", 1}, {"lmc", 1}}}};
    j["artifacts"] = json::object();
    for (const auto& [name, digest] : artifacts) j["artifacts"][name] = digest;
    write_file_atomic(path, j.dump(2) + "\n");
}

namespace {

bool stamp_matches(const std::string& stamp_path, const std::string& key) {
    if (!file_exists(stamp_path)) return false;
    try {
        return trim(read_file(stamp_path)) == key;
    } catch (const IoError&) {
        return false;
    }
}

void write_stamp(const std::string& stamp_path, const std::string& key) {
    write_file_atomic(stamp_path, key + "\n");
}

constexpr double kMetaNaN = std::numeric_limits<double>::quiet_NaN();

/// Sidecar "<artifact>.meta.json": the numbers the report needs from a stage
/// without re-deriving them, plus the artifact's content digest for the
/// tamper audit. Each stage writes only the fields it owns.
struct StageMeta {
    double initial_loss = kMetaNaN;
    double final_loss = kMetaNaN;
    double final_heldout_loss = kMetaNaN;
    std::string file_digest;
    std::string model_digest;
    double recon_mse = kMetaNaN;
    std::vector<double> per_level;
    std::int64_t n_train = -1;
    std::int64_t n_heldout = -1;
    std::int64_t heldout_frames = -1;
};

void write_meta(const std::string& path, const StageMeta& m) {
    json j = json::object();
    if (!std::isnan(m.initial_loss)) j["initial_loss"] = m.initial_loss;
    if (!std::isnan(m.final_loss)) j["final_loss"] = m.final_loss;
    if (!std::isnan(m.final_heldout_loss)) j["final_heldout_loss"] = m.final_heldout_loss;
    if (!m.file_digest.empty()) j["file_digest"] = m.file_digest;
    if (!m.model_digest.empty()) j["model_digest"] = m.model_digest;
    if (!std::isnan(m.recon_mse)) j["recon_mse"] = m.recon_mse;
    if (!m.per_level.empty()) j["per_level"] = m.per_level;
    if (m.n_train >= 0) j["n_train"] = m.n_train;
    if (m.n_heldout >= 0) j["n_heldout"] = m.n_heldout;
    if (m.heldout_frames >= 0) j["heldout_frames"] = m.heldout_frames;
    write_file_atomic(path, j.dump(2) + "\n");
}

StageMeta read_meta(const std::string& path) {
    const json j = json::parse(read_file(path));
    StageMeta m;
    const auto num = [&j](const char* key, double& slot) {
        if (j.contains(key) && !j.at(key).is_null()) slot = j.at(key).get<double>();
    };
    num("initial_loss", m.initial_loss);
    num("final_loss", m.final_loss);
    num("final_heldout_loss", m.final_heldout_loss);
    num("recon_mse", m.recon_mse);
    if (j.contains("file_digest")) m.file_digest = j.at("file_digest").get<std::string>();
    if (j.contains("model_digest")) m.model_digest = j.at("model_digest").get<std::string>();
    if (j.contains("per_level")) m.per_level = j.at("per_level").get<std::vector<double>>();
    if (j.contains("n_train")) m.n_train = j.at("n_train").get<std::int64_t>();
    if (j.contains("n_heldout")) m.n_heldout = j.at("n_heldout").get<std::int64_t>();
    if (j.contains("heldout_frames")) {
        m.heldout_frames = j.at("heldout_frames").get<std::int64_t>();
    }
    return m;
}

json number_or_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

}  // namespace

namespace {

/// Shared state the stages hand one another. The heavyweight members are
/// optional so a reused stage can skip materializing what later stages do
/// not need.
struct PipelineCtx {
    ExperimentConfig r;
    StageKeys keys;
    std::string root;
    train::MetricsSink sink;
    bool strict = false;  // stages before the target must already be current
    PipelineResult* out = nullptr;

    corpus::Corpus corp;
    corpus::Language lang;
    std::vector<const corpus::UtteranceRecord*> train_recs, held_recs;
    std::optional<rvq::RvqCodec> codec;
    std::optional<lm::LmParams> params;  // audio model, when loaded
    tokens::UnifiedVocab vocab;
};

bool corpus_current(const PipelineCtx& c) {
    return stamp_matches(c.out->corpus_dir + ".stamp", c.keys.corpus) &&
           file_exists(c.out->corpus_dir + "/index.jsonl") &&
           file_exists(c.out->corpus_dir + ".meta.json");
}

bool codec_current(const PipelineCtx& c) {
    return stamp_matches(c.out->codec_path + ".stamp", c.keys.codec) &&
           file_exists(c.out->codec_path) && file_exists(c.out->codec_path + ".meta.json");
}

bool text_lm_current(const PipelineCtx& c) {
    return stamp_matches(c.out->text_lm_path + ".stamp", c.keys.text_lm) &&
           file_exists(c.out->text_lm_path) && file_exists(c.out->text_lm_path + ".meta.json");
}

bool lm_current(const PipelineCtx& c) {
    return stamp_matches(c.out->lm_path + ".stamp", c.keys.lm) && file_exists(c.out->lm_path) &&
           file_exists(c.out->lm_path + ".meta.json");
}

bool samples_current(const PipelineCtx& c) {
    return stamp_matches(c.out->samples_path + ".stamp", c.keys.samples) &&
           file_exists(c.out->samples_path);
}

bool eval_current(const PipelineCtx& c) {
    return stamp_matches(c.out->eval_path + ".stamp", c.keys.eval) &&
           file_exists(c.out->eval_path);
}

bool ablation_current(const PipelineCtx& c) {
    return stamp_matches(c.out->ablation_path + ".stamp", c.keys.ablation) &&
           file_exists(c.out->ablation_path);
}

[[noreturn]] void missing_upstream(const std::string& what, const std::string& cmd) {
    throw IoError("missing upstream artifact: " + what + " — run `slm " + cmd +
                  "` on this root first (a stale stamp after a config change also lands here)");
}

void stage_corpus(PipelineCtx& c, bool target) {
    PipelineResult& out = *c.out;
    if (corpus_current(c)) {
        c.corp = corpus::load_corpus(out.corpus_dir);
        out.corpus_reused = true;
    } else if (!target && c.strict) {
        missing_upstream("corpus", "gen-corpus");
    } else {
        c.corp = corpus::gen_corpus(c.r.corpus, out.corpus_dir);
    }
    c.lang = corpus::build_language(c.r.corpus);
    c.train_recs = c.corp.split_records("train");
    c.held_recs = c.corp.split_records("heldout");
    if (c.train_recs.empty()) throw DataError("pipeline: corpus has no train records");
    if (c.held_recs.empty()) throw DataError("pipeline: corpus has no held-out records");
    if (!out.corpus_reused) {
        StageMeta m;
        m.n_train = static_cast<std::int64_t>(c.train_recs.size());
        m.n_heldout = static_cast<std::int64_t>(c.held_recs.size());
        m.heldout_frames = 0;
        for (const corpus::UtteranceRecord* rec : c.held_recs) m.heldout_frames += rec->n_frames;
        m.file_digest = sha256_hex_file(out.corpus_dir + "/index.jsonl");
        write_meta(out.corpus_dir + ".meta.json", m);
        write_stamp(out.corpus_dir + ".stamp", c.keys.corpus);
    }
}

Eigen::MatrixXf concat_heldout_frames(const PipelineCtx& c) {
    std::int64_t rows = 0;
    for (const corpus::UtteranceRecord* rec : c.held_recs) rows += rec->n_frames;
    Eigen::MatrixXf held(rows, c.r.corpus.feature_dims);
    std::int64_t at = 0;
    for (const corpus::UtteranceRecord* rec : c.held_recs) {
        const FeatureFrameSeq seq = corpus::load_record_frames(c.corp, *rec);
        held.middleRows(at, seq.n_frames()) = seq.frames;
        at += seq.n_frames();
    }
    return held;
}

void stage_codec(PipelineCtx& c, bool target) {
    PipelineResult& out = *c.out;
    const std::string meta_path = out.codec_path + ".meta.json";
    if (codec_current(c)) {
        c.codec = rvq::load_codec(out.codec_path);
        out.recon_mse = read_meta(meta_path).recon_mse;
        out.codec_reused = true;
        return;
    }
    if (!target && c.strict) missing_upstream("codec", "train-codec");

    std::int64_t rows = 0;
    for (const corpus::UtteranceRecord* rec : c.train_recs) rows += rec->n_frames;
    Eigen::MatrixXf frames(rows, c.r.corpus.feature_dims);
    std::vector<int> labels;
    labels.reserve(static_cast<std::size_t>(rows));
    std::int64_t at = 0;
    for (const corpus::UtteranceRecord* rec : c.train_recs) {
        const FeatureFrameSeq seq = corpus::load_record_frames(c.corp, *rec);
        frames.middleRows(at, seq.n_frames()) = seq.frames;
        at += seq.n_frames();
        for (std::size_t p = 0; p < rec->phonemes.size(); ++p) {
            labels.insert(labels.end(), static_cast<std::size_t>(rec->durations[p]),
                          rec->phonemes[p]);
        }
    }
    const Eigen::MatrixXf projection =
        rvq::semantic_axes_projection(c.r.corpus.feature_dims, c.r.corpus.semantic_dims);
    c.codec = rvq::fit_codec(frames, labels, projection, c.r.rvq);
    rvq::save_codec(out.codec_path, *c.codec);

    // Held-out reconstruction error belongs to this stage: it depends only
    // on the codec and the corpus, and the report reads it from the sidecar.
    const Eigen::MatrixXf held = concat_heldout_frames(c);
    StageMeta m;
    m.recon_mse = rvq::recon_mse(*c.codec, held, c.r.rvq.q_levels);
    for (int l = 1; l <= c.r.rvq.q_levels; ++l) {
        m.per_level.push_back(rvq::recon_mse(*c.codec, held, l));
    }
    m.file_digest = sha256_hex_file(out.codec_path);
    write_meta(meta_path, m);
    write_stamp(out.codec_path + ".stamp", c.keys.codec);
    out.recon_mse = m.recon_mse;
}

train::SeqData tokenize_records(const PipelineCtx& c,
                                const std::vector<const corpus::UtteranceRecord*>& recs) {
    train::SeqData data;
    data.names.reserve(recs.size());
    data.seqs.reserve(recs.size());
    for (const corpus::UtteranceRecord* rec : recs) {
        const FeatureFrameSeq seq = corpus::load_record_frames(c.corp, *rec);
        data.names.push_back(rec->id);
        data.seqs.push_back(tokens::interleave(c.vocab, rvq::encode(*c.codec, seq)));
    }
    return data;
}

/// Text warm start. Always leaves its artifact and metrics behind so the
/// report reads the same whether anything was reused; returns parameters
/// only when the audio model still needs them.
std::optional<lm::LmParams> stage_text_lm(PipelineCtx& c, bool need_params) {
    PipelineResult& out = *c.out;
    const std::string meta_path = out.text_lm_path + ".meta.json";
    if (text_lm_current(c)) {
        const StageMeta m = read_meta(meta_path);
        out.text_initial_loss = m.initial_loss;
        out.text_final_loss = m.final_loss;
        out.text_lm_reused = true;
        if (!need_params) return std::nullopt;
        return lm::load_checkpoint(out.text_lm_path).params;
    }
    const auto transcripts = [](const std::vector<const corpus::UtteranceRecord*>& recs) {
        train::SeqData data;
        for (const corpus::UtteranceRecord* rec : recs) {
            if (rec->words.size() < 2) continue;
            data.names.push_back(rec->id);
            data.seqs.emplace_back(rec->words.begin(), rec->words.end());
        }
        return data;
    };
    const train::SeqData text_train_data = transcripts(c.train_recs);
    const train::SeqData text_held_data = transcripts(c.held_recs);
    if (text_train_data.size() == 0) {
        throw DataError("pipeline: no transcript has two or more words");
    }
    // Only the id range matters here: transcripts carry no audio tokens and
    // the loss mask is fixed to every position.
    tokens::UnifiedVocab text_vocab;
    text_vocab.text_size = c.r.text_lm.vocab_size;
    train::TrainResult result =
        train::train_lm(lm::init_model<float>(c.r.text_lm), text_vocab, text_train_data,
                        text_held_data, c.r.text_train, "", c.sink);
    out.text_initial_loss = result.initial_loss;
    out.text_final_loss = result.final_loss;
    lm::save_checkpoint(out.text_lm_path, result.params);
    StageMeta m;
    m.initial_loss = result.initial_loss;
    m.final_loss = result.final_loss;
    if (!result.heldout_curve.empty()) m.final_heldout_loss = result.heldout_curve.back().loss;
    m.file_digest = sha256_hex_file(out.text_lm_path);
    m.model_digest = lm::params_digest(result.params);
    write_meta(meta_path, m);
    write_stamp(out.text_lm_path + ".stamp", c.keys.text_lm);
    return std::move(result.params);
}

void stage_lm(PipelineCtx& c, bool target, bool need_params) {
    PipelineResult& out = *c.out;
    const std::string meta_path = out.lm_path + ".meta.json";
    const bool cached = lm_current(c);
    if (!cached && !target && c.strict) missing_upstream("trained model", "train-lm");

    std::optional<lm::LmParams> text_params;
    if (c.r.twist_init) {
        // When the audio model is cached the text stage only has to leave
        // its report numbers behind.
        text_params = stage_text_lm(c, !cached);
    }
    if (cached) {
        const StageMeta m = read_meta(meta_path);
        out.lm_initial_loss = m.initial_loss;
        out.lm_final_loss = m.final_loss;
        out.lm_final_heldout_loss = m.final_heldout_loss;
        out.lm_reused = true;
        if (need_params) c.params = lm::load_checkpoint(out.lm_path).params;
        return;
    }

    lm::LmParams params;
    if (c.r.twist_init) {
        params = lm::extend_vocab(*text_params, c.vocab, rng::derive_seed(c.r.seed, "twist"));
        // extend_vocab keeps the text context length; the audio run needs
        // its own.
        params.config.max_seq_len = c.r.lm.max_seq_len;
    } else {
        params = lm::init_model<float>(c.r.lm);
    }
    const train::SeqData audio_train = tokenize_records(c, c.train_recs);
    const train::SeqData audio_held = tokenize_records(c, c.held_recs);
    const std::string ckpt_dir =
        c.r.train.checkpoint_every > 0 ? c.root + "/checkpoints" : std::string();
    train::TrainResult result = train::train_lm(std::move(params), c.vocab, audio_train,
                                                audio_held, c.r.train, ckpt_dir, c.sink);
    out.lm_initial_loss = result.initial_loss;
    out.lm_final_loss = result.final_loss;
    out.lm_final_heldout_loss = result.heldout_curve.empty()
                                    ? std::numeric_limits<double>::quiet_NaN()
                                    : result.heldout_curve.back().loss;
    const lm::OptimizerState slots = result.adam.to_slots();
    lm::save_checkpoint(out.lm_path, result.params, &slots);
    StageMeta m;
    m.initial_loss = out.lm_initial_loss;
    m.final_loss = out.lm_final_loss;
    m.final_heldout_loss = out.lm_final_heldout_loss;
    m.file_digest = sha256_hex_file(out.lm_path);
    m.model_digest = lm::params_digest(result.params);
    write_meta(meta_path, m);
    write_stamp(out.lm_path + ".stamp", c.keys.lm);
    c.params = std::move(result.params);
}

void stage_samples(PipelineCtx& c, bool target) {
    PipelineResult& out = *c.out;
    if (samples_current(c)) {
        out.samples_reused = true;
        return;
    }
    if (!target && c.strict) missing_upstream("samples.json", "eval");

    json rows = json::array();
    int probes_done = 0;
    std::vector<double> sims;
    std::int64_t total_repaired = 0, total_dropped = 0;
    const int want_frames =
        static_cast<int>(std::floor(c.r.prompt_seconds * c.r.corpus.frame_rate_hz));
    for (std::size_t i = 0; i < c.held_recs.size() && probes_done < c.r.n_sample_prompts; ++i) {
        const FeatureFrameSeq held = corpus::load_record_frames(c.corp, *c.held_recs[i]);
        if (want_frames < 1 || held.n_frames() < want_frames) continue;
        sample::SampleConfig sc = c.r.sampling;
        sc.seed =
            rng::derive_seed(c.r.seed, "sample-probe", static_cast<std::uint64_t>(probes_done));
        ++probes_done;
        const sample::ContinueResult res =
            sample::continue_audio(*c.params, *c.codec, c.vocab, held, c.r.prompt_seconds, sc);
        total_repaired += res.repaired;
        total_dropped += res.dropped_partial;
        double sim = std::numeric_limits<double>::quiet_NaN();
        if (res.continuation.n_frames() > 0) {
            FeatureFrameSeq head;
            head.frame_rate_hz = held.frame_rate_hz;
            head.frames = held.frames.topRows(want_frames);
            try {
                sim = eval::speaker_similarity(c.r.corpus, head, res.continuation);
                sims.push_back(sim);
            } catch (const DataError&) {
                // zero-norm speaker block in the continuation; leave NaN
            }
        }
        json s;
        s["record"] = c.held_recs[i]->id;
        s["prompt_frames"] = res.prompt_frames;
        s["generated_frames"] = static_cast<std::int64_t>(res.continuation.n_frames());
        s["repaired"] = res.repaired;
        s["dropped_partial"] = res.dropped_partial;
        s["stop_reason"] = res.gen.stop_reason;
        s["speaker_sim"] = number_or_null(sim);
        rows.push_back(std::move(s));
    }
    double mean_sim = std::numeric_limits<double>::quiet_NaN();
    if (!sims.empty()) {
        KahanSum sum;
        for (double v : sims) sum.add(v);
        mean_sim = sum.value() / static_cast<double>(sims.size());
    }
    json sj;
    sj["n"] = probes_done;
    sj["n_scored"] = static_cast<std::int64_t>(sims.size());
    sj["total_repaired"] = total_repaired;
    sj["total_dropped"] = total_dropped;
    sj["mean_speaker_sim"] = number_or_null(mean_sim);
    sj["samples"] = std::move(rows);
    write_file_atomic(out.samples_path, sj.dump(2) + "\n");
    write_stamp(out.samples_path + ".stamp", c.keys.samples);
}

void stage_eval(PipelineCtx& c, bool target) {
    PipelineResult& out = *c.out;
    if (eval_current(c)) {
        out.eval_report = eval::eval_report_from_json(read_file(out.eval_path));
        out.eval_reused = true;
        return;
    }
    if (!target && c.strict) missing_upstream("eval.json", "eval");

    std::vector<eval::EvalPair> pairs;
    for (eval::Task task : eval::all_tasks()) {
        std::vector<eval::EvalPair> task_pairs =
            eval::build_pairs(c.corp, c.lang, *c.codec, c.vocab, task, c.r.eval_pairs,
                              rng::derive_seed(c.r.seed, "eval-pairs"));
        pairs.insert(pairs.end(), std::make_move_iterator(task_pairs.begin()),
                     std::make_move_iterator(task_pairs.end()));
    }
    out.eval_report = eval::paired_accuracy(*c.params, c.vocab, pairs);
    write_file_atomic(out.eval_path, eval::eval_report_to_json(out.eval_report));
    write_stamp(out.eval_path + ".stamp", c.keys.eval);
}

void stage_ablation(PipelineCtx& c, bool target) {
    PipelineResult& out = *c.out;
    if (ablation_current(c)) {
        out.ablation = eval::ablation_from_json(read_file(out.ablation_path));
        out.ablation_reused = true;
        return;
    }
    if (!target && c.strict) missing_upstream("ablation.json", "ablate");

    judge::JudgeClient* judge_ptr = nullptr;
    std::unique_ptr<judge::JudgeClient> judge_client;
    if (!c.r.judge.endpoint.empty()) {
        judge::JudgeConfig jc = c.r.judge;
        if (jc.cache_dir.empty()) jc.cache_dir = c.root + "/judge-cache";
        judge_client = std::make_unique<judge::JudgeClient>(jc);
        judge_ptr = judge_client.get();
    }
    out.ablation = eval::run_ablation(c.corp, c.lang, c.r.ablation, judge_ptr, c.sink,
                                      c.root + "/ablation");
    write_file_atomic(out.ablation_path, eval::ablation_to_json(out.ablation));
    write_stamp(out.ablation_path + ".stamp", c.keys.ablation);
}

void verify_artifact(const std::string& path, const std::string& expected,
                     const std::string& name) {
    if (expected.empty()) return;  // no digest recorded: nothing to audit against
    if (sha256_hex_file(path) != expected) {
        throw FormatError("report: " + name +
                          " does not match its recorded digest — artifact corrupt or tampered");
    }
}

/// Assembled purely from stage artifacts and sidecars, so the bytes cannot
/// depend on which stages were rebuilt versus reused.
void stage_report(PipelineCtx& c) {
    PipelineResult& out = *c.out;
    const StageMeta corpus_m = read_meta(out.corpus_dir + ".meta.json");
    const StageMeta codec_m = read_meta(out.codec_path + ".meta.json");
    const StageMeta lm_m = read_meta(out.lm_path + ".meta.json");
    verify_artifact(out.corpus_dir + "/index.jsonl", corpus_m.file_digest, "corpus/index.jsonl");
    verify_artifact(out.codec_path, codec_m.file_digest, "codec.rvq");
    verify_artifact(out.lm_path, lm_m.file_digest, "slm.lmc");

    json report;
    report["config"] = json::parse(config_to_json(c.r));
    report["corpus"] = {{"n_train", corpus_m.n_train},
                        {"n_heldout", corpus_m.n_heldout},
                        {"heldout_frames", corpus_m.heldout_frames}};
    report["codec"] = {{"recon_mse", codec_m.recon_mse}, {"per_level", codec_m.per_level}};
    if (c.r.twist_init) {
        const StageMeta text_m = read_meta(out.text_lm_path + ".meta.json");
        verify_artifact(out.text_lm_path, text_m.file_digest, "text_lm.lmc");
        report["text_lm"] = {{"initial_loss", text_m.initial_loss},
                             {"final_loss", text_m.final_loss}};
    } else {
        report["text_lm"] = nullptr;
    }
    report["lm"] = {{"initial_loss", lm_m.initial_loss},
                    {"final_loss", lm_m.final_loss},
                    {"final_heldout_loss", number_or_null(lm_m.final_heldout_loss)},
                    {"model_digest", lm_m.model_digest}};
    {
        const json ev = json::parse(read_file(out.eval_path));
        json rows = json::array();
        for (const json& t : ev.at("tasks")) {
            rows.push_back({{"task", t.at("task")},
                            {"n_pairs", t.at("n_pairs")},
                            {"accuracy", t.at("accuracy")},
                            {"accuracy_full", t.at("accuracy_full")},
                            {"accuracy_semantic", t.at("accuracy_semantic")}});
        }
        report["eval"] = std::move(rows);
    }
    {
        const json sj = json::parse(read_file(out.samples_path));
        report["samples"] = {{"n", sj.at("n")},
                             {"n_scored", sj.at("n_scored")},
                             {"total_repaired", sj.at("total_repaired")},
                             {"total_dropped", sj.at("total_dropped")},
                             {"mean_speaker_sim", sj.at("mean_speaker_sim")}};
    }
    if (c.r.ablate) {
        const json ab = json::parse(read_file(out.ablation_path));
        json rows = json::array();
        for (const json& row : ab.at("rows")) {
            rows.push_back({{"q_levels", row.at("q_levels")},
                            {"recon_mse", row.at("recon_mse")},
                            {"speaker_sim", row.at("speaker_sim")},
                            {"syntax_acc", row.at("syntax_acc")},
                            {"content_score", row.at("content_score")},
                            {"content_kind", row.at("content_kind")},
                            {"all_converged", row.at("all_converged")},
                            {"note", row.at("note")}});
        }
        report["ablation"] = std::move(rows);
    } else {
        report["ablation"] = nullptr;
    }
    out.report_json = report.dump(2) + "\n";
    write_file_atomic(out.report_path, out.report_json);
}

void finish_manifest(PipelineCtx& c) {
    PipelineResult& out = *c.out;
    std::vector<std::pair<std::string, std::string>> artifacts;
    const auto add = [&artifacts](const std::string& name, const std::string& path) {
        if (file_exists(path)) artifacts.emplace_back(name, sha256_hex_file(path));
    };
    add("corpus/index.jsonl", out.corpus_dir + "/index.jsonl");
    add("codec.rvq", out.codec_path);
    add("text_lm.lmc", out.text_lm_path);
    add("slm.lmc", out.lm_path);
    add("samples.json", out.samples_path);
    add("eval.json", out.eval_path);
    add("ablation.json", out.ablation_path);
    add("report.json", out.report_path);
    write_manifest(out.manifest_path, c.r, artifacts);
}

}  // namespace

PipelineResult run_stage(const ExperimentConfig& config, const std::string& root, Stage until,
                         bool require_upstream, train::MetricsSink sink) {
    config.validate();
    PipelineCtx c;
    c.r = resolve_config(config);
    c.keys = stage_keys(c.r);
    c.root = root;
    c.sink = std::move(sink);
    c.strict = require_upstream;
    ensure_dir(root);

    PipelineResult out;
    out.resolved = c.r;
    out.corpus_dir = root + "/corpus";
    out.codec_path = root + "/codec.rvq";
    out.text_lm_path = root + "/text_lm.lmc";
    out.lm_path = root + "/slm.lmc";
    out.eval_path = root + "/eval.json";
    out.ablation_path = root + "/ablation.json";
    out.samples_path = root + "/samples.json";
    out.report_path = root + "/report.json";
    out.manifest_path = root + "/manifest.json";
    c.out = &out;
    c.vocab = vocab_for(c.r);

    stage_corpus(c, until == Stage::kCorpus);
    if (until == Stage::kCorpus) {
        finish_manifest(c);
        return out;
    }
    if (until == Stage::kAblation) {
        // The ablation grid fits its own codecs and trains its own models;
        // it hangs off the corpus alone.
        stage_ablation(c, true);
        finish_manifest(c);
        return out;
    }
    stage_codec(c, until == Stage::kCodec);
    if (until == Stage::kCodec) {
        finish_manifest(c);
        return out;
    }
    const bool downstream_current = samples_current(c) && eval_current(c);
    const bool need_params = until != Stage::kLm && !downstream_current;
    stage_lm(c, until == Stage::kLm, need_params);
    if (until == Stage::kLm) {
        finish_manifest(c);
        return out;
    }
    stage_samples(c, until == Stage::kEval);
    stage_eval(c, until == Stage::kEval);
    if (until == Stage::kEval) {
        finish_manifest(c);
        return out;
    }
    if (c.r.ablate) stage_ablation(c, false);
    stage_report(c);
    finish_manifest(c);
    return out;
}

PipelineResult run_pipeline(const ExperimentConfig& config, const std::string& root,
                            train::MetricsSink sink) {
    return run_stage(config, root, Stage::kReport, false, std::move(sink));
}


std::string render_report(const std::string& report_json) {
    const json j = json::parse(report_json);
    std::ostringstream os;
    os << std::fixed;

    const json& corpus = j.at("corpus");
    os << "corpus: " << corpus.at("n_train").get<std::int64_t>() << " train / "
       << corpus.at("n_heldout").get<std::int64_t>() << " held-out utterances, "
       << corpus.at("heldout_frames").get<std::int64_t>() << " held-out frames\n";

    const json& codec = j.at("codec");
    os << "codec:  recon mse " << std::setprecision(6) << codec.at("recon_mse").get<double>()
       << "  per level:";
    for (const json& v : codec.at("per_level")) {
        os << " " << std::setprecision(6) << v.get<double>();
    }
    os << "\n";

    if (!j.at("text_lm").is_null()) {
        const json& t = j.at("text_lm");
        os << "text model:  loss " << std::setprecision(4) << t.at("initial_loss").get<double>()
           << " -> " << t.at("final_loss").get<double>() << "\n";
    }
    const json& lm = j.at("lm");
    os << "audio model: loss " << std::setprecision(4) << lm.at("initial_loss").get<double>()
       << " -> " << lm.at("final_loss").get<double>();
    if (!lm.at("final_heldout_loss").is_null()) {
        os << "  (held-out " << std::setprecision(4) << lm.at("final_heldout_loss").get<double>()
           << ")";
    }
    os << "\n";

    const json& samples = j.at("samples");
    os << "samples: " << samples.at("n").get<std::int64_t>() << " probes";
    if (!samples.at("mean_speaker_sim").is_null()) {
        os << ", mean speaker similarity " << std::setprecision(4)
           << samples.at("mean_speaker_sim").get<double>();
    }
    os << ", repaired " << samples.at("total_repaired").get<std::int64_t>() << ", dropped "
       << samples.at("total_dropped").get<std::int64_t>() << "\n";

    os << "\n" << std::left << std::setw(12) << "task" << std::right << std::setw(7) << "pairs"
       << std::setw(10) << "accuracy" << std::setw(10) << "full" << std::setw(10) << "semantic"
       << "\n";
    for (const json& t : j.at("eval")) {
        os << std::left << std::setw(12) << t.at("task").get<std::string>() << std::right
           << std::setw(7) << t.at("n_pairs").get<std::int64_t>() << std::setw(10)
           << std::setprecision(4) << t.at("accuracy").get<double>() << std::setw(10)
           << t.at("accuracy_full").get<double>() << std::setw(10)
           << t.at("accuracy_semantic").get<double>() << "\n";
    }

    if (!j.at("ablation").is_null()) {
        os << "\n" << std::left << std::setw(4) << "Q" << std::right << std::setw(12)
           << "recon_mse" << std::setw(13) << "speaker_sim" << std::setw(12) << "syntax_acc"
           << std::setw(10) << "content" << "  kind\n";
        for (const json& row : j.at("ablation")) {
            os << std::left << std::setw(4) << row.at("q_levels").get<int>() << std::right;
            const auto cell = [&os](const json& v, int w) {
                if (v.is_null()) {
                    os << std::setw(w) << "—";
                } else {
                    os << std::setw(w) << std::setprecision(4) << v.get<double>();
                }
            };
            cell(row.at("recon_mse"), 12);
            cell(row.at("speaker_sim"), 13);
            cell(row.at("syntax_acc"), 12);
            cell(row.at("content_score"), 10);
            os << "  " << row.at("content_kind").get<std::string>();
            if (!row.at("all_converged").get<bool>()) os << "  (not converged)";
            const std::string note = row.value("note", std::string());
            if (!note.empty()) os << "  (" << note << ")";
            os << "\n";
        }
    } else {
        os << "\nablation: — (not run; enable with ablate = true)\n";
    }
    return os.str();
}

}  // namespace slm::exp
