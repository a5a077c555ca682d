#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "slm/corpus.hpp"
#include "slm/eval.hpp"
#include "slm/judge.hpp"
#include "slm/lm.hpp"
#include "slm/rvq.hpp"
#include "slm/sampler.hpp"
#include "slm/tokenstream.hpp"
#include "slm/trainer.hpp"

namespace slm::exp {

/// Everything one end-to-end run needs, addressable as dotted keys
/// ("corpus.max_frames", "train.schedule.peak_lr", ...). `seed` is the only
/// seed knob: resolve_config() derives every stage seed from it, so the
/// per-stage seed fields here are outputs, not inputs.
struct ExperimentConfig {
    std::uint64_t seed = 42;

    corpus::CorpusConfig corpus;
    rvq::RvqConfig rvq;

    lm::LmConfig lm;          // audio model; vocab_size derived, max_seq_len 0 = derived
    train::TrainConfig train;

    bool twist_init = false;  // warm-start the audio model from the text model
    lm::LmConfig text_lm;     // transcript model; vocab_size/max_seq_len derived
    train::TrainConfig text_train;

    sample::SampleConfig sampling;
    int n_sample_prompts = 4;    // held-out continuation probes in the pipeline
    double prompt_seconds = 2.0;
    int eval_pairs = 64;         // per task

    bool ablate = false;
    eval::AblationConfig ablation;

    judge::JudgeConfig judge;  // endpoint empty = judging disabled

    ExperimentConfig();

    /// Per-module validation plus cross-module checks, each naming the
    /// offending dotted fields.
    void validate() const;
};

/// Applies `key = value` to one dotted field. Lists (room_values, q_list)
/// take comma-separated values. Throws ConfigError for an unknown key or an
/// unparsable value, naming both.
void apply_override(ExperimentConfig& config, std::string_view key, std::string_view value);

/// key = value lines; '#' starts a comment, blank lines are skipped, later
/// assignments win.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);

/// Full echo of every addressable field (resolved or not), with
/// deterministic key order; parse_config(config_to_text(c)) round-trips.
std::string config_to_json(const ExperimentConfig& config);
std::string config_to_text(const ExperimentConfig& config);

/// Copy with derived fields filled in: stage seeds from `seed`, the unified
/// vocabulary sizes, audio/text context lengths, ablation sub-budgets.
ExperimentConfig resolve_config(const ExperimentConfig& config);

/// Unified id space implied by the corpus and codec shapes.
tokens::UnifiedVocab vocab_for(const ExperimentConfig& config);

/// Digest of the artifacts a stage depends on; stages rebuild when it
/// changes. A stage's sidecar "<artifact>.stamp" stores this key.
struct StageKeys {
    std::string corpus;
    std::string codec;
    std::string text_lm;
    std::string lm;
    std::string samples;
    std::string eval;
    std::string ablation;
};
StageKeys stage_keys(const ExperimentConfig& resolved);

/// manifest.json: config echo plus named artifact digests. No timestamps,
/// no absolute paths — identical runs write identical bytes.
void write_manifest(const std::string& path, const ExperimentConfig& resolved,
                    const std::vector<std::pair<std::string, std::string>>& artifacts);

struct PipelineResult {
    ExperimentConfig resolved;

    std::string corpus_dir, codec_path, text_lm_path, lm_path;
    std::string eval_path, ablation_path, samples_path, report_path, manifest_path;
    bool corpus_reused = false, codec_reused = false;
    bool text_lm_reused = false, lm_reused = false;
    bool samples_reused = false, eval_reused = false, ablation_reused = false;

    double recon_mse = 0.0;  // full-depth codec error on held-out frames
    double text_initial_loss = 0.0, text_final_loss = 0.0;
    double lm_initial_loss = 0.0, lm_final_loss = 0.0, lm_final_heldout_loss = 0.0;

    eval::EvalReport eval_report;   // populated from stage kEval onward
    eval::AblationTable ablation;   // empty unless config.ablate
    std::string report_json;        // bytes written to report_path (stage kReport)
};

/// Pipeline stages in dependency order. kLm covers the optional text-model
/// warm start; kEval covers sampling probes plus paired evaluation; kReport
/// assembles report.json from the stage artifacts.
enum class Stage { kCorpus, kCodec, kLm, kEval, kAblation, kReport };

/// Runs the pipeline up to and including `until`, reusing any artifact under
/// `root` whose stamp still matches. With `require_upstream`, stages before
/// `until` must already be present and current — a missing one raises
/// IoError naming the stage — which is how the staged command-line flow
/// enforces its preconditions. kAblation depends only on the corpus stage.
PipelineResult run_stage(const ExperimentConfig& config, const std::string& root, Stage until,
                         bool require_upstream, train::MetricsSink sink = nullptr);

/// Runs corpus -> codec -> (text model ->) audio model -> sampling probes
/// -> paired evaluation (-> ablation) -> report, reusing any artifact under
/// `root` whose stamp still matches. Identical config + fresh root twice
/// gives byte-identical report.json.
PipelineResult run_pipeline(const ExperimentConfig& config, const std::string& root,
                            train::MetricsSink sink = nullptr);

/// Human-readable summary of a pipeline report (the JSON bytes).
std::string render_report(const std::string& report_json);

}  // namespace slm::exp
