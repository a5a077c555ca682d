#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "slm/corpus.hpp"
#include "slm/judge.hpp"
#include "slm/lm.hpp"
#include "slm/rvq.hpp"
#include "slm/sampler.hpp"
#include "slm/tokenstream.hpp"
#include "slm/trainer.hpp"

namespace slm::eval {

/// Paired-likelihood tasks. The first four switch one acoustic factor
/// mid-utterance (natural vs unnatural rendering of the same content); the
/// last three contrast semantic content (real vs pseudo-word, grammatical
/// vs agreement-violating, on-topic vs off-topic continuation).
enum class Task { kSpeaker, kSentiment, kBackground, kRoom, kLexical, kSyntax, kTopic };

std::string_view task_name(Task task);
Task task_from_name(std::string_view name);  // throws ConfigError for unknown names
const std::vector<Task>& all_tasks();

/// Factor-switch tasks compare full-sequence likelihoods; semantic tasks
/// restrict scoring to first-level audio tokens.
bool is_consistency_task(Task task);

struct EvalPair {
    Task task = Task::kSpeaker;
    tokens::InterleavedSeq pos_ids, neg_ids;  // always equal length
    std::string pos_label, neg_label;
    int switch_frame = -1;        // factor-switch tasks only
    int prompt_token_count = 0;   // topic: shared-prefix tokens excluded from scoring
};

/// Builds `n` deterministic pairs for `task`.
///
/// Factor-switch pairs re-render held-out utterances (the whole corpus when
/// the held-out split is empty) with one factor switched inside the middle
/// third of the frames; semantic pairs render fresh sentences from the
/// language with matched phoneme counts, so pos and neg always tokenize to
/// the same length. Throws CapacityError when `n` exceeds the number of
/// distinct factor-switch combinations the corpus offers (records x
/// alternative values x switch positions) or the language cannot vary.
std::vector<EvalPair> build_pairs(const corpus::Corpus& corpus, const corpus::Language& lang,
                                  const rvq::RvqCodec& codec, const tokens::UnifiedVocab& vocab,
                                  Task task, int n, std::uint64_t seed);

/// Which masking decides wins. kPerPaper: full-sequence for factor-switch
/// tasks, semantic-only for the rest.
enum class MaskMode { kPerPaper, kFull, kSemanticOnly };

struct PairMargins {
    double full = 0.0;      // sum log p(pos) - sum log p(neg) over all targets
    double semantic = 0.0;  // same, first-level audio targets only
};

struct TaskReport {
    Task task = Task::kSpeaker;
    std::int64_t n_pairs = 0;
    std::int64_t wins = 0, ties = 0;       // under the deciding masking
    double accuracy = 0.0;                 // (wins + 0.5 * ties) / n_pairs
    double accuracy_full = 0.0;            // same formula under each fixed masking
    double accuracy_semantic = 0.0;
    std::vector<PairMargins> margins;      // per pair, in input order
};

struct EvalReport {
    std::vector<TaskReport> tasks;  // first-seen task order
    std::string model_digest;
    std::string config_digest;
    MaskMode mask_mode = MaskMode::kPerPaper;
};

/// (wins + 0.5 * ties) / n over signed margins; positive = win, zero = tie.
double accuracy_from_margins(const std::vector<double>& margins);

/// Scores every pair with one forward pass per sequence; both maskings are
/// read off the same per-token log-probs. For topic pairs only targets past
/// the shared prompt prefix count. Throws DataError on an empty pair set.
EvalReport paired_accuracy(const lm::LmParams& params, const tokens::UnifiedVocab& vocab,
                           const std::vector<EvalPair>& pairs,
                           MaskMode mask_mode = MaskMode::kPerPaper);

std::string_view mask_mode_name(MaskMode mode);
MaskMode mask_mode_from_name(std::string_view name);  // throws ConfigError for unknown names

std::string eval_report_to_json(const EvalReport& report);
/// Inverse of eval_report_to_json; throws FormatError on malformed input.
EvalReport eval_report_from_json(std::string_view text);
/// Text table: factor-switch block, then semantic block.
std::string render_eval_table(const EvalReport& report);

/// Cosine similarity of the speaker components recovered from two frame
/// segments. The rendering model confines speaker identity to a dedicated
/// coordinate block (content, background, prosody and jitter live in the
/// other blocks), so the least-squares speaker probe reduces to averaging
/// that block over frames. Throws DataError for an empty segment or a
/// zero-norm recovered vector, LayoutError for a width mismatch.
double speaker_similarity(const corpus::CorpusConfig& config, const FeatureFrameSeq& prompt,
                          const FeatureFrameSeq& continuation);

/// One training-and-evaluation budget applied identically to every
/// quantizer count. `rvq.q_levels`, `lm.vocab_size` and `lm.max_seq_len`
/// are derived per cell; everything else is shared.
struct AblationConfig {
    std::vector<int> q_list = {2, 4, 8};
    int n_seeds = 3;
    std::uint64_t seed = 0;

    rvq::RvqConfig rvq;        // codebook_size, kmeans_iters, max_fit_frames
    lm::LmConfig lm;           // d_model, n_layers, n_heads, d_ff
    train::TrainConfig train;  // steps, batch_size, schedule — the matched budget

    int max_fit_records = 2000;      // records feeding codec fitting (0 = all)
    int max_train_records = 0;       // records tokenized for training (0 = all)
    int max_heldout_records = 256;   // records for held-out loss/recon (0 = all)
    int n_syntax_pairs = 64;
    int n_prompts = 12;              // generation probes per cell
    double prompt_seconds = 2.0;
    sample::SampleConfig sampling;   // constrained by default: probes measure
                                     // acoustics, not format discipline

    AblationConfig() { sampling.constrain_order = true; }
    void validate() const;
};

struct AblationCell {
    int q_levels = 0;
    std::uint64_t seed = 0;
    double recon_mse = 0.0;
    double speaker_sim = 0.0;   // NaN when no probe produced frames
    double syntax_acc = 0.0;
    double content_score = 0.0; // judge mean, or syntax_acc as proxy
    std::string content_kind;   // "judge" | "syntax-proxy"
    bool converged = true;      // final train loss cut >= 10% below initial
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double final_heldout_loss = 0.0;
};

struct AblationRow {
    int q_levels = 0;
    // Medians over seeds; NaN cells are skipped, all-NaN stays NaN.
    double recon_mse = 0.0;
    double speaker_sim = 0.0;
    double syntax_acc = 0.0;
    double content_score = 0.0;
    std::string content_kind;
    bool all_converged = true;
    std::string note;  // why a median is missing, "" otherwise
    std::vector<AblationCell> cells;
};

struct AblationTable {
    std::vector<AblationRow> rows;  // Q ascending
};

/// Median of the non-NaN entries; NaN when none remain.
double median(std::vector<double> values);

/// Fits one codec and trains one model per (Q, seed) cell under the shared
/// budget, then measures reconstruction error, speaker similarity of
/// sampled continuations, syntax-pair accuracy, and content quality
/// (judge score when `judge_client` is non-null, syntax accuracy as the
/// recorded proxy otherwise). An under-trained cell sets `converged` false
/// instead of failing. A non-empty `artifact_dir` persists each cell's
/// codec and checkpoint under `<artifact_dir>/q<Q>/seed<k>/`.
AblationTable run_ablation(const corpus::Corpus& corpus, const corpus::Language& lang,
                           const AblationConfig& config,
                           judge::JudgeClient* judge_client = nullptr,
                           train::MetricsSink sink = nullptr,
                           const std::string& artifact_dir = "");

std::string ablation_to_json(const AblationTable& table);
/// Inverse of ablation_to_json; throws FormatError on malformed input.
AblationTable ablation_from_json(std::string_view text);
/// Four-column text table ordered by Q; missing medians render as em
/// dashes with the row note.
std::string render_ablation_table(const AblationTable& table);

}  // namespace slm::eval
