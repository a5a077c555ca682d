#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "slm/lm.hpp"
#include "slm/tokenstream.hpp"

namespace slm::train {

/// Warmup-stable-decay: linear 0 -> peak over `warmup_steps`, flat plateau
/// for `stable_fraction` of the post-warmup budget, then linear to `end_lr`
/// at `total_steps`.
struct WsdSchedule {
    std::int64_t total_steps = 100000;
    std::int64_t warmup_steps = 1500;
    double peak_lr = 3e-4;
    double end_lr = 3e-5;
    double stable_fraction = 0.8;

    std::int64_t decay_start() const;
    void validate() const;
};

/// Learning rate at `step` in [0, total_steps]; throws RangeError outside.
double lr_at(const WsdSchedule& schedule, std::int64_t step);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;  // skipped for norm gains
    double clip_norm = 1.0;     // global-norm clip; <= 0 disables

    void validate() const;
};

/// First/second moment per tensor, in canonical tensor order.
struct AdamState {
    std::int64_t step = 0;  // completed update steps
    std::vector<std::pair<std::string, Eigen::VectorXf>> m, v;

    static AdamState init_for(const lm::LmParams& params);
    lm::OptimizerState to_slots() const;
    static AdamState from_slots(const lm::OptimizerState& slots, const lm::LmParams& params);
};

double global_grad_norm(const lm::LmParams& grads);

/// One decoupled-weight-decay Adam step on `params` from mean gradients;
/// advances `state.step`.
void adamw_update(lm::LmParams& params, const lm::LmParams& grads, AdamState& state,
                  const AdamConfig& config, double lr);

struct SeqData {
    std::vector<std::string> names;
    std::vector<std::vector<tokens::TokenId>> seqs;

    std::size_t size() const { return seqs.size(); }
    /// Throws DataError naming the first over-long sequence.
    void check_lengths(int max_seq_len) const;
};

struct TrainConfig {
    std::int64_t steps = 3000;
    int batch_size = 32;
    WsdSchedule schedule;
    AdamConfig adam;
    std::uint64_t seed = 0;
    lm::ScoreMask loss_mask;  // defaults to all positions
    std::int64_t log_every = 50;
    std::int64_t eval_every = 250;
    int eval_sequences = 64;
    std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only

    void validate() const;
};

struct MetricsRow {
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    double tokens_per_sec = 0.0;
    std::string split;  // "train" | "heldout"
};

using MetricsSink = std::function<void(const MetricsRow&)>;

struct TrainResult {
    lm::LmParams params;
    AdamState adam;
    std::vector<MetricsRow> heldout_curve;
    double initial_loss = 0.0;  // first train batch, before any update
    double final_loss = 0.0;    // last train batch
};

/// Index of the sequence used by batch slot `slot` of `step`: a pure
/// function of (seed, step), so an interrupted run resumes bit-exactly.
std::size_t batch_sequence_index(std::uint64_t seed, std::int64_t step, int slot, int batch_size,
                                 std::size_t n_sequences);

/// Runs (or, with `start` from a loaded checkpoint, continues) the training
/// loop. Checkpoints land in `checkpoint_dir` when it is non-empty.
TrainResult train_lm(lm::LmParams params, const tokens::UnifiedVocab& vocab,
                     const SeqData& train_data, const SeqData& heldout_data,
                     const TrainConfig& config, const std::string& checkpoint_dir = "",
                     MetricsSink sink = nullptr, AdamState* resume_state = nullptr);

double mean_heldout_loss(const lm::LmParams& params, const tokens::UnifiedVocab& vocab,
                         const SeqData& data, const lm::ScoreMask& mask,
                         const std::vector<std::size_t>& subset);

}  // namespace slm::train
