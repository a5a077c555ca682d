#include "slm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "slm/io.hpp"
#include "slm/kahan.hpp"

namespace slm::train {

std::int64_t WsdSchedule::decay_start() const {
    return warmup_steps +
           static_cast<std::int64_t>(stable_fraction *
                                     static_cast<double>(total_steps - warmup_steps));
}

void WsdSchedule::validate() const {
    const auto fail = [](const std::string& msg) { throw ConfigError("schedule: " + msg); };
    if (total_steps < 1) fail("total_steps must be >= 1");
    if (warmup_steps < 0 || warmup_steps > total_steps) {
        fail("warmup_steps must lie in [0, total_steps]");
    }
    if (peak_lr <= 0.0) fail("peak_lr must be positive");
    if (end_lr < 0.0 || end_lr > peak_lr) fail("end_lr must lie in [0, peak_lr]");
    if (stable_fraction < 0.0 || stable_fraction > 1.0) {
        fail("stable_fraction must lie in [0, 1]");
    }
}

double lr_at(const WsdSchedule& s, std::int64_t step) {
    s.validate();
    if (step < 0 || step > s.total_steps) {
        std::ostringstream os;
        os << "lr_at: step " << step << " outside [0, " << s.total_steps << "]";
        throw RangeError(os.str());
    }
    if (step <= s.warmup_steps) {
        if (s.warmup_steps == 0) return s.peak_lr;
        return s.peak_lr * (static_cast<double>(step) / static_cast<double>(s.warmup_steps));
    }
    const std::int64_t decay_from = s.decay_start();
    if (step <= decay_from) return s.peak_lr;
    if (step == s.total_steps) return s.end_lr;
    const double frac = static_cast<double>(step - decay_from) /
                        static_cast<double>(s.total_steps - decay_from);
    return s.peak_lr + (s.end_lr - s.peak_lr) * frac;
}

void AdamConfig::validate() const {
    const auto fail = [](const std::string& msg) { throw ConfigError("adam: " + msg); };
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must lie in [0, 1)");
    if (eps <= 0.0) fail("eps must be positive");
    if (weight_decay < 0.0) fail("weight_decay must be >= 0");
}

AdamState AdamState::init_for(const lm::LmParams& params) {
    AdamState st;
    params.for_each_tensor([&st](const std::string& name, const float*, Eigen::Index size) {
        st.m.emplace_back(name, Eigen::VectorXf::Zero(size));
        st.v.emplace_back(name, Eigen::VectorXf::Zero(size));
    });
    return st;
}

lm::OptimizerState AdamState::to_slots() const {
    lm::OptimizerState out;
    out.step = step;
    for (const auto& [name, values] : m) out.slots.emplace_back("adam.m." + name, values);
    for (const auto& [name, values] : v) out.slots.emplace_back("adam.v." + name, values);
    return out;
}

AdamState AdamState::from_slots(const lm::OptimizerState& slots, const lm::LmParams& params) {
    AdamState st = init_for(params);
    st.step = slots.step;
    std::size_t matched = 0;
    for (const auto& [name, values] : slots.slots) {
        auto fill = [&](std::vector<std::pair<std::string, Eigen::VectorXf>>& dst,
                        const std::string& bare) {
            for (auto& [tname, slot] : dst) {
                if (tname != bare) continue;
                if (slot.size() != values.size()) {
                    throw FormatError("optimizer slot '" + name + "' has the wrong size");
                }
                slot = values;
                ++matched;
                return true;
            }
            return false;
        };
        bool ok = false;
        if (name.rfind("adam.m.", 0) == 0) ok = fill(st.m, name.substr(7));
        else if (name.rfind("adam.v.", 0) == 0) ok = fill(st.v, name.substr(7));
        if (!ok) throw FormatError("unknown optimizer slot '" + name + "'");
    }
    if (matched != st.m.size() + st.v.size()) {
        throw FormatError("optimizer state is missing moment slots");
    }
    return st;
}

double global_grad_norm(const lm::LmParams& grads) {
    KahanSum sq;
    grads.for_each_tensor([&sq](const std::string&, const float* data, Eigen::Index size) {
        for (Eigen::Index i = 0; i < size; ++i) {
            sq.add(static_cast<double>(data[i]) * static_cast<double>(data[i]));
        }
    });
    return std::sqrt(sq.value());
}

void adamw_update(lm::LmParams& params, const lm::LmParams& grads, AdamState& state,
                  const AdamConfig& config, double lr) {
    config.validate();
    const std::int64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
    std::size_t slot = 0;
    params.for_each_tensor([&](const std::string& name, float* theta, Eigen::Index size) {
        auto& [mname, m] = state.m[slot];
        auto& [vname, v] = state.v[slot];
        if (mname != name || m.size() != size) {
            throw LayoutError("optimizer state does not match model tensor '" + name + "'");
        }
        const float* g = nullptr;
        grads.for_each_tensor([&](const std::string& gname, const float* gdata, Eigen::Index) {
            if (gname == name) g = gdata;
        });
        const bool decay = config.weight_decay > 0.0 && name.find("norm") == std::string::npos;
        for (Eigen::Index i = 0; i < size; ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = config.beta1 * static_cast<double>(m(i)) + (1.0 - config.beta1) * gi;
            const double vi =
                config.beta2 * static_cast<double>(v(i)) + (1.0 - config.beta2) * gi * gi;
            m(i) = static_cast<float>(mi);
            v(i) = static_cast<float>(vi);
            const double m_hat = mi / bc1;
            const double v_hat = vi / bc2;
            double update = m_hat / (std::sqrt(v_hat) + config.eps);
            if (decay) update += config.weight_decay * static_cast<double>(theta[i]);
            theta[i] = static_cast<float>(static_cast<double>(theta[i]) - lr * update);
        }
        ++slot;
    });
    state.step = t;
}

void SeqData::check_lengths(int max_seq_len) const {
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (static_cast<int>(seqs[i].size()) > max_seq_len) {
            const std::string name = i < names.size() ? names[i] : std::to_string(i);
            std::ostringstream os;
            os << "sequence '" << name << "' has " << seqs[i].size()
               << " tokens, exceeding max_seq_len " << max_seq_len
               << "; lower corpus.max_frames or raise lm.max_seq_len";
            throw DataError(os.str());
        }
        if (seqs[i].size() < 2) {
            const std::string name = i < names.size() ? names[i] : std::to_string(i);
            throw DataError("sequence '" + name + "' is too short to score (needs >= 2 tokens)");
        }
    }
}

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (eval_every < 0 || log_every < 0 || checkpoint_every < 0) {
        throw ConfigError("train: intervals must be >= 0");
    }
    if (eval_sequences < 1) throw ConfigError("train: eval_sequences must be >= 1");
    schedule.validate();
    adam.validate();
}

std::size_t batch_sequence_index(std::uint64_t seed, std::int64_t step, int slot, int batch_size,
                                 std::size_t n_sequences) {
    // Epoch-wise permutations addressed by flat position, never by stream
    // state, so step k's batch is the same whether or not steps 0..k-1 ran
    // in this process.
    const std::int64_t flat = step * batch_size + slot;
    const std::int64_t n = static_cast<std::int64_t>(n_sequences);
    const std::int64_t epoch = flat / n;
    const std::int64_t offset = flat % n;
    std::vector<std::uint32_t> perm(n_sequences);
    for (std::size_t i = 0; i < n_sequences; ++i) perm[i] = static_cast<std::uint32_t>(i);
    rng::Rng rng(rng::derive_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(perm);
    return perm[static_cast<std::size_t>(offset)];
}

namespace {

/// Cache of the current epoch's permutation; rebuilding per batch would be
/// quadratic in corpus size.
struct BatchCursor {
    std::uint64_t seed;
    std::size_t n;
    std::int64_t cached_epoch = -1;
    std::vector<std::uint32_t> perm;

    std::size_t index(std::int64_t step, int slot, int batch_size) {
        const std::int64_t flat = step * batch_size + slot;
        const std::int64_t epoch = flat / static_cast<std::int64_t>(n);
        if (epoch != cached_epoch) {
            perm.resize(n);
            for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<std::uint32_t>(i);
            rng::Rng rng(rng::derive_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
            rng.shuffle(perm);
            cached_epoch = epoch;
        }
        return perm[static_cast<std::size_t>(flat % static_cast<std::int64_t>(n))];
    }
};

std::string checkpoint_name(std::int64_t step) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "ckpt_%08lld.lmc", static_cast<long long>(step));
    return buf;
}

}  // namespace

double mean_heldout_loss(const lm::LmParams& params, const tokens::UnifiedVocab& vocab,
                         const SeqData& data, const lm::ScoreMask& mask,
                         const std::vector<std::size_t>& subset) {
    KahanSum total;
    std::int64_t count = 0;
    for (std::size_t idx : subset) {
        const auto& ids = data.seqs[idx];
        const lm::ScoreResult r = lm::score(params, vocab, ids, mask);
        total.add(-r.total);
        count += r.n_included;
    }
    if (count == 0) throw DataError("heldout evaluation scored zero positions");
    return total.value() / static_cast<double>(count);
}

TrainResult train_lm(lm::LmParams params, const tokens::UnifiedVocab& vocab,
                     const SeqData& train_data, const SeqData& heldout_data,
                     const TrainConfig& config, const std::string& checkpoint_dir,
                     MetricsSink sink, AdamState* resume_state) {
    config.validate();
    params.config.validate();
    if (train_data.seqs.empty()) throw DataError("train: no training sequences");
    train_data.check_lengths(params.config.max_seq_len);
    heldout_data.check_lengths(params.config.max_seq_len);

    AdamState adam = resume_state ? *resume_state : AdamState::init_for(params);
    if (adam.step > config.steps) {
        std::ostringstream os;
        os << "train: checkpoint is at step " << adam.step << ", beyond the " << config.steps
           << "-step budget";
        throw ConfigError(os.str());
    }
    // The schedule is deliberately independent of the step budget: a run may
    // cover any prefix of the curve (or all of it, the usual case).
    const WsdSchedule& schedule = config.schedule;

    // Fixed held-out probe subset, chosen once per run seed.
    std::vector<std::size_t> eval_subset;
    if (!heldout_data.seqs.empty()) {
        std::vector<std::uint32_t> all(heldout_data.seqs.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
        rng::Rng rng(rng::derive_seed(config.seed, "eval-subset"));
        rng.shuffle(all);
        const std::size_t take =
            std::min<std::size_t>(all.size(), static_cast<std::size_t>(config.eval_sequences));
        eval_subset.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take));
        std::sort(eval_subset.begin(), eval_subset.end());
    }

    if (!checkpoint_dir.empty()) ensure_dir(checkpoint_dir);

    TrainResult result;
    BatchCursor cursor{config.seed, train_data.seqs.size(), -1, {}};
    lm::LmParams grads = lm::zero_model<float>(params.config);
    bool first_batch = true;

    for (std::int64_t step = adam.step; step < config.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        grads.for_each_tensor([](const std::string&, float* data, Eigen::Index size) {
            std::fill(data, data + size, 0.0f);
        });
        KahanSum loss_sum;
        std::int64_t target_count = 0;
        std::int64_t token_count = 0;
        for (int slot = 0; slot < config.batch_size; ++slot) {
            const std::size_t idx = cursor.index(step, slot, config.batch_size);
            const auto& ids = train_data.seqs[idx];
            const std::vector<std::uint8_t> include =
                lm::resolve_mask(config.loss_mask, vocab, ids);
            const auto [l, c] = lm::accumulate_loss_grads<float>(params, ids, include, grads);
            loss_sum.add(l);
            target_count += c;
            token_count += static_cast<std::int64_t>(ids.size());
        }
        const double batch_loss = loss_sum.value() / static_cast<double>(target_count);
        const float inv = static_cast<float>(1.0 / static_cast<double>(target_count));
        grads.for_each_tensor([inv](const std::string&, float* data, Eigen::Index size) {
            for (Eigen::Index i = 0; i < size; ++i) data[i] *= inv;
        });
        double gnorm = global_grad_norm(grads);
        if (config.adam.clip_norm > 0.0 && gnorm > config.adam.clip_norm) {
            const float scale = static_cast<float>(config.adam.clip_norm / gnorm);
            grads.for_each_tensor([scale](const std::string&, float* data, Eigen::Index size) {
                for (Eigen::Index i = 0; i < size; ++i) data[i] *= scale;
            });
        }
        // Step indexing follows the schedule anchors: the update finishing
        // step k applies lr_at(k+1), so warmup ends exactly at its boundary.
        const double lr = lr_at(schedule, step + 1);
        adamw_update(params, grads, adam, config.adam, lr);

        if (first_batch) {
            result.initial_loss = batch_loss;
            first_batch = false;
        }
        result.final_loss = batch_loss;

        const auto t1 = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(t1 - t0).count();
        if (sink && (config.log_every > 0 && ((step + 1) % config.log_every == 0 || step == 0))) {
            MetricsRow row;
            row.step = step + 1;
            row.loss = batch_loss;
            row.lr = lr;
            row.grad_norm = gnorm;
            row.tokens_per_sec = secs > 0 ? static_cast<double>(token_count) / secs : 0.0;
            row.split = "train";
            sink(row);
        }
        const bool last = step + 1 == config.steps;
        if (!eval_subset.empty() &&
            ((config.eval_every > 0 && (step + 1) % config.eval_every == 0) || last)) {
            MetricsRow row;
            row.step = step + 1;
            row.loss = mean_heldout_loss(params, vocab, heldout_data, config.loss_mask,
                                         eval_subset);
            row.lr = lr;
            row.split = "heldout";
            result.heldout_curve.push_back(row);
            if (sink) sink(row);
        }
        if (!checkpoint_dir.empty() &&
            ((config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) || last)) {
            const lm::OptimizerState slots = adam.to_slots();
            lm::save_checkpoint(checkpoint_dir + "/" + checkpoint_name(step + 1), params,
                                &slots);
        }
    }
    result.params = std::move(params);
    result.adam = std::move(adam);
    return result;
}

}  // namespace slm::train
