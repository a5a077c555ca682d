// Command-line driver. Each pipeline subcommand runs one stage against an
// artifact root and insists that upstream stages already live there; `sample`
// and `judge` are standalone utilities over finished artifacts.
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "slm/digest.hpp"
#include "slm/error.hpp"
#include "slm/eval.hpp"
#include "slm/experiment.hpp"
#include "slm/frames.hpp"
#include "slm/io.hpp"
#include "slm/judge.hpp"
#include "slm/lm.hpp"
#include "slm/rng.hpp"
#include "slm/rvq.hpp"
#include "slm/sampler.hpp"
#include "slm/tokenstream.hpp"
#include "slm/trainer.hpp"

namespace {

using nlohmann::json;
using namespace slm;

struct CommonOpts {
    std::string root;
    std::string config_path;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--root", o.root, "artifact root directory")
        ->envname("SLM_ARTIFACT_ROOT")
        ->required();
    cmd->add_option("--config", o.config_path, "config file of `key = value` lines")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", o.sets, "override one field, e.g. --set train.steps=500")
        ->type_size(1);
}

std::string trimmed(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

/// Config file first, then --set pairs in order, then the typed flags.
exp::ExperimentConfig build_config(const CommonOpts& o,
                                   const std::vector<std::pair<std::string, std::string>>& flags) {
    exp::ExperimentConfig config;
    if (!o.config_path.empty()) config = exp::load_config(o.config_path);
    for (const std::string& s : o.sets) {
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + s + "'");
        }
        exp::apply_override(config, trimmed(s.substr(0, eq)), trimmed(s.substr(eq + 1)));
    }
    for (const auto& [key, value] : flags) exp::apply_override(config, key, value);
    return config;
}

void require_artifact(const std::string& path, const std::string& what, const std::string& cmd) {
    if (!file_exists(path)) {
        throw IoError("missing upstream artifact: " + what + " (" + path + ") — run `slm " +
                      cmd + "` on this root first");
    }
}

/// The standalone utilities rebuild the vocabulary from the given config, so
/// it must describe the run that produced the artifacts on disk.
void check_artifacts_match(const tokens::UnifiedVocab& vocab, const rvq::RvqCodec& codec,
                           const lm::LmParams& params) {
    if (vocab.q_levels != codec.q_levels() || vocab.codebook_size != codec.codebook_size()) {
        std::string msg = "config: rvq.q_levels=" + std::to_string(vocab.q_levels) +
                          ", rvq.codebook_size=" + std::to_string(vocab.codebook_size) +
                          " do not match codec.rvq on disk (Q=" +
                          std::to_string(codec.q_levels()) +
                          ", K=" + std::to_string(codec.codebook_size()) +
                          "); pass the run's config";
        throw ConfigError(msg);
    }
    if (params.config.vocab_size != vocab.total_size()) {
        throw ConfigError("config: unified vocab size " + std::to_string(vocab.total_size()) +
                          " does not match the checkpoint's vocab_size " +
                          std::to_string(params.config.vocab_size) + "; pass the run's config");
    }
}

train::MetricsSink stderr_sink() {
    return [](const train::MetricsRow& m) {
        std::fprintf(stderr, "[%s] step %lld loss %.4f lr %.2e tok/s %.0f\n", m.split.c_str(),
                     static_cast<long long>(m.step), m.loss, m.lr, m.tokens_per_sec);
    };
}

/// JSONL sink for train-lm; the file is truncated when the first row of the
/// run arrives, so a fully reused stage leaves an existing log alone.
train::MetricsSink metrics_file_sink(const std::string& path) {
    auto out = std::make_shared<std::ofstream>();
    train::MetricsSink echo = stderr_sink();
    return [out, path, echo](const train::MetricsRow& m) {
        if (!out->is_open()) {
            out->open(path, std::ios::binary | std::ios::trunc);
            if (!*out) throw IoError("cannot open " + path);
        }
        json j;
        j["step"] = m.step;
        j["loss"] = m.loss;
        j["lr"] = m.lr;
        j["tokens_per_sec"] = m.tokens_per_sec;
        j["split"] = m.split;
        *out << j.dump() << '\n';
        out->flush();
        echo(m);
    };
}

void print_eval_report(const eval::EvalReport& report) {
    std::printf("%-12s%7s%10s%10s%10s\n", "task", "pairs", "accuracy", "full", "semantic");
    for (const eval::TaskReport& t : report.tasks) {
        std::printf("%-12s%7lld%10.4f%10.4f%10.4f\n", std::string(eval::task_name(t.task)).c_str(),
                    static_cast<long long>(t.n_pairs), t.accuracy, t.accuracy_full,
                    t.accuracy_semantic);
    }
}

json meta_json(const std::string& path) {
    return file_exists(path) ? json::parse(read_file(path)) : json::object();
}

/// Manifest for the standalone utilities, mirroring the stage manifests.
void write_tool_manifest(const std::string& path, const std::string& kind, std::uint64_t seed,
                         const json& config_echo,
                         const std::vector<std::pair<std::string, std::string>>& files) {
    json j;
    j["kind"] = kind;
    j["version"] = 1;
    j["seed"] = seed;
    j["config"] = config_echo;
    j["config_digest"] = sha256_hex(config_echo.dump());
    j["versions"] = {{"slm", "0.1.0"},
                     {"formats", {{"sfr", 1}, {"rvq", 1}, {"its", 1}, {"lmc", 1}}}};
    j["artifacts"] = json::object();
    for (const auto& [name, file] : files) j["artifacts"][name] = sha256_hex_file(file);
    write_file_atomic(path, j.dump(2) + "\n");
}

int cmd_gen_corpus(const CommonOpts& o, const exp::ExperimentConfig& config) {
    const exp::PipelineResult res = exp::run_stage(config, o.root, exp::Stage::kCorpus, true);
    const json meta = meta_json(res.corpus_dir + ".meta.json");
    std::printf("corpus%s: %lld train / %lld held-out utterances -> %s\n",
                res.corpus_reused ? " (reused)" : "",
                static_cast<long long>(meta.value("n_train", static_cast<std::int64_t>(-1))),
                static_cast<long long>(meta.value("n_heldout", static_cast<std::int64_t>(-1))),
                res.corpus_dir.c_str());
    return 0;
}

int cmd_train_codec(const CommonOpts& o, const exp::ExperimentConfig& config) {
    const exp::PipelineResult res = exp::run_stage(config, o.root, exp::Stage::kCodec, true);
    std::printf("codec%s: held-out recon mse %.6f -> %s\n", res.codec_reused ? " (reused)" : "",
                res.recon_mse, res.codec_path.c_str());
    const json meta = meta_json(res.codec_path + ".meta.json");
    if (meta.contains("per_level")) {
        std::printf("per level:");
        for (const json& v : meta["per_level"]) std::printf(" %.6f", v.get<double>());
        std::printf("\n");
    }
    return 0;
}

int cmd_train_lm(const CommonOpts& o, const exp::ExperimentConfig& config) {
    const exp::PipelineResult res = exp::run_stage(config, o.root, exp::Stage::kLm, true,
                                                   metrics_file_sink(o.root + "/metrics.jsonl"));
    if (config.twist_init) {
        std::printf("text model%s: loss %.4f -> %.4f (%s)\n",
                    res.text_lm_reused ? " (reused)" : "", res.text_initial_loss,
                    res.text_final_loss, res.text_lm_path.c_str());
    }
    std::printf("audio model%s: loss %.4f -> %.4f", res.lm_reused ? " (reused)" : "",
                res.lm_initial_loss, res.lm_final_loss);
    if (res.lm_final_heldout_loss == res.lm_final_heldout_loss) {
        std::printf(" (held-out %.4f)", res.lm_final_heldout_loss);
    }
    std::printf(" -> %s\n", res.lm_path.c_str());
    return 0;
}

int cmd_eval(const CommonOpts& o, const exp::ExperimentConfig& config, const std::string& tasks,
             const std::string& mask) {
    const eval::MaskMode mode = eval::mask_mode_from_name(mask);
    if (tasks == "all" && mode == eval::MaskMode::kPerPaper) {
        const exp::PipelineResult res = exp::run_stage(config, o.root, exp::Stage::kEval, true);
        print_eval_report(res.eval_report);
        std::printf("-> %s%s\n", res.eval_path.c_str(), res.eval_reused ? " (reused)" : "");
        return 0;
    }

    // Off the beaten path (a task subset or another mask): score directly
    // from the finished artifacts and keep the canonical eval.json intact.
    const exp::ExperimentConfig r = exp::resolve_config(config);
    require_artifact(o.root + "/corpus/index.jsonl", "corpus", "gen-corpus");
    require_artifact(o.root + "/codec.rvq", "codec", "train-codec");
    require_artifact(o.root + "/slm.lmc", "trained model", "train-lm");
    const corpus::Corpus corp = corpus::load_corpus(o.root + "/corpus");
    const corpus::Language lang = corpus::build_language(r.corpus);
    const rvq::RvqCodec codec = rvq::load_codec(o.root + "/codec.rvq");
    const lm::Checkpoint ck = lm::load_checkpoint(o.root + "/slm.lmc");
    const tokens::UnifiedVocab vocab = exp::vocab_for(r);
    check_artifacts_match(vocab, codec, ck.params);

    std::vector<eval::Task> wanted;
    if (tasks == "all") {
        wanted = eval::all_tasks();
    } else {
        std::string rest = tasks;
        while (!rest.empty()) {
            const std::size_t comma = rest.find(',');
            wanted.push_back(eval::task_from_name(trimmed(rest.substr(0, comma))));
            rest = comma == std::string::npos ? "" : rest.substr(comma + 1);
        }
    }
    std::vector<eval::EvalPair> pairs;
    for (eval::Task task : wanted) {
        std::vector<eval::EvalPair> task_pairs =
            eval::build_pairs(corp, lang, codec, vocab, task, r.eval_pairs,
                              rng::derive_seed(r.seed, "eval-pairs"));
        pairs.insert(pairs.end(), std::make_move_iterator(task_pairs.begin()),
                     std::make_move_iterator(task_pairs.end()));
    }
    const eval::EvalReport report = eval::paired_accuracy(ck.params, vocab, pairs, mode);
    const std::string out_path = o.root + "/eval-adhoc.json";
    write_file_atomic(out_path, eval::eval_report_to_json(report));
    print_eval_report(report);
    std::printf("mask: %s -> %s\n", mask.c_str(), out_path.c_str());
    return 0;
}

int cmd_ablate(const CommonOpts& o, const exp::ExperimentConfig& config) {
    const exp::PipelineResult res =
        exp::run_stage(config, o.root, exp::Stage::kAblation, true, stderr_sink());
    std::fputs(eval::render_ablation_table(res.ablation).c_str(), stdout);
    std::printf("-> %s%s\n", res.ablation_path.c_str(), res.ablation_reused ? " (reused)" : "");
    return 0;
}

int cmd_report(const CommonOpts& o, const exp::ExperimentConfig& config) {
    const exp::PipelineResult res = exp::run_stage(config, o.root, exp::Stage::kReport, true);
    std::fputs(exp::render_report(res.report_json).c_str(), stdout);
    std::printf("-> %s\n", res.report_path.c_str());
    return 0;
}

struct SampleOpts {
    std::string prompt_path;
    std::string out_prefix;
    double seconds = 3.0;
    std::optional<double> prompt_seconds;
};

int cmd_sample(const CommonOpts& o, const exp::ExperimentConfig& config, const SampleOpts& s) {
    const exp::ExperimentConfig r = exp::resolve_config(config);
    require_artifact(o.root + "/codec.rvq", "codec", "train-codec");
    require_artifact(o.root + "/slm.lmc", "trained model", "train-lm");
    const rvq::RvqCodec codec = rvq::load_codec(o.root + "/codec.rvq");
    const lm::Checkpoint ck = lm::load_checkpoint(o.root + "/slm.lmc");
    const tokens::UnifiedVocab vocab = exp::vocab_for(r);
    check_artifacts_match(vocab, codec, ck.params);

    const double rate = r.corpus.frame_rate_hz;
    const FeatureFrameSeq prompt = read_frames(s.prompt_path, rate);
    if (prompt.n_frames() < 1) throw DataError("sample: prompt file holds no frames");
    // Default: the whole file is the prompt (+0.5 frame so the floor inside
    // continue_audio lands exactly on the frame count).
    const double prompt_seconds =
        s.prompt_seconds ? *s.prompt_seconds
                         : (static_cast<double>(prompt.n_frames()) + 0.5) / rate;

    sample::SampleConfig sc = r.sampling;
    if (sc.seed == 0) sc.seed = rng::derive_seed(r.seed, "cli-sample");
    if (sc.max_new_tokens <= 0) {
        const int want_frames = static_cast<int>(s.seconds * rate + 0.5);
        if (want_frames < 1) throw ConfigError("sample: --seconds asks for less than one frame");
        sc.max_new_tokens = r.rvq.q_levels * want_frames + 1;  // room for a stop token
    }
    const sample::ContinueResult res =
        sample::continue_audio(ck.params, codec, vocab, prompt, prompt_seconds, sc);

    const std::string prefix = s.out_prefix.empty() ? o.root + "/sample" : s.out_prefix;
    const std::string stream_path = prefix + ".its";
    const std::string frames_path = prefix + ".sfr";
    const std::string stats_path = prefix + ".stats.json";
    tokens::write_stream(stream_path, vocab, res.grid, rate);
    write_frames(frames_path, res.continuation);

    json stats;
    stats["prompt_file"] = s.prompt_path;
    stats["prompt_frames"] = res.prompt_frames;
    stats["requested_seconds"] = s.seconds;
    stats["generated_frames"] = static_cast<std::int64_t>(res.continuation.n_frames());
    stats["generated_tokens"] = static_cast<std::int64_t>(res.gen.generated.size());
    stats["repaired"] = res.repaired;
    stats["dropped_partial"] = res.dropped_partial;
    stats["stop_reason"] = res.gen.stop_reason;
    stats["temperature"] = sc.temperature;
    stats["top_k"] = sc.top_k;
    stats["constrain_order"] = sc.constrain_order;
    stats["seed"] = sc.seed;
    stats["outputs"] = {{"stream", stream_path}, {"frames", frames_path}};
    write_file_atomic(stats_path, stats.dump(2) + "\n");

    json echo;
    echo["sampling"] = {{"temperature", sc.temperature},
                        {"top_k", sc.top_k},
                        {"max_new_tokens", sc.max_new_tokens},
                        {"constrain_order", sc.constrain_order},
                        {"seed", sc.seed}};
    echo["seconds"] = s.seconds;
    echo["prompt_seconds"] = prompt_seconds;
    write_tool_manifest(prefix + ".manifest.json", "slm-sample-manifest", r.seed, echo,
                        {{"codec.rvq", o.root + "/codec.rvq"},
                         {"slm.lmc", o.root + "/slm.lmc"},
                         {"prompt", s.prompt_path},
                         {"stream", stream_path},
                         {"frames", frames_path},
                         {"stats", stats_path}});

    std::printf("prompt %d frames -> generated %lld frames (%zu tokens, stop: %s)\n",
                res.prompt_frames, static_cast<long long>(res.continuation.n_frames()),
                res.gen.generated.size(), res.gen.stop_reason.c_str());
    std::printf("repaired %d, dropped %d -> %s / %s / %s\n", res.repaired, res.dropped_partial,
                stream_path.c_str(), frames_path.c_str(), stats_path.c_str());
    return 0;
}

struct JudgeOpts {
    std::string pairs_path;
    std::string out_path;
};

int cmd_judge(const CommonOpts& o, const exp::ExperimentConfig& config, const JudgeOpts& jo) {
    const exp::ExperimentConfig r = exp::resolve_config(config);
    if (r.judge.endpoint.empty()) {
        throw ConfigError("config: judge.endpoint is empty; pass --endpoint or set it");
    }
    judge::JudgeConfig jc = r.judge;
    if (jc.cache_dir.empty()) jc.cache_dir = o.root + "/judge-cache";
    judge::JudgeClient client(jc);

    json pairs;
    try {
        pairs = json::parse(read_file(jo.pairs_path));
    } catch (const json::exception& e) {
        throw FormatError("judge pairs: " + std::string(e.what()));
    }
    if (!pairs.is_array()) throw FormatError("judge pairs: expected a JSON array");

    json rows = json::array();
    double total = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const json& p = pairs[i];
        judge::JudgeScore score;
        if (p.contains("prompt")) {
            score = client.judge_prompt(p.at("prompt").get<std::string>());
        } else if (p.contains("prefix") && p.contains("suffix")) {
            score = client.judge(p.at("prefix").get<std::string>(),
                                 p.at("suffix").get<std::string>());
        } else {
            throw FormatError("judge pairs: entry " + std::to_string(i) +
                              " needs \"prompt\" or \"prefix\"+\"suffix\"");
        }
        total += score.score;
        rows.push_back({{"index", i}, {"score", score.score}, {"cached", score.cached}});
        std::fprintf(stderr, "pair %zu: score %d%s\n", i, score.score,
                     score.cached ? " (cached)" : "");
    }
    json out;
    out["n"] = pairs.size();
    out["mean_score"] = pairs.empty() ? 0.0 : total / static_cast<double>(pairs.size());
    out["scores"] = std::move(rows);
    const std::string out_path = jo.out_path.empty() ? o.root + "/judge-scores.json" : jo.out_path;
    write_file_atomic(out_path, out.dump(2) + "\n");

    json echo;
    echo["endpoint"] = jc.endpoint;
    echo["model"] = jc.model;
    write_tool_manifest(out_path + ".manifest.json", "slm-judge-manifest", r.seed, echo,
                        {{"pairs", jo.pairs_path}, {"scores", out_path}});

    std::printf("%zu pair(s), mean score %.2f -> %s\n", pairs.size(),
                out["mean_score"].get<double>(), out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"speech language model pipeline over one artifact root"};
    app.require_subcommand(1);

    CommonOpts gc_o;
    std::optional<std::uint64_t> gc_seed;
    CLI::App* gen = app.add_subcommand("gen-corpus", "generate the synthetic speech corpus");
    add_common(gen, gc_o);
    gen->add_option("--seed", gc_seed, "master seed (config key: seed)");

    CommonOpts tc_o;
    std::optional<std::uint64_t> tc_seed;
    std::optional<int> tc_q;
    CLI::App* tcodec = app.add_subcommand("train-codec", "fit the codec on the corpus");
    add_common(tcodec, tc_o);
    tcodec->add_option("--seed", tc_seed, "master seed");
    tcodec->add_option("--quantizers", tc_q, "codec levels Q (config key: rvq.q_levels)");

    CommonOpts tl_o;
    std::optional<std::uint64_t> tl_seed;
    std::optional<int> tl_steps;
    CLI::App* tlm = app.add_subcommand("train-lm", "train the language model on codec tokens");
    add_common(tlm, tl_o);
    tlm->add_option("--seed", tl_seed, "master seed");
    tlm->add_option("--steps", tl_steps, "optimizer steps (config key: train.steps)");

    CommonOpts ev_o;
    std::optional<std::uint64_t> ev_seed;
    std::string ev_tasks = "all";
    std::string ev_mask = "per-paper";
    CLI::App* ev = app.add_subcommand("eval", "paired evaluation and sampling probes");
    add_common(ev, ev_o);
    ev->add_option("--seed", ev_seed, "master seed");
    ev->add_option("--tasks", ev_tasks, "\"all\" or a comma list, e.g. speaker,room");
    ev->add_option("--mask", ev_mask, "scoring mask: per-paper, full or semantic-only");

    CommonOpts ab_o;
    std::optional<std::uint64_t> ab_seed;
    std::string ab_q;
    std::string ab_endpoint;
    CLI::App* ab = app.add_subcommand("ablate", "codec-depth ablation grid off the corpus");
    add_common(ab, ab_o);
    ab->add_option("--seed", ab_seed, "master seed");
    ab->add_option("--quantizers", ab_q, "comma list of Q values (config key: ablation.q_list)");
    ab->add_option("--endpoint", ab_endpoint, "judge endpoint (config key: judge.endpoint)");

    CommonOpts rp_o;
    CLI::App* rp = app.add_subcommand("report", "assemble and render the run report");
    add_common(rp, rp_o);

    CommonOpts sm_o;
    SampleOpts sm;
    std::optional<std::uint64_t> sm_seed;
    std::optional<double> sm_temp;
    std::optional<int> sm_topk;
    bool sm_constrain = false;
    CLI::App* smc = app.add_subcommand("sample", "continue a frames file with the trained model");
    add_common(smc, sm_o);
    smc->add_option("--prompt", sm.prompt_path, "prompt frames file (.sfr)")
        ->required()
        ->check(CLI::ExistingFile);
    smc->add_option("--seconds", sm.seconds, "seconds of audio to generate");
    smc->add_option("--prompt-seconds", sm.prompt_seconds,
                    "prompt length to keep (default: the whole file)");
    smc->add_option("--out", sm.out_prefix, "output prefix (default: <root>/sample)");
    smc->add_option("--seed", sm_seed, "master seed");
    smc->add_option("--temperature", sm_temp, "softmax temperature");
    smc->add_option("--top-k", sm_topk, "top-k cutoff, 0 = full vocabulary");
    CLI::Option* sm_co = smc->add_flag("--constrain-order", sm_constrain,
                                       "mask logits to the level the frame order expects");

    CommonOpts jd_o;
    JudgeOpts jd;
    std::string jd_endpoint;
    std::string jd_model;
    CLI::App* jdc = app.add_subcommand("judge", "score text pairs via the judge endpoint");
    add_common(jdc, jd_o);
    jdc->add_option("--pairs", jd.pairs_path, "JSON array of {prompt} or {prefix,suffix}")
        ->required()
        ->check(CLI::ExistingFile);
    jdc->add_option("--endpoint", jd_endpoint, "judge endpoint (config key: judge.endpoint)");
    jdc->add_option("--model", jd_model, "judge model name (config key: judge.model)");
    jdc->add_option("--out", jd.out_path, "scores file (default: <root>/judge-scores.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage errors exit 2, --help exits 0
    }

    try {
        std::vector<std::pair<std::string, std::string>> flags;
        if (gen->parsed()) {
            if (gc_seed) flags.emplace_back("seed", std::to_string(*gc_seed));
            return cmd_gen_corpus(gc_o, build_config(gc_o, flags));
        }
        if (tcodec->parsed()) {
            if (tc_seed) flags.emplace_back("seed", std::to_string(*tc_seed));
            if (tc_q) flags.emplace_back("rvq.q_levels", std::to_string(*tc_q));
            return cmd_train_codec(tc_o, build_config(tc_o, flags));
        }
        if (tlm->parsed()) {
            if (tl_seed) flags.emplace_back("seed", std::to_string(*tl_seed));
            if (tl_steps) flags.emplace_back("train.steps", std::to_string(*tl_steps));
            return cmd_train_lm(tl_o, build_config(tl_o, flags));
        }
        if (ev->parsed()) {
            if (ev_seed) flags.emplace_back("seed", std::to_string(*ev_seed));
            return cmd_eval(ev_o, build_config(ev_o, flags), ev_tasks, ev_mask);
        }
        if (ab->parsed()) {
            if (ab_seed) flags.emplace_back("seed", std::to_string(*ab_seed));
            if (!ab_q.empty()) flags.emplace_back("ablation.q_list", ab_q);
            if (!ab_endpoint.empty()) flags.emplace_back("judge.endpoint", ab_endpoint);
            flags.emplace_back("ablate", "true");
            return cmd_ablate(ab_o, build_config(ab_o, flags));
        }
        if (rp->parsed()) {
            return cmd_report(rp_o, build_config(rp_o, {}));
        }
        if (smc->parsed()) {
            if (sm_seed) flags.emplace_back("seed", std::to_string(*sm_seed));
            if (sm_temp) flags.emplace_back("sampling.temperature", std::to_string(*sm_temp));
            if (sm_topk) flags.emplace_back("sampling.top_k", std::to_string(*sm_topk));
            if (sm_co->count() > 0) flags.emplace_back("sampling.constrain_order", "true");
            return cmd_sample(sm_o, build_config(sm_o, flags), sm);
        }
        if (jdc->parsed()) {
            if (!jd_endpoint.empty()) flags.emplace_back("judge.endpoint", jd_endpoint);
            if (!jd_model.empty()) flags.emplace_back("judge.model", jd_model);
            return cmd_judge(jd_o, build_config(jd_o, flags), jd);
        }
        return 2;  // unreachable: require_subcommand(1)
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
