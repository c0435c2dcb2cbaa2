// convsink command-line tool: mask export, training-sample generation, cache
// simulation, desk-scale training experiments, attention-map analysis, and
// scaling benchmarks. Every subcommand is deterministic for a fixed --seed.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "convsink/analyzer.hpp"
#include "convsink/cache.hpp"
#include "convsink/dialogue.hpp"
#include "convsink/error.hpp"
#include "convsink/experiment.hpp"
#include "convsink/mask.hpp"
#include "convsink/model.hpp"
#include "convsink/sim.hpp"
#include "convsink/tasks.hpp"
#include "convsink/trainer.hpp"

namespace {

using namespace convsink;

constexpr TokenId kBos = 1;
constexpr TokenId kEou = 2;

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RuntimeFailure("IoFailure", "cannot write " + path);
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("IoFailure", "cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// Runs `emit` against --out when set, stdout otherwise.
template <typename Fn>
void with_out(const std::string& path, Fn&& emit) {
    if (path.empty()) {
        emit(std::cout);
        return;
    }
    std::ofstream out = open_out(path);
    emit(out);
}

// report.json -> report_smr.json and so on, one artifact per trained variant.
std::string with_label(const std::string& path, const std::string& label) {
    const std::size_t dot = path.find_last_of('.');
    const std::size_t slash = path.find_last_of('/');
    if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) {
        return path + "_" + label;
    }
    return path.substr(0, dot) + "_" + label + path.substr(dot);
}

struct GlobalOpts {
    std::uint64_t seed = 0;
    std::string out;
    std::string format = "csv";
};

// ---------------------------------------------------------------------------
// mask

struct MaskOpts {
    std::string pattern = "streaming";
    std::size_t utterances = 4;
    std::size_t len = 4;
    std::size_t window = 8;
    std::size_t nsink = 1;
    std::string segmap_out;
};

void cmd_mask(const GlobalOpts& g, const MaskOpts& o) {
    const SegmentMap seg = layout_uniform(o.utterances, o.len);
    MaskSpec spec;
    spec.name = o.pattern;
    spec.params["bos"] = kBos;
    spec.params["eou"] = kEou;
    if (o.pattern == "local" || o.pattern == "strllm") {
        spec.params["w"] = static_cast<long long>(o.window);
    }
    if (o.pattern == "strllm") spec.params["nsink"] = static_cast<long long>(o.nsink);
    const MaskMatrix mask = mask_from_spec(spec, seg);

    if (!o.segmap_out.empty()) open_out(o.segmap_out) << seg.to_json() << '\n';

    if (g.out.ends_with(".pgm")) {
        std::ofstream out = open_out(g.out);
        write_mask_pgm(out, mask);
    } else if (g.format == "json") {
        nlohmann::json j;
        j["n"] = mask.size();
        j["pattern"] = spec.to_string();
        auto& rows = j["allowed"] = nlohmann::json::array();
        for (std::size_t i = 0; i < mask.size(); ++i) rows.push_back(mask.allowed_keys(i));
        with_out(g.out, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
    } else {
        with_out(g.out, [&](std::ostream& out) { write_mask_csv(out, mask); });
    }
}

// ---------------------------------------------------------------------------
// datagen

struct DatagenOpts {
    std::string task = "smr";
    std::size_t count = 100;
    std::size_t s = 1;    // (u, u') pairs per SMR sample
    std::size_t l = 24;   // query-response pairs per conversation
    std::size_t key_len = 2;
    std::size_t val_len = 2;
    std::int32_t vocab = 32;
    double scale = 50.0;  // divides the co-training corpus sizes 6857/8000
    std::string corpus;   // conversations JSONL; synthetic generator if empty
};

void cmd_datagen(const GlobalOpts& g, const DatagenOpts& o) {
    SyntheticParams sp;
    sp.n_pairs = o.l;
    sp.key_len = o.key_len;
    sp.val_len = o.val_len;
    sp.vocab = o.vocab;
    sp.bos = kBos;
    sp.eou = kEou;

    std::vector<Conversation> corpus;
    if (!o.corpus.empty()) {
        std::ifstream in(o.corpus);
        if (!in) throw RuntimeFailure("IoFailure", "cannot read " + o.corpus);
        std::vector<std::string> warnings;
        corpus = read_conversations_jsonl(in, &warnings);
        for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
        if (corpus.empty()) throw ValidationError("BadConversation", o.corpus + " is empty");
    }
    auto conversation_for = [&](std::size_t i) {
        return corpus.empty() ? gen_synthetic_dialogue(mix64(g.seed, i + 1), sp)
                              : corpus[i % corpus.size()];
    };

    if (o.task == "synthetic") {
        std::vector<Conversation> convs;
        convs.reserve(o.count);
        for (std::size_t i = 0; i < o.count; ++i) convs.push_back(conversation_for(i));
        with_out(g.out, [&](std::ostream& out) { write_conversations_jsonl(out, convs); });
        return;
    }

    std::vector<TrainingSample> samples;
    if (o.task == "cotrain") {
        if (!(o.scale > 0.0)) throw ValidationError("BadScale", "--scale must be positive");
        const auto smr_count = static_cast<std::size_t>(6857.0 / o.scale);
        const auto lmr_count = static_cast<std::size_t>(8000.0 / o.scale);
        samples = build_cotraining_stream(smr_count, lmr_count, g.seed, sp);
    } else {
        std::mt19937_64 rng(mix64(g.seed, 0xD6ull));
        samples.reserve(o.count);
        for (std::size_t i = 0; i < o.count; ++i) {
            const Conversation conv = conversation_for(i);
            if (o.task == "smr") {
                std::uniform_int_distribution<std::size_t> pick(0, conv.utterances.size() - 1);
                std::vector<std::vector<TokenId>> utts;
                for (std::size_t k = 0; k < o.s; ++k) {
                    utts.push_back(conv.utterances[pick(rng)].tokens);
                }
                samples.push_back(build_smr_sample(utts, kBos, kEou));
            } else if (o.task == "lmr") {
                const auto pairs = qr_pairs_from_conversation(conv);
                std::uniform_int_distribution<std::size_t> pick(1, pairs.size());
                samples.push_back(build_lmr_sample(pairs, pick(rng), kBos, kEou));
            } else if (o.task == "supervised") {
                samples.push_back(build_supervised_sample(conv, kBos, kEou));
            } else {
                throw ValidationError("BadTask", "unknown datagen task '" + o.task + "'");
            }
        }
    }
    with_out(g.out, [&](std::ostream& out) { write_samples_jsonl(out, samples); });
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOpts {
    std::string trace;  // conversations JSONL; uniform layout if empty
    std::size_t utterances = 64;
    std::size_t len = 32;
    std::string policy = "convsink";
    std::size_t window = 8;
    std::size_t nsink = 1;
};

MaskKind policy_kind(const SimulateOpts& o) {
    if (o.policy == "dense") return MaskKind::dense();
    if (o.policy == "local") return MaskKind::local(o.window);
    if (o.policy == "strllm") return MaskKind::streaming_llm(o.nsink, o.window);
    if (o.policy == "convsink") return MaskKind::streaming();
    throw ValidationError("BadPolicy", "unknown policy '" + o.policy + "'");
}

nlohmann::json summary_json(const SimResult& result) {
    return {{"peak_resident", result.summary.peak_resident},
            {"final_resident", result.summary.final_resident},
            {"dense_ratio", result.summary.dense_ratio}};
}

void cmd_simulate(const GlobalOpts& g, const SimulateOpts& o) {
    StreamTrace trace;
    if (o.trace.empty()) {
        trace = trace_from_segmap(layout_uniform(o.utterances, o.len));
    } else {
        std::ifstream in(o.trace);
        if (!in) throw RuntimeFailure("IoFailure", "cannot read " + o.trace);
        trace = trace_from_conversations(read_conversations_jsonl(in));
    }
    const SimResult result = simulate(trace, policy_kind(o));

    if (g.format == "json") {
        nlohmann::json j;
        j["summary"] = summary_json(result);
        auto& rows = j["rows"] = nlohmann::json::array();
        for (const auto& r : result.rows) {
            rows.push_back({{"step", r.step},
                            {"policy", r.policy},
                            {"resident_kv", r.resident_kv},
                            {"attended_kv", r.attended_kv},
                            {"evictions", r.evictions}});
        }
        with_out(g.out, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
        return;
    }
    with_out(g.out, [&](std::ostream& out) { write_sim_csv(out, result); });
    // Keep the headline numbers visible when the rows went to a file.
    if (!g.out.empty()) std::cout << summary_json(result).dump() << '\n';
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
    std::string experiment = "smr-recon";
    std::string config;
    std::size_t steps = 0;
    double lr = 0.0;
    std::size_t batch = 0;
    std::string checkpoint;
    std::string attn_out;
    bool seed_set = false;
    bool steps_set = false;
    bool lr_set = false;
    bool batch_set = false;
};

void cmd_train(const GlobalOpts& g, const TrainOpts& o) {
    ExperimentConfig cfg = o.config.empty() ? default_experiment_config(o.experiment)
                                            : ExperimentConfig::from_json(read_file(o.config));
    if (o.seed_set) cfg.seed = g.seed;
    if (o.steps_set) cfg.steps = o.steps;
    if (o.lr_set) cfg.lr = o.lr;
    if (o.batch_set) cfg.batch_size = o.batch;

    const bool want_outputs = !o.checkpoint.empty() || !o.attn_out.empty();
    ExperimentOutputs outputs;
    const std::string report = run_experiment(cfg, want_outputs ? &outputs : nullptr);
    with_out(g.out, [&](std::ostream& out) { out << report << '\n'; });

    for (std::size_t v = 0; v < outputs.models.size(); ++v) {
        const auto& [label, model] = outputs.models[v];
        if (!o.checkpoint.empty()) model->save_checkpoint(with_label(o.checkpoint, label));
        if (!o.attn_out.empty()) {
            const TrainingSample& probe = outputs.probe_samples[v].second;
            AttnMap attn;
            model->forward(probe.ids, probe.mask, &attn);
            std::ofstream attn_file = open_out(with_label(o.attn_out + ".csv", label));
            export_map_csv(attn_file, attn);
            open_out(with_label(o.attn_out + "_segmap.json", label))
                << probe.seg.to_json() << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOpts {
    std::string attn;
    std::string segmap;
    double threshold = 3.0;
    std::string report;
};

void cmd_analyze(const GlobalOpts& g, const AnalyzeOpts& o) {
    std::ifstream in(o.attn);
    if (!in) throw RuntimeFailure("IoFailure", "cannot read " + o.attn);
    const AttnMap map = import_map_csv(in);
    const SegmentMap seg = SegmentMap::from_json(read_file(o.segmap));
    const std::string report = analyze_report_json(map, seg, o.threshold);
    with_out(o.report.empty() ? g.out : o.report,
             [&](std::ostream& out) { out << report << '\n'; });
}

// ---------------------------------------------------------------------------
// bench

struct BenchOpts {
    std::size_t len = 16;
    std::vector<std::size_t> utterances = {8, 16, 32, 64, 128};
    std::vector<std::string> policies = {"dense", "local", "strllm", "convsink"};
    std::size_t window = 8;
    std::size_t nsink = 1;
    bool wallclock = false;
};

void cmd_bench(const GlobalOpts& g, const BenchOpts& o) {
    struct Row {
        std::string policy;
        std::size_t utterances, n, peak, final_resident;
        double dense_ratio, wall_ms;
    };
    std::vector<Row> rows;
    for (const std::string& policy : o.policies) {
        SimulateOpts so;
        so.policy = policy;
        so.window = o.window;
        so.nsink = o.nsink;
        const MaskKind kind = policy_kind(so);
        for (const std::size_t t : o.utterances) {
            const StreamTrace trace = trace_from_segmap(layout_uniform(t, o.len));
            const auto t0 = std::chrono::steady_clock::now();
            const SimResult result = simulate(trace, kind);
            const auto t1 = std::chrono::steady_clock::now();
            rows.push_back({policy, t, trace.size(), result.summary.peak_resident,
                            result.summary.final_resident, result.summary.dense_ratio,
                            std::chrono::duration<double, std::milli>(t1 - t0).count()});
        }
    }
    if (g.format == "json") {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json row = {{"policy", r.policy},     {"utterances", r.utterances},
                                  {"len", o.len},           {"n", r.n},
                                  {"peak_resident", r.peak}, {"final_resident", r.final_resident},
                                  {"dense_ratio", r.dense_ratio}};
            if (o.wallclock) row["wall_ms"] = r.wall_ms;
            j.push_back(std::move(row));
        }
        with_out(g.out, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
        return;
    }
    with_out(g.out, [&](std::ostream& out) {
        out << "policy,utterances,len,n,peak_resident,final_resident,dense_ratio";
        if (o.wallclock) out << ",wall_ms";
        out << '\n';
        for (const auto& r : rows) {
            out << r.policy << ',' << r.utterances << ',' << o.len << ',' << r.n << ','
                << r.peak << ',' << r.final_resident << ',' << r.dense_ratio;
            if (o.wallclock) out << ',' << r.wall_ms;
            out << '\n';
        }
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "convsink: conversational-attention-sink masks, KV-cache simulation, "
        "and desk-scale training experiments"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "Seed for any randomized subcommand")
        ->capture_default_str();
    app.add_option("--out", g.out, "Output path (stdout when omitted)");
    app.add_option("--format", g.format, "Tabular output format")
        ->check(CLI::IsMember({"csv", "json"}))
        ->capture_default_str();

    MaskOpts mo;
    auto* mask_cmd = app.add_subcommand("mask", "Export an attention mask over a uniform layout");
    mask_cmd->fallthrough();
    mask_cmd->add_option("--pattern", mo.pattern, "Mask pattern")
        ->check(CLI::IsMember({"streaming", "smr", "smr_nosink", "lmr", "dense", "local",
                               "strllm"}))
        ->capture_default_str();
    mask_cmd->add_option("--utterances", mo.utterances, "Utterance count T")
        ->capture_default_str();
    mask_cmd->add_option("--len", mo.len, "Tokens per utterance incl. the EoU")
        ->capture_default_str();
    mask_cmd->add_option("--window", mo.window, "Window for local/strllm")
        ->capture_default_str();
    mask_cmd->add_option("--nsink", mo.nsink, "Pinned prefix size for strllm")
        ->capture_default_str();
    mask_cmd->add_option("--segmap-out", mo.segmap_out, "Also write the segment map JSON");
    mask_cmd->callback([&] { cmd_mask(g, mo); });

    DatagenOpts dgo;
    auto* datagen_cmd = app.add_subcommand("datagen", "Generate training samples as JSONL");
    datagen_cmd->fallthrough();
    datagen_cmd->add_option("--task", dgo.task, "Sample builder")
        ->check(CLI::IsMember({"smr", "lmr", "supervised", "synthetic", "cotrain"}))
        ->capture_default_str();
    datagen_cmd->add_option("--count", dgo.count, "Samples (or conversations) to emit")
        ->capture_default_str();
    datagen_cmd->add_option("--s", dgo.s, "(u, u') pairs per SMR sample")
        ->capture_default_str();
    datagen_cmd->add_option("--l", dgo.l, "Query-response pairs per conversation")
        ->capture_default_str();
    datagen_cmd->add_option("--key-len", dgo.key_len, "Query payload length")
        ->capture_default_str();
    datagen_cmd->add_option("--val-len", dgo.val_len, "Response payload length")
        ->capture_default_str();
    datagen_cmd->add_option("--vocab", dgo.vocab, "Vocabulary size (payload ids 3..vocab-1)")
        ->capture_default_str();
    datagen_cmd->add_option("--scale", dgo.scale,
                            "cotrain only: emit 6857/scale SMR and 8000/scale LMR samples")
        ->capture_default_str();
    datagen_cmd->add_option("--corpus", dgo.corpus,
                            "Conversations JSONL to draw from instead of the generator");
    datagen_cmd->callback([&] { cmd_datagen(g, dgo); });

    SimulateOpts so;
    auto* sim_cmd = app.add_subcommand("simulate", "Stream a trace through a KV retention policy");
    sim_cmd->fallthrough();
    sim_cmd->add_option("--trace", so.trace, "Conversations JSONL; uniform layout when omitted");
    sim_cmd->add_option("--utterances", so.utterances, "Uniform layout utterance count")
        ->capture_default_str();
    sim_cmd->add_option("--len", so.len, "Uniform layout tokens per utterance")
        ->capture_default_str();
    sim_cmd->add_option("--policy", so.policy, "Retention policy")
        ->check(CLI::IsMember({"dense", "local", "strllm", "convsink"}))
        ->capture_default_str();
    sim_cmd->add_option("--window", so.window, "Window for local/strllm")
        ->capture_default_str();
    sim_cmd->add_option("--nsink", so.nsink, "Pinned prefix size for strllm")
        ->capture_default_str();
    sim_cmd->callback([&] { cmd_simulate(g, so); });

    TrainOpts to;
    auto* train_cmd = app.add_subcommand("train", "Run a training experiment, write JSON report");
    train_cmd->fallthrough();
    train_cmd->add_option("--experiment", to.experiment, "Experiment name")
        ->check(CLI::IsMember({"smr-recon", "lmr-recall", "ablate-sink"}))
        ->capture_default_str();
    train_cmd->add_option("--config", to.config, "Experiment config JSON (overrides --experiment)");
    auto* steps_opt = train_cmd->add_option("--steps", to.steps, "Optimizer steps");
    auto* lr_opt = train_cmd->add_option("--lr", to.lr, "Peak learning rate");
    auto* batch_opt = train_cmd->add_option("--batch", to.batch, "Batch size");
    train_cmd->add_option("--checkpoint", to.checkpoint,
                          "Checkpoint path; the variant label lands before the extension");
    train_cmd->add_option("--attn-out", to.attn_out,
                          "Stem for per-variant probe attention CSV + segment map JSON");
    train_cmd->callback([&] {
        to.seed_set = app.count("--seed") > 0;
        to.steps_set = steps_opt->count() > 0;
        to.lr_set = lr_opt->count() > 0;
        to.batch_set = batch_opt->count() > 0;
        cmd_train(g, to);
    });

    AnalyzeOpts ao;
    auto* analyze_cmd = app.add_subcommand("analyze", "Sink-aggregation statistics of an attention map");
    analyze_cmd->fallthrough();
    analyze_cmd->add_option("--attn", ao.attn, "Attention map CSV")->required();
    analyze_cmd->add_option("--segmap", ao.segmap, "Segment map JSON")->required();
    analyze_cmd->add_option("--threshold", ao.threshold, "Conv-attn head ratio threshold")
        ->capture_default_str();
    analyze_cmd->add_option("--report", ao.report, "Report path (falls back to --out, then stdout)");
    analyze_cmd->callback([&] { cmd_analyze(g, ao); });

    BenchOpts bo;
    auto* bench_cmd = app.add_subcommand("bench", "Peak-residency scaling sweep across policies");
    bench_cmd->fallthrough();
    bench_cmd->add_option("--len", bo.len, "Tokens per utterance")->capture_default_str();
    bench_cmd->add_option("--utterances", bo.utterances, "Utterance counts to sweep")
        ->delimiter(',')
        ->capture_default_str();
    bench_cmd->add_option("--policies", bo.policies, "Policies to sweep")
        ->delimiter(',')
        ->capture_default_str();
    bench_cmd->add_option("--window", bo.window, "Window for local/strllm")
        ->capture_default_str();
    bench_cmd->add_option("--nsink", bo.nsink, "Pinned prefix size for strllm")
        ->capture_default_str();
    bench_cmd->add_flag("--wallclock", bo.wallclock, "Add wall-clock timing per sweep point");
    bench_cmd->callback([&] { cmd_bench(g, bo); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return 2;
    } catch (const RuntimeFailure& e) {
        std::cerr << "runtime error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
