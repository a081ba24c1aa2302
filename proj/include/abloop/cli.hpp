#pragma once
// Command-line front end. Each command reads a config, writes its primary
// artifacts into --out and finishes with manifest.json, the only file allowed
// to differ between identical reruns.

#include "abloop/campaign.hpp"
#include "abloop/config.hpp"
#include "abloop/synthetic.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#ifndef ABLOOP_VERSION
#define ABLOOP_VERSION "0.0.0"
#endif

namespace abloop::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitData = 4;

inline int exit_code_for(ErrorKind k) {
    switch (k) {
        case ErrorKind::ConfigError: return kExitConfig;
        case ErrorKind::MalformedRecord:
        case ErrorKind::MissingAtom:
        case ErrorKind::UnknownResidue:
        case ErrorKind::CorruptFile:
        case ErrorKind::VersionMismatch:
        case ErrorKind::LengthMismatch:
        case ErrorKind::IoError: return kExitData;
        default: return kExitRuntime;
    }
}

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { Error = 0, Warn, Info, Debug };

inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("ABLOOP_LOG");
        std::string v = env ? env : "warn";
        if (v == "error") return LogLevel::Error;
        if (v == "info") return LogLevel::Info;
        if (v == "debug") return LogLevel::Debug;
        return LogLevel::Warn;
    }();
    return level;
}

inline void log(LogLevel level, const std::string& msg) {
    static constexpr const char* names[] = {"error", "warn", "info", "debug"};
    if (level <= log_level()) std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

// ---------------------------------------------------------------------------
// Manifest

struct RunManifest {
    std::string command;
    std::uint64_t config_hash = 0;
    std::vector<std::pair<std::string, std::uint64_t>> inputs;  // path, content hash
    std::map<std::string, std::uint64_t> seeds;
    std::vector<std::string> artifacts;  // relative to the output directory
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

    void add_input(const std::string& path) { inputs.emplace_back(path, Hasher().str(read_text_file(path)).value()); }

    std::uint64_t input_hash() const {
        Hasher h;
        for (const auto& [path, v] : inputs) h.pod(v);
        return h.value();
    }

    void write(const fs::path& dir) const {
        nlohmann::ordered_json j;
        j["command"] = command;
        j["tool_version"] = ABLOOP_VERSION;
        j["config_hash"] = hex64(config_hash);
        j["input_hash"] = hex64(input_hash());
        nlohmann::ordered_json in = nlohmann::ordered_json::array();
        for (const auto& [path, v] : inputs) in.push_back({{"path", path}, {"hash", hex64(v)}});
        j["inputs"] = in;
        j["seeds"] = seeds;
        nlohmann::ordered_json arts = nlohmann::ordered_json::array();
        for (const auto& a : artifacts)
            arts.push_back({{"path", a}, {"hash", hex64(Hasher().str(read_text_file((dir / a).string())).value())}});
        j["artifacts"] = arts;
        j["timestamp"] = static_cast<long long>(std::time(nullptr));
        j["duration_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        write_text_file((dir / "manifest.json").string(), j.dump(2) + "\n");
    }
};

// ---------------------------------------------------------------------------
// Shared options and loaders

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string out;
};

struct Context {
    RunConfig cfg;
    RunManifest manifest;
    fs::path out;
    int threads = 1;
};

inline Context open_context(const std::string& command, const CommonOptions& o) {
    Context ctx;
    ctx.cfg = load_config(o.config, o.seed);
    ctx.manifest.command = command;
    ctx.manifest.config_hash = ctx.cfg.hash();
    ctx.manifest.add_input(o.config);
    ctx.manifest.seeds["seed"] = ctx.cfg.seed;
    ctx.threads = o.threads ? *o.threads : ctx.cfg.effective_threads();
    if (ctx.threads < 1) throw Error(ErrorKind::ConfigError, "--threads must be >= 1");
    ctx.out = o.out;
    std::error_code ec;
    fs::create_directories(ctx.out, ec);
    if (ec) throw Error(ErrorKind::IoError, "cannot create " + o.out + ": " + ec.message());
    return ctx;
}

inline void emit(Context& ctx, const std::string& name, std::string_view text) {
    const fs::path p = ctx.out / name;
    fs::create_directories(p.parent_path());
    write_text_file(p.string(), text);
    ctx.manifest.artifacts.push_back(name);
}

inline Complex load_start(Context& ctx, const std::string& path) {
    if (path.empty()) {
        ctx.manifest.seeds["start_complex_seed"] = ctx.cfg.start_complex_seed;
        return synth::make_synthetic_complex(ctx.cfg.start_complex_seed);
    }
    ctx.manifest.add_input(path);
    try {
        return read_complex(read_text_file(path));
    } catch (const Error& e) {
        throw Error(e.kind(), path + ": " + e.message());
    }
}

inline DenoiserParams load_model(Context& ctx, const std::string& path) {
    ctx.manifest.add_input(path);
    auto p = load_params(path);
    if (p.config.steps != ctx.cfg.schedule.steps)
        throw Error(ErrorKind::ConfigError, "model was trained with " + std::to_string(p.config.steps) +
                                                " diffusion steps, config schedule has " +
                                                std::to_string(ctx.cfg.schedule.steps));
    return p;
}

inline std::vector<Complex> load_dataset(Context& ctx) {
    const auto& d = ctx.cfg.data;
    if (d.dir.empty()) {
        ctx.manifest.seeds["data_seed"] = d.seed;
        return synth::make_synthetic_dataset(d.num_complexes, d.seed);
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(d.dir))
        if (e.path().extension() == ".cplx") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error(ErrorKind::IoError, "no .cplx files in " + d.dir);
    std::vector<Complex> out;
    for (const auto& f : files) {
        ctx.manifest.add_input(f.string());
        try {
            out.push_back(read_complex(read_text_file(f.string())));
        } catch (const Error& e) {
            throw Error(e.kind(), f.string() + ": " + e.message());
        }
    }
    return out;
}

// Ridge or ensemble snapshot, dispatched on its "kind" field.
inline Oracle load_oracle(Context& ctx, const std::string& path) {
    ctx.manifest.add_input(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::CorruptFile, path + ": " + e.what());
    }
    std::string kind = j.value("kind", "");
    if (kind == "ridge") return RidgeOracle::from_json(j);
    if (kind == "ensemble") return EnsembleOracle::from_json(j);
    throw Error(ErrorKind::CorruptFile, path + ": unknown oracle kind '" + kind + "'");
}

struct SequenceEntry {
    Sequence sequence;
    int edit_distance = 0;
};

// Reads "sequence" (and "edit_distance" when present) from each JSON line.
inline std::vector<SequenceEntry> load_sequences(Context& ctx, const std::string& path) {
    ctx.manifest.add_input(path);
    std::istringstream in(read_text_file(path));
    std::vector<SequenceEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out.push_back({j.at("sequence").get<std::string>(), j.value("edit_distance", 0)});
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::MalformedRecord, path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::string safe_name(std::string s) {
    for (char& ch : s)
        if (ch == ':' || ch == '/') ch = '_';
    return s;
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_synth_data(const CommonOptions& o) {
    auto ctx = open_context("synth-data", o);
    auto data = load_dataset(ctx);
    char name[32];
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::snprintf(name, sizeof name, "complex_%04zu.cplx", i);
        emit(ctx, name, write_complex(data[i]));
    }
    ctx.manifest.write(ctx.out);
    std::cout << "complexes=" << data.size() << "\n";
}

inline void cmd_train(const CommonOptions& o) {
    auto ctx = open_context("train", o);
    auto data = load_dataset(ctx);
    const auto& cfg = ctx.cfg;
    ctx.manifest.seeds["train_seed"] = cfg.train.seed;
    ctx.manifest.seeds["init_seed"] = derive_seed(cfg.seed, 2);

    auto params = DenoiserParams::init(cfg.model, derive_seed(cfg.seed, 2));
    params.manifest_hash = Hasher().pod(ctx.manifest.config_hash).pod(ctx.manifest.input_hash()).value();
    Trainer trainer(std::move(params), cfg.train);
    std::string table = "step,l_type,l_pos,l_orient,total\n";
    LossBreakdown l;
    for (int s = 1; s <= cfg.train.steps; ++s) {
        l = trainer.step(data, cfg.schedule);
        table += std::to_string(s) + "," + format_real(l.type) + "," + format_real(l.pos) + "," +
                 format_real(l.orient) + "," + format_real(l.total) + "\n";
        if (s % 100 == 0) log(LogLevel::Info, "step " + std::to_string(s) + " total " + format_real(l.total));
        if (cfg.train.checkpoint_interval > 0 && s % cfg.train.checkpoint_interval == 0 && s < cfg.train.steps)
            emit(ctx, "checkpoints/params_" + std::to_string(s) + ".bin", serialize_params(trainer.params()));
    }
    emit(ctx, "params.bin", serialize_params(trainer.params()));
    emit(ctx, "loss.csv", table);
    nlohmann::ordered_json tm;
    tm["optimizer"] = kOptimizerName;
    tm["config"] = cfg.canonical;
    tm["dataset_seed"] = cfg.data.seed;
    tm["dataset_size"] = data.size();
    tm["schedule_hash"] = hex64(Hasher().str(serialize_schedule(cfg.schedule)).value());
    tm["manifest_hash"] = hex64(trainer.params().manifest_hash);
    emit(ctx, "training.json", tm.dump(2) + "\n");
    ctx.manifest.write(ctx.out);
    std::cout << "steps=" << cfg.train.steps << " final_total=" << format_real(l.total) << "\n";
}

struct OptimizeOptions {
    std::string params, complex, oracle;
    std::optional<double> gamma;
    std::optional<int> t_noise, num_samples;
};

inline void cmd_optimize(const CommonOptions& o, const OptimizeOptions& oo) {
    auto ctx = open_context("optimize", o);
    auto params = load_model(ctx, oo.params);
    Complex start = load_start(ctx, oo.complex);
    SampleConfig sc = ctx.cfg.sample;
    if (oo.gamma) sc.gamma = *oo.gamma;
    if (oo.t_noise) sc.t_noise = *oo.t_noise;
    if (oo.num_samples) sc.num_samples = *oo.num_samples;
    sc.threads = ctx.threads;
    const auto positions = start.design_positions();
    if (sc.gamma != 0.0) {
        if (ctx.cfg.guidance == "liability") {
            sc.guidance_oracle = [positions](const Sequence& s) { return -liability_score(s, positions); };
        } else {
            if (oo.oracle.empty()) throw Error(ErrorKind::ConfigError, "nonzero gamma with ridge guidance needs --oracle");
            sc.guidance_oracle = CachedOracle(load_oracle(ctx, oo.oracle));
        }
    }
    ctx.manifest.seeds["sample_seed"] = sc.seed;
    auto res = generate(params, start, ctx.cfg.schedule, sc);
    std::string lines;
    for (const auto& c : res.candidates) lines += candidate_record(c) + "\n";
    emit(ctx, "candidates.jsonl", lines);

    std::vector<Sequence> seqs;
    for (const auto& c : res.candidates) seqs.push_back(c.antibody_sequence());
    auto report = developability_filter(seqs, positions, ctx.cfg.campaign.filter);
    ctx.manifest.write(ctx.out);
    std::cout << "generated=" << res.generated << " over_edit_cap=" << res.over_edit_cap
              << " duplicates=" << res.duplicates << " candidates=" << res.candidates.size()
              << " passed_filter=" << report.kept.size() << " filtered=" << report.removed() << "\n";
}

struct ModelOptions {
    std::string params, complex;
};

inline void cmd_campaign(const CommonOptions& o, const ModelOptions& mo) {
    auto ctx = open_context("campaign", o);
    CampaignConfig cc = ctx.cfg.campaign;
    cc.threads = ctx.threads;
    Complex start = load_start(ctx, mo.complex);
    std::optional<DenoiserParams> params;
    if (cc.generator == Generator::Diffusion) {
        if (mo.params.empty()) throw Error(ErrorKind::ConfigError, "diffusion campaigns need --params");
        params = load_model(ctx, mo.params);
    }
    SyntheticLandscape landscape(start, cc.landscape);
    ctx.manifest.seeds["campaign_seed"] = cc.seed;
    ctx.manifest.seeds["landscape_seed"] = cc.landscape.seed;
    CampaignContext cctx{&start, params ? &*params : nullptr, ctx.cfg.schedule, &landscape};
    auto out = run_campaign(cctx, cc);
    for (const auto& f : write_campaign(ctx.out, out, cc.seed, ctx.manifest.config_hash)) ctx.manifest.artifacts.push_back(f);
    emit(ctx, "config.json", ctx.cfg.canonical.dump(2) + "\n");
    ctx.manifest.write(ctx.out);
    std::cout << "rounds=" << out.rounds.size() << " records=" << out.state.records.size()
              << " best_so_far=" << format_real(out.state.best_so_far) << "\n";
}

struct AblateOptions {
    std::string params, complex, oracle, modes;
};

inline std::vector<std::string> split_modes(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

inline void cmd_ablate(const CommonOptions& o, const AblateOptions& ao) {
    auto ctx = open_context("ablate", o);
    const auto& cfg = ctx.cfg;
    std::vector<PredictorMode> modes;
    for (const auto& m : ao.modes.empty() ? cfg.ablation.modes : split_modes(ao.modes)) modes.push_back(PredictorMode::parse(m));
    if (modes.empty()) throw Error(ErrorKind::ConfigError, "no ablation modes given");
    auto params = load_model(ctx, ao.params);
    Complex start = load_start(ctx, ao.complex);

    Oracle oracle;
    if (!ao.oracle.empty()) {
        oracle = load_oracle(ctx, ao.oracle);
    } else {
        // Ranking oracle fitted to an assayed random-mutant library.
        SyntheticLandscape landscape(start, cfg.landscape);
        Rng lib_rng(derive_seed(cfg.seed, 0xab1));
        auto lib = random_mutation_baseline(start.antibody_sequence(), start.design_positions(),
                                            cfg.ablation.library_size, cfg.sample.max_cdr_edits, lib_rng);
        auto recs = landscape.assay(lib, lib_rng);
        auto ens = train_ensemble(recs, start.design_positions(), cfg.campaign.ensemble, derive_seed(cfg.seed, 0xab2));
        emit(ctx, "oracle_ensemble.json", ens.to_json().dump() + "\n");
        oracle = std::move(ens);
        ctx.manifest.seeds["landscape_seed"] = cfg.landscape.seed;
    }
    AblationConfig ac;
    ac.num_samples = cfg.ablation.num_samples;
    ac.top_k = cfg.ablation.top_k;
    ac.t_noise = cfg.sample.t_noise;
    ac.max_cdr_edits = cfg.sample.max_cdr_edits;
    ac.seed = cfg.seed;
    ac.threads = ctx.threads;
    auto rows = ablation_run(start, modes, params, cfg.schedule, oracle, ac);
    for (const auto& r : rows) {
        std::string lines;
        for (std::size_t i = 0; i < r.scores.size(); ++i) {
            nlohmann::ordered_json j;
            j["mode"] = r.mode;
            j["rank"] = i + 1;
            j["score"] = r.scores[i];
            j["sequence"] = r.sequences[i];
            lines += j.dump() + "\n";
        }
        emit(ctx, "candidates_" + safe_name(r.mode) + ".jsonl", lines);
    }
    emit(ctx, "ablation_report.csv", ablation_report_csv(rows));
    ctx.manifest.write(ctx.out);
    std::cout << ablation_report_csv(rows);
}

struct RankOptions {
    std::string oracle, candidates;
    int top_k = 0;  // 0: all
};

inline void cmd_rank(const CommonOptions& o, const RankOptions& ro) {
    auto ctx = open_context("rank", o);
    Oracle oracle = load_oracle(ctx, ro.oracle);
    auto entries = load_sequences(ctx, ro.candidates);
    std::vector<Sequence> seqs;
    std::vector<int> edits;
    for (const auto& e : entries) {
        seqs.push_back(e.sequence);
        edits.push_back(e.edit_distance);
    }
    int k = ro.top_k > 0 ? ro.top_k : std::max<int>(1, static_cast<int>(seqs.size()));
    auto ranked = rank_sequences(oracle, seqs, edits, k);
    std::string table = "rank,index,score,edit_distance,sequence\n";
    for (std::size_t i = 0; i < ranked.size(); ++i)
        table += std::to_string(i + 1) + "," + std::to_string(ranked[i].index) + "," + format_real(ranked[i].score) +
                 "," + std::to_string(ranked[i].edit_distance) + "," + seqs[ranked[i].index] + "\n";
    emit(ctx, "ranked.csv", table);
    ctx.manifest.write(ctx.out);
    std::cout << "ranked=" << ranked.size() << "\n";
}

struct AssayOptions {
    std::string complex, candidates;
    int round_id = 0;
};

inline void cmd_assay_sim(const CommonOptions& o, const AssayOptions& ao) {
    auto ctx = open_context("assay-sim", o);
    Complex start = load_start(ctx, ao.complex);
    SyntheticLandscape landscape(start, ctx.cfg.landscape);
    auto entries = load_sequences(ctx, ao.candidates);
    std::vector<Sequence> seqs;
    for (const auto& e : entries) seqs.push_back(e.sequence);
    Rng rng(derive_seed(ctx.cfg.seed, static_cast<std::uint64_t>(ao.round_id), 0xa55a));
    ctx.manifest.seeds["landscape_seed"] = ctx.cfg.landscape.seed;
    auto recs = landscape.assay(seqs, rng, ao.round_id);
    std::string lines;
    int synthesized = 0;
    for (const auto& r : recs) {
        lines += record_to_json(r).dump() + "\n";
        synthesized += r.synthesized;
    }
    emit(ctx, "records.jsonl", lines);
    ctx.manifest.write(ctx.out);
    std::cout << "assayed=" << recs.size() << " synthesized=" << synthesized << "\n";
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, char** argv) {
    CLI::App app{"Structure-conditioned antibody optimization loop", "abloop"};
    app.set_version_flag("--version", ABLOOP_VERSION);
    app.require_subcommand(1);

    CommonOptions common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", common.seed, "Override the configured seed");
        sub->add_option("--threads", common.threads, "Worker threads (default: available cores)");
        sub->add_option("--out", common.out, "Output directory")->required();
    };

    auto* synth = app.add_subcommand("synth-data", "Write a synthetic complex dataset");
    add_common(synth);

    auto* train = app.add_subcommand("train", "Train the denoiser");
    add_common(train);

    OptimizeOptions oo;
    auto* opt = app.add_subcommand("optimize", "Diversify a seed antibody");
    add_common(opt);
    opt->add_option("--params", oo.params, "Trained parameter file")->required()->check(CLI::ExistingFile);
    opt->add_option("--complex", oo.complex, "Seed complex (default: synthetic)")->check(CLI::ExistingFile);
    opt->add_option("--oracle", oo.oracle, "Oracle snapshot used for guidance")->check(CLI::ExistingFile);
    opt->add_option("--gamma", oo.gamma, "Guidance strength");
    opt->add_option("--t-noise", oo.t_noise, "Noising steps");
    opt->add_option("--num-samples", oo.num_samples, "Samples to draw");

    ModelOptions mo;
    auto* camp = app.add_subcommand("campaign", "Run a multi-round campaign against the simulated assay");
    add_common(camp);
    camp->add_option("--params", mo.params, "Trained parameter file")->check(CLI::ExistingFile);
    camp->add_option("--complex", mo.complex, "Starting complex (default: synthetic)")->check(CLI::ExistingFile);

    AblateOptions ao;
    auto* abl = app.add_subcommand("ablate", "Compare structure inputs for the sampler");
    add_common(abl);
    abl->add_option("--params", ao.params, "Trained parameter file")->required()->check(CLI::ExistingFile);
    abl->add_option("--complex", ao.complex, "Starting complex (default: synthetic)")->check(CLI::ExistingFile);
    abl->add_option("--oracle", ao.oracle, "Ranking oracle snapshot")->check(CLI::ExistingFile);
    abl->add_option("--modes", ao.modes, "Comma-separated modes, e.g. ground_truth,rotated_pose:25");

    RankOptions ro;
    auto* rank = app.add_subcommand("rank", "Score and sort candidate sequences");
    add_common(rank);
    rank->add_option("--oracle", ro.oracle, "Oracle snapshot")->required()->check(CLI::ExistingFile);
    rank->add_option("--candidates", ro.candidates, "JSON lines with a sequence field")->required()->check(CLI::ExistingFile);
    rank->add_option("--top-k", ro.top_k, "Keep the best k (default: all)");

    AssayOptions aso;
    auto* assay = app.add_subcommand("assay-sim", "Measure sequences on the simulated landscape");
    add_common(assay);
    assay->add_option("--complex", aso.complex, "Reference complex (default: synthetic)")->check(CLI::ExistingFile);
    assay->add_option("--candidates", aso.candidates, "JSON lines with a sequence field")->required()->check(CLI::ExistingFile);
    assay->add_option("--round", aso.round_id, "Round id stamped on the records");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*synth) cmd_synth_data(common);
        else if (*train) cmd_train(common);
        else if (*opt) cmd_optimize(common, oo);
        else if (*camp) cmd_campaign(common, mo);
        else if (*abl) cmd_ablate(common, ao);
        else if (*rank) cmd_rank(common, ro);
        else if (*assay) cmd_assay_sim(common, aso);
    } catch (const Error& e) {
        log(LogLevel::Error, e.what());
        return exit_code_for(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        log(LogLevel::Error, e.what());
        return kExitData;
    } catch (const std::exception& e) {
        log(LogLevel::Error, e.what());
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace abloop::cli
