#pragma once
// Iterative design loop against the simulated lab: structure prediction
// surrogate, developability filter, ranking, assay, oracle refits, plus the
// structural-noise ablation.

#include "abloop/core.hpp"
#include "abloop/denoiser.hpp"
#include "abloop/diffusion.hpp"
#include "abloop/oracles.hpp"
#include "abloop/sampler.hpp"
#include "abloop/so3.hpp"
#include "abloop/structio.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace abloop {

// ---------------------------------------------------------------------------
// Structure prediction surrogate

enum class PredictorKind { GroundTruth, NoisyPredicted, RotatedPose, AntigenRemoved };

struct PredictorMode {
    PredictorKind kind = PredictorKind::GroundTruth;
    double sigma = 0.5;       // RMS C-alpha displacement, Angstrom
    double angle_deg = 25.0;  // rigid rotation of the antibody

    std::string label() const {
        std::ostringstream os;
        switch (kind) {
            case PredictorKind::GroundTruth: return "ground_truth";
            case PredictorKind::NoisyPredicted: os << "noisy_predicted:" << sigma; return os.str();
            case PredictorKind::RotatedPose: os << "rotated_pose:" << angle_deg; return os.str();
            case PredictorKind::AntigenRemoved: return "antigen_removed";
        }
        return "unknown";
    }

    // Accepts "name" or "name:value", e.g. "noisy_predicted:0.5".
    static PredictorMode parse(const std::string& text) {
        auto colon = text.find(':');
        std::string name = text.substr(0, colon);
        std::optional<double> value;
        if (colon != std::string::npos) {
            try {
                std::size_t used = 0;
                value = std::stod(text.substr(colon + 1), &used);
                if (used != text.size() - colon - 1) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw Error(ErrorKind::ConfigError, "bad predictor parameter in '" + text + "'");
            }
        }
        PredictorMode m;
        if (name == "ground_truth") m.kind = PredictorKind::GroundTruth;
        else if (name == "noisy_predicted") m.kind = PredictorKind::NoisyPredicted;
        else if (name == "rotated_pose") m.kind = PredictorKind::RotatedPose;
        else if (name == "antigen_removed") m.kind = PredictorKind::AntigenRemoved;
        else throw Error(ErrorKind::ConfigError, "unknown predictor mode '" + name + "'");
        if (value) {
            if (m.kind == PredictorKind::NoisyPredicted) m.sigma = *value;
            else if (m.kind == PredictorKind::RotatedPose) m.angle_deg = *value;
            else throw Error(ErrorKind::ConfigError, "mode '" + name + "' takes no parameter");
        }
        if (m.sigma < 0.0) throw Error(ErrorKind::ConfigError, "noise sigma must be >= 0");
        return m;
    }
};

inline std::vector<std::pair<int, int>> framework_pairs(const Complex& c) {
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < static_cast<int>(c.size()); ++i)
        if (c.residues[i].region == Region::Framework) out.emplace_back(i, i);
    return out;
}

// C-alpha RMSD over framework residues, with no superposition.
inline double framework_rmsd(const Complex& a, const Complex& b) {
    auto pairs = framework_pairs(a);
    if (pairs.empty()) return 0.0;
    double ss = 0.0;
    for (auto [i, j] : pairs) ss += (a.residues.at(i).ca - b.residues.at(j).ca).squaredNorm();
    return std::sqrt(ss / static_cast<double>(pairs.size()));
}

inline Complex remove_antigen(const Complex& c) {
    Complex out;
    std::vector<int> remap(c.size(), -1);
    for (int i = 0; i < static_cast<int>(c.size()); ++i) {
        if (c.is_antigen(i)) continue;
        remap[i] = static_cast<int>(out.residues.size());
        out.residues.push_back(c.residues[i]);
    }
    for (int m : c.mask) out.mask.push_back(remap[m]);
    return out;
}

// Antibody backbone for seed_sequence placed against the starting complex.
// The rng is consumed only by the noisy and rotated modes.
inline Complex predict_structure(const Sequence& seed_sequence, const Complex& start, const PredictorMode& mode,
                                 Rng& rng) {
    Complex pred = start;
    pred.set_antibody_sequence(seed_sequence);
    const auto ab = pred.antibody_indices();

    switch (mode.kind) {
        case PredictorKind::GroundTruth: return pred;
        case PredictorKind::AntigenRemoved: return remove_antigen(pred);
        case PredictorKind::NoisyPredicted: {
            const double s = mode.sigma / std::sqrt(3.0);
            for (int i : ab) {
                auto& r = pred.residues[i];
                auto [n, c] = ideal_backbone(r.ca, r.orient);
                Vec3 ca = r.ca + s * normal_vec3(rng);
                n += s * normal_vec3(rng);
                c += s * normal_vec3(rng);
                r.ca = ca;
                r.orient = build_frame(n, ca, c);
            }
            Alignment al;
            try {
                al = kabsch_align(pred, start, framework_pairs(pred));
            } catch (const Error& e) {
                throw Error(ErrorKind::AlignmentFailure, e.what());
            }
            for (int i : ab) {
                auto& r = pred.residues[i];
                r.ca = al.rotation * r.ca + al.translation;
                r.orient = so3::orthonormalize(al.rotation * r.orient);
            }
            return pred;
        }
        case PredictorKind::RotatedPose: {
            Vec3 centroid = Vec3::Zero();
            for (int i : ab) centroid += pred.residues[i].ca;
            centroid /= static_cast<double>(ab.size());
            Vec3 axis = normal_vec3(rng).normalized();
            Mat3 rot = so3::axis_angle(axis, mode.angle_deg * so3::kPi / 180.0);
            for (int i : ab) {
                auto& r = pred.residues[i];
                r.ca = rot * (r.ca - centroid) + centroid;
                r.orient = rot * r.orient;
            }
            return pred;
        }
    }
    return pred;
}

// ---------------------------------------------------------------------------
// Developability filter

struct FilterThresholds {
    std::optional<double> min_charge, max_charge;  // net charge over design positions
    std::vector<std::string> motifs;               // excluded when inside a contiguous design region
    bool exclude_unpaired_cys = false;             // odd cysteine count over design positions

    bool empty() const { return !min_charge && !max_charge && motifs.empty() && !exclude_unpaired_cys; }

    static FilterThresholds defaults() {
        FilterThresholds t;
        t.min_charge = -4.0;
        t.max_charge = 4.0;
        t.motifs = {"NG", "DP"};
        t.exclude_unpaired_cys = true;
        return t;
    }
};

// Name of the first rule the sequence breaks, if any.
inline std::optional<std::string> developability_violation(const Sequence& s, const std::vector<int>& positions,
                                                           const FilterThresholds& t) {
    if (t.min_charge || t.max_charge) {
        double q = liability_features(s, positions).net_charge;
        if ((t.min_charge && q < *t.min_charge) || (t.max_charge && q > *t.max_charge)) return "charge";
    }
    if (!t.motifs.empty()) {
        // Motifs are matched within each run of contiguous design positions.
        std::string region;
        for (std::size_t k = 0; k <= positions.size(); ++k) {
            bool breaks = k == positions.size() || (k > 0 && positions[k] != positions[k - 1] + 1);
            if (breaks) {
                for (const auto& motif : t.motifs)
                    if (region.find(motif) != std::string::npos) return "motif:" + motif;
                region.clear();
            }
            if (k < positions.size()) region.push_back(s.at(positions[k]));
        }
    }
    if (t.exclude_unpaired_cys) {
        int cys = 0;
        for (int p : positions) cys += s.at(p) == 'C';
        if (cys % 2 == 1) return "unpaired_cys";
    }
    return std::nullopt;
}

struct FilterReport {
    std::vector<int> kept;                   // input indices, in order
    std::map<std::string, int> removed_by_rule;

    int removed() const {
        int n = 0;
        for (const auto& [rule, count] : removed_by_rule) n += count;
        return n;
    }
};

inline FilterReport developability_filter(const std::vector<Sequence>& seqs, const std::vector<int>& positions,
                                          const FilterThresholds& t) {
    FilterReport rep;
    for (int i = 0; i < static_cast<int>(seqs.size()); ++i) {
        auto rule = t.empty() ? std::nullopt : developability_violation(seqs[i], positions, t);
        if (rule) ++rep.removed_by_rule[*rule];
        else rep.kept.push_back(i);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Random-mutation control arm

// Each candidate gets k ~ U{1..max_edits} substitutions at distinct design
// positions, each to a different residue.
inline std::vector<Sequence> random_mutation_baseline(const Sequence& seed, const std::vector<int>& positions, int n,
                                                      int max_edits, Rng& rng) {
    if (n < 0 || max_edits < 0) throw Error(ErrorKind::InvalidRange, "n and max_edits must be >= 0");
    std::vector<Sequence> out(static_cast<std::size_t>(n), seed);
    const int cap = std::min(max_edits, static_cast<int>(positions.size()));
    if (cap == 0) return out;
    std::uniform_int_distribution<int> count(1, cap);
    std::uniform_int_distribution<int> other(1, kNumAminoAcids - 1);
    for (auto& s : out) {
        std::vector<int> pos = positions;
        int k = count(rng);
        for (int e = 0; e < k; ++e) {
            std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(e), pos.size() - 1);
            std::swap(pos[static_cast<std::size_t>(e)], pos[pick(rng)]);
            int p = pos[static_cast<std::size_t>(e)];
            s[p] = aa_letter((aa_index(s[p]) + other(rng)) % kNumAminoAcids);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Campaign

enum class Generator { Diffusion, RandomMutation };

struct CampaignConfig {
    int num_rounds = 3;
    int designs_per_round = 20;
    int seeds_per_round = 2;
    int initial_library = 30;  // random mutants assayed before round 1
    SampleConfig sample;       // gamma != 0 guides with the ridge oracle
    PredictorMode predictor;
    FilterThresholds filter = FilterThresholds::defaults();
    LandscapeConfig landscape;
    EnsembleConfig ensemble;
    Generator generator = Generator::Diffusion;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const {
        if (num_rounds < 1) throw Error(ErrorKind::ConfigError, "num_rounds must be >= 1");
        if (seeds_per_round < 1) throw Error(ErrorKind::ConfigError, "seeds_per_round must be >= 1");
        if (designs_per_round < seeds_per_round)
            throw Error(ErrorKind::ConfigError, "designs_per_round must be >= seeds_per_round");
        if (initial_library < 0) throw Error(ErrorKind::ConfigError, "initial_library must be >= 0");
        if (sample.num_samples < 1) throw Error(ErrorKind::ConfigError, "num_samples must be >= 1");
    }
};

struct CampaignContext {
    const Complex* start = nullptr;
    const DenoiserParams* params = nullptr;  // unused by the random-mutation arm
    NoiseSchedule schedule = default_schedule();
    const SyntheticLandscape* landscape = nullptr;
};

struct CampaignState {
    int next_round = 1;
    std::vector<Sequence> seeds;
    std::vector<AssayRecord> records;  // append-only, one per assayed sequence
    std::set<Sequence> assayed;
    std::optional<RidgeOracle> ridge;
    std::optional<EnsembleOracle> ensemble;
    double best_so_far = -std::numeric_limits<double>::infinity();
    std::optional<double> best_design;  // best measured value from rounds >= 1
};

struct RoundCandidate {
    std::string seed_id;
    int sample_index = 0;
    Sequence sequence;
    int edit_distance = 0;
    double score = 0.0;  // ensemble prediction
    int rank = 0;        // within its seed
    bool selected = false;
};

struct RoundResult {
    int round_id = 0;
    std::vector<Sequence> seeds;
    int generated = 0, filtered = 0, ranked = 0, assayed = 0, synthesized = 0;
    std::map<std::string, int> removed_by_rule;
    double best_so_far = 0.0;
    std::optional<double> best_design;
    std::string oracle_hash;
    bool viable = true;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["round_id"] = round_id;
        j["seeds"] = seeds;
        j["generated"] = generated;
        j["filtered"] = filtered;
        j["ranked"] = ranked;
        j["assayed"] = assayed;
        j["synthesized"] = synthesized;
        j["removed_by_rule"] = removed_by_rule;
        j["best_so_far"] = best_so_far;
        j["best_design"] = best_design ? nlohmann::ordered_json(*best_design) : nlohmann::ordered_json(nullptr);
        j["oracle_hash"] = oracle_hash;
        j["status"] = viable ? "ok" : "no_viable_candidates";
        return j;
    }
};

struct RoundOutput {
    RoundResult result;
    std::vector<RoundCandidate> candidates;
    std::vector<AssayRecord> new_records;
};

namespace detail {

inline std::uint64_t oracle_hash(const CampaignState& s) {
    Hasher h;
    if (s.ridge) {
        h.pod(s.ridge->bias);
        h.bytes(s.ridge->weights.data(), sizeof(double) * static_cast<std::size_t>(s.ridge->weights.size()));
    }
    if (s.ensemble)
        for (const auto& m : s.ensemble->members) {
            h.bytes(m.w1.data(), sizeof(double) * static_cast<std::size_t>(m.w1.size()));
            h.bytes(m.w2.data(), sizeof(double) * static_cast<std::size_t>(m.w2.size()));
            h.bytes(m.b1.data(), sizeof(double) * static_cast<std::size_t>(m.b1.size()));
            h.pod(m.b2);
        }
    return h.value();
}

inline void absorb(CampaignState& s, const std::vector<AssayRecord>& recs) {
    for (const auto& r : recs) {
        s.records.push_back(r);
        s.assayed.insert(r.sequence);
        if (!r.measured_value) continue;
        s.best_so_far = std::max(s.best_so_far, *r.measured_value);
        if (r.round_id >= 1) s.best_design = std::max(s.best_design.value_or(*r.measured_value), *r.measured_value);
    }
}

inline void refit(CampaignState& s, const CampaignConfig& cfg, const std::vector<int>& positions, int round) {
    s.ridge = train_ridge_cv(s.records, positions);
    s.ensemble = train_ensemble(s.records, positions, cfg.ensemble, derive_seed(cfg.seed, static_cast<std::uint64_t>(round), 0xe25));
}

// Top measured synthesized affinity records; earlier records win ties.
inline std::vector<Sequence> top_measured(const std::vector<AssayRecord>& recs, int k) {
    std::vector<const AssayRecord*> pool;
    for (const auto& r : recs)
        if (r.synthesized && r.measured_value && r.assay_type == AssayType::Affinity) pool.push_back(&r);
    std::stable_sort(pool.begin(), pool.end(),
                     [](const AssayRecord* a, const AssayRecord* b) { return *a->measured_value > *b->measured_value; });
    std::vector<Sequence> out;
    for (const auto* r : pool) {
        if (static_cast<int>(out.size()) == k) break;
        out.push_back(r->sequence);
    }
    return out;
}

}  // namespace detail

// Round 0: assay the starting antibody and a random-mutant library, fit oracles.
inline CampaignState init_campaign(const CampaignContext& ctx, const CampaignConfig& cfg) {
    cfg.validate();
    const Sequence start_seq = ctx.start->antibody_sequence();
    const auto positions = ctx.start->design_positions();
    Rng lib_rng(derive_seed(cfg.seed, 0, 0x11b));
    auto library = random_mutation_baseline(start_seq, positions, cfg.initial_library, cfg.sample.max_cdr_edits, lib_rng);
    std::vector<Sequence> batch{start_seq};
    std::set<Sequence> seen{start_seq};
    for (auto& s : library)
        if (seen.insert(s).second) batch.push_back(std::move(s));

    CampaignState state;
    Rng assay_rng(derive_seed(cfg.seed, 0, 0xa55a));
    auto recs = ctx.landscape->assay(batch, assay_rng, 0);
    // The starting antibody is the reference point and always counts as made.
    if (!recs[0].synthesized) {
        recs[0].synthesized = true;
        recs[0].measured_value = 0.0;
    }
    detail::absorb(state, recs);
    detail::refit(state, cfg, positions, 0);
    state.seeds = {start_seq};
    return state;
}

inline RoundOutput run_round(const CampaignContext& ctx, CampaignState& state, const CampaignConfig& cfg) {
    const int round = state.next_round;
    const auto positions = ctx.start->design_positions();
    RoundOutput out;
    RoundResult& res = out.result;
    res.round_id = round;
    res.seeds = state.seeds;

    std::optional<CachedOracle> guide;
    if (cfg.sample.gamma != 0.0 && state.ridge) guide.emplace(*state.ridge);
    Oracle ranker = *state.ensemble;

    const int n_seeds = static_cast<int>(state.seeds.size());
    std::set<Sequence> chosen;
    std::vector<Sequence> to_assay;
    for (int si = 0; si < n_seeds; ++si) {
        const Sequence& seed_seq = state.seeds[si];
        const std::string seed_id = "r" + std::to_string(round) + "s" + std::to_string(si);
        const auto sub = static_cast<std::uint64_t>(si);

        std::vector<Sequence> seqs;
        std::vector<int> edits, sample_idx;
        if (cfg.generator == Generator::Diffusion) {
            Rng pred_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(round), 0x9e0 + sub));
            Complex predicted = predict_structure(seed_seq, *ctx.start, cfg.predictor, pred_rng);
            SampleConfig sc = cfg.sample;
            sc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(round), sub);
            sc.threads = cfg.threads;
            if (guide) sc.guidance_oracle = *guide;
            auto gen = generate(*ctx.params, predicted, ctx.schedule, sc, seed_id);
            res.generated += gen.generated;
            for (const auto& c : gen.candidates) {
                seqs.push_back(c.antibody_sequence());
                edits.push_back(c.edit_distance);
                sample_idx.push_back(c.provenance.sample_index);
            }
        } else {
            Rng mut_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(round), 0x3a0 + sub));
            auto muts = random_mutation_baseline(seed_seq, positions, cfg.sample.num_samples, cfg.sample.max_cdr_edits, mut_rng);
            res.generated += static_cast<int>(muts.size());
            std::set<Sequence> seen;
            for (int i = 0; i < static_cast<int>(muts.size()); ++i) {
                if (!seen.insert(muts[i]).second) continue;
                edits.push_back(edit_distance(muts[i], seed_seq, positions));
                seqs.push_back(std::move(muts[i]));
                sample_idx.push_back(i);
            }
        }

        auto rep = developability_filter(seqs, positions, cfg.filter);
        for (const auto& [rule, count] : rep.removed_by_rule) res.removed_by_rule[rule] += count;
        res.filtered += static_cast<int>(rep.kept.size());
        std::vector<Sequence> kept;
        std::vector<int> kept_edits;
        for (int k : rep.kept) {
            kept.push_back(seqs[k]);
            kept_edits.push_back(edits[k]);
        }
        if (kept.empty()) continue;
        auto ranked = rank_sequences(ranker, kept, kept_edits, static_cast<int>(kept.size()));
        res.ranked += static_cast<int>(ranked.size());

        const int quota = cfg.designs_per_round / n_seeds + (si < cfg.designs_per_round % n_seeds ? 1 : 0);
        int taken = 0;
        for (int r = 0; r < static_cast<int>(ranked.size()); ++r) {
            const auto& rc = ranked[r];
            const Sequence& s = kept[rc.index];
            bool take = taken < quota && !state.assayed.count(s) && !chosen.count(s);
            if (take) {
                chosen.insert(s);
                to_assay.push_back(s);
                ++taken;
            }
            out.candidates.push_back({seed_id, sample_idx[rep.kept[rc.index]], s, rc.edit_distance, rc.score, r, take});
        }
    }

    res.assayed = static_cast<int>(to_assay.size());
    if (!to_assay.empty()) {
        Rng assay_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(round), 0xa55a));
        out.new_records = ctx.landscape->assay(to_assay, assay_rng, round);
        for (const auto& r : out.new_records) res.synthesized += r.synthesized;
    }

    if (res.synthesized == 0) {
        // Nothing new measured: keep seeds and oracles, record the round.
        res.viable = false;
        detail::absorb(state, out.new_records);
    } else {
        detail::absorb(state, out.new_records);
        detail::refit(state, cfg, positions, round);
        state.seeds = detail::top_measured(state.records, cfg.seeds_per_round);
    }
    res.best_so_far = state.best_so_far;
    res.best_design = state.best_design;
    res.oracle_hash = hex64(detail::oracle_hash(state));
    ++state.next_round;
    return out;
}

struct CampaignOutcome {
    CampaignState state;
    std::vector<RoundResult> rounds;
    std::vector<std::vector<RoundCandidate>> candidates;  // per round
    std::vector<AssayRecord> initial_records;
};

inline CampaignOutcome run_campaign(const CampaignContext& ctx, const CampaignConfig& cfg) {
    CampaignOutcome out;
    out.state = init_campaign(ctx, cfg);
    out.initial_records = out.state.records;
    for (int r = 0; r < cfg.num_rounds; ++r) {
        auto ro = run_round(ctx, out.state, cfg);
        out.rounds.push_back(ro.result);
        out.candidates.push_back(std::move(ro.candidates));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Campaign directory

inline nlohmann::ordered_json round_candidate_json(const RoundCandidate& c) {
    nlohmann::ordered_json j;
    j["seed_id"] = c.seed_id;
    j["sample_index"] = c.sample_index;
    j["sequence"] = c.sequence;
    j["edit_distance"] = c.edit_distance;
    j["score"] = c.score;
    j["rank"] = c.rank;
    j["selected"] = c.selected;
    return j;
}

inline std::string format_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// Writes records, per-round candidates, oracle snapshots, the round log and
// a best-so-far table. Returns the relative paths written.
inline std::vector<std::string> write_campaign(const std::filesystem::path& dir, const CampaignOutcome& out,
                                               std::uint64_t campaign_seed, std::uint64_t config_hash) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "oracles");
    std::vector<std::string> files;

    const auto records_path = dir / "records.jsonl";
    fs::remove(records_path);
    append_records(records_path.string(), out.state.records);
    files.push_back("records.jsonl");

    std::string rounds_log, table = "round,best_so_far,best_design,generated,filtered,ranked,assayed,synthesized\n";
    for (std::size_t r = 0; r < out.rounds.size(); ++r) {
        const auto& rr = out.rounds[r];
        rounds_log += rr.to_json().dump() + "\n";
        table += std::to_string(rr.round_id) + "," + format_real(rr.best_so_far) + "," +
                 (rr.best_design ? format_real(*rr.best_design) : std::string()) + "," + std::to_string(rr.generated) +
                 "," + std::to_string(rr.filtered) + "," + std::to_string(rr.ranked) + "," +
                 std::to_string(rr.assayed) + "," + std::to_string(rr.synthesized) + "\n";
        std::string cands;
        for (const auto& c : out.candidates[r]) cands += round_candidate_json(c).dump() + "\n";
        const std::string name = "round_" + std::to_string(rr.round_id) + "_candidates.jsonl";
        write_text_file((dir / name).string(), cands);
        files.push_back(name);
    }
    write_text_file((dir / "rounds.jsonl").string(), rounds_log);
    write_text_file((dir / "best_so_far.csv").string(), table);
    files.push_back("rounds.jsonl");
    files.push_back("best_so_far.csv");

    if (out.state.ridge) {
        write_text_file((dir / "oracles/ridge.json").string(), out.state.ridge->to_json().dump() + "\n");
        files.push_back("oracles/ridge.json");
    }
    if (out.state.ensemble) {
        write_text_file((dir / "oracles/ensemble.json").string(), out.state.ensemble->to_json().dump() + "\n");
        files.push_back("oracles/ensemble.json");
    }

    nlohmann::ordered_json manifest;
    manifest["campaign_seed"] = campaign_seed;
    manifest["config_hash"] = hex64(config_hash);
    manifest["rounds"] = out.rounds.size();
    manifest["files"] = files;
    write_text_file((dir / "campaign.json").string(), manifest.dump(2) + "\n");
    files.push_back("campaign.json");
    return files;
}

// ---------------------------------------------------------------------------
// Structural-noise ablation

struct AblationConfig {
    int num_samples = 500;
    int top_k = 500;
    int t_noise = 8;
    int max_cdr_edits = 4;
    std::uint64_t seed = 0;
    int threads = 1;
};

struct AblationRow {
    std::string mode;
    std::vector<double> scores;  // top-k predicted scores, descending
    std::vector<Sequence> sequences;
    double q1 = 0.0, median = 0.0, q3 = 0.0, mean = 0.0;
};

// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    double h = q * static_cast<double>(sorted.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(h));
    auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline void summarize(AblationRow& row) {
    std::vector<double> s = row.scores;
    std::sort(s.begin(), s.end());
    row.q1 = quantile_sorted(s, 0.25);
    row.median = quantile_sorted(s, 0.5);
    row.q3 = quantile_sorted(s, 0.75);
    row.mean = s.empty() ? std::numeric_limits<double>::quiet_NaN()
                         : std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

// Every mode starts from the same seed sequence and sampling seed, so modes
// differ only in the structure handed to the sampler.
inline std::vector<AblationRow> ablation_run(const Complex& start, const std::vector<PredictorMode>& modes,
                                             const DenoiserParams& params, const NoiseSchedule& sched,
                                             const Oracle& oracle, const AblationConfig& cfg) {
    std::vector<AblationRow> rows;
    const Sequence seed_seq = start.antibody_sequence();
    for (const auto& mode : modes) {
        Rng pred_rng(derive_seed(cfg.seed, 0x9e0));
        Complex predicted = predict_structure(seed_seq, start, mode, pred_rng);
        SampleConfig sc;
        sc.t_noise = cfg.t_noise;
        sc.num_samples = cfg.num_samples;
        sc.max_cdr_edits = cfg.max_cdr_edits;
        sc.seed = cfg.seed;
        sc.threads = cfg.threads;
        auto gen = generate(params, predicted, sched, sc, mode.label());
        auto ranked = rank_candidates(oracle, gen.candidates, cfg.top_k);
        AblationRow row;
        row.mode = mode.label();
        for (const auto& rc : ranked) {
            row.scores.push_back(rc.score);
            row.sequences.push_back(gen.candidates[rc.index].antibody_sequence());
        }
        summarize(row);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string ablation_report_csv(const std::vector<AblationRow>& rows) {
    std::string out = "mode,count,q1,median,q3,mean\n";
    for (const auto& r : rows)
        out += r.mode + "," + std::to_string(r.scores.size()) + "," + format_real(r.q1) + "," + format_real(r.median) +
               "," + format_real(r.q3) + "," + format_real(r.mean) + "\n";
    return out;
}

}  // namespace abloop
