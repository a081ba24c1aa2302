#pragma once
// Reverse-process generation: partial-noise optimization of a seed complex
// and oracle-guided (product of experts) residue-type sampling.

#include "abloop/core.hpp"
#include "abloop/denoiser.hpp"
#include "abloop/diffusion.hpp"
#include "abloop/parallel.hpp"
#include "abloop/so3.hpp"
#include "abloop/structio.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace abloop {

// Scalar score of a full antibody sequence (antigen excluded).
using Oracle = std::function<double(const Sequence&)>;

// Memoizes an oracle by exact sequence. Copies share one cache, so the
// wrapper can be handed out as an Oracle while counters stay observable.
class CachedOracle {
public:
    explicit CachedOracle(Oracle f) : state_(std::make_shared<State>()) { state_->f = std::move(f); }

    double operator()(const Sequence& s) const {
        {
            std::lock_guard lock(state_->mu);
            auto it = state_->memo.find(s);
            if (it != state_->memo.end()) {
                ++state_->hits;
                return it->second;
            }
        }
        double v = state_->f(s);
        std::lock_guard lock(state_->mu);
        auto [it, inserted] = state_->memo.emplace(s, v);
        if (inserted) ++state_->misses;
        else ++state_->hits;
        return it->second;
    }

    long hits() const {
        std::lock_guard lock(state_->mu);
        return state_->hits;
    }
    long underlying_calls() const {
        std::lock_guard lock(state_->mu);
        return state_->misses;
    }
    std::size_t size() const {
        std::lock_guard lock(state_->mu);
        return state_->memo.size();
    }

private:
    struct State {
        Oracle f;
        mutable std::mutex mu;
        std::unordered_map<Sequence, double> memo;
        long hits = 0, misses = 0;
    };
    std::shared_ptr<State> state_;
};

struct Guidance {
    Oracle oracle;
    double gamma = 2.0;
};

inline constexpr double kAffinityGamma = 2.0;
inline constexpr double kLiabilityGamma = 10.0;

// Hamming distance over the given positions.
inline int edit_distance(const Sequence& a, const Sequence& b, const std::vector<int>& positions) {
    if (a.size() != b.size())
        throw Error(ErrorKind::LengthMismatch,
                    "edit distance between lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    int d = 0;
    for (int p : positions) {
        if (p < 0 || p >= static_cast<int>(a.size())) throw Error(ErrorKind::LengthMismatch, "position out of range");
        d += a[static_cast<std::size_t>(p)] != b[static_cast<std::size_t>(p)];
    }
    return d;
}

// Per-position product of experts:
//   p_j(r) ~ p_diffusion_j(r) exp(f(s with s_j = r))^gamma,
// computed in log space with max subtraction and normalized per position.
// `positions` index into `current`; probs[k] belongs to positions[k].
inline std::vector<TypeDist> guided_distributions(const std::vector<TypeDist>& probs, const Sequence& current,
                                                  const std::vector<int>& positions, const Oracle& oracle,
                                                  double gamma) {
    if (probs.size() != positions.size()) throw Error(ErrorKind::ShapeMismatch, "one distribution per position");
    if (gamma == 0.0) return probs;
    std::vector<TypeDist> out(probs.size());
    Sequence s = current;
    for (std::size_t k = 0; k < positions.size(); ++k) {
        const auto pos = static_cast<std::size_t>(positions[k]);
        const char original = s[pos];
        std::array<double, kNumAminoAcids> logw;
        double mx = -std::numeric_limits<double>::infinity();
        for (int r = 0; r < kNumAminoAcids; ++r) {
            if (probs[k][r] <= 0.0) {
                logw[r] = -std::numeric_limits<double>::infinity();
                continue;
            }
            s[pos] = aa_letter(r);
            double f;
            try {
                f = oracle(s);
            } catch (const std::exception& e) {
                throw Error(ErrorKind::OracleFailure, "position " + std::to_string(pos) + " residue " +
                                                          aa_letter(r) + ": " + e.what());
            }
            if (!std::isfinite(f))
                throw Error(ErrorKind::OracleFailure,
                            "position " + std::to_string(pos) + " residue " + aa_letter(r) + ": non-finite score");
            logw[r] = std::log(probs[k][r]) + gamma * f;
            mx = std::max(mx, logw[r]);
        }
        s[pos] = original;
        double total = 0.0;
        for (int r = 0; r < kNumAminoAcids; ++r) {
            out[k][r] = std::isinf(logw[r]) ? 0.0 : std::exp(logw[r] - mx);
            total += out[k][r];
        }
        for (auto& v : out[k]) v /= total;
    }
    return out;
}

// One reverse step t -> t-1. Positions ~ N(G_pos, beta_t I) in whitened
// units, orientations ~ IG_SO(3)(G_orient, beta_t); at t = 1 the predicted
// means are taken as is.
inline NoisedComplex denoise_step(const DenoiserParams& params, const NoisedComplex& noised,
                                  const NoiseSchedule& sched, Rng& rng, const Guidance* guidance = nullptr) {
    if (noised.t < 1) throw Error(ErrorKind::InvalidRange, "denoise_step needs t >= 1");
    DenoiserOutput pred = denoiser_forward(params, noised);
    const Complex& c = noised.complex;
    std::vector<TypeDist> probs = pred.type_probs;
    if (guidance && guidance->oracle)
        probs = guided_distributions(probs, c.antibody_sequence(), c.design_positions(), guidance->oracle,
                                     guidance->gamma);

    NoisedComplex out{c, noised.t - 1, noised.frame};
    if (out.t >= 1) {
        out.beta = sched.beta(out.t);
        out.alpha_bar_prev = sched.alpha_bar(out.t - 1);
    }
    const double beta = sched.beta(noised.t);
    const bool last = noised.t == 1;
    for (std::size_t j = 0; j < c.mask.size(); ++j) {
        auto& r = out.complex.residues[static_cast<std::size_t>(c.mask[j])];
        r.type = sample_type(probs[j], rng);
        if (last) {
            r.ca = pred.pos_mean[j];
            r.orient = pred.orient_pred[j];
        } else {
            r.ca = pred.pos_mean[j] + noised.frame.scale * std::sqrt(beta) * normal_vec3(rng);
            r.orient = so3::sample_igso3(pred.orient_pred[j], beta, rng);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generation

inline const std::vector<Region>& all_cdrs() {
    static const std::vector<Region> r = {Region::H1, Region::H2, Region::H3, Region::L1, Region::L2, Region::L3};
    return r;
}

struct SampleConfig {
    int t_noise = 8;
    std::vector<Region> mask_selector = all_cdrs();
    int num_samples = 100;
    int max_cdr_edits = 4;
    double gamma = 0.0;
    Oracle guidance_oracle;
    std::uint64_t seed = 0;
    int threads = 1;

    bool guided() const { return guidance_oracle && gamma != 0.0; }

    // Hash of the fields that shape the output; inactive guidance hashes like
    // no guidance. The oracle itself is identified by the caller.
    std::uint64_t hash() const {
        Hasher h;
        h.pod(t_noise).pod(num_samples).pod(max_cdr_edits).pod(seed);
        for (Region r : mask_selector) h.pod(r);
        if (guided()) h.pod(gamma);
        return h.value();
    }
};

struct Provenance {
    std::string seed_id;
    std::uint64_t config_hash = 0;
    int sample_index = 0;
};

struct DesignCandidate {
    Complex complex;
    Sequence sequence;  // residue types over the mask, in mask order
    int edit_distance = 0;
    Provenance provenance;

    Sequence antibody_sequence() const { return complex.antibody_sequence(); }
};

struct GenerateResult {
    std::vector<DesignCandidate> candidates;
    std::vector<int> raw_edit_distances;  // every sample, before filtering
    std::vector<Sequence> raw_sequences;  // antibody sequence of every sample, by sample index
    int generated = 0;
    int over_edit_cap = 0;
    int duplicates = 0;
};

// Restricts the mask to residues whose region is selected.
inline Complex select_mask(const Complex& c, const std::vector<Region>& regions) {
    Complex out = c;
    out.mask.clear();
    for (int m : c.mask)
        if (std::find(regions.begin(), regions.end(), c.residues[static_cast<std::size_t>(m)].region) != regions.end())
            out.mask.push_back(m);
    return out;
}

inline Sequence mask_sequence(const Complex& c) {
    Sequence s;
    for (int m : c.mask) s.push_back(aa_letter(c.residues[static_cast<std::size_t>(m)].type));
    return s;
}

// Noise to t_noise then denoise to 0, per sample, with an independent stream
// per sample index. Candidates above the edit cap are dropped; duplicates
// keep their first occurrence.
inline GenerateResult generate(const DenoiserParams& params, const Complex& seed, const NoiseSchedule& sched,
                               const SampleConfig& cfg, const std::string& seed_id = "seed") {
    if (cfg.t_noise < 0 || cfg.t_noise > sched.steps)
        throw Error(ErrorKind::InvalidRange, "t_noise must lie in [0, " + std::to_string(sched.steps) + "]");
    if (cfg.max_cdr_edits < 0) throw Error(ErrorKind::InvalidRange, "max_cdr_edits must be >= 0");
    if (cfg.num_samples < 0) throw Error(ErrorKind::InvalidRange, "num_samples must be >= 0");
    const Complex design = select_mask(seed, cfg.mask_selector);
    if (design.mask.empty()) throw Error(ErrorKind::EmptyMask, "mask selector leaves no residues to design");
    const Sequence seed_seq = design.antibody_sequence();
    const auto positions = design.design_positions();
    std::optional<Guidance> guidance;
    if (cfg.guided()) guidance = Guidance{cfg.guidance_oracle, cfg.gamma};

    std::vector<Complex> samples(static_cast<std::size_t>(cfg.num_samples));
    parallel_for(cfg.num_samples, cfg.threads, [&](int i) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
        NoisedComplex x = noise_complex(design, cfg.t_noise, sched, rng);
        while (x.t > 0) x = denoise_step(params, x, sched, rng, guidance ? &*guidance : nullptr);
        samples[static_cast<std::size_t>(i)] = std::move(x.complex);
    });

    GenerateResult res;
    const std::uint64_t cfg_hash = cfg.hash();
    std::unordered_set<Sequence> seen;
    for (int i = 0; i < cfg.num_samples; ++i) {
        auto& s = samples[static_cast<std::size_t>(i)];
        ++res.generated;
        res.raw_sequences.push_back(s.antibody_sequence());
        int d = edit_distance(res.raw_sequences.back(), seed_seq, positions);
        res.raw_edit_distances.push_back(d);
        if (d > cfg.max_cdr_edits) {
            ++res.over_edit_cap;
            continue;
        }
        Sequence ms = mask_sequence(s);
        if (!seen.insert(ms).second) {
            ++res.duplicates;
            continue;
        }
        s.mask = seed.mask;
        res.candidates.push_back({std::move(s), std::move(ms), d, {seed_id, cfg_hash, i}});
    }
    return res;
}

// Fraction of mask residues recovered by full generation from t = T,
// one sample per complex.
inline double sequence_recovery(const DenoiserParams& params, const std::vector<Complex>& complexes,
                                const NoiseSchedule& sched, std::uint64_t seed, int threads = 1) {
    std::vector<int> hit(complexes.size()), total(complexes.size());
    parallel_for(static_cast<int>(complexes.size()), threads, [&](int i) {
        const Complex& c = complexes[static_cast<std::size_t>(i)];
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        NoisedComplex x = noise_complex(c, sched.steps, sched, rng);
        while (x.t > 0) x = denoise_step(params, x, sched, rng);
        for (int m : c.mask) {
            hit[static_cast<std::size_t>(i)] += x.complex.residues[static_cast<std::size_t>(m)].type ==
                                                c.residues[static_cast<std::size_t>(m)].type;
            ++total[static_cast<std::size_t>(i)];
        }
    });
    double h = 0.0, n = 0.0;
    for (std::size_t i = 0; i < complexes.size(); ++i) {
        h += hit[i];
        n += total[i];
    }
    return n > 0.0 ? h / n : 0.0;
}

// One JSON object per line: provenance, sequences, edit distance and an
// optional reference to the candidate's complex file.
inline std::string candidate_record(const DesignCandidate& c, const std::string& complex_ref = "") {
    nlohmann::ordered_json j;
    j["seed_id"] = c.provenance.seed_id;
    j["config_hash"] = hex64(c.provenance.config_hash);
    j["sample_index"] = c.provenance.sample_index;
    j["mask_sequence"] = c.sequence;
    j["sequence"] = c.antibody_sequence();
    j["edit_distance"] = c.edit_distance;
    if (!complex_ref.empty()) j["complex"] = complex_ref;
    return j.dump();
}

}  // namespace abloop
