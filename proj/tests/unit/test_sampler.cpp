#include "abloop/sampler.hpp"
#include "abloop/synthetic.hpp"

#include <gtest/gtest.h>

using namespace abloop;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.hidden = 16;
    cfg.layers = 1;
    cfg.neighbors = 8;
    return cfg;
}

TypeDist random_dist(Rng& rng) {
    TypeDist p;
    double z = 0.0;
    for (auto& v : p) z += (v = uniform01(rng) + 0.01);
    for (auto& v : p) v /= z;
    return p;
}

// Linear oracle over one-hot letters at the given positions.
struct LinearToy {
    std::vector<int> positions;
    std::vector<std::array<double, kNumAminoAcids>> w;

    double operator()(const Sequence& s) const {
        double f = 0.0;
        for (std::size_t k = 0; k < positions.size(); ++k) f += w[k][aa_index(s[positions[k]])];
        return f;
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// guided distributions

TEST(Guidance, GammaZeroIsExactlyUnguided) {
    Rng rng(1);
    std::vector<TypeDist> probs{random_dist(rng), random_dist(rng)};
    Oracle f = [](const Sequence& s) { return static_cast<double>(s[0]); };
    auto g = guided_distributions(probs, "ACDE", {0, 2}, f, 0.0);
    EXPECT_EQ(g, probs);
}

TEST(Guidance, ConstantOracleCancels) {
    Rng rng(2);
    std::vector<TypeDist> probs{random_dist(rng), random_dist(rng), random_dist(rng)};
    Oracle f = [](const Sequence&) { return 3.7; };
    for (double gamma : {0.5, 2.0, 10.0, 50.0}) {
        auto g = guided_distributions(probs, "ACDEF", {0, 1, 4}, f, gamma);
        for (std::size_t k = 0; k < probs.size(); ++k)
            for (int r = 0; r < kNumAminoAcids; ++r) EXPECT_NEAR(g[k][r], probs[k][r], 1e-12);
    }
}

TEST(Guidance, TwoOptionClosedForm) {
    TypeDist p{};
    p[aa_index('A')] = 0.5;
    p[aa_index('C')] = 0.5;
    Oracle f = [](const Sequence& s) { return s[0] == 'C' ? std::log(2.0) : 0.0; };
    auto g = guided_distributions({p}, "A", {0}, f, 1.0);
    EXPECT_NEAR(g[0][aa_index('A')], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(g[0][aa_index('C')], 2.0 / 3.0, 1e-15);
    for (int r = 0; r < kNumAminoAcids; ++r)
        if (r != aa_index('A') && r != aa_index('C')) {
            EXPECT_EQ(g[0][r], 0.0);
        }
}

// Three positions, three letters (A, C, D). For a linear oracle the PoE over
// whole sequences factorizes, so its per-position marginals (enumerated over
// all 27 sequences) must equal the per-position guided distributions.
TEST(Guidance, MatchesBruteForceEnumerationOnToy) {
    const std::string letters = "ACD";
    Rng rng(3);
    LinearToy oracle;
    oracle.positions = {0, 1, 2};
    std::vector<TypeDist> probs(3);
    for (int k = 0; k < 3; ++k) {
        std::array<double, kNumAminoAcids> w{};
        probs[k].fill(0.0);
        double z = 0.0;
        for (char c : letters) {
            w[aa_index(c)] = standard_normal(rng);
            z += (probs[k][aa_index(c)] = uniform01(rng) + 0.1);
        }
        for (auto& v : probs[k]) v /= z;
        oracle.w.push_back(w);
    }
    for (double gamma : {0.5, 1.0, 2.0, 7.0}) {
        for (const std::string current : {"AAA", "CDA", "DDC"}) {
            auto g = guided_distributions(probs, current, {0, 1, 2}, oracle, gamma);
            std::vector<std::array<double, kNumAminoAcids>> marg(3);
            for (auto& m : marg) m.fill(0.0);
            double total = 0.0;
            for (char a : letters)
                for (char b : letters)
                    for (char c : letters) {
                        std::string s{a, b, c};
                        double w = probs[0][aa_index(a)] * probs[1][aa_index(b)] * probs[2][aa_index(c)] *
                                   std::exp(gamma * oracle(s));
                        total += w;
                        for (int k = 0; k < 3; ++k) marg[k][aa_index(s[k])] += w;
                    }
            for (int k = 0; k < 3; ++k)
                for (int r = 0; r < kNumAminoAcids; ++r) ASSERT_NEAR(g[k][r], marg[k][r] / total, 1e-12);
        }
    }
}

TEST(Guidance, ValidForLargeScoresAndGamma) {
    Rng rng(4);
    std::vector<TypeDist> probs{random_dist(rng), random_dist(rng)};
    Oracle f = [](const Sequence& s) { return 40.0 * aa_index(s[1]) - 300.0; };
    for (double gamma : {1.0, 10.0, 50.0}) {
        auto g = guided_distributions(probs, "AAA", {1, 2}, f, gamma);
        for (const auto& p : g) {
            double total = 0.0;
            for (double v : p) {
                ASSERT_TRUE(std::isfinite(v));
                ASSERT_GE(v, 0.0);
                total += v;
            }
            EXPECT_NEAR(total, 1.0, 1e-10);
        }
    }
}

TEST(Guidance, ExpectedScoreNondecreasingInGamma) {
    Rng rng(5);
    LinearToy oracle;
    oracle.positions = {0, 1, 2, 3};
    std::vector<TypeDist> probs;
    for (int k = 0; k < 4; ++k) {
        std::array<double, kNumAminoAcids> w;
        for (auto& v : w) v = standard_normal(rng);
        oracle.w.push_back(w);
        probs.push_back(random_dist(rng));
    }
    double prev = -1e300;
    for (double gamma : {0.0, 1.0, 2.0, 5.0}) {
        auto g = guided_distributions(probs, "AAAA", oracle.positions, oracle, gamma);
        double e = 0.0;
        for (int k = 0; k < 4; ++k)
            for (int r = 0; r < kNumAminoAcids; ++r) e += g[k][r] * oracle.w[k][r];
        EXPECT_GE(e, prev);
        prev = e;
    }
}

TEST(Guidance, OracleFailureCarriesContext) {
    Rng rng(6);
    std::vector<TypeDist> probs{random_dist(rng)};
    Oracle bad = [](const Sequence& s) -> double {
        if (s[0] == 'W') throw std::runtime_error("model offline");
        return 0.0;
    };
    try {
        guided_distributions(probs, "AA", {0}, bad, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::OracleFailure);
        EXPECT_NE(std::string(e.what()).find("residue W"), std::string::npos);
    }
    Oracle nan = [](const Sequence&) { return std::numeric_limits<double>::quiet_NaN(); };
    EXPECT_THROW(guided_distributions(probs, "AA", {0}, nan, 1.0), Error);
}

// ---------------------------------------------------------------------------
// cache

TEST(CachedOracle, HitsAndDistinctEntries) {
    int calls = 0;
    CachedOracle cached([&](const Sequence& s) {
        ++calls;
        return static_cast<double>(s.size());
    });
    EXPECT_EQ(cached("ACD"), 3.0);
    EXPECT_EQ(cached("ACD"), 3.0);
    EXPECT_EQ(cached.hits(), 1);
    EXPECT_EQ(cached.underlying_calls(), 1);
    cached("ACE");
    EXPECT_EQ(cached.size(), 2u);
    EXPECT_EQ(calls, 2);
    Oracle as_fn = cached;
    as_fn("ACD");
    EXPECT_EQ(cached.hits(), 2);
}

TEST(CachedOracle, GuidedStepsReuseScores) {
    const int positions = 10, steps = 1000;
    LinearToy toy;
    Rng rng(7);
    for (int k = 0; k < positions; ++k) {
        toy.positions.push_back(k);
        std::array<double, kNumAminoAcids> w;
        for (auto& v : w) v = standard_normal(rng);
        toy.w.push_back(w);
    }
    CachedOracle cached(toy);
    Sequence s(positions, 'A');
    // Peaked diffusion distributions: the current residue dominates, as at small t.
    for (int step = 0; step < steps; ++step) {
        std::vector<TypeDist> probs;
        for (int k = 0; k < positions; ++k) {
            TypeDist p;
            p.fill(0.002);
            p[aa_index(s[k])] += 1.0 - 0.002 * kNumAminoAcids;
            probs.push_back(p);
        }
        auto g = guided_distributions(probs, s, toy.positions, cached, 2.0);
        for (int k = 0; k < positions; ++k) s[k] = aa_letter(sample_type(g[k], rng));
    }
    EXPECT_LT(cached.underlying_calls(), 20L * positions * steps);
    EXPECT_EQ(cached.hits() + cached.underlying_calls(), 20L * positions * steps);
}

// ---------------------------------------------------------------------------
// edit distance

TEST(EditDistance, Contract) {
    std::vector<int> mask{1, 2};
    EXPECT_EQ(edit_distance("ACDE", "ACDE", mask), 0);
    EXPECT_EQ(edit_distance("ACDE", "AWDE", mask), 1);
    EXPECT_EQ(edit_distance("ACDE", "WCDE", mask), 0);
    try {
        edit_distance("ACD", "ACDE", mask);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::LengthMismatch);
    }
}

// ---------------------------------------------------------------------------
// generation

class Generation : public ::testing::Test {
protected:
    DenoiserParams params = DenoiserParams::init(tiny_model(), 11);
    Complex seed = synth::make_synthetic_complex(12);
    NoiseSchedule sched = default_schedule();
};

TEST_F(Generation, ZeroNoiseReturnsSeed) {
    SampleConfig cfg;
    cfg.t_noise = 0;
    cfg.num_samples = 5;
    auto res = generate(params, seed, sched, cfg);
    EXPECT_EQ(res.generated, 5);
    ASSERT_EQ(res.candidates.size(), 1u);
    EXPECT_EQ(res.duplicates, 4);
    EXPECT_EQ(res.candidates[0].edit_distance, 0);
    EXPECT_EQ(res.candidates[0].complex.hash(), seed.hash());
}

TEST_F(Generation, EditCapHoldsAndContextIsFixed) {
    SampleConfig cfg;
    cfg.num_samples = 30;
    cfg.seed = 3;
    auto res = generate(params, seed, sched, cfg);
    EXPECT_EQ(res.generated, 30);
    EXPECT_EQ(res.generated, static_cast<int>(res.candidates.size()) + res.over_edit_cap + res.duplicates);
    auto positions = seed.design_positions();
    for (const auto& c : res.candidates) {
        EXPECT_LE(c.edit_distance, 4);
        EXPECT_EQ(c.edit_distance, edit_distance(c.antibody_sequence(), seed.antibody_sequence(), positions));
        for (int i = 0; i < static_cast<int>(seed.size()); ++i)
            if (!seed.is_masked(i)) {
                ASSERT_EQ(c.complex.residues[i], seed.residues[i]);
            }
        EXPECT_NO_THROW(c.complex.validate());
    }
}

TEST_F(Generation, DeterministicPerSeed) {
    SampleConfig cfg;
    cfg.num_samples = 8;
    cfg.seed = 5;
    cfg.max_cdr_edits = 100;
    auto a = generate(params, seed, sched, cfg), b = generate(params, seed, sched, cfg);
    ASSERT_EQ(a.candidates.size(), b.candidates.size());
    for (std::size_t i = 0; i < a.candidates.size(); ++i) {
        EXPECT_EQ(a.candidates[i].complex.hash(), b.candidates[i].complex.hash());
        EXPECT_EQ(candidate_record(a.candidates[i]), candidate_record(b.candidates[i]));
    }
    cfg.threads = 3;
    auto c = generate(params, seed, sched, cfg);
    ASSERT_EQ(a.candidates.size(), c.candidates.size());
    for (std::size_t i = 0; i < a.candidates.size(); ++i)
        EXPECT_EQ(a.candidates[i].complex.hash(), c.candidates[i].complex.hash());
}

TEST_F(Generation, GammaZeroMatchesNoGuidance) {
    SampleConfig plain;
    plain.num_samples = 6;
    plain.seed = 9;
    SampleConfig zero = plain;
    zero.guidance_oracle = [](const Sequence& s) { return static_cast<double>(s[3]); };
    zero.gamma = 0.0;
    auto a = generate(params, seed, sched, plain), b = generate(params, seed, sched, zero);
    ASSERT_EQ(a.candidates.size(), b.candidates.size());
    for (std::size_t i = 0; i < a.candidates.size(); ++i)
        EXPECT_EQ(candidate_record(a.candidates[i]), candidate_record(b.candidates[i]));
}

TEST_F(Generation, ConstantOracleMatchesNoGuidance) {
    SampleConfig plain;
    plain.num_samples = 4;
    plain.seed = 10;
    plain.max_cdr_edits = 100;
    SampleConfig flat = plain;
    flat.guidance_oracle = [](const Sequence&) { return 1.5; };
    flat.gamma = 2.0;
    auto a = generate(params, seed, sched, plain), b = generate(params, seed, sched, flat);
    ASSERT_EQ(a.candidates.size(), b.candidates.size());
    for (std::size_t i = 0; i < a.candidates.size(); ++i) EXPECT_EQ(a.candidates[i].sequence, b.candidates[i].sequence);
}

TEST_F(Generation, MaskSelectorRestrictsDesign) {
    SampleConfig cfg;
    cfg.mask_selector = {Region::H3};
    cfg.num_samples = 6;
    cfg.max_cdr_edits = 100;
    auto res = generate(params, seed, sched, cfg);
    for (const auto& c : res.candidates)
        for (int m : seed.mask)
            if (seed.residues[m].region != Region::H3) {
                ASSERT_EQ(c.complex.residues[m], seed.residues[m]);
            }
}

TEST_F(Generation, ErrorCases) {
    SampleConfig cfg;
    cfg.mask_selector = {};
    try {
        generate(params, seed, sched, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptyMask);
    }
    SampleConfig too_far;
    too_far.t_noise = sched.steps + 1;
    EXPECT_THROW(generate(params, seed, sched, too_far), Error);
}

TEST_F(Generation, DenoiseStepFinalUsesMeans) {
    Rng rng(1);
    auto noised = noise_complex(seed, 1, sched, rng);
    auto pred = denoiser_forward(params, noised);
    auto next = denoise_step(params, noised, sched, rng);
    EXPECT_EQ(next.t, 0);
    for (std::size_t j = 0; j < seed.mask.size(); ++j) {
        EXPECT_EQ(next.complex.residues[seed.mask[j]].ca, pred.pos_mean[j]);
        EXPECT_EQ(next.complex.residues[seed.mask[j]].orient, pred.orient_pred[j]);
    }
}

TEST(CandidateRecord, FieldsPresent) {
    DesignCandidate c;
    c.complex = synth::make_synthetic_complex(1);
    c.sequence = mask_sequence(c.complex);
    c.edit_distance = 2;
    c.provenance = {"s0", 0xabcULL, 7};
    auto j = nlohmann::json::parse(candidate_record(c, "c7.cplx"));
    EXPECT_EQ(j["seed_id"], "s0");
    EXPECT_EQ(j["sample_index"], 7);
    EXPECT_EQ(j["edit_distance"], 2);
    EXPECT_EQ(j["mask_sequence"], c.sequence);
    EXPECT_EQ(j["complex"], "c7.cplx");
}
