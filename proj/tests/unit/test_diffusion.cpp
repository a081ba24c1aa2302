#include "abloop/diffusion.hpp"
#include "abloop/synthetic.hpp"
#include "stats_util.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace abloop;

namespace {

// Single-step kernel Q_t[i][j] = q(s^t = j | s^{t-1} = i) over K letters.
Eigen::MatrixXd step_kernel(double beta, int k) {
    return (1.0 - beta) * Eigen::MatrixXd::Identity(k, k) + Eigen::MatrixXd::Constant(k, k, beta / k);
}

bool bit_identical(const Residue& a, const Residue& b) {
    return a.type == b.type && a.chain == b.chain && a.seq_index == b.seq_index && a.region == b.region &&
           std::memcmp(a.ca.data(), b.ca.data(), sizeof(double) * 3) == 0 &&
           std::memcmp(a.orient.data(), b.orient.data(), sizeof(double) * 9) == 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// schedules

TEST(Schedule, LinearConstantBeta) {
    auto s = make_schedule(2, ScheduleKind::Linear, 0.1, 0.1);
    EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
    EXPECT_NEAR(s.alpha_bar(2), 0.81, 1e-15);
}

TEST(Schedule, FromBetas) {
    auto s = schedule_from_betas({0.1, 0.2});
    EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-15);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, CosineDefault) {
    auto s = default_schedule();
    EXPECT_EQ(s.steps, 100);
    EXPECT_LT(s.alpha_bar(100), 0.01);
    double prod = 1.0;
    for (int t = 1; t <= 100; ++t) {
        prod *= 1.0 - s.beta(t);
        EXPECT_NEAR(s.alpha_bar(t), prod, 1e-12);
        EXPECT_GT(s.beta(t), 0.0);
        EXPECT_LT(s.beta(t), 1.0);
        if (t > 1) {
            EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
        }
    }
}

TEST(Schedule, InvalidRange) {
    EXPECT_THROW(make_schedule(0, ScheduleKind::Linear), Error);
    EXPECT_THROW(make_schedule(10001, ScheduleKind::Linear), Error);
    EXPECT_THROW(make_schedule(10, ScheduleKind::Linear, 0.2, 0.1), Error);
    EXPECT_THROW(make_schedule(10, ScheduleKind::Linear, 0.0, 0.1), Error);
    EXPECT_THROW(make_schedule(10, ScheduleKind::Linear, 0.1, 1.0), Error);
}

TEST(Schedule, SerializationRoundTrip) {
    for (auto kind : {ScheduleKind::Linear, ScheduleKind::Cosine}) {
        auto s = make_schedule(37, kind);
        auto back = parse_schedule(serialize_schedule(s));
        EXPECT_EQ(back.betas, s.betas);
        EXPECT_EQ(back.kind, s.kind);
        EXPECT_EQ(back.hash(), s.hash());
    }
    EXPECT_THROW(parse_schedule("garbage"), Error);
}

// ---------------------------------------------------------------------------
// types

TEST(ForwardType, NoNoiseIsOneHot) {
    auto p = forward_type(aa_index('K'), 1.0);
    for (int r = 0; r < kNumAminoAcids; ++r) EXPECT_EQ(p[r], r == aa_index('K') ? 1.0 : 0.0);
}

TEST(ForwardType, ClosedFormValues) {
    auto p = forward_type(aa_index('A'), 0.9);
    EXPECT_NEAR(p[aa_index('A')], 0.905, 1e-15);
    for (int r = 1; r < kNumAminoAcids; ++r) EXPECT_NEAR(p[r], 0.005, 1e-15);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
}

TEST(ForwardType, StepwiseCompositionMatchesClosedForm) {
    for (const auto& s : {default_schedule(), make_schedule(100, ScheduleKind::Linear)}) {
        Eigen::MatrixXd acc = Eigen::MatrixXd::Identity(kNumAminoAcids, kNumAminoAcids);
        for (int t = 1; t <= s.steps; ++t) {
            acc = acc * step_kernel(s.beta(t), kNumAminoAcids);
            for (int s0 = 0; s0 < kNumAminoAcids; ++s0) {
                auto p = forward_type(s0, t, s);
                for (int r = 0; r < kNumAminoAcids; ++r) ASSERT_NEAR(acc(s0, r), p[r], 1e-10) << t;
            }
        }
    }
}

TEST(TypePosterior, FirstStepRecoversClean) {
    auto s = default_schedule();
    for (int st = 0; st < kNumAminoAcids; st += 3) {
        auto p = type_posterior(st, 7, 1, s);
        for (int r = 0; r < kNumAminoAcids; ++r) EXPECT_NEAR(p[r], r == 7 ? 1.0 : 0.0, 1e-15);
    }
}

TEST(TypePosterior, FullyNoisedIsUniform) {
    auto p = type_posterior(3, 11, 1.0, 0.0, kNumAminoAcids);
    for (double v : p) EXPECT_NEAR(v, 1.0 / kNumAminoAcids, 1e-15);
}

// Exhaustive enumeration of trajectories s^0 -> ... -> s^t over 3 letters.
TEST(TypePosterior, MatchesBruteForceBayesOnToy) {
    const int k = 3;
    const std::vector<std::vector<double>> schedules = {{0.5, 0.5}, {0.2, 0.7, 0.4}, {0.5}};
    for (const auto& betas : schedules) {
        const int steps = static_cast<int>(betas.size());
        for (int t = 1; t <= steps; ++t) {
            double ab_prev = 1.0;
            for (int tau = 0; tau < t - 1; ++tau) ab_prev *= 1.0 - betas[tau];
            for (int s0 = 0; s0 < k; ++s0) {
                for (int st = 0; st < k; ++st) {
                    std::vector<double> joint(k, 0.0);
                    int paths = 1;
                    for (int i = 0; i < t; ++i) paths *= k;
                    for (int code = 0; code < paths; ++code) {
                        std::vector<int> traj{s0};
                        int c = code;
                        for (int i = 0; i < t; ++i) {
                            traj.push_back(c % k);
                            c /= k;
                        }
                        if (traj[t] != st) continue;
                        double prob = 1.0;
                        for (int i = 1; i <= t; ++i)
                            prob *= (1.0 - betas[i - 1]) * (traj[i] == traj[i - 1]) + betas[i - 1] / k;
                        joint[traj[t - 1]] += prob;
                    }
                    double z = std::accumulate(joint.begin(), joint.end(), 0.0);
                    auto post = type_posterior(st, s0, betas[t - 1], ab_prev, k);
                    for (int r = 0; r < k; ++r) ASSERT_NEAR(post[r], joint[r] / z, 1e-12);
                }
            }
        }
    }
}

TEST(TypePosterior, ReconstructsMarginalOnToy) {
    const int k = 3;
    const double beta = 0.3, ab_prev = 0.6, ab = ab_prev * (1.0 - beta);
    auto q = [&](int st, int s0, double a) { return a * (st == s0) + (1.0 - a) / k; };
    for (int s0 = 0; s0 < k; ++s0) {
        for (int st = 0; st < k; ++st) {
            // q(st|s0) = sum_r q(st|r) q(r|s0); posterior times the marginal gives the joint.
            auto post = type_posterior(st, s0, beta, ab_prev, k);
            double m = q(st, s0, ab);
            for (int r = 0; r < k; ++r) {
                double joint = ((1.0 - beta) * (r == st) + beta / k) * q(r, s0, ab_prev);
                EXPECT_NEAR(post[r] * m, joint, 1e-10);
            }
        }
    }
}

TEST(TypePosterior, ValidDistributions) {
    auto s = default_schedule();
    for (int t = 1; t <= s.steps; t += 7)
        for (int st = 0; st < kNumAminoAcids; st += 5)
            for (int s0 = 0; s0 < kNumAminoAcids; s0 += 4) {
                auto p = type_posterior(st, s0, t, s);
                double total = 0.0;
                for (double v : p) {
                    ASSERT_GE(v, 0.0);
                    total += v;
                }
                ASSERT_NEAR(total, 1.0, 1e-12);
            }
}

// ---------------------------------------------------------------------------
// positions and orientations

TEST(ForwardPos, MomentsMatchClosedForm) {
    Rng rng(1);
    const int n = 10000;
    Vec3 mean = Vec3::Zero();
    std::vector<Vec3> xs;
    for (int i = 0; i < n; ++i) {
        xs.push_back(forward_pos(Vec3(1, 0, 0), 0.25, rng));
        mean += xs.back();
    }
    mean /= n;
    Vec3 var = Vec3::Zero();
    for (const auto& x : xs) var += (x - mean).cwiseAbs2();
    var /= n - 1;
    const double se_mean = std::sqrt(0.75 / n);
    EXPECT_NEAR(mean.x(), 0.5, 3 * se_mean);
    EXPECT_NEAR(mean.y(), 0.0, 3 * se_mean);
    const double se_var = 0.75 * std::sqrt(2.0 / n);
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(var[a], 0.75, 3 * se_var);
}

TEST(ForwardPos, NoNoiseAndDeterminism) {
    Rng rng(2);
    EXPECT_EQ(forward_pos(Vec3(1, 2, 3), 1.0, rng), Vec3(1, 2, 3));
    Rng a(3), b(3);
    EXPECT_EQ(forward_pos(Vec3(1, 2, 3), 0.5, a), forward_pos(Vec3(1, 2, 3), 0.5, b));
}

TEST(ForwardPos, TwoStepCovarianceMatchesClosedForm) {
    auto s = default_schedule();
    const int t = 30, n = 10000;
    Rng rng(4);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    Vec3 x0(0.5, -1.0, 2.0);
    Vec3 mean_expect = std::sqrt(s.alpha_bar(t)) * x0;
    for (int i = 0; i < n; ++i) {
        Vec3 prev = forward_pos(x0, t - 1, s, rng);
        Vec3 x = std::sqrt(1.0 - s.beta(t)) * prev + std::sqrt(s.beta(t)) * normal_vec3(rng);
        Vec3 d = x - mean_expect;
        cov += d * d.transpose();
    }
    cov /= n;
    double target = 1.0 - s.alpha_bar(t);
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(cov(a, a) / target, 1.0, 0.05);
    EXPECT_LT(std::abs(cov(0, 1)), 0.05 * target);
}

TEST(ForwardOrient, NoNoiseIsExact) {
    Rng rng(5);
    Mat3 o = so3::random_rotation(rng);
    EXPECT_EQ(forward_orient(o, 1.0, rng), o);
    EXPECT_EQ(forward_orient(o, 0, default_schedule(), rng), o);
}

TEST(ForwardOrient, FullNoiseMatchesMarginal) {
    // At t = T the mean is near identity and the variance is 1 - alpha_bar_T,
    // so the angle from O0's scaled mean follows the IG_SO(3) marginal at that variance.
    auto s = default_schedule();
    Rng rng(6);
    Mat3 o0 = so3::random_rotation(rng);
    const double eps = 1.0 - s.alpha_bar(s.steps);
    Mat3 mean = so3::scale_rot(o0, std::sqrt(s.alpha_bar(s.steps)));
    std::vector<double> angles;
    for (int i = 0; i < 2000; ++i) angles.push_back(so3::geodesic_distance(forward_orient(o0, s.steps, s, rng), mean));
    so3::IgSo3Table table(eps);
    auto cdf = [&](double w) {
        double pos = w / so3::kPi * (so3::kTableGrid - 1);
        auto i = std::min(static_cast<std::size_t>(pos), static_cast<std::size_t>(so3::kTableGrid - 2));
        double f = pos - static_cast<double>(i);
        return (1 - f) * table.cdf()[i] + f * table.cdf()[i + 1];
    };
    EXPECT_LT(testutil::ks_one_sample(angles, cdf), 0.05);
}

TEST(ForwardOrient, LargeVarianceApproachesUniformRotation) {
    Rng rng(7);
    std::vector<double> angles;
    for (int i = 0; i < 2000; ++i)
        angles.push_back(so3::geodesic_distance(so3::sample_igso3(Mat3::Identity(), 10.0, rng), Mat3::Identity()));
    auto uniform_cdf = [](double w) { return (w - std::sin(w)) / so3::kPi; };
    EXPECT_LT(testutil::ks_one_sample(angles, uniform_cdf), 0.05);
}

TEST(ForwardOrient, DeviationGrowsWithT) {
    auto s = default_schedule();
    Rng rng(8);
    Mat3 o0 = so3::random_rotation(rng);
    double prev = -1.0;
    for (int t : {1, 5, 10, 20, 40, 60, 80, 100}) {
        Mat3 mean = so3::scale_rot(o0, std::sqrt(s.alpha_bar(t)));
        double acc = 0.0;
        for (int i = 0; i < 2000; ++i) acc += so3::geodesic_distance(forward_orient(o0, t, s, rng), mean);
        acc /= 2000;
        EXPECT_GT(acc, prev) << "t=" << t;
        prev = acc;
    }
}

// ---------------------------------------------------------------------------
// noise_complex

TEST(NoiseComplex, ZeroStepsIsIdentity) {
    auto c = synth::make_synthetic_complex(3);
    Rng rng(1);
    auto n = noise_complex(c, 0, default_schedule(), rng);
    EXPECT_EQ(n.complex.hash(), c.hash());
}

TEST(NoiseComplex, ContextIsBitIdentical) {
    auto c = synth::make_synthetic_complex(4);
    auto s = default_schedule();
    Rng rng(2);
    for (int t : {1, 10, 50, 100}) {
        auto n = noise_complex(c, t, s, rng);
        for (int i = 0; i < static_cast<int>(c.size()); ++i)
            if (!c.is_masked(i)) {
                ASSERT_TRUE(bit_identical(n.complex.residues[i], c.residues[i]));
            }
        EXPECT_NO_THROW(n.complex.validate());
    }
}

TEST(NoiseComplex, EmptyMaskThrows) {
    auto c = synth::make_synthetic_complex(5);
    c.mask.clear();
    Rng rng(3);
    try {
        noise_complex(c, 3, default_schedule(), rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptyMask);
    }
}

TEST(NoiseComplex, TypeMarginalsMatchForwardType) {
    auto c = synth::make_synthetic_complex(6);
    auto s = default_schedule();
    const int t = 40, j = c.mask[2];
    Rng rng(4);
    std::vector<double> counts(kNumAminoAcids, 0.0);
    for (int i = 0; i < 10000; ++i) counts[noise_complex(c, t, s, rng).complex.residues[j].type] += 1.0;
    auto p = forward_type(c.residues[j].type, t, s);
    EXPECT_GT(testutil::chi_square_counts_pvalue(counts, std::vector<double>(p.begin(), p.end())), 0.001);
}

// ---------------------------------------------------------------------------
// losses

namespace {

TrainingExample example(std::uint64_t seed, int t) {
    auto c = synth::make_synthetic_complex(seed);
    Rng rng(seed + 100);
    return make_training_example(c, t, default_schedule(), rng);
}

DenoiserOutput perfect(const TrainingTarget& tgt) {
    DenoiserOutput out;
    out.type_probs = tgt.posterior;
    out.pos_mean = tgt.pos_prev;
    out.orient_pred = tgt.orient0;
    return out;
}

}  // namespace

TEST(Losses, PerfectPredictionIsZero) {
    auto ex = example(1, 30);
    auto l = compute_losses(perfect(ex.target), ex.target);
    EXPECT_NEAR(l.type, 0.0, 1e-15);
    EXPECT_EQ(l.pos, 0.0);
    EXPECT_NEAR(l.orient, 0.0, 1e-28);
    EXPECT_NEAR(l.total, 0.0, 1e-14);
}

TEST(Losses, UniformVersusOneHot) {
    auto ex = example(2, 1);  // posterior at t = 1 is onehot(s0)
    auto pred = perfect(ex.target);
    for (auto& p : pred.type_probs) p.fill(1.0 / kNumAminoAcids);
    auto l = compute_losses(pred, ex.target);
    EXPECT_NEAR(l.type, std::log(20.0), 1e-12);
    EXPECT_NEAR(std::log(20.0), 2.9957, 1e-4);
}

TEST(Losses, MatchesIndependentResummation) {
    auto ex = example(3, 55);
    Rng rng(9);
    DenoiserOutput pred;
    for (std::size_t j = 0; j < ex.target.posterior.size(); ++j) {
        TypeDist p;
        double z = 0.0;
        for (auto& v : p) z += (v = uniform01(rng) + 1e-3);
        for (auto& v : p) v /= z;
        pred.type_probs.push_back(p);
        pred.pos_mean.push_back(ex.target.pos_prev[j] + normal_vec3(rng));
        pred.orient_pred.push_back(so3::random_rotation(rng));
    }
    LossWeights w{3.0, 0.5, 2.0};
    auto l = compute_losses(pred, ex.target, w);
    const double m = static_cast<double>(pred.type_probs.size());
    double type = 0.0, pos = 0.0, orient = 0.0;
    for (std::size_t j = 0; j < pred.type_probs.size(); ++j) {
        for (int r = 0; r < kNumAminoAcids; ++r) {
            double q = ex.target.posterior[j][r];
            if (q > 0.0) type += q * std::log(q / pred.type_probs[j][r]);
        }
        Vec3 d = (ex.target.pos_prev[j] - pred.pos_mean[j]) / ex.target.frame.scale;
        pos += d.dot(d);
        Mat3 e = ex.target.orient0[j].transpose() * pred.orient_pred[j] - Mat3::Identity();
        for (int a = 0; a < 9; ++a) orient += e.data()[a] * e.data()[a];
    }
    EXPECT_NEAR(l.type, type / m, 1e-12);
    EXPECT_NEAR(l.pos, pos / m, 1e-12);
    EXPECT_NEAR(l.orient, orient / m, 1e-12);
    EXPECT_NEAR(l.total, 3.0 * l.type + 0.5 * l.pos + 2.0 * l.orient, 1e-9);
    EXPECT_GE(l.type, 0.0);
}

TEST(Losses, ShapeMismatch) {
    auto ex = example(4, 10);
    auto pred = perfect(ex.target);
    pred.pos_mean.pop_back();
    try {
        compute_losses(pred, ex.target);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    }
}

TEST(TrainingExample, ContextUntouchedAndTargetsConsistent) {
    auto c = synth::make_synthetic_complex(8);
    Rng rng(1);
    auto ex = make_training_example(c, 1, default_schedule(), rng);
    for (int i = 0; i < static_cast<int>(c.size()); ++i)
        if (!c.is_masked(i)) {
            EXPECT_TRUE(bit_identical(ex.noised.complex.residues[i], c.residues[i]));
        }
    // At t = 1 the previous state is the clean complex.
    for (std::size_t j = 0; j < c.mask.size(); ++j)
        EXPECT_LT((ex.target.pos_prev[j] - c.residues[c.mask[j]].ca).norm(), 1e-9);
}

TEST(Whitening, CentredOnMaskWithUnitContextSpread) {
    auto c = synth::make_synthetic_complex(9);
    auto w = whitening_for(c);
    Vec3 centroid = Vec3::Zero();
    for (int m : c.mask) centroid += w.to_white(c.residues[m].ca);
    EXPECT_LT(centroid.norm(), 1e-9);
    double ss = 0.0;
    int n = 0;
    for (int i = 0; i < static_cast<int>(c.size()); ++i)
        if (!c.is_masked(i)) {
            ss += w.to_white(c.residues[i].ca).squaredNorm();
            ++n;
        }
    EXPECT_NEAR(ss / n, 1.0, 1e-12);
    Vec3 x(1, 2, 3);
    EXPECT_LT((w.from_white(w.to_white(x)) - x).norm(), 1e-12);
}
