#pragma once
// Noise schedules, forward corruption for residue types, C-alpha positions
// and orientations, the residue-type posterior and the training losses.

#include "abloop/core.hpp"
#include "abloop/so3.hpp"
#include "abloop/structio.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

namespace abloop {

enum class ScheduleKind { Linear, Cosine };

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

inline ScheduleKind schedule_kind_from_string(std::string_view s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw Error(ErrorKind::InvalidRange, "unknown schedule kind '" + std::string(s) + "'");
}

struct NoiseSchedule {
    int steps = 0;
    ScheduleKind kind = ScheduleKind::Cosine;
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::vector<double> betas;       // betas[t-1] = beta_t
    std::vector<double> alpha_bars;  // alpha_bars[t-1] = prod_{tau<=t} (1 - beta_tau)

    double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
    // alpha_bar(0) = 1.
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1)); }

    std::uint64_t hash() const {
        Hasher h;
        h.pod(steps).pod(kind);
        for (double b : betas) h.pod(b);
        return h.value();
    }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> betas, ScheduleKind kind = ScheduleKind::Linear) {
    NoiseSchedule s;
    s.steps = static_cast<int>(betas.size());
    s.kind = kind;
    s.betas = std::move(betas);
    double prod = 1.0;
    for (double b : s.betas) {
        if (!(b > 0.0 && b < 1.0)) throw Error(ErrorKind::InvalidRange, "beta outside (0,1)");
        prod *= 1.0 - b;
        s.alpha_bars.push_back(prod);
    }
    if (!s.betas.empty()) {
        s.beta_min = *std::min_element(s.betas.begin(), s.betas.end());
        s.beta_max = *std::max_element(s.betas.begin(), s.betas.end());
    }
    return s;
}

// Linear: beta interpolates beta_min..beta_max. Cosine: squared-cosine
// alpha_bar profile (offset 0.008) with derived betas clipped to (0, 0.999).
inline NoiseSchedule make_schedule(int steps, ScheduleKind kind, double beta_min = 1e-4, double beta_max = 0.02) {
    if (steps < 1 || steps > 10000) throw Error(ErrorKind::InvalidRange, "steps must be in [1, 10000]");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw Error(ErrorKind::InvalidRange, "require 0 < beta_min <= beta_max < 1");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    if (kind == ScheduleKind::Linear) {
        for (int t = 1; t <= steps; ++t) {
            double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
            betas[t - 1] = beta_min + frac * (beta_max - beta_min);
        }
    } else {
        constexpr double s = 0.008;
        auto f = [&](int t) {
            double x = (static_cast<double>(t) / steps + s) / (1.0 + s) * so3::kPi / 2.0;
            return std::cos(x) * std::cos(x);
        };
        for (int t = 1; t <= steps; ++t) {
            double b = 1.0 - f(t) / f(t - 1);
            betas[t - 1] = std::clamp(b, 1e-8, 0.999);
        }
    }
    auto out = schedule_from_betas(std::move(betas), kind);
    out.beta_min = beta_min;
    out.beta_max = beta_max;
    return out;
}

inline NoiseSchedule default_schedule() { return make_schedule(100, ScheduleKind::Cosine); }

inline std::string serialize_schedule(const NoiseSchedule& s) {
    std::ostringstream out;
    char buf[40];
    out << "abloop-schedule v1\n";
    out << "steps " << s.steps << "\n";
    out << "kind " << to_string(s.kind) << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", s.beta_min);
    out << "beta_min " << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", s.beta_max);
    out << "beta_max " << buf << "\n";
    out << "betas";
    for (double b : s.betas) {
        std::snprintf(buf, sizeof buf, " %.17g", b);
        out << buf;
    }
    out << "\n";
    return out.str();
}

inline NoiseSchedule parse_schedule(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string header, key, kind;
    int steps = 0;
    double bmin = 0.0, bmax = 0.0;
    std::getline(in, header);
    if (header != "abloop-schedule v1") throw Error(ErrorKind::VersionMismatch, "bad schedule header");
    if (!(in >> key >> steps) || key != "steps") throw Error(ErrorKind::CorruptFile, "schedule: steps");
    if (!(in >> key >> kind) || key != "kind") throw Error(ErrorKind::CorruptFile, "schedule: kind");
    if (!(in >> key >> bmin) || key != "beta_min") throw Error(ErrorKind::CorruptFile, "schedule: beta_min");
    if (!(in >> key >> bmax) || key != "beta_max") throw Error(ErrorKind::CorruptFile, "schedule: beta_max");
    if (!(in >> key) || key != "betas") throw Error(ErrorKind::CorruptFile, "schedule: betas");
    std::vector<double> betas(static_cast<std::size_t>(std::max(steps, 0)));
    for (auto& b : betas)
        if (!(in >> b)) throw Error(ErrorKind::CorruptFile, "schedule: truncated beta list");
    auto s = schedule_from_betas(std::move(betas), schedule_kind_from_string(kind));
    s.beta_min = bmin;
    s.beta_max = bmax;
    return s;
}

// ---------------------------------------------------------------------------
// Residue types

using TypeDist = std::array<double, kNumAminoAcids>;

// q(s^t | s^0) = alpha_bar onehot(s0) + (1 - alpha_bar)/20.
inline TypeDist forward_type(int s0, double alpha_bar) {
    TypeDist p;
    p.fill((1.0 - alpha_bar) / kNumAminoAcids);
    p[s0] += alpha_bar;
    return p;
}

inline TypeDist forward_type(int s0, int t, const NoiseSchedule& sched) {
    return forward_type(s0, sched.alpha_bar(t));
}

// theta_r ~ [(1 - beta_t) 1[r = st] + beta_t/K] [alpha_bar_{t-1} 1[r = s0] + (1 - alpha_bar_{t-1})/K]
// over an alphabet of size K.
inline std::vector<double> type_posterior(int st, int s0, double beta_t, double alpha_bar_prev, int k) {
    std::vector<double> theta(static_cast<std::size_t>(k));
    double total = 0.0;
    for (int r = 0; r < k; ++r) {
        double step = (1.0 - beta_t) * (r == st ? 1.0 : 0.0) + beta_t / k;
        double marg = alpha_bar_prev * (r == s0 ? 1.0 : 0.0) + (1.0 - alpha_bar_prev) / k;
        theta[r] = step * marg;
        total += theta[r];
    }
    for (auto& v : theta) v /= total;
    return theta;
}

inline TypeDist type_posterior(int st, int s0, int t, const NoiseSchedule& sched) {
    auto v = type_posterior(st, s0, sched.beta(t), sched.alpha_bar(t - 1), kNumAminoAcids);
    TypeDist out;
    std::copy(v.begin(), v.end(), out.begin());
    return out;
}

inline int sample_type(const TypeDist& p, Rng& rng) { return sample_categorical(p.data(), kNumAminoAcids, rng); }

// ---------------------------------------------------------------------------
// Positions and orientations

inline Vec3 forward_pos(const Vec3& x0, double alpha_bar, Rng& rng) {
    if (alpha_bar >= 1.0) return x0;
    return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * normal_vec3(rng);
}

inline Vec3 forward_pos(const Vec3& x0, int t, const NoiseSchedule& sched, Rng& rng) {
    return forward_pos(x0, sched.alpha_bar(t), rng);
}

// IG_SO(3)(ScaleRot(O0, sqrt(alpha_bar)), 1 - alpha_bar); exact O0 at alpha_bar = 1.
inline so3::Rotation forward_orient(const so3::Rotation& o0, double alpha_bar, Rng& rng) {
    if (alpha_bar >= 1.0) return o0;
    return so3::sample_igso3(so3::scale_rot(o0, std::sqrt(alpha_bar)), 1.0 - alpha_bar, rng);
}

inline so3::Rotation forward_orient(const so3::Rotation& o0, int t, const NoiseSchedule& sched, Rng& rng) {
    return forward_orient(o0, sched.alpha_bar(t), rng);
}

// Per-complex position whitening: centred on the mask centroid, scaled by the
// RMS distance of context C-alphas from that centroid.
struct Whitening {
    Vec3 center = Vec3::Zero();
    double scale = 1.0;

    Vec3 to_white(const Vec3& x) const { return (x - center) / scale; }
    Vec3 from_white(const Vec3& y) const { return center + scale * y; }
};

inline Whitening whitening_for(const Complex& c) {
    Whitening w;
    if (c.mask.empty()) return w;
    for (int m : c.mask) w.center += c.residues[m].ca;
    w.center /= static_cast<double>(c.mask.size());
    double ss = 0.0;
    int n = 0;
    for (int i = 0; i < static_cast<int>(c.size()); ++i) {
        if (c.is_masked(i)) continue;
        ss += (c.residues[i].ca - w.center).squaredNorm();
        ++n;
    }
    w.scale = n > 0 ? std::max(std::sqrt(ss / n), 1e-3) : 1.0;
    return w;
}

struct NoisedComplex {
    Complex complex;
    int t = 0;
    Whitening frame;
    double beta = 0.0;            // beta_t
    double alpha_bar_prev = 1.0;  // alpha_bar_{t-1}
};

// Corrupts every mask residue independently; context is left untouched.
inline NoisedComplex noise_complex(const Complex& c, int t, const NoiseSchedule& sched, Rng& rng) {
    if (c.mask.empty()) throw Error(ErrorKind::EmptyMask, "noise_complex requires a non-empty mask");
    NoisedComplex out{c, t, whitening_for(c)};
    if (t == 0) return out;
    out.beta = sched.beta(t);
    out.alpha_bar_prev = sched.alpha_bar(t - 1);
    double ab = sched.alpha_bar(t);
    for (int m : c.mask) {
        auto& r = out.complex.residues[m];
        r.type = sample_type(forward_type(r.type, ab), rng);
        r.ca = out.frame.from_white(forward_pos(out.frame.to_white(r.ca), ab, rng));
        r.orient = forward_orient(r.orient, ab, rng);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training targets and losses

struct DenoiserOutput {
    std::vector<TypeDist> type_probs;  // reverse step distribution, per mask residue
    std::vector<TypeDist> x0_probs;    // predicted clean residue type
    std::vector<Vec3> pos_mean;        // global coordinates
    std::vector<so3::Rotation> orient_pred;
};

// Everything the loss needs about the clean complex for one noised draw.
struct TrainingTarget {
    std::vector<TypeDist> posterior;  // q(s^{t-1} | s^t, s^0)
    std::vector<Vec3> pos_prev;       // x^{t-1}, global coordinates
    std::vector<so3::Rotation> orient0;
    std::vector<int> type0;           // s^0
    Whitening frame;
};

struct TrainingExample {
    NoisedComplex noised;
    TrainingTarget target;
};

// Draws x^{t-1} ~ q(.|x^0) then x^t ~ q(.|x^{t-1}) so the regression target is
// a consistent sample; types use the closed-form marginal and posterior.
inline TrainingExample make_training_example(const Complex& c, int t, const NoiseSchedule& sched, Rng& rng) {
    if (c.mask.empty()) throw Error(ErrorKind::EmptyMask, "training example requires a non-empty mask");
    if (t < 1 || t > sched.steps) throw Error(ErrorKind::InvalidRange, "timestep out of range");
    TrainingExample ex{{c, t, whitening_for(c), sched.beta(t), sched.alpha_bar(t - 1)}, {}};
    const auto& w = ex.noised.frame;
    ex.target.frame = w;
    double ab = sched.alpha_bar(t);
    double ab_prev = sched.alpha_bar(t - 1);
    double beta = sched.beta(t);
    for (int m : c.mask) {
        const auto& src = c.residues[m];
        auto& r = ex.noised.complex.residues[m];
        int st = sample_type(forward_type(src.type, ab), rng);
        r.type = st;
        ex.target.posterior.push_back(type_posterior(st, src.type, t, sched));
        ex.target.type0.push_back(src.type);

        Vec3 y_prev = forward_pos(w.to_white(src.ca), ab_prev, rng);
        Vec3 y_t = std::sqrt(1.0 - beta) * y_prev + std::sqrt(beta) * normal_vec3(rng);
        r.ca = w.from_white(y_t);
        ex.target.pos_prev.push_back(w.from_white(y_prev));

        r.orient = forward_orient(src.orient, ab, rng);
        ex.target.orient0.push_back(src.orient);
    }
    return ex;
}

struct LossWeights {
    double type = 10.0;
    double pos = 1.0;
    double orient = 1.0;
};

struct LossBreakdown {
    double type = 0.0;
    double pos = 0.0;
    double orient = 0.0;
    double total = 0.0;
};

inline constexpr double kProbFloor = 1e-10;

inline double kl_divergence(const TypeDist& q, const TypeDist& p) {
    double kl = 0.0;
    for (int r = 0; r < kNumAminoAcids; ++r) {
        if (q[r] <= 0.0) continue;
        kl += q[r] * (std::log(std::max(q[r], kProbFloor)) - std::log(std::max(p[r], kProbFloor)));
    }
    return std::max(kl, 0.0);
}

// Means over mask residues; positions compared in whitened units.
inline LossBreakdown compute_losses(const DenoiserOutput& pred, const TrainingTarget& truth,
                                    const LossWeights& lambda = {}) {
    const std::size_t m = truth.posterior.size();
    if (m == 0 || pred.type_probs.size() != m || pred.pos_mean.size() != m || pred.orient_pred.size() != m ||
        truth.pos_prev.size() != m || truth.orient0.size() != m)
        throw Error(ErrorKind::ShapeMismatch, "prediction does not cover the mask");
    LossBreakdown l;
    for (std::size_t j = 0; j < m; ++j) {
        l.type += kl_divergence(truth.posterior[j], pred.type_probs[j]);
        l.pos += ((truth.pos_prev[j] - pred.pos_mean[j]) / truth.frame.scale).squaredNorm();
        l.orient += (truth.orient0[j].transpose() * pred.orient_pred[j] - Mat3::Identity()).squaredNorm();
    }
    l.type /= static_cast<double>(m);
    l.pos /= static_cast<double>(m);
    l.orient /= static_cast<double>(m);
    l.total = lambda.type * l.type + lambda.pos * l.pos + lambda.orient * l.orient;
    return l;
}

}  // namespace abloop
