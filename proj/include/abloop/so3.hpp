#pragma once
// Rotation algebra and the isotropic Gaussian distribution on SO(3).
//
// The angle marginal of IG_SO(3)(mean, eps) is realized through the heat
// kernel series
//   f(w) ~ (1 - cos w)/pi * sum_l (2l+1) exp(-l(l+1) eps) sin((l+1/2)w)/sin(w/2)
// tabulated on a uniform grid and sampled by inverse CDF.

#include "abloop/core.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

namespace abloop::so3 {

using Rotation = Mat3;

inline constexpr double kPi = std::numbers::pi;
inline constexpr int kTableGrid = 4096;

inline Mat3 hat(const Vec3& v) {
    Mat3 m;
    m << 0.0, -v.z(), v.y(),
         v.z(), 0.0, -v.x(),
         -v.y(), v.x(), 0.0;
    return m;
}

// Rodrigues formula.
inline Rotation exp_map(const Vec3& axis_angle) {
    double theta = axis_angle.norm();
    if (theta < 1e-12) return Mat3::Identity() + hat(axis_angle);
    Vec3 u = axis_angle / theta;
    Mat3 k = hat(u);
    return Mat3::Identity() + std::sin(theta) * k + (1.0 - std::cos(theta)) * k * k;
}

inline Rotation axis_angle(const Vec3& unit_axis, double angle) {
    return exp_map(unit_axis * angle);
}

struct AxisAngle {
    Vec3 axis;
    double angle;  // [0, pi]
};

// Axis-angle extraction. Angle via atan2 of the skew and symmetric parts.
// Beyond pi/2 the axis comes from the symmetric part; at exactly pi that is
// the largest-norm column of (O + I)/2.
inline AxisAngle log_axis_angle(const Rotation& r) {
    Vec3 v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    v *= 0.5;
    double s = v.norm();
    double c = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
    double angle = std::atan2(s, c);
    if (angle < 1e-12) return {Vec3::UnitX(), 0.0};
    if (angle < kPi / 2) return {v / s, angle};

    Mat3 sym = 0.5 * (r + r.transpose());
    Mat3 uut = (sym - c * Mat3::Identity()) / (1.0 - c);
    int best = 0;
    for (int j = 1; j < 3; ++j)
        if (uut.col(j).norm() > uut.col(best).norm()) best = j;
    Vec3 u = uut.col(best).normalized();
    if (u.dot(v) < 0.0) u = -u;
    return {u, angle};
}

inline Vec3 log_map(const Rotation& r) {
    auto aa = log_axis_angle(r);
    return aa.axis * aa.angle;
}

// Shrinks the rotation angle by k while keeping the axis.
inline Rotation scale_rot(const Rotation& o, double k) {
    if (k == 1.0) return o;
    auto aa = log_axis_angle(o);
    if (aa.angle == 0.0) return Mat3::Identity();
    return axis_angle(aa.axis, k * aa.angle);
}

inline double geodesic_distance(const Rotation& a, const Rotation& b) {
    double c = 0.5 * ((a.transpose() * b).trace() - 1.0);
    return std::acos(std::clamp(c, -1.0, 1.0));
}

inline bool is_rotation(const Mat3& o, double tol = 1e-6) {
    if (!o.allFinite()) return false;
    return (o.transpose() * o - Mat3::Identity()).norm() < tol && std::abs(o.determinant() - 1.0) < tol;
}

// Nearest rotation (polar factor); used to clean long composition chains.
inline Rotation orthonormalize(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU();
    Mat3 v = svd.matrixV();
    Mat3 d = Mat3::Identity();
    d(2, 2) = (u * v.transpose()).determinant() < 0 ? -1.0 : 1.0;
    return u * d * v.transpose();
}

inline Vec3 random_unit_vector(Rng& rng) {
    for (;;) {
        Vec3 v = normal_vec3(rng);
        double n = v.norm();
        if (n > 1e-12) return v / n;
    }
}

// Haar-uniform rotation from a random unit quaternion.
inline Rotation random_rotation(Rng& rng) {
    Eigen::Vector4d q;
    do {
        q << standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng);
    } while (q.norm() < 1e-12);
    q.normalize();
    return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
}

inline int series_terms(double eps) {
    int l = eps < 0.05 ? 2000 : 200;
    // Tiny variances need more terms: grow until the largest tail term,
    // (2L+1)^2 exp(-L(L+1) eps), is below 1e-12.
    auto tail = [eps](int n) { return 2.0 * std::log(2.0 * n + 1.0) - static_cast<double>(n) * (n + 1.0) * eps; };
    while (tail(l) > std::log(1e-12)) l += l / 8 + 1;
    return l;
}

// Coefficients (2l+1) e^{-l(l+1)eps} of the heat-kernel series.
inline std::vector<double> series_coefficients(double eps) {
    int terms = series_terms(eps);
    std::vector<double> c;
    c.reserve(static_cast<std::size_t>(terms) + 1);
    for (int l = 0; l <= terms; ++l) {
        double wl = std::exp(-l * (l + 1.0) * eps);
        if (wl < 1e-300) break;
        c.push_back((2.0 * l + 1.0) * wl);
    }
    return c;
}

// sum_l c_l sin((l+1/2)w)/sin(w/2), with sin((l+1/2)w) from the Chebyshev
// recurrence s_{l+1} = 2 cos(w) s_l - s_{l-1}.
inline double heat_kernel_series(double w, const std::vector<double>& coeffs) {
    double sh = std::sin(0.5 * w);
    double total = 0.0;
    if (std::abs(sh) < 1e-12) {
        for (std::size_t l = 0; l < coeffs.size(); ++l) total += coeffs[l] * (2.0 * l + 1.0);
        return total;
    }
    double two_cos = 2.0 * std::cos(w);
    double s_prev = -sh;
    double s_cur = sh;
    for (double c : coeffs) {
        total += c * s_cur;
        double s_next = two_cos * s_cur - s_prev;
        s_prev = s_cur;
        s_cur = s_next;
    }
    return total / sh;
}

inline double density_from_series(double w, const std::vector<double>& coeffs) {
    if (w <= 0.0) return 0.0;
    return std::max((1.0 - std::cos(w)) / kPi * heat_kernel_series(w, coeffs), 0.0);
}

// Angle density (normalized over [0, pi] up to truncation error). Negative
// truncation residue is clamped to zero.
inline double igso3_density(double w, double eps) {
    if (!(eps > 0.0)) throw Error(ErrorKind::InvalidVariance, "igso3 variance must be > 0");
    return density_from_series(w, series_coefficients(eps));
}

inline double uniform_angle_density(double w) { return (1.0 - std::cos(w)) / kPi; }

// Tabulated angle CDF for one variance value. Immutable after construction.
class IgSo3Table {
public:
    explicit IgSo3Table(double eps) : eps_(eps), density_(kTableGrid), cdf_(kTableGrid) {
        if (!(eps > 0.0)) throw Error(ErrorKind::InvalidVariance, "igso3 variance must be > 0");
        const double h = kPi / (kTableGrid - 1);
        auto coeffs = series_coefficients(eps);
        for (int k = 0; k < kTableGrid; ++k) density_[k] = density_from_series(k * h, coeffs);
        cdf_[0] = 0.0;
        for (int k = 1; k < kTableGrid; ++k)
            cdf_[k] = cdf_[k - 1] + 0.5 * h * (density_[k - 1] + density_[k]);
        double total = cdf_.back();
        if (!(total > 0.0)) throw Error(ErrorKind::InvalidVariance, "igso3 table degenerate");
        for (auto& c : cdf_) c /= total;
        for (auto& d : density_) d /= total;
        cdf_.back() = 1.0;
    }

    double variance() const { return eps_; }
    const std::vector<double>& density() const { return density_; }
    const std::vector<double>& cdf() const { return cdf_; }
    static double grid_step() { return kPi / (kTableGrid - 1); }

    // Inverse CDF with linear interpolation between grid points.
    double quantile(double u) const {
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        if (it == cdf_.begin()) return 0.0;
        if (it == cdf_.end()) return kPi;
        auto hi = static_cast<std::size_t>(it - cdf_.begin());
        auto lo = hi - 1;
        double span = cdf_[hi] - cdf_[lo];
        double frac = span > 0.0 ? (u - cdf_[lo]) / span : 0.0;
        return (static_cast<double>(lo) + frac) * grid_step();
    }

    double sample_angle(Rng& rng) const { return quantile(uniform01(rng)); }

private:
    double eps_;
    std::vector<double> density_;
    std::vector<double> cdf_;
};

// Process-wide cache of tables keyed by variance. Tables are shared
// read-only; insertion is serialized.
inline std::shared_ptr<const IgSo3Table> igso3_table(double eps) {
    static std::mutex mu;
    static std::map<double, std::shared_ptr<const IgSo3Table>> cache;
    {
        std::lock_guard lock(mu);
        auto it = cache.find(eps);
        if (it != cache.end()) return it->second;
    }
    auto table = std::make_shared<const IgSo3Table>(eps);
    std::lock_guard lock(mu);
    return cache.emplace(eps, std::move(table)).first->second;
}

inline Rotation sample_igso3(const Rotation& mean, const IgSo3Table& table, Rng& rng) {
    double w = table.sample_angle(rng);
    Vec3 u = random_unit_vector(rng);
    return mean * axis_angle(u, w);
}

inline Rotation sample_igso3(const Rotation& mean, double eps, Rng& rng) {
    if (!(eps > 0.0)) throw Error(ErrorKind::InvalidVariance, "igso3 variance must be > 0");
    return sample_igso3(mean, *igso3_table(eps), rng);
}

}  // namespace abloop::so3
