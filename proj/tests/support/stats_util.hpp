#pragma once
// Small statistical helpers shared by the test binaries.

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace testutil {

// Pearson chi-square goodness of fit against a density on [lo, hi].
// Equal-width bins; adjacent bins are merged until each expects >= 5.
inline double chi_square_pvalue(const std::vector<double>& samples, const std::function<double(double)>& density,
                                double lo, double hi, int bins) {
    using boost::math::quadrature::gauss_kronrod;
    const double width = (hi - lo) / bins;
    std::vector<double> expected(bins), observed(bins, 0.0);
    double total_mass = 0.0;
    for (int b = 0; b < bins; ++b) {
        expected[b] = gauss_kronrod<double, 31>::integrate(density, lo + b * width, lo + (b + 1) * width, 10, 1e-12);
        total_mass += expected[b];
    }
    const double n = static_cast<double>(samples.size());
    for (auto& e : expected) e = e / total_mass * n;
    for (double x : samples) {
        int b = std::clamp(static_cast<int>((x - lo) / width), 0, bins - 1);
        observed[b] += 1.0;
    }
    std::vector<double> eo, oo;
    double ea = 0.0, oa = 0.0;
    for (int b = 0; b < bins; ++b) {
        ea += expected[b];
        oa += observed[b];
        if (ea >= 5.0) {
            eo.push_back(ea);
            oo.push_back(oa);
            ea = oa = 0.0;
        }
    }
    if (ea > 0.0 && !eo.empty()) {
        eo.back() += ea;
        oo.back() += oa;
    }
    double stat = 0.0;
    for (std::size_t k = 0; k < eo.size(); ++k) stat += (oo[k] - eo[k]) * (oo[k] - eo[k]) / eo[k];
    if (eo.size() < 2) return 1.0;
    boost::math::chi_squared dist(static_cast<double>(eo.size() - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

// Pearson chi-square for counts against expected probabilities.
inline double chi_square_counts_pvalue(const std::vector<double>& observed, const std::vector<double>& probs) {
    double n = std::accumulate(observed.begin(), observed.end(), 0.0);
    double stat = 0.0;
    int dof = -1;
    for (std::size_t k = 0; k < observed.size(); ++k) {
        if (probs[k] <= 0.0) continue;
        double e = n * probs[k];
        stat += (observed[k] - e) * (observed[k] - e) / e;
        ++dof;
    }
    boost::math::chi_squared dist(dof);
    return boost::math::cdf(boost::math::complement(dist, stat));
}

// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_two_sample(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= x) ++i;
        while (j < b.size() && b[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
    }
    return d;
}

// One-sample Kolmogorov-Smirnov statistic against a CDF.
inline double ks_one_sample(std::vector<double> a, const std::function<double(double)>& cdf) {
    std::sort(a.begin(), a.end());
    const double n = static_cast<double>(a.size());
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double f = cdf(a[i]);
        d = std::max({d, std::abs(f - i / n), std::abs((i + 1) / n - f)});
    }
    return d;
}

// One-sided paired t-test p-value for mean(a - b) > 0.
inline double paired_t_pvalue(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= n;
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
    var /= (n - 1);
    if (var == 0.0) return mean > 0.0 ? 0.0 : 1.0;
    double t = mean / std::sqrt(var / n);
    boost::math::students_t dist(static_cast<double>(n - 1));
    return boost::math::cdf(boost::math::complement(dist, t));
}

// One-sided Welch t-test p-value for mean(a) > mean(b).
inline double welch_t_pvalue(const std::vector<double>& a, const std::vector<double>& b) {
    auto stats = [](const std::vector<double>& v) {
        double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair{m, s / (v.size() - 1)};
    };
    auto [ma, va] = stats(a);
    auto [mb, vb] = stats(b);
    double se2 = va / a.size() + vb / b.size();
    if (se2 == 0.0) return ma > mb ? 0.0 : 1.0;
    double t = (ma - mb) / std::sqrt(se2);
    double df = se2 * se2 /
                (va * va / (a.size() * a.size() * (a.size() - 1.0)) + vb * vb / (b.size() * b.size() * (b.size() - 1.0)));
    boost::math::students_t dist(df);
    return boost::math::cdf(boost::math::complement(dist, t));
}

// Average ranks (ties share the mean rank).
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) { return pearson(ranks(a), ranks(b)); }

}  // namespace testutil
