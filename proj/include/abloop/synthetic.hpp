#pragma once
// Procedural antibody-antigen complexes for desk-scale training.
//
// The "antibody" is one perturbed helix carrying six CDR segments, the
// "antigen" a shorter parallel helix within contact distance. CDR residue
// types follow a contact-dependent rule, so sequence is learnable from
// structure.

#include "abloop/core.hpp"
#include "abloop/so3.hpp"
#include "abloop/structio.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace abloop::synth {

inline constexpr double kContactCutoff = 8.0;  // C-alpha, Angstrom

// Residue-type preferences (weights over the alphabet, unnormalized).
inline std::array<double, kNumAminoAcids> weights_from(std::initializer_list<std::pair<char, double>> w) {
    std::array<double, kNumAminoAcids> out{};
    for (auto [c, v] : w) out[static_cast<std::size_t>(aa_index(c))] = v;
    return out;
}

inline const std::array<double, kNumAminoAcids>& contact_weights() {
    static const auto w = weights_from({{'Y', 0.30}, {'W', 0.15}, {'F', 0.15}, {'L', 0.10},
                                        {'I', 0.10}, {'V', 0.10}, {'M', 0.10}});
    return w;
}

inline const std::array<double, kNumAminoAcids>& surface_weights() {
    static const auto w = weights_from({{'S', 0.30}, {'T', 0.20}, {'N', 0.15}, {'D', 0.15},
                                        {'G', 0.10}, {'K', 0.10}});
    return w;
}

inline const std::array<double, kNumAminoAcids>& framework_weights() {
    static const auto w = weights_from({{'A', 0.3}, {'L', 0.2}, {'E', 0.2}, {'K', 0.2}, {'Q', 0.1}});
    return w;
}

inline const std::array<double, kNumAminoAcids>& antigen_weights() {
    static const auto w = weights_from({{'A', 1}, {'L', 1}, {'E', 1}, {'K', 1}, {'R', 1},
                                        {'D', 1}, {'S', 1}, {'Y', 1}, {'F', 1}});
    return w;
}

inline constexpr double kUniformMix = 0.10;
inline constexpr double kSegmentStartGly = 0.6;

// Probability of each residue type at a CDR position under the generating rule.
inline std::array<double, kNumAminoAcids> cdr_type_distribution(bool contact, bool segment_start) {
    const auto& base = contact ? contact_weights() : surface_weights();
    double total = 0.0;
    for (double v : base) total += v;
    std::array<double, kNumAminoAcids> p{};
    for (int r = 0; r < kNumAminoAcids; ++r) p[r] = base[r] / total;
    if (segment_start) {
        for (auto& v : p) v *= 1.0 - kSegmentStartGly;
        p[static_cast<std::size_t>(aa_index('G'))] += kSegmentStartGly;
    }
    for (auto& v : p) v = (1.0 - kUniformMix) * v + kUniformMix / kNumAminoAcids;
    return p;
}

// Antibody residues within the contact cutoff of any antigen residue.
inline std::vector<bool> contact_flags(const Complex& c) {
    std::vector<bool> flags(c.size(), false);
    for (int i = 0; i < static_cast<int>(c.size()); ++i) {
        if (c.is_antigen(i)) continue;
        for (int a : c.antigen)
            if ((c.residues[i].ca - c.residues[a].ca).norm() < kContactCutoff) {
                flags[i] = true;
                break;
            }
    }
    return flags;
}

inline bool is_segment_start(const Complex& c, int i) {
    return i == 0 || c.residues[i - 1].region != c.residues[i].region || c.residues[i - 1].chain != c.residues[i].chain;
}

namespace detail {

struct Helix {
    Vec3 origin;
    double phase;
    double radius = 2.3;
    double rise = 1.5;
    double twist = 100.0 * so3::kPi / 180.0;

    Vec3 at(double i) const {
        double a = phase + i * twist;
        return origin + Vec3(radius * std::cos(a), radius * std::sin(a), i * rise);
    }
};

inline Mat3 helix_frame(const Helix& h, int i) {
    Vec3 ca = h.at(i);
    Vec3 c = ca + 1.525 * (h.at(i + 1) - ca).normalized();
    Vec3 n = ca + 1.458 * (h.at(i - 1) - ca).normalized();
    return build_frame(n, ca, c);
}

inline int draw(const std::array<double, kNumAminoAcids>& w, Rng& rng) {
    return sample_categorical(w.data(), kNumAminoAcids, rng);
}

}  // namespace detail

// One procedural complex; deterministic per seed.
inline Complex make_synthetic_complex(std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> cdr_len(3, 5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const Region layout[] = {Region::Framework, Region::H1, Region::Framework, Region::H2, Region::Framework,
                             Region::H3,        Region::Framework, Region::L1, Region::Framework, Region::L2,
                             Region::Framework, Region::L3, Region::Framework};
    std::vector<Region> regions;
    for (Region r : layout) {
        int len = r == Region::Framework ? 3 + static_cast<int>(unit(rng) * 2.0) : cdr_len(rng);
        regions.insert(regions.end(), static_cast<std::size_t>(len), r);
    }

    detail::Helix ab{Vec3::Zero(), unit(rng) * 2.0 * so3::kPi};
    double sep = 8.5 + 1.5 * unit(rng);
    double ab_len = ab.rise * static_cast<double>(regions.size());
    detail::Helix ag{Vec3(sep, 0.0, 0.2 * ab_len + 0.4 * ab_len * unit(rng)), unit(rng) * 2.0 * so3::kPi};
    const int antigen_len = 20;

    Complex c;
    auto place = [&](const detail::Helix& h, int i, char chain, Region region) {
        Residue r;
        r.ca = h.at(i) + 0.3 * normal_vec3(rng);
        r.orient = so3::orthonormalize(detail::helix_frame(h, i) * so3::exp_map(0.1 * normal_vec3(rng)));
        r.chain = chain;
        r.seq_index = i + 1;
        r.region = region;
        c.residues.push_back(r);
    };
    for (int i = 0; i < static_cast<int>(regions.size()); ++i) place(ab, i, 'H', regions[i]);
    for (int i = 0; i < antigen_len; ++i) place(ag, i, 'A', Region::Antigen);
    c.masks_from_regions();

    // Random rigid placement so absolute coordinates carry no information.
    Mat3 rot = so3::random_rotation(rng);
    Vec3 shift = 20.0 * normal_vec3(rng);
    c = transform(c, rot, shift);

    auto contact = contact_flags(c);
    for (int i = 0; i < static_cast<int>(c.size()); ++i) {
        auto& r = c.residues[i];
        if (r.region == Region::Antigen) r.type = detail::draw(antigen_weights(), rng);
        else if (r.region == Region::Framework) r.type = detail::draw(framework_weights(), rng);
        else r.type = detail::draw(cdr_type_distribution(contact[i], is_segment_start(c, i)), rng);
    }
    return c;
}

inline std::vector<Complex> make_synthetic_dataset(int n, std::uint64_t seed) {
    if (n < 1) throw Error(ErrorKind::InvalidRange, "dataset size must be >= 1");
    std::vector<Complex> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(make_synthetic_complex(derive_seed(seed, static_cast<std::uint64_t>(i))));
    return out;
}

}  // namespace abloop::synth
