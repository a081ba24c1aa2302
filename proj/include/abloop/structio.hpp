#pragma once
// Structure ingestion and complex representation.
//
// Backbone records come from fixed-width ATOM text; each residue is reduced
// to (type, C-alpha position, orientation frame). Complexes carry explicit
// region tags from which the designable mask and the antigen set follow.

#include "abloop/core.hpp"
#include "abloop/so3.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace abloop {

enum class Region : std::uint8_t { Framework, H1, H2, H3, L1, L2, L3, Antigen };
inline constexpr int kNumRegions = 8;

inline const char* region_tag(Region r) {
    static constexpr const char* tags[] = {"FW", "H1", "H2", "H3", "L1", "L2", "L3", "AG"};
    return tags[static_cast<int>(r)];
}

inline Region region_from_tag(std::string_view tag) {
    for (int i = 0; i < kNumRegions; ++i)
        if (tag == region_tag(static_cast<Region>(i))) return static_cast<Region>(i);
    throw Error(ErrorKind::MalformedRecord, "unknown region tag '" + std::string(tag) + "'");
}

inline bool is_cdr(Region r) { return r != Region::Framework && r != Region::Antigen; }

struct Residue {
    int type = 0;  // index into kAlphabet
    Vec3 ca = Vec3::Zero();
    Mat3 orient = Mat3::Identity();
    char chain = 'H';
    int seq_index = 0;
    Region region = Region::Framework;

    bool operator==(const Residue&) const = default;
};

struct Complex {
    std::vector<Residue> residues;
    std::vector<int> mask;     // sorted, the designed set
    std::vector<int> antigen;  // sorted

    std::size_t size() const { return residues.size(); }

    bool is_masked(int i) const { return std::binary_search(mask.begin(), mask.end(), i); }
    bool is_antigen(int i) const { return std::binary_search(antigen.begin(), antigen.end(), i); }

    // Recomputes mask (all CDR residues) and antigen from region tags.
    void masks_from_regions() {
        mask.clear();
        antigen.clear();
        for (int i = 0; i < static_cast<int>(residues.size()); ++i) {
            if (is_cdr(residues[i].region)) mask.push_back(i);
            if (residues[i].region == Region::Antigen) antigen.push_back(i);
        }
    }

    // Residue indices that are not antigen, in storage order.
    std::vector<int> antibody_indices() const {
        std::vector<int> out;
        for (int i = 0; i < static_cast<int>(residues.size()); ++i)
            if (!is_antigen(i)) out.push_back(i);
        return out;
    }

    // One-letter antibody sequence (antigen excluded).
    Sequence antibody_sequence() const {
        Sequence s;
        for (int i : antibody_indices()) s.push_back(aa_letter(residues[i].type));
        return s;
    }

    // Positions of the mask residues within antibody_sequence().
    std::vector<int> design_positions() const {
        auto ab = antibody_indices();
        std::vector<int> out;
        for (int m : mask) {
            auto it = std::lower_bound(ab.begin(), ab.end(), m);
            out.push_back(static_cast<int>(it - ab.begin()));
        }
        return out;
    }

    // Overwrites antibody residue types from a one-letter sequence.
    void set_antibody_sequence(const Sequence& seq) {
        auto ab = antibody_indices();
        if (seq.size() != ab.size())
            throw Error(ErrorKind::LengthMismatch, "sequence length " + std::to_string(seq.size()) +
                                                       " != antibody length " + std::to_string(ab.size()));
        for (std::size_t k = 0; k < ab.size(); ++k) {
            int t = aa_index(seq[k]);
            if (t < 0) throw Error(ErrorKind::UnknownResidue, std::string("letter '") + seq[k] + "'");
            residues[ab[k]].type = t;
        }
    }

    std::uint64_t hash() const {
        Hasher h;
        for (const auto& r : residues) {
            h.pod(r.type).pod(r.chain).pod(r.seq_index).pod(r.region);
            h.bytes(r.ca.data(), sizeof(double) * 3).bytes(r.orient.data(), sizeof(double) * 9);
        }
        for (int m : mask) h.pod(m);
        for (int a : antigen) h.pod(a);
        return h.value();
    }

    // Throws on any violated representation invariant.
    void validate(double frame_tol = 1e-6) const {
        const int n = static_cast<int>(residues.size());
        auto check_set = [n](const std::vector<int>& s, const char* what) {
            for (std::size_t k = 0; k < s.size(); ++k) {
                if (s[k] < 0 || s[k] >= n)
                    throw Error(ErrorKind::ShapeMismatch, std::string(what) + " index out of range");
                if (k > 0 && s[k] <= s[k - 1])
                    throw Error(ErrorKind::ShapeMismatch, std::string(what) + " not sorted/unique");
            }
        };
        check_set(mask, "mask");
        check_set(antigen, "antigen");
        for (int m : mask)
            if (is_antigen(m)) throw Error(ErrorKind::ShapeMismatch, "mask overlaps antigen");
        for (const auto& r : residues) {
            if (r.type < 0 || r.type >= kNumAminoAcids)
                throw Error(ErrorKind::UnknownResidue, "residue type out of range");
            if (!r.ca.allFinite()) throw Error(ErrorKind::NonFiniteActivation, "non-finite coordinate");
            if (!so3::is_rotation(r.orient, frame_tol))
                throw Error(ErrorKind::DegenerateGeometry, "orientation is not a rotation");
        }
    }
};

// Applies x -> R x + v and O -> R O to every residue.
inline Complex transform(const Complex& c, const Mat3& rot, const Vec3& shift) {
    Complex out = c;
    for (auto& r : out.residues) {
        r.ca = rot * r.ca + shift;
        r.orient = rot * r.orient;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backbone frames

struct BackboneRecord {
    Vec3 n = Vec3::Zero();
    Vec3 ca = Vec3::Zero();
    Vec3 c = Vec3::Zero();
    std::string res_name;
    char chain = 'A';
    int seq_index = 0;
    char icode = ' ';
};

// e1 = (C - CA)/|C - CA|, e2 = Gram-Schmidt of (N - CA) against e1, e3 = e1 x e2.
inline Mat3 build_frame(const Vec3& n, const Vec3& ca, const Vec3& c) {
    Vec3 a = c - ca;
    double an = a.norm();
    if (an < 1e-6) throw Error(ErrorKind::DegenerateGeometry, "C coincides with CA");
    Vec3 e1 = a / an;
    Vec3 b = n - ca;
    Vec3 resid = b - e1.dot(b) * e1;
    double rn = resid.norm();
    if (rn < 1e-6) throw Error(ErrorKind::DegenerateGeometry, "N, CA, C are collinear");
    Vec3 e2 = resid / rn;
    Mat3 o;
    o.col(0) = e1;
    o.col(1) = e2;
    o.col(2) = e1.cross(e2);
    return o;
}

inline Mat3 build_frame(const BackboneRecord& rec) { return build_frame(rec.n, rec.ca, rec.c); }

// Ideal N and C positions for a frame (CA-N 1.458 A, CA-C 1.525 A, N-CA-C 111 deg).
inline std::pair<Vec3, Vec3> ideal_backbone(const Vec3& ca, const Mat3& orient) {
    constexpr double kNcaC = 111.0 * so3::kPi / 180.0;
    Vec3 c = ca + 1.525 * orient.col(0);
    Vec3 n = ca + 1.458 * (std::cos(kNcaC) * orient.col(0) + std::sin(kNcaC) * orient.col(1));
    return {n, c};
}

// ---------------------------------------------------------------------------
// ATOM-record text

struct ParseWarning {
    ErrorKind kind;
    std::string message;
};

struct ParseResult {
    std::vector<BackboneRecord> records;
    std::vector<ParseWarning> warnings;
};

namespace detail {

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(' ');
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(' ');
    return std::string(s.substr(b, e - b + 1));
}

inline double parse_coord(const std::string& line, std::size_t start, int lineno) {
    std::string field = trim(std::string_view(line).substr(start, 8));
    try {
        std::size_t used = 0;
        double v = std::stod(field, &used);
        if (used != field.size() || !std::isfinite(v)) throw std::invalid_argument("junk");
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::MalformedRecord,
                    "line " + std::to_string(lineno) + ": bad coordinate '" + field + "'");
    }
}

}  // namespace detail

// Consumes N/CA/C atoms of standard residues. Residues missing an atom or
// with a non-standard name are dropped and reported as warnings.
inline ParseResult parse_backbone(std::string_view text) {
    struct Partial {
        std::string name;
        std::optional<Vec3> n, ca, c;
    };
    using Key = std::tuple<char, int, char>;
    std::map<Key, Partial> residues;

    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string rec = line.substr(0, std::min<std::size_t>(6, line.size()));
        if (rec != "ATOM  " && rec != "HETATM" && detail::trim(rec) != "ATOM" && detail::trim(rec) != "HETATM")
            continue;
        if (line.size() < 54)
            throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(lineno) + ": record shorter than 54 columns");
        std::string atom = detail::trim(std::string_view(line).substr(12, 4));
        std::string resname = detail::trim(std::string_view(line).substr(17, 3));
        char chain = line[21];
        std::string num = detail::trim(std::string_view(line).substr(22, 4));
        char icode = line[26];
        int seq = 0;
        try {
            std::size_t used = 0;
            seq = std::stoi(num, &used);
            if (used != num.size()) throw std::invalid_argument("junk");
        } catch (const std::exception&) {
            throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(lineno) + ": bad residue number '" + num + "'");
        }
        Vec3 xyz(detail::parse_coord(line, 30, lineno), detail::parse_coord(line, 38, lineno),
                 detail::parse_coord(line, 46, lineno));
        auto& p = residues[Key{chain, seq, icode}];
        p.name = resname;
        if (atom == "N") p.n = xyz;
        else if (atom == "CA") p.ca = xyz;
        else if (atom == "C") p.c = xyz;
    }

    ParseResult out;
    for (auto& [key, p] : residues) {
        auto [chain, seq, icode] = key;
        std::string where = std::string(1, chain) + ":" + std::to_string(seq) + (icode == ' ' ? "" : std::string(1, icode));
        if (aa_index_from_three(p.name) < 0) {
            out.warnings.push_back({ErrorKind::UnknownResidue, where + " non-standard residue " + p.name});
            continue;
        }
        if (!p.n || !p.ca || !p.c) {
            out.warnings.push_back({ErrorKind::MissingAtom, where + " lacks N, CA or C"});
            continue;
        }
        out.records.push_back({*p.n, *p.ca, *p.c, p.name, chain, seq, icode});
    }
    return out;
}

inline std::string write_backbone(const std::vector<BackboneRecord>& records) {
    std::string out;
    char buf[96];
    int serial = 1;
    for (const auto& r : records) {
        const std::pair<const char*, const Vec3*> atoms[] = {{" N  ", &r.n}, {" CA ", &r.ca}, {" C  ", &r.c}};
        for (const auto& [name, pos] : atoms) {
            std::snprintf(buf, sizeof buf, "ATOM  %5d %4s %3s %c%4d%c   %8.3f%8.3f%8.3f  1.00  0.00\n",
                          serial++ % 100000, name, r.res_name.c_str(), r.chain, r.seq_index, r.icode,
                          (*pos).x(), (*pos).y(), (*pos).z());
            out += buf;
        }
    }
    out += "END\n";
    return out;
}

inline std::vector<BackboneRecord> complex_to_backbone(const Complex& c) {
    std::vector<BackboneRecord> out;
    for (const auto& r : c.residues) {
        auto [n, cc] = ideal_backbone(r.ca, r.orient);
        out.push_back({n, r.ca, cc, std::string(kThreeLetter[r.type]), r.chain, r.seq_index, ' '});
    }
    return out;
}

// Builds a complex from backbone records; regions are assigned by the
// caller (default framework), since numbering schemes are not derived here.
template <typename RegionFn>
Complex complex_from_backbone(const std::vector<BackboneRecord>& records, RegionFn&& region_of) {
    Complex c;
    for (const auto& rec : records) {
        Residue r;
        r.type = aa_index_from_three(rec.res_name);
        if (r.type < 0) throw Error(ErrorKind::UnknownResidue, rec.res_name);
        r.ca = rec.ca;
        r.orient = build_frame(rec);
        r.chain = rec.chain;
        r.seq_index = rec.seq_index;
        r.region = region_of(rec);
        c.residues.push_back(r);
    }
    c.masks_from_regions();
    return c;
}

inline Complex complex_from_backbone(const std::vector<BackboneRecord>& records) {
    return complex_from_backbone(records, [](const BackboneRecord&) { return Region::Framework; });
}

// ---------------------------------------------------------------------------
// Native line format: "#abloop-complex v1" then one residue per line:
//   chain seq type x y z o00 o01 o02 o10 o11 o12 o20 o21 o22 region

inline constexpr std::string_view kComplexHeader = "#abloop-complex v1";

inline std::string write_complex(const Complex& c) {
    std::string out(kComplexHeader);
    out += '\n';
    char buf[64];
    auto num = [&](double v) {
        if (v == 0.0) v = 0.0;  // no negative zero
        std::snprintf(buf, sizeof buf, " %.6g", v);
        out += buf;
    };
    for (const auto& r : c.residues) {
        out += r.chain;
        out += ' ';
        out += std::to_string(r.seq_index);
        out += ' ';
        out += aa_letter(r.type);
        for (int k = 0; k < 3; ++k) num(r.ca[k]);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) num(r.orient(i, j));
        out += ' ';
        out += region_tag(r.region);
        out += '\n';
    }
    return out;
}

inline Complex read_complex(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || detail::trim(line) != kComplexHeader)
        throw Error(ErrorKind::MalformedRecord, "missing header '" + std::string(kComplexHeader) + "'");
    Complex c;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        std::istringstream ls(line);
        Residue r;
        std::string chain, letter, tag;
        if (!(ls >> chain >> r.seq_index >> letter) || chain.size() != 1 || letter.size() != 1)
            throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(lineno));
        r.chain = chain[0];
        r.type = aa_index(letter[0]);
        if (r.type < 0) throw Error(ErrorKind::UnknownResidue, "line " + std::to_string(lineno));
        for (int k = 0; k < 3; ++k)
            if (!(ls >> r.ca[k])) throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(lineno));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                if (!(ls >> r.orient(i, j))) throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(lineno));
        if (!(ls >> tag)) throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(lineno));
        r.region = region_from_tag(tag);
        c.residues.push_back(r);
    }
    c.masks_from_regions();
    return c;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, std::string_view text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

// ---------------------------------------------------------------------------
// Patches and superposition

// Keeps all mask residues plus the residues closest (C-alpha) to the anchors
// flanking each contiguous mask segment. Ties go to the lower index.
inline Complex extract_patch(const Complex& c, int patch_size) {
    const int n = static_cast<int>(c.size());
    if (patch_size < static_cast<int>(c.mask.size()) + 2)
        throw Error(ErrorKind::MaskTooLarge, "patch size " + std::to_string(patch_size) + " < mask size + 2");
    if (n <= patch_size) return c;

    std::vector<int> anchors;
    for (std::size_t k = 0; k < c.mask.size(); ++k) {
        int m = c.mask[k];
        bool seg_start = k == 0 || c.mask[k - 1] != m - 1;
        bool seg_end = k + 1 == c.mask.size() || c.mask[k + 1] != m + 1;
        if (seg_start && m - 1 >= 0 && !c.is_masked(m - 1)) anchors.push_back(m - 1);
        if (seg_end && m + 1 < n && !c.is_masked(m + 1)) anchors.push_back(m + 1);
    }
    if (anchors.empty()) anchors = c.mask;

    std::vector<std::pair<double, int>> rest;
    for (int i = 0; i < n; ++i) {
        if (c.is_masked(i)) continue;
        double d = std::numeric_limits<double>::infinity();
        for (int a : anchors) d = std::min(d, (c.residues[i].ca - c.residues[a].ca).norm());
        rest.emplace_back(d, i);
    }
    std::sort(rest.begin(), rest.end());
    std::vector<int> keep = c.mask;
    for (int k = 0; k < patch_size - static_cast<int>(c.mask.size()); ++k) keep.push_back(rest[k].second);
    std::sort(keep.begin(), keep.end());

    Complex out;
    for (int i : keep) out.residues.push_back(c.residues[i]);
    for (int k = 0; k < static_cast<int>(keep.size()); ++k) {
        if (c.is_masked(keep[k])) out.mask.push_back(k);
        if (c.is_antigen(keep[k])) out.antigen.push_back(k);
    }
    return out;
}

struct Alignment {
    Complex aligned;
    double rmsd = 0.0;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
};

// Superposes mobile onto reference over paired C-alpha positions
// (mobile index, reference index). Returns a proper rotation.
inline Alignment kabsch_align(const Complex& mobile, const Complex& reference,
                              const std::vector<std::pair<int, int>>& pairs) {
    if (pairs.size() < 3) throw Error(ErrorKind::InsufficientPairs, "need at least 3 pairs");
    const auto np = static_cast<double>(pairs.size());
    Vec3 cm = Vec3::Zero(), cr = Vec3::Zero();
    for (auto [i, j] : pairs) {
        cm += mobile.residues.at(i).ca;
        cr += reference.residues.at(j).ca;
    }
    cm /= np;
    cr /= np;
    Mat3 h = Mat3::Zero();
    Mat3 spread_m = Mat3::Zero(), spread_r = Mat3::Zero();
    for (auto [i, j] : pairs) {
        Vec3 a = mobile.residues[i].ca - cm;
        Vec3 b = reference.residues[j].ca - cr;
        h += a * b.transpose();
        spread_m += a * a.transpose();
        spread_r += b * b.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> em(spread_m), er(spread_r);
    double scale = std::max(em.eigenvalues()(2), 1e-300);
    if (em.eigenvalues()(1) < 1e-10 * scale || er.eigenvalues()(1) < 1e-10 * std::max(er.eigenvalues()(2), 1e-300))
        throw Error(ErrorKind::DegenerateConfiguration, "paired positions are collinear");

    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU(), v = svd.matrixV();
    Mat3 d = Mat3::Identity();
    d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    Mat3 rot = v * d * u.transpose();
    Vec3 shift = cr - rot * cm;

    Alignment out;
    out.rotation = rot;
    out.translation = shift;
    out.aligned = transform(mobile, rot, shift);
    double ss = 0.0;
    for (auto [i, j] : pairs) ss += (out.aligned.residues[i].ca - reference.residues[j].ca).squaredNorm();
    out.rmsd = std::sqrt(ss / np);
    return out;
}

}  // namespace abloop
