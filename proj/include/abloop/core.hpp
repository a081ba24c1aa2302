#pragma once
// Shared vocabulary: amino-acid alphabet, small linear-algebra aliases,
// error type, seeded random streams and stable hashing.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace abloop {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rng = std::mt19937_64;

inline constexpr int kNumAminoAcids = 20;
inline constexpr std::string_view kAlphabet = "ACDEFGHIKLMNPQRSTVWY";

inline constexpr std::array<std::string_view, kNumAminoAcids> kThreeLetter = {
    "ALA", "CYS", "ASP", "GLU", "PHE", "GLY", "HIS", "ILE", "LYS", "LEU",
    "MET", "ASN", "PRO", "GLN", "ARG", "SER", "THR", "VAL", "TRP", "TYR"};

// Residue-type sequence as one-letter codes.
using Sequence = std::string;

enum class ErrorKind {
    MalformedRecord,
    MissingAtom,
    UnknownResidue,
    DegenerateGeometry,
    MaskTooLarge,
    InsufficientPairs,
    DegenerateConfiguration,
    InvalidVariance,
    InvalidRange,
    EmptyMask,
    ShapeMismatch,
    NonFiniteActivation,
    NonFiniteGradient,
    VersionMismatch,
    CorruptFile,
    OracleFailure,
    LengthMismatch,
    InsufficientData,
    AlignmentFailure,
    NoViableCandidates,
    ConfigError,
    IoError,
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::MalformedRecord: return "MalformedRecord";
        case ErrorKind::MissingAtom: return "MissingAtom";
        case ErrorKind::UnknownResidue: return "UnknownResidue";
        case ErrorKind::DegenerateGeometry: return "DegenerateGeometry";
        case ErrorKind::MaskTooLarge: return "MaskTooLarge";
        case ErrorKind::InsufficientPairs: return "InsufficientPairs";
        case ErrorKind::DegenerateConfiguration: return "DegenerateConfiguration";
        case ErrorKind::InvalidVariance: return "InvalidVariance";
        case ErrorKind::InvalidRange: return "InvalidRange";
        case ErrorKind::EmptyMask: return "EmptyMask";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
        case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorKind::VersionMismatch: return "VersionMismatch";
        case ErrorKind::CorruptFile: return "CorruptFile";
        case ErrorKind::OracleFailure: return "OracleFailure";
        case ErrorKind::LengthMismatch: return "LengthMismatch";
        case ErrorKind::InsufficientData: return "InsufficientData";
        case ErrorKind::AlignmentFailure: return "AlignmentFailure";
        case ErrorKind::NoViableCandidates: return "NoViableCandidates";
        case ErrorKind::ConfigError: return "ConfigError";
        case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), message_(what) {}
    ErrorKind kind() const noexcept { return kind_; }
    // Text without the kind prefix, for rewrapping with more context.
    const std::string& message() const noexcept { return message_; }

private:
    ErrorKind kind_;
    std::string message_;
};

// -1 when the letter is not one of the 20 standard residues.
inline int aa_index(char c) {
    auto pos = kAlphabet.find(static_cast<char>(c >= 'a' && c <= 'z' ? c - 32 : c));
    return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

inline char aa_letter(int idx) { return kAlphabet.at(static_cast<std::size_t>(idx)); }

inline int aa_index_from_three(std::string_view name) {
    for (int i = 0; i < kNumAminoAcids; ++i)
        if (kThreeLetter[i] == name) return i;
    return -1;
}

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    return mix64(mix64(mix64(base) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

// FNV-1a, 64 bit.
class Hasher {
public:
    Hasher& bytes(const void* data, std::size_t n) {
        auto p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
        return *this;
    }
    Hasher& str(std::string_view s) { return bytes(s.data(), s.size()); }
    template <typename T>
    Hasher& pod(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        return bytes(&v, sizeof(T));
    }
    std::uint64_t value() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return out;
}

inline double standard_normal(Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    return n(rng);
}

inline double uniform01(Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return u(rng);
}

inline Vec3 normal_vec3(Rng& rng) {
    double a = standard_normal(rng);
    double b = standard_normal(rng);
    double c = standard_normal(rng);
    return {a, b, c};
}

// Samples an index from unnormalized nonnegative weights.
inline int sample_categorical(const double* weights, int n, Rng& rng) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += weights[i];
    double u = uniform01(rng) * total;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += weights[i];
        if (u < acc) return i;
    }
    for (int i = n - 1; i >= 0; --i)
        if (weights[i] > 0.0) return i;
    return n - 1;
}

}  // namespace abloop
