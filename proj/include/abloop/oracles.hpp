#pragma once
// Sequence scoring: assay records, ridge and ensemble affinity oracles,
// liability descriptors with a tree-ensemble regressor, the hidden synthetic
// landscape that stands in for the lab, and candidate ranking.

#include "abloop/core.hpp"
#include "abloop/sampler.hpp"
#include "abloop/structio.hpp"
#include "abloop/synthetic.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace abloop {

inline constexpr int kOracleSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Assay records

enum class AssayType { Affinity, Liability };

inline const char* to_string(AssayType t) { return t == AssayType::Affinity ? "affinity" : "liability"; }

inline AssayType assay_type_from(const std::string& s) {
    if (s == "affinity") return AssayType::Affinity;
    if (s == "liability") return AssayType::Liability;
    throw Error(ErrorKind::MalformedRecord, "unknown assay type '" + s + "'");
}

struct AssayRecord {
    Sequence sequence;                    // full antibody sequence
    std::optional<double> measured_value;  // log-fold change vs the starting antibody
    AssayType assay_type = AssayType::Affinity;
    int round_id = 0;
    bool synthesized = false;

    bool operator==(const AssayRecord&) const = default;
};

inline nlohmann::ordered_json record_to_json(const AssayRecord& r) {
    nlohmann::ordered_json j;
    j["sequence"] = r.sequence;
    j["measured_value"] = r.measured_value ? nlohmann::ordered_json(*r.measured_value) : nlohmann::ordered_json(nullptr);
    j["assay_type"] = to_string(r.assay_type);
    j["round_id"] = r.round_id;
    j["synthesized"] = r.synthesized;
    return j;
}

inline AssayRecord record_from_json(const nlohmann::json& j) {
    try {
        AssayRecord r;
        r.sequence = j.at("sequence").get<std::string>();
        if (!j.at("measured_value").is_null()) r.measured_value = j.at("measured_value").get<double>();
        r.assay_type = assay_type_from(j.at("assay_type").get<std::string>());
        r.round_id = j.at("round_id").get<int>();
        r.synthesized = j.at("synthesized").get<bool>();
        if (r.synthesized != r.measured_value.has_value() || (r.measured_value && !std::isfinite(*r.measured_value)))
            throw Error(ErrorKind::MalformedRecord, "measured_value must be finite exactly when synthesized");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedRecord, e.what());
    }
}

inline std::uint64_t hash_records(const std::vector<AssayRecord>& records) {
    Hasher h;
    for (const auto& r : records) {
        h.str(r.sequence).pod(r.synthesized).pod(r.assay_type).pod(r.round_id);
        if (r.measured_value) h.pod(*r.measured_value);
    }
    return h.value();
}

// Appends one JSON line per record.
inline void append_records(const std::string& path, const std::vector<AssayRecord>& records) {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot open " + path);
    for (const auto& r : records) out << record_to_json(r).dump() << '\n';
    if (!out) throw Error(ErrorKind::IoError, "write failed: " + path);
}

inline std::vector<AssayRecord> load_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoError, "cannot open " + path);
    std::vector<AssayRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::MalformedRecord, path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw Error(ErrorKind::MalformedRecord, path + ":" + std::to_string(lineno) + ": " + e.message());
        }
    }
    return out;
}

// Synthesized records of one assay type, checked for equal lengths.
inline std::vector<const AssayRecord*> usable_records(const std::vector<AssayRecord>& records, AssayType type) {
    std::vector<const AssayRecord*> out;
    for (const auto& r : records)
        if (r.synthesized && r.measured_value && r.assay_type == type) out.push_back(&r);
    for (const auto* r : out)
        if (r->sequence.size() != out.front()->sequence.size())
            throw Error(ErrorKind::LengthMismatch, "records have sequence lengths " +
                                                       std::to_string(out.front()->sequence.size()) + " and " +
                                                       std::to_string(r->sequence.size()));
    return out;
}

// ---------------------------------------------------------------------------
// One-hot encoding over design positions

// Active feature index (position slot * 20 + residue) for each design position.
inline std::vector<int> onehot_indices(const Sequence& s, const std::vector<int>& positions) {
    std::vector<int> out(positions.size());
    for (std::size_t k = 0; k < positions.size(); ++k) {
        int p = positions[k];
        if (p < 0 || p >= static_cast<int>(s.size()))
            throw Error(ErrorKind::LengthMismatch, "design position " + std::to_string(p) + " outside sequence of length " +
                                                       std::to_string(s.size()));
        int a = aa_index(s[p]);
        if (a < 0) throw Error(ErrorKind::UnknownResidue, std::string("letter '") + s[p] + "'");
        out[k] = static_cast<int>(k) * kNumAminoAcids + a;
    }
    return out;
}

inline Eigen::MatrixXd onehot_matrix(const std::vector<const AssayRecord*>& recs, const std::vector<int>& positions) {
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(recs.size()),
                                              static_cast<Eigen::Index>(positions.size()) * kNumAminoAcids);
    for (std::size_t i = 0; i < recs.size(); ++i)
        for (int f : onehot_indices(recs[i]->sequence, positions)) x(static_cast<Eigen::Index>(i), f) = 1.0;
    return x;
}

// ---------------------------------------------------------------------------
// Ridge oracle

inline constexpr double kDefaultRidgeLambda = 1.0;
inline const std::vector<double>& ridge_lambda_grid() {
    static const std::vector<double> grid{0.01, 0.1, 1.0, 10.0};
    return grid;
}

class RidgeOracle {
public:
    std::vector<int> positions;
    Eigen::VectorXd weights;  // positions.size() * 20
    double bias = 0.0;
    double lambda = kDefaultRidgeLambda;
    double train_mse = 0.0;
    std::uint64_t data_hash = 0;

    std::size_t weight_count() const { return static_cast<std::size_t>(weights.size()) + 1; }

    double operator()(const Sequence& s) const {
        double v = bias;
        for (int f : onehot_indices(s, positions)) v += weights[f];
        return v;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["schema_version"] = kOracleSchemaVersion;
        j["kind"] = "ridge";
        j["training_data_hash"] = hex64(data_hash);
        j["lambda"] = lambda;
        j["train_mse"] = train_mse;
        j["positions"] = positions;
        j["bias"] = bias;
        j["weights"] = std::vector<double>(weights.data(), weights.data() + weights.size());
        return j;
    }

    static RidgeOracle from_json(const nlohmann::json& j) {
        try {
            if (j.at("schema_version").get<int>() != kOracleSchemaVersion)
                throw Error(ErrorKind::VersionMismatch, "oracle schema " + j.at("schema_version").dump());
            if (j.at("kind").get<std::string>() != "ridge") throw Error(ErrorKind::CorruptFile, "not a ridge snapshot");
            RidgeOracle o;
            o.positions = j.at("positions").get<std::vector<int>>();
            o.bias = j.at("bias").get<double>();
            o.lambda = j.at("lambda").get<double>();
            o.train_mse = j.at("train_mse").get<double>();
            o.data_hash = std::stoull(j.at("training_data_hash").get<std::string>(), nullptr, 16);
            auto w = j.at("weights").get<std::vector<double>>();
            if (w.size() != o.positions.size() * kNumAminoAcids)
                throw Error(ErrorKind::CorruptFile, "ridge weight count does not match positions");
            o.weights = Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
            return o;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::CorruptFile, e.what());
        }
    }
};

namespace detail {

// Ridge with an unpenalized intercept: centre, then solve in whichever of the
// primal or dual forms is smaller.
inline std::pair<Eigen::VectorXd, double> ridge_solve(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
    Eigen::RowVectorXd xm = x.colwise().mean();
    double ym = y.mean();
    Eigen::MatrixXd xc = x.rowwise() - xm;
    Eigen::VectorXd yc = y.array() - ym;
    Eigen::VectorXd w;
    if (xc.rows() < xc.cols()) {
        Eigen::MatrixXd k = xc * xc.transpose();
        k.diagonal().array() += lambda;
        w = xc.transpose() * k.ldlt().solve(yc);
    } else {
        Eigen::MatrixXd a = xc.transpose() * xc;
        a.diagonal().array() += lambda;
        w = a.ldlt().solve(xc.transpose() * yc);
    }
    return {w, ym - xm.dot(w)};
}

}  // namespace detail

inline RidgeOracle train_ridge(const std::vector<AssayRecord>& records, const std::vector<int>& positions,
                               double lambda = kDefaultRidgeLambda) {
    if (!(lambda >= 0.0)) throw Error(ErrorKind::InvalidRange, "ridge lambda must be >= 0");
    auto recs = usable_records(records, AssayType::Affinity);
    std::set<Sequence> distinct;
    for (const auto* r : recs) distinct.insert(r->sequence);
    if (distinct.size() < 2)
        throw Error(ErrorKind::InsufficientData, "ridge needs >= 2 distinct measured sequences, have " +
                                                     std::to_string(distinct.size()));
    Eigen::MatrixXd x = onehot_matrix(recs, positions);
    Eigen::VectorXd y(static_cast<Eigen::Index>(recs.size()));
    for (std::size_t i = 0; i < recs.size(); ++i) y[static_cast<Eigen::Index>(i)] = *recs[i]->measured_value;

    RidgeOracle o;
    o.positions = positions;
    o.lambda = lambda;
    std::tie(o.weights, o.bias) = detail::ridge_solve(x, y, lambda);
    o.train_mse = ((x * o.weights).array() + o.bias - y.array()).square().mean();
    o.data_hash = hash_records(records);
    return o;
}

// Picks lambda by 5-fold cross-validation over the grid when there are at
// least 50 measured records; otherwise uses the default.
inline double select_ridge_lambda(const std::vector<AssayRecord>& records, const std::vector<int>& positions) {
    auto recs = usable_records(records, AssayType::Affinity);
    if (recs.size() < 50) return kDefaultRidgeLambda;
    Eigen::MatrixXd x = onehot_matrix(recs, positions);
    Eigen::VectorXd y(static_cast<Eigen::Index>(recs.size()));
    for (std::size_t i = 0; i < recs.size(); ++i) y[static_cast<Eigen::Index>(i)] = *recs[i]->measured_value;

    constexpr int kFolds = 5;
    const auto n = x.rows();
    double best_lambda = kDefaultRidgeLambda, best_err = std::numeric_limits<double>::infinity();
    for (double lambda : ridge_lambda_grid()) {
        double err = 0.0;
        for (int fold = 0; fold < kFolds; ++fold) {
            std::vector<Eigen::Index> train, test;
            for (Eigen::Index i = 0; i < n; ++i) (i % kFolds == fold ? test : train).push_back(i);
            auto [w, b] = detail::ridge_solve(x(train, Eigen::all), y(train), lambda);
            err += ((x(test, Eigen::all) * w).array() + b - y(test).array()).square().sum();
        }
        if (err < best_err) {
            best_err = err;
            best_lambda = lambda;
        }
    }
    return best_lambda;
}

inline RidgeOracle train_ridge_cv(const std::vector<AssayRecord>& records, const std::vector<int>& positions) {
    return train_ridge(records, positions, select_ridge_lambda(records, positions));
}

// ---------------------------------------------------------------------------
// Ensemble oracle: k two-layer tanh networks on the one-hot design positions

struct EnsembleConfig {
    int members = 10;
    int hidden = 32;
    int epochs = 300;
    double learning_rate = 0.01;
    double weight_decay = 1e-3;
};

struct MlpMember {
    Eigen::MatrixXd w1;  // features x hidden
    Eigen::VectorXd b1;
    Eigen::VectorXd w2;
    double b2 = 0.0;

    double forward(const std::vector<int>& active) const {
        Eigen::VectorXd h = b1;
        for (int f : active) h += w1.row(f).transpose();
        return w2.dot(h.array().tanh().matrix()) + b2;
    }
};

class EnsembleOracle {
public:
    std::vector<int> positions;
    std::vector<MlpMember> members;
    double y_mean = 0.0, y_scale = 1.0;
    std::uint64_t data_hash = 0;

    std::vector<double> member_predictions(const Sequence& s) const {
        auto active = onehot_indices(s, positions);
        std::vector<double> out;
        out.reserve(members.size());
        for (const auto& m : members) out.push_back(y_mean + y_scale * m.forward(active));
        return out;
    }

    double operator()(const Sequence& s) const {
        auto p = member_predictions(s);
        return std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
    }

    // Population standard deviation across members.
    double spread(const Sequence& s) const {
        auto p = member_predictions(s);
        double mean = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
        double ss = 0.0;
        for (double v : p) ss += (v - mean) * (v - mean);
        return std::sqrt(ss / static_cast<double>(p.size()));
    }

    nlohmann::ordered_json to_json() const {
        auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
        nlohmann::ordered_json j;
        j["schema_version"] = kOracleSchemaVersion;
        j["kind"] = "ensemble";
        j["training_data_hash"] = hex64(data_hash);
        j["positions"] = positions;
        j["y_mean"] = y_mean;
        j["y_scale"] = y_scale;
        j["members"] = nlohmann::ordered_json::array();
        for (const auto& m : members) {
            nlohmann::ordered_json mj;
            mj["hidden"] = m.b1.size();
            Eigen::VectorXd w1 = Eigen::Map<const Eigen::VectorXd>(m.w1.data(), m.w1.size());
            mj["w1"] = vec(w1);
            mj["b1"] = vec(m.b1);
            mj["w2"] = vec(m.w2);
            mj["b2"] = m.b2;
            j["members"].push_back(mj);
        }
        return j;
    }

    static EnsembleOracle from_json(const nlohmann::json& j) {
        try {
            if (j.at("schema_version").get<int>() != kOracleSchemaVersion)
                throw Error(ErrorKind::VersionMismatch, "oracle schema " + j.at("schema_version").dump());
            if (j.at("kind").get<std::string>() != "ensemble")
                throw Error(ErrorKind::CorruptFile, "not an ensemble snapshot");
            EnsembleOracle o;
            o.positions = j.at("positions").get<std::vector<int>>();
            o.y_mean = j.at("y_mean").get<double>();
            o.y_scale = j.at("y_scale").get<double>();
            o.data_hash = std::stoull(j.at("training_data_hash").get<std::string>(), nullptr, 16);
            const auto features = static_cast<Eigen::Index>(o.positions.size() * kNumAminoAcids);
            auto load = [](const nlohmann::json& a) {
                auto v = a.get<std::vector<double>>();
                return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
            };
            for (const auto& mj : j.at("members")) {
                MlpMember m;
                auto hidden = mj.at("hidden").get<Eigen::Index>();
                Eigen::VectorXd w1 = load(mj.at("w1"));
                m.b1 = load(mj.at("b1"));
                m.w2 = load(mj.at("w2"));
                if (w1.size() != features * hidden || m.b1.size() != hidden || m.w2.size() != hidden)
                    throw Error(ErrorKind::CorruptFile, "ensemble member shape mismatch");
                m.w1 = Eigen::Map<Eigen::MatrixXd>(w1.data(), features, hidden);
                m.b2 = mj.at("b2").get<double>();
                o.members.push_back(std::move(m));
            }
            if (o.members.size() < 2) throw Error(ErrorKind::CorruptFile, "ensemble needs >= 2 members");
            return o;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::CorruptFile, e.what());
        }
    }
};

namespace detail {

// Full-batch Adam on mean squared error against standardized targets.
inline MlpMember train_member(const std::vector<std::vector<int>>& xs, const Eigen::VectorXd& y, int features,
                              const EnsembleConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const int h = cfg.hidden;
    const double active = xs.empty() ? 1.0 : static_cast<double>(xs.front().size());
    MlpMember m;
    m.w1.resize(features, h);
    for (Eigen::Index i = 0; i < m.w1.size(); ++i) m.w1.data()[i] = standard_normal(rng) / std::sqrt(active);
    m.b1 = Eigen::VectorXd::Zero(h);
    m.w2.resize(h);
    for (int i = 0; i < h; ++i) m.w2[i] = standard_normal(rng) / std::sqrt(static_cast<double>(h));

    struct Moments {
        Eigen::MatrixXd w1;
        Eigen::VectorXd b1, w2;
        double b2 = 0.0;
    };
    Moments mom{Eigen::MatrixXd::Zero(features, h), Eigen::VectorXd::Zero(h), Eigen::VectorXd::Zero(h)};
    Moments vel = mom;
    constexpr double b1c = 0.9, b2c = 0.999, eps = 1e-8;
    const double n = static_cast<double>(xs.size());

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Eigen::MatrixXd gw1 = cfg.weight_decay * m.w1;
        Eigen::VectorXd gb1 = Eigen::VectorXd::Zero(h);
        Eigen::VectorXd gw2 = cfg.weight_decay * m.w2;
        double gb2 = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            Eigen::VectorXd pre = m.b1;
            for (int f : xs[i]) pre += m.w1.row(f).transpose();
            Eigen::VectorXd act = pre.array().tanh();
            double err = 2.0 * (m.w2.dot(act) + m.b2 - y[static_cast<Eigen::Index>(i)]) / n;
            gw2 += err * act;
            gb2 += err;
            Eigen::VectorXd gpre = err * m.w2.array() * (1.0 - act.array().square());
            gb1 += gpre;
            for (int f : xs[i]) gw1.row(f) += gpre.transpose();
        }
        const double c1 = 1.0 - std::pow(b1c, epoch), c2 = 1.0 - std::pow(b2c, epoch);
        auto adam = [&](auto& param, auto& g, auto& mo, auto& ve) {
            mo = b1c * mo + (1.0 - b1c) * g;
            ve = b2c * ve + (1.0 - b2c) * g.cwiseProduct(g);
            param.array() -= cfg.learning_rate * (mo.array() / c1) / ((ve.array() / c2).sqrt() + eps);
        };
        adam(m.w1, gw1, mom.w1, vel.w1);
        adam(m.b1, gb1, mom.b1, vel.b1);
        adam(m.w2, gw2, mom.w2, vel.w2);
        mom.b2 = b1c * mom.b2 + (1.0 - b1c) * gb2;
        vel.b2 = b2c * vel.b2 + (1.0 - b2c) * gb2 * gb2;
        m.b2 -= cfg.learning_rate * (mom.b2 / c1) / (std::sqrt(vel.b2 / c2) + eps);
    }
    return m;
}

}  // namespace detail

inline EnsembleOracle train_ensemble(const std::vector<AssayRecord>& records, const std::vector<int>& positions,
                                     const EnsembleConfig& cfg, const std::vector<std::uint64_t>& member_seeds) {
    if (member_seeds.size() < 2) throw Error(ErrorKind::InvalidRange, "ensemble needs >= 2 members");
    if (cfg.hidden < 1 || cfg.epochs < 0) throw Error(ErrorKind::InvalidRange, "ensemble hidden/epochs out of range");
    auto recs = usable_records(records, AssayType::Affinity);
    if (recs.size() < 20)
        throw Error(ErrorKind::InsufficientData, "ensemble needs >= 20 measured records, have " + std::to_string(recs.size()));

    EnsembleOracle o;
    o.positions = positions;
    o.data_hash = hash_records(records);
    std::vector<std::vector<int>> xs;
    Eigen::VectorXd y(static_cast<Eigen::Index>(recs.size()));
    for (std::size_t i = 0; i < recs.size(); ++i) {
        xs.push_back(onehot_indices(recs[i]->sequence, positions));
        y[static_cast<Eigen::Index>(i)] = *recs[i]->measured_value;
    }
    o.y_mean = y.mean();
    double sd = std::sqrt((y.array() - o.y_mean).square().mean());
    o.y_scale = sd > 1e-12 ? sd : 1.0;
    Eigen::VectorXd ys = (y.array() - o.y_mean) / o.y_scale;
    const int features = static_cast<int>(positions.size()) * kNumAminoAcids;
    for (auto s : member_seeds) o.members.push_back(detail::train_member(xs, ys, features, cfg, s));
    return o;
}

inline EnsembleOracle train_ensemble(const std::vector<AssayRecord>& records, const std::vector<int>& positions,
                                     const EnsembleConfig& cfg, std::uint64_t seed) {
    if (cfg.members < 2) throw Error(ErrorKind::InvalidRange, "ensemble needs >= 2 members");
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < cfg.members; ++i) seeds.push_back(derive_seed(seed, static_cast<std::uint64_t>(i)));
    return train_ensemble(records, positions, cfg, seeds);
}

// ---------------------------------------------------------------------------
// Liability

inline constexpr std::string_view kHydrophobic = "FILMVW";
inline constexpr std::string_view kAromatic = "FWY";

struct LiabilityFeatures {
    double net_charge = 0.0;      // K, R +1; D, E -1; H +0.1
    int hydrophobic_patches = 0;  // maximal runs of >= 2 adjacent hydrophobic design residues
    double aromatic_fraction = 0.0;

    std::array<double, 3> as_array() const {
        return {net_charge, static_cast<double>(hydrophobic_patches), aromatic_fraction};
    }
};

inline double residue_charge(char c) {
    switch (c) {
        case 'K':
        case 'R': return 1.0;
        case 'D':
        case 'E': return -1.0;
        case 'H': return 0.1;
        default: return 0.0;
    }
}

inline LiabilityFeatures liability_features(const Sequence& s, const std::vector<int>& positions) {
    onehot_indices(s, positions);  // validates
    LiabilityFeatures f;
    int run = 0, aromatic = 0;
    for (std::size_t k = 0; k < positions.size(); ++k) {
        char c = s[positions[k]];
        f.net_charge += residue_charge(c);
        if (kAromatic.find(c) != std::string_view::npos) ++aromatic;
        bool contiguous = k > 0 && positions[k] == positions[k - 1] + 1;
        if (kHydrophobic.find(c) != std::string_view::npos) {
            run = contiguous ? run + 1 : 1;
            if (run == 2) ++f.hydrophobic_patches;
        } else {
            run = 0;
        }
    }
    if (!positions.empty()) f.aromatic_fraction = static_cast<double>(aromatic) / static_cast<double>(positions.size());
    return f;
}

// Fixed-weight score; higher means more liability.
inline double liability_score(const Sequence& s, const std::vector<int>& positions) {
    auto f = liability_features(s, positions);
    return 0.25 * std::abs(f.net_charge) + 1.0 * f.hydrophobic_patches + 2.0 * f.aromatic_fraction;
}

struct ForestConfig {
    int trees = 50;
    int max_depth = 6;
    int min_leaf = 3;
};

// Bagged regression trees with random feature choice per split.
class RegressionForest {
public:
    struct Node {
        int feature = -1;  // -1 marks a leaf
        double threshold = 0.0;
        double value = 0.0;
        int left = -1, right = -1;
    };
    using Tree = std::vector<Node>;

    std::vector<Tree> trees;

    double predict(const std::vector<double>& x) const {
        if (trees.empty()) throw Error(ErrorKind::InsufficientData, "forest has no trees");
        double total = 0.0;
        for (const auto& t : trees) {
            int n = 0;
            while (t[n].feature >= 0) n = x[t[n].feature] <= t[n].threshold ? t[n].left : t[n].right;
            total += t[n].value;
        }
        return total / static_cast<double>(trees.size());
    }

    static RegressionForest fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                                const ForestConfig& cfg, std::uint64_t seed) {
        if (x.size() != y.size() || x.empty()) throw Error(ErrorKind::InsufficientData, "forest needs matching nonempty data");
        RegressionForest f;
        const std::size_t n = x.size();
        const int dims = static_cast<int>(x.front().size());
        for (int t = 0; t < cfg.trees; ++t) {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            std::vector<std::size_t> rows(n);
            for (auto& r : rows) r = pick(rng);
            Tree tree;
            grow(tree, x, y, rows, 0, cfg, dims, rng);
            f.trees.push_back(std::move(tree));
        }
        return f;
    }

private:
    static int grow(Tree& tree, const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                    std::vector<std::size_t> rows, int depth, const ForestConfig& cfg, int dims, Rng& rng) {
        double mean = 0.0;
        for (auto r : rows) mean += y[r];
        mean /= static_cast<double>(rows.size());
        int id = static_cast<int>(tree.size());
        tree.push_back({-1, 0.0, mean, -1, -1});
        if (depth >= cfg.max_depth || static_cast<int>(rows.size()) < 2 * cfg.min_leaf) return id;

        // Try each feature in a random order; keep the best variance reduction.
        std::vector<int> order(static_cast<std::size_t>(dims));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        int mtry = std::max(1, dims / 3 + 1);
        double best_sse = std::numeric_limits<double>::infinity();
        int best_feature = -1;
        double best_threshold = 0.0;
        for (int k = 0; k < mtry; ++k) {
            int feat = order[static_cast<std::size_t>(k)];
            std::vector<std::size_t> sorted = rows;
            std::stable_sort(sorted.begin(), sorted.end(), [&](auto a, auto b) { return x[a][feat] < x[b][feat]; });
            double total = 0.0, total_sq = 0.0;
            for (auto r : sorted) {
                total += y[r];
                total_sq += y[r] * y[r];
            }
            double left = 0.0, left_sq = 0.0;
            const std::size_t m = sorted.size();
            for (std::size_t i = 0; i + 1 < m; ++i) {
                left += y[sorted[i]];
                left_sq += y[sorted[i]] * y[sorted[i]];
                std::size_t nl = i + 1, nr = m - nl;
                if (static_cast<int>(nl) < cfg.min_leaf || static_cast<int>(nr) < cfg.min_leaf) continue;
                double a = x[sorted[i]][feat], b = x[sorted[i + 1]][feat];
                if (a == b) continue;
                double sse = (left_sq - left * left / nl) + (total_sq - left_sq - (total - left) * (total - left) / nr);
                if (sse < best_sse) {
                    best_sse = sse;
                    best_feature = feat;
                    best_threshold = 0.5 * (a + b);
                }
            }
        }
        if (best_feature < 0) return id;
        std::vector<std::size_t> lrows, rrows;
        for (auto r : rows) (x[r][best_feature] <= best_threshold ? lrows : rrows).push_back(r);
        tree[id].feature = best_feature;
        tree[id].threshold = best_threshold;
        int l = grow(tree, x, y, std::move(lrows), depth + 1, cfg, dims, rng);
        int r = grow(tree, x, y, std::move(rrows), depth + 1, cfg, dims, rng);
        tree[id].left = l;
        tree[id].right = r;
        return id;
    }
};

// Trainable liability oracle over the descriptor vector.
class LiabilityForest {
public:
    std::vector<int> positions;
    RegressionForest forest;

    double operator()(const Sequence& s) const {
        auto f = liability_features(s, positions).as_array();
        return forest.predict({f.begin(), f.end()});
    }
};

inline LiabilityForest train_liability_forest(const std::vector<AssayRecord>& records, const std::vector<int>& positions,
                                              const ForestConfig& cfg = {}, std::uint64_t seed = 0) {
    auto recs = usable_records(records, AssayType::Liability);
    if (recs.size() < 2) throw Error(ErrorKind::InsufficientData, "liability forest needs >= 2 measured records");
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (const auto* r : recs) {
        auto f = liability_features(r->sequence, positions).as_array();
        x.emplace_back(f.begin(), f.end());
        y.push_back(*r->measured_value);
    }
    return {positions, RegressionForest::fit(x, y, cfg, seed)};
}

// ---------------------------------------------------------------------------
// Synthetic landscape

struct LandscapeConfig {
    double rule_weight = 1.0;       // scale of the structure-rule log-probability term
    double noise_weight = 0.5;      // scale of the idiosyncratic per-residue term
    int epistatic_pairs = 10;
    double epistasis_scale = 0.3;
    double sigma_meas = 0.1;
    double fail_base = 0.05;
    double fail_per_edit = 0.02;
    double fail_cap = 0.5;
    std::uint64_t seed = 0;
};

// Hidden ground truth for the simulated lab. Scores are log-fold changes
// relative to the starting antibody and are only observable through assay().
class SyntheticLandscape {
public:
    SyntheticLandscape(const Complex& start, const LandscapeConfig& cfg)
        : cfg_(cfg), reference_(start.antibody_sequence()), positions_(start.design_positions()) {
        if (positions_.empty()) throw Error(ErrorKind::EmptyMask, "landscape needs design positions");
        Rng rng(derive_seed(cfg.seed, 0x1a2d));
        auto contact = synth::contact_flags(start);
        for (int m : start.mask) {
            auto p = synth::cdr_type_distribution(contact[m], synth::is_segment_start(start, m));
            std::array<double, kNumAminoAcids> w;
            for (int r = 0; r < kNumAminoAcids; ++r)
                w[r] = cfg.rule_weight * std::log(p[r]) + cfg.noise_weight * standard_normal(rng);
            linear_.push_back(w);
        }
        const int n = static_cast<int>(positions_.size());
        if (n >= 2) {
            std::uniform_int_distribution<int> pick(0, n - 1);
            for (int e = 0; e < cfg.epistatic_pairs; ++e) {
                Pair pr;
                pr.a = pick(rng);
                do pr.b = pick(rng);
                while (pr.b == pr.a);
                for (auto& row : pr.table)
                    for (auto& v : row) v = cfg.epistasis_scale * standard_normal(rng);
                pairs_.push_back(pr);
            }
        }
        baseline_ = raw_score(reference_);
    }

    const Sequence& reference() const { return reference_; }
    const std::vector<int>& positions() const { return positions_; }
    const LandscapeConfig& config() const { return cfg_; }

    double p_fail(int edits) const { return std::min(cfg_.fail_base + cfg_.fail_per_edit * edits, cfg_.fail_cap); }

    // Per sequence: one uniform draw for synthesis, one normal draw for noise.
    std::vector<AssayRecord> assay(const std::vector<Sequence>& sequences, Rng& rng, int round_id = 0) const {
        std::vector<AssayRecord> out;
        out.reserve(sequences.size());
        for (const auto& s : sequences) {
            double truth = raw_score(s) - baseline_;
            int edits = edit_distance(s, reference_, positions_);
            double u = uniform01(rng);
            double z = standard_normal(rng);
            AssayRecord r;
            r.sequence = s;
            r.round_id = round_id;
            r.assay_type = AssayType::Affinity;
            r.synthesized = u >= p_fail(edits);
            if (r.synthesized) r.measured_value = truth + cfg_.sigma_meas * z;
            out.push_back(std::move(r));
        }
        return out;
    }

    // Same landscape with different lab characteristics.
    SyntheticLandscape with_assay(double sigma_meas, double fail_base, double fail_per_edit,
                                  std::optional<double> fail_cap = std::nullopt) const {
        SyntheticLandscape copy = *this;
        if (fail_cap) copy.cfg_.fail_cap = *fail_cap;
        copy.cfg_.sigma_meas = sigma_meas;
        copy.cfg_.fail_base = fail_base;
        copy.cfg_.fail_per_edit = fail_per_edit;
        return copy;
    }

private:
    struct Pair {
        int a = 0, b = 0;
        std::array<std::array<double, kNumAminoAcids>, kNumAminoAcids> table{};
    };

    double raw_score(const Sequence& s) const {
        if (s.size() != reference_.size())
            throw Error(ErrorKind::LengthMismatch, "assay sequence length " + std::to_string(s.size()) + " != " +
                                                       std::to_string(reference_.size()));
        auto idx = onehot_indices(s, positions_);
        double v = 0.0;
        for (std::size_t k = 0; k < idx.size(); ++k) v += linear_[k][idx[k] % kNumAminoAcids];
        for (const auto& p : pairs_)
            v += p.table[idx[p.a] % kNumAminoAcids][idx[p.b] % kNumAminoAcids];
        return v;
    }

    LandscapeConfig cfg_;
    Sequence reference_;
    std::vector<int> positions_;
    std::vector<std::array<double, kNumAminoAcids>> linear_;
    std::vector<Pair> pairs_;
    double baseline_ = 0.0;
};

// ---------------------------------------------------------------------------
// Ranking

struct RankedCandidate {
    int index = 0;  // position in the input (provenance order)
    double score = 0.0;
    int edit_distance = 0;
};

// Descending score; ties by lower edit distance, then input order.
inline std::vector<RankedCandidate> rank_sequences(const Oracle& oracle, const std::vector<Sequence>& sequences,
                                                   const std::vector<int>& edit_distances, int top_k) {
    if (top_k < 1) throw Error(ErrorKind::InvalidRange, "top_k must be >= 1");
    if (edit_distances.size() != sequences.size())
        throw Error(ErrorKind::ShapeMismatch, "one edit distance per sequence required");
    std::vector<RankedCandidate> all;
    all.reserve(sequences.size());
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        double s = oracle(sequences[i]);
        if (!std::isfinite(s)) throw Error(ErrorKind::OracleFailure, "non-finite score for candidate " + std::to_string(i));
        all.push_back({static_cast<int>(i), s, edit_distances[i]});
    }
    std::sort(all.begin(), all.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.edit_distance != b.edit_distance) return a.edit_distance < b.edit_distance;
        return a.index < b.index;
    });
    all.resize(std::min(all.size(), static_cast<std::size_t>(top_k)));
    return all;
}

inline std::vector<RankedCandidate> rank_candidates(const Oracle& oracle, const std::vector<DesignCandidate>& cands,
                                                    int top_k) {
    std::vector<Sequence> seqs;
    std::vector<int> edits;
    for (const auto& c : cands) {
        seqs.push_back(c.antibody_sequence());
        edits.push_back(c.edit_distance);
    }
    return rank_sequences(oracle, seqs, edits, top_k);
}

}  // namespace abloop
