#pragma once
// Three-headed denoising network over noised complexes.
//
// Invariant message passing on a residue graph (k nearest C-alphas plus
// sequence neighbours). Edge features are distances, directions expressed
// in the receiving residue's frame and relative orientations, so hidden
// states are invariant to rigid motions. Heads:
//   type   -> 20 logits
//   pos    -> 3-vector offset in the residue's own frame (whitened units)
//   orient -> 6 reals, Gram-Schmidt projected, composed onto the frame

#include "abloop/autograd.hpp"
#include "abloop/core.hpp"
#include "abloop/diffusion.hpp"
#include "abloop/so3.hpp"
#include "abloop/structio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace abloop {

using ad::Matrix;

struct ModelConfig {
    int hidden = 64;
    int layers = 4;
    int steps = 100;  // diffusion T the model is conditioned on
    int neighbors = 16;

    bool operator==(const ModelConfig&) const = default;
};

namespace feat {

inline constexpr int kTokens = kNumAminoAcids + 1;  // last row: mask token
inline constexpr int kOffsetBins = 8;
inline constexpr int kTimeFeatures = 9;
inline constexpr int kNode = kNumRegions + 2 * kOffsetBins + kTimeFeatures + 1;
inline constexpr int kRbf = 16;
inline constexpr double kRbfStep = 1.5;
inline constexpr int kSeqBins = 7;  // offsets -3..3 without 0, plus "far"
inline constexpr int kEdge = kRbf + 3 + 9 + kSeqBins + 1;
inline constexpr int kSeqNeighbors = 2;

}  // namespace feat

// ---------------------------------------------------------------------------
// Parameters

struct DenoiserParams {
    ModelConfig config;
    std::vector<Matrix> tensors;
    std::vector<std::string> names;
    std::uint64_t manifest_hash = 0;

    static constexpr int kPerLayer = 8;
    enum Global { TypeEmb = 0, NodeW, NodeB, kGlobal };
    enum Layer { MsgA = 0, MsgB, MsgE, MsgBias, UpdW1, UpdB1, UpdW2, UpdB2 };
    enum Head { TypeW1 = 0, TypeB1, TypeW2, TypeB2, PosW, PosB, RotW, RotB, kHeads };

    int layer_index(int layer, Layer which) const { return kGlobal + kPerLayer * layer + which; }
    int head_index(Head which) const { return kGlobal + kPerLayer * config.layers + which; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
        return n;
    }

    bool all_finite() const {
        return std::all_of(tensors.begin(), tensors.end(), [](const Matrix& m) { return m.allFinite(); });
    }

    std::uint64_t hash() const {
        Hasher h;
        h.pod(config.hidden).pod(config.layers).pod(config.steps).pod(config.neighbors);
        for (const auto& t : tensors) h.bytes(t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
        return h.value();
    }

    static DenoiserParams init(const ModelConfig& cfg, std::uint64_t seed) {
        if (cfg.hidden < 1 || cfg.layers < 1 || cfg.steps < 1 || cfg.neighbors < 1)
            throw Error(ErrorKind::InvalidRange, "model dimensions must be positive");
        DenoiserParams p;
        p.config = cfg;
        Rng rng(seed);
        const int d = cfg.hidden;
        auto add = [&](std::string name, int rows, int cols, double scale) {
            Matrix m(rows, cols);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * standard_normal(rng);
            p.tensors.push_back(std::move(m));
            p.names.push_back(std::move(name));
        };
        auto glorot = [](int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

        add("type_emb", feat::kTokens, d, 1.0);
        add("node_in.w", feat::kNode, d, glorot(feat::kNode));
        add("node_in.b", 1, d, 0.0);
        for (int l = 0; l < cfg.layers; ++l) {
            std::string pre = "layer" + std::to_string(l) + ".";
            add(pre + "msg_a", d, d, glorot(3 * d));
            add(pre + "msg_b", d, d, glorot(3 * d));
            add(pre + "msg_e", feat::kEdge, d, glorot(feat::kEdge));
            add(pre + "msg_bias", 1, d, 0.0);
            add(pre + "upd_w1", 2 * d, d, glorot(2 * d));
            add(pre + "upd_b1", 1, d, 0.0);
            add(pre + "upd_w2", d, d, 0.5 * glorot(d));
            add(pre + "upd_b2", 1, d, 0.0);
        }
        add("head_type.w1", d, d, glorot(d));
        add("head_type.b1", 1, d, 0.0);
        add("head_type.w2", d, kNumAminoAcids, glorot(d));
        add("head_type.b2", 1, kNumAminoAcids, 0.0);
        add("head_pos.w", d, 3, 0.01 * glorot(d));
        add("head_pos.b", 1, 3, 0.0);
        add("head_rot.w", d, 6, 0.01 * glorot(d));
        add("head_rot.b", 1, 6, 0.0);
        p.tensors.back() << 1.0, 0.0, 0.0, 0.0, 1.0, 0.0;
        return p;
    }
};

// ---------------------------------------------------------------------------
// Graph inputs

struct GraphInputs {
    Matrix tokens;      // N x kTokens, one-hot type; mask rows use the unknown token
    Matrix node_feats;  // N x kNode
    Matrix edge_feats;  // E x kEdge
    std::vector<int> src, dst;
    std::vector<int> mask;
};

namespace detail {

inline std::vector<double> time_features(int t, int steps) {
    double x = static_cast<double>(t) / steps;
    std::vector<double> f{x};
    for (int k = 1; k <= 4; ++k) {
        f.push_back(std::sin(k * so3::kPi * x));
        f.push_back(std::cos(k * so3::kPi * x));
    }
    return f;
}

// Offset of residue i from the start and end of its contiguous CDR segment.
inline std::pair<int, int> segment_offsets(const Complex& c, int i) {
    const auto& r = c.residues[i];
    int start = i, end = i;
    auto same = [&](int j) {
        return c.residues[j].region == r.region && c.residues[j].chain == r.chain;
    };
    while (start > 0 && same(start - 1)) --start;
    while (end + 1 < static_cast<int>(c.size()) && same(end + 1)) ++end;
    return {i - start, end - i};
}

}  // namespace detail

inline GraphInputs build_graph_inputs(const NoisedComplex& noised, const ModelConfig& cfg) {
    const Complex& c = noised.complex;
    const int n = static_cast<int>(c.size());
    GraphInputs g;
    g.mask = c.mask;
    g.tokens = Matrix::Zero(n, feat::kTokens);
    g.node_feats = Matrix::Zero(n, feat::kNode);
    auto tf = detail::time_features(noised.t, cfg.steps);
    for (int i = 0; i < n; ++i) {
        const auto& r = c.residues[i];
        bool masked = c.is_masked(i);
        g.tokens(i, masked ? kNumAminoAcids : r.type) = 1.0;
        int col = 0;
        g.node_feats(i, col + static_cast<int>(r.region)) = 1.0;
        col += kNumRegions;
        if (is_cdr(r.region)) {
            auto [from_start, to_end] = detail::segment_offsets(c, i);
            g.node_feats(i, col + std::min(from_start, feat::kOffsetBins - 1)) = 1.0;
            g.node_feats(i, col + feat::kOffsetBins + std::min(to_end, feat::kOffsetBins - 1)) = 1.0;
        }
        col += 2 * feat::kOffsetBins;
        for (double v : tf) g.node_feats(i, col++) = v;
        g.node_feats(i, col) = masked ? 1.0 : 0.0;
    }

    // Edge list: k nearest by C-alpha distance plus sequence neighbours
    // (same chain, residue numbers within kSeqNeighbors).
    const int k = std::min(cfg.neighbors, n - 1);
    std::map<std::pair<char, int>, int> by_number;
    for (int i = 0; i < n; ++i) by_number.emplace(std::pair{c.residues[i].chain, c.residues[i].seq_index}, i);
    std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::vector<int> nbrs;
        for (int j = 0; j < n; ++j) dist[j] = {j == i ? -1.0 : (c.residues[j].ca - c.residues[i].ca).squaredNorm(), j};
        std::partial_sort(dist.begin(), dist.begin() + k + 1, dist.end());
        for (int q = 1; q <= k; ++q) nbrs.push_back(dist[q].second);
        for (int off = -feat::kSeqNeighbors; off <= feat::kSeqNeighbors; ++off) {
            auto it = by_number.find({c.residues[i].chain, c.residues[i].seq_index + off});
            if (off == 0 || it == by_number.end()) continue;
            nbrs.push_back(it->second);
        }
        std::sort(nbrs.begin(), nbrs.end());
        nbrs.erase(std::unique(nbrs.begin(), nbrs.end()), nbrs.end());
        for (int j : nbrs) {
            g.dst.push_back(i);
            g.src.push_back(j);
        }
    }

    const auto e = static_cast<Eigen::Index>(g.src.size());
    g.edge_feats = Matrix::Zero(e, feat::kEdge);
    for (Eigen::Index q = 0; q < e; ++q) {
        const auto& ri = c.residues[g.dst[q]];
        const auto& rj = c.residues[g.src[q]];
        Vec3 delta = rj.ca - ri.ca;
        double d = delta.norm();
        int col = 0;
        for (int b = 0; b < feat::kRbf; ++b) {
            double z = (d - b * feat::kRbfStep) / feat::kRbfStep;
            g.edge_feats(q, col++) = std::exp(-z * z);
        }
        Vec3 local = ri.orient.transpose() * delta / (d + 1e-6);
        for (int a = 0; a < 3; ++a) g.edge_feats(q, col++) = local[a];
        Mat3 rel = ri.orient.transpose() * rj.orient;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) g.edge_feats(q, col++) = rel(a, b);
        bool same_chain = ri.chain == rj.chain;
        int off = rj.seq_index - ri.seq_index;
        if (same_chain && off != 0 && std::abs(off) <= 3) g.edge_feats(q, col + (off < 0 ? off + 3 : off + 2)) = 1.0;
        else g.edge_feats(q, col + 6) = 1.0;
        col += feat::kSeqBins;
        g.edge_feats(q, col) = same_chain ? 1.0 : 0.0;
    }
    return g;
}

// ---------------------------------------------------------------------------
// Network

struct ForwardPass {
    ad::Tape tape;
    std::vector<ad::Var> params;
    ad::Var logits, pos_local, rot6;
};

inline void run_network(const DenoiserParams& p, const GraphInputs& g, ForwardPass& fp) {
    auto& t = fp.tape;
    fp.params.clear();
    for (const auto& m : p.tensors) fp.params.push_back(t.leaf(m));
    auto P = [&](int idx) { return fp.params[static_cast<std::size_t>(idx)]; };
    const int n = static_cast<int>(g.tokens.rows());

    ad::Var h = t.add(t.matmul(t.leaf(g.tokens), P(DenoiserParams::TypeEmb)),
                      t.add_row(t.matmul(t.leaf(g.node_feats), P(DenoiserParams::NodeW)), P(DenoiserParams::NodeB)));
    h = t.layer_norm(h);
    ad::Var edges = t.leaf(g.edge_feats);
    for (int l = 0; l < p.config.layers; ++l) {
        auto L = [&](DenoiserParams::Layer w) { return P(p.layer_index(l, w)); };
        ad::Var recv = t.gather_rows(t.matmul(h, L(DenoiserParams::MsgA)), g.dst);
        ad::Var send = t.gather_rows(t.matmul(h, L(DenoiserParams::MsgB)), g.src);
        ad::Var pre = t.add_row(t.add(t.add(recv, send), t.matmul(edges, L(DenoiserParams::MsgE))),
                                L(DenoiserParams::MsgBias));
        ad::Var agg = t.segment_mean(t.silu(pre), g.dst, n);
        ad::Var upd = t.silu(t.add_row(t.matmul(t.concat_cols(h, agg), L(DenoiserParams::UpdW1)), L(DenoiserParams::UpdB1)));
        upd = t.add_row(t.matmul(upd, L(DenoiserParams::UpdW2)), L(DenoiserParams::UpdB2));
        h = t.layer_norm(t.add(h, upd));
    }
    ad::Var hm = t.gather_rows(h, g.mask);
    auto H = [&](DenoiserParams::Head w) { return P(p.head_index(w)); };
    ad::Var th = t.silu(t.add_row(t.matmul(hm, H(DenoiserParams::TypeW1)), H(DenoiserParams::TypeB1)));
    fp.logits = t.add_row(t.matmul(th, H(DenoiserParams::TypeW2)), H(DenoiserParams::TypeB2));
    fp.pos_local = t.add_row(t.matmul(hm, H(DenoiserParams::PosW)), H(DenoiserParams::PosB));
    fp.rot6 = t.add_row(t.matmul(hm, H(DenoiserParams::RotW)), H(DenoiserParams::RotB));
}

// Gram-Schmidt projection of two 3-vectors to a rotation (columns e1, e2, e3).
inline so3::Rotation gram_schmidt6(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
    Vec3 a(v(0), v(1), v(2)), b(v(3), v(4), v(5));
    Vec3 e1 = a.normalized();
    Vec3 e2 = (b - e1.dot(b) * e1).normalized();
    Mat3 r;
    r.col(0) = e1;
    r.col(1) = e2;
    r.col(2) = e1.cross(e2);
    return r;
}

// Back-propagates dL/dR (3x3) through gram_schmidt6 to the 6 inputs.
inline Eigen::RowVectorXd gram_schmidt6_backward(const Eigen::Ref<const Eigen::RowVectorXd>& v, const Mat3& grad_r) {
    Vec3 a(v(0), v(1), v(2)), b(v(3), v(4), v(5));
    double na = a.norm();
    Vec3 e1 = a / na;
    Vec3 bp = b - e1.dot(b) * e1;
    double nbp = bp.norm();
    Vec3 e2 = bp / nbp;
    Vec3 g1 = grad_r.col(0), g2 = grad_r.col(1), g3 = grad_r.col(2);
    g1 += e2.cross(g3);
    g2 += g3.cross(e1);
    Vec3 gbp = (g2 - e2.dot(g2) * e2) / nbp;
    Vec3 gb = gbp - e1 * e1.dot(gbp);
    g1 += -e1.dot(gbp) * b - e1.dot(b) * gbp;
    Vec3 ga = (g1 - e1.dot(g1) * e1) / na;
    Eigen::RowVectorXd out(6);
    out << ga.x(), ga.y(), ga.z(), gb.x(), gb.y(), gb.z();
    return out;
}

inline TypeDist softmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& z) {
    TypeDist p;
    double mx = z.maxCoeff();
    double total = 0.0;
    for (int r = 0; r < kNumAminoAcids; ++r) {
        p[r] = std::exp(z(r) - mx);
        total += p[r];
    }
    for (auto& v : p) v /= total;
    return p;
}

// The type head predicts the clean residue c0 = softmax(logits); the reverse
// distribution is the posterior q(s^{t-1} | s^t, c0) mixed over c0.
inline TypeDist mixed_posterior(const TypeDist& c0, int st, double beta, double alpha_bar_prev) {
    constexpr double u = 1.0 / kNumAminoAcids;
    TypeDist p{};
    double total = 0.0;
    for (int r = 0; r < kNumAminoAcids; ++r) {
        double k = (1.0 - beta) * (r == st ? 1.0 : 0.0) + beta * u;
        double m = alpha_bar_prev * c0[r] + (1.0 - alpha_bar_prev) * u;
        p[r] = k * m;
        total += p[r];
    }
    for (auto& v : p) v /= total;
    return p;
}

struct TypeLossTerm {
    double loss = 0.0;
    TypeDist grad_c0{};  // d loss / d c0
};

// Type KL averaged in closed form over s^t ~ q(.|s^0). The network never sees
// s^t, so this equals the sampled loss with the s^t draw integrated out.
inline TypeLossTerm expected_type_kl(const TypeDist& c0, int s0, double beta, double alpha_bar_prev) {
    constexpr double u = 1.0 / kNumAminoAcids;
    const double ab = alpha_bar_prev * (1.0 - beta);
    TypeDist m{};
    for (int r = 0; r < kNumAminoAcids; ++r) m[r] = alpha_bar_prev * c0[r] + (1.0 - alpha_bar_prev) * u;
    TypeLossTerm out;
    for (int st = 0; st < kNumAminoAcids; ++st) {
        const double w = ab * (st == s0 ? 1.0 : 0.0) + (1.0 - ab) * u;
        TypeDist q{};
        double zq = 0.0;
        for (int r = 0; r < kNumAminoAcids; ++r) {
            double k = (1.0 - beta) * (r == st ? 1.0 : 0.0) + beta * u;
            q[r] = k * (alpha_bar_prev * (r == s0 ? 1.0 : 0.0) + (1.0 - alpha_bar_prev) * u);
            zq += q[r];
        }
        for (auto& v : q) v /= zq;
        const TypeDist p = mixed_posterior(c0, st, beta, alpha_bar_prev);
        out.loss += w * kl_divergence(q, p);
        for (int r = 0; r < kNumAminoAcids; ++r)
            if (m[r] > 0.0) out.grad_c0[r] += w * alpha_bar_prev * (p[r] - q[r]) / m[r];
    }
    return out;
}

inline DenoiserOutput decode_outputs(const ForwardPass& fp, const NoisedComplex& noised) {
    const auto& logits = fp.tape.value(fp.logits);
    const auto& pos = fp.tape.value(fp.pos_local);
    const auto& rot = fp.tape.value(fp.rot6);
    if (!logits.allFinite() || !pos.allFinite() || !rot.allFinite())
        throw Error(ErrorKind::NonFiniteActivation, "denoiser produced non-finite outputs");
    DenoiserOutput out;
    const auto& c = noised.complex;
    for (std::size_t j = 0; j < c.mask.size(); ++j) {
        const auto row = static_cast<Eigen::Index>(j);
        const auto& r = c.residues[c.mask[j]];
        out.x0_probs.push_back(softmax_row(logits.row(row)));
        out.type_probs.push_back(mixed_posterior(out.x0_probs.back(), r.type, noised.beta, noised.alpha_bar_prev));
        Vec3 u(pos(row, 0), pos(row, 1), pos(row, 2));
        out.pos_mean.push_back(r.ca + noised.frame.scale * (r.orient * u));
        out.orient_pred.push_back(r.orient * gram_schmidt6(rot.row(row)));
    }
    return out;
}

inline void check_input(const DenoiserParams& p, const NoisedComplex& noised) {
    if (noised.complex.mask.empty()) throw Error(ErrorKind::EmptyMask, "denoiser needs a non-empty mask");
    if (noised.t < 1 || noised.t > p.config.steps)
        throw Error(ErrorKind::ShapeMismatch, "timestep " + std::to_string(noised.t) + " outside [1, T]");
    if (static_cast<int>(p.tensors.size()) != p.head_index(DenoiserParams::kHeads))
        throw Error(ErrorKind::ShapeMismatch, "parameter tensor count does not match config");
}

inline DenoiserOutput denoiser_forward(const DenoiserParams& p, const NoisedComplex& noised) {
    check_input(p, noised);
    ForwardPass fp;
    run_network(p, build_graph_inputs(noised, p.config), fp);
    return decode_outputs(fp, noised);
}

// ---------------------------------------------------------------------------
// Loss and gradient

struct Gradient {
    LossBreakdown loss;
    std::vector<Matrix> grads;
};

// Mean over examples of the weighted loss and its parameter gradient. The
// type term is the expectation over s^t from expected_type_kl.
inline Gradient loss_and_gradient(const DenoiserParams& p, const std::vector<TrainingExample>& batch,
                                  const LossWeights& lambda) {
    if (batch.empty()) throw Error(ErrorKind::ShapeMismatch, "empty batch");
    Gradient out;
    for (const auto& m : p.tensors) out.grads.push_back(Matrix::Zero(m.rows(), m.cols()));
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        check_input(p, ex.noised);
        ForwardPass fp;
        run_network(p, build_graph_inputs(ex.noised, p.config), fp);
        DenoiserOutput pred = decode_outputs(fp, ex.noised);
        LossBreakdown l = compute_losses(pred, ex.target, lambda);
        const auto& c = ex.noised.complex;
        const auto m = static_cast<Eigen::Index>(c.mask.size());
        const double inv_m = 1.0 / static_cast<double>(m);
        std::vector<TypeLossTerm> type_terms;
        l.type = 0.0;
        for (Eigen::Index j = 0; j < m; ++j) {
            const auto js = static_cast<std::size_t>(j);
            type_terms.push_back(expected_type_kl(pred.x0_probs[js], ex.target.type0[js], ex.noised.beta,
                                                  ex.noised.alpha_bar_prev));
            l.type += type_terms.back().loss * inv_m;
        }
        out.loss.type += l.type * inv_b;
        out.loss.pos += l.pos * inv_b;
        out.loss.orient += l.orient * inv_b;

        const double scale = ex.noised.frame.scale;
        const auto& rot6 = fp.tape.value(fp.rot6);
        Matrix g_logits(m, kNumAminoAcids), g_pos(m, 3), g_rot(m, 6);
        for (Eigen::Index j = 0; j < m; ++j) {
            const auto& r = c.residues[c.mask[static_cast<std::size_t>(j)]];
            // softmax backward from d loss / d c0
            const auto& c0 = pred.x0_probs[static_cast<std::size_t>(j)];
            const auto& g_c0 = type_terms[static_cast<std::size_t>(j)].grad_c0;
            double dot = 0.0;
            for (int k = 0; k < kNumAminoAcids; ++k) dot += c0[k] * g_c0[k];
            for (int k = 0; k < kNumAminoAcids; ++k)
                g_logits(j, k) = lambda.type * inv_m * c0[k] * (g_c0[k] - dot);

            Vec3 resid = (ex.target.pos_prev[static_cast<std::size_t>(j)] - pred.pos_mean[static_cast<std::size_t>(j)]) / scale;
            Vec3 gu = -2.0 * lambda.pos * inv_m * (r.orient.transpose() * resid);
            g_pos.row(j) << gu.x(), gu.y(), gu.z();

            // d/dR of ||O0^T O R - I||^2 = 2 O^T O0 (O0^T O R - I)
            const Mat3& o0 = ex.target.orient0[static_cast<std::size_t>(j)];
            Mat3 rel = o0.transpose() * r.orient;
            Mat3 rmat = gram_schmidt6(rot6.row(j));
            Mat3 grad_r = 2.0 * lambda.orient * inv_m * rel.transpose() * (rel * rmat - Mat3::Identity());
            g_rot.row(j) = gram_schmidt6_backward(rot6.row(j), grad_r);
        }
        fp.tape.seed(fp.logits, g_logits * inv_b);
        fp.tape.seed(fp.pos_local, g_pos * inv_b);
        fp.tape.seed(fp.rot6, g_rot * inv_b);
        fp.tape.backward();
        for (std::size_t k = 0; k < out.grads.size(); ++k) {
            const auto& g = fp.tape.grad(fp.params[k]);
            if (g.size() > 0) out.grads[k] += g;
        }
    }
    out.loss.total = lambda.type * out.loss.type + lambda.pos * out.loss.pos + lambda.orient * out.loss.orient;
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer and training

struct TrainConfig {
    int steps = 5000;
    double learning_rate = 1e-4;
    int batch_size = 8;
    LossWeights weights;
    int patch_size = 128;
    std::uint64_t seed = 0;
    int checkpoint_interval = 0;
};

inline constexpr const char* kOptimizerName = "adam(beta1=0.9,beta2=0.999,eps=1e-8)";

class Adam {
public:
    explicit Adam(const DenoiserParams& p) {
        for (const auto& t : p.tensors) {
            m_.push_back(Matrix::Zero(t.rows(), t.cols()));
            v_.push_back(Matrix::Zero(t.rows(), t.cols()));
        }
    }

    void apply(DenoiserParams& p, const std::vector<Matrix>& grads, double lr) {
        ++step_;
        const double c1 = 1.0 - std::pow(kBeta1, step_);
        const double c2 = 1.0 - std::pow(kBeta2, step_);
        for (std::size_t k = 0; k < p.tensors.size(); ++k) {
            m_[k] = kBeta1 * m_[k] + (1.0 - kBeta1) * grads[k];
            v_[k] = kBeta2 * v_[k] + (1.0 - kBeta2) * grads[k].cwiseAbs2();
            p.tensors[k].array() -= lr * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + kEps);
        }
    }

    long step() const { return step_; }

private:
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    std::vector<Matrix> m_, v_;
    long step_ = 0;
};

// Draws one batch: uniform complex, uniform t in [1, T], patch, noise.
inline std::vector<TrainingExample> draw_batch(const std::vector<Complex>& data, const NoiseSchedule& sched,
                                               const TrainConfig& cfg, long step) {
    Rng rng(derive_seed(cfg.seed, 0x7261696eULL, static_cast<std::uint64_t>(step)));
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::uniform_int_distribution<int> tpick(1, sched.steps);
    std::vector<TrainingExample> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
        const Complex& c = data[pick(rng)];
        int t = tpick(rng);
        batch.push_back(make_training_example(extract_patch(c, cfg.patch_size), t, sched, rng));
    }
    return batch;
}

class Trainer {
public:
    Trainer(DenoiserParams params, TrainConfig cfg) : params_(std::move(params)), cfg_(cfg), adam_(params_) {
        if (cfg_.steps < 1) throw Error(ErrorKind::InvalidRange, "training steps must be >= 1");
        if (!(cfg_.learning_rate >= 0.0)) throw Error(ErrorKind::InvalidRange, "learning rate must be >= 0");
        if (cfg_.batch_size < 1) throw Error(ErrorKind::InvalidRange, "batch size must be >= 1");
    }

    // One gradient step. A non-finite gradient leaves parameters untouched.
    LossBreakdown step(const std::vector<TrainingExample>& batch) {
        Gradient g = loss_and_gradient(params_, batch, cfg_.weights);
        for (const auto& m : g.grads)
            if (!m.allFinite()) {
                ++rejected_;
                throw Error(ErrorKind::NonFiniteGradient, "step rejected: non-finite gradient");
            }
        if (cfg_.learning_rate > 0.0) adam_.apply(params_, g.grads, cfg_.learning_rate);
        ++steps_done_;
        return g.loss;
    }

    LossBreakdown step(const std::vector<Complex>& data, const NoiseSchedule& sched) {
        return step(draw_batch(data, sched, cfg_, steps_done_));
    }

    const DenoiserParams& params() const { return params_; }
    DenoiserParams& params() { return params_; }
    long steps_done() const { return steps_done_; }
    int rejected() const { return rejected_; }
    const TrainConfig& config() const { return cfg_; }

private:
    DenoiserParams params_;
    TrainConfig cfg_;
    Adam adam_;
    long steps_done_ = 0;
    int rejected_ = 0;
};

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::uint32_t kParamSchemaVersion = 1;
inline constexpr char kParamMagic[8] = {'A', 'B', 'L', 'P', 'A', 'R', 'M', '\0'};

inline std::string serialize_params(const DenoiserParams& p) {
    std::string buf;
    auto put = [&](const void* data, std::size_t n) { buf.append(static_cast<const char*>(data), n); };
    auto put_i32 = [&](std::int32_t v) { put(&v, sizeof v); };
    put(kParamMagic, sizeof kParamMagic);
    put(&kParamSchemaVersion, sizeof kParamSchemaVersion);
    put_i32(p.config.hidden);
    put_i32(p.config.layers);
    put_i32(p.config.steps);
    put_i32(p.config.neighbors);
    put(&p.manifest_hash, sizeof p.manifest_hash);
    put_i32(static_cast<std::int32_t>(p.tensors.size()));
    for (const auto& t : p.tensors) {
        put_i32(static_cast<std::int32_t>(t.rows()));
        put_i32(static_cast<std::int32_t>(t.cols()));
        put(t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
    }
    std::uint64_t checksum = Hasher().bytes(buf.data(), buf.size()).value();
    put(&checksum, sizeof checksum);
    return buf;
}

// When `expected` is given, a dimension mismatch is a VersionMismatch.
inline DenoiserParams deserialize_params(std::string_view buf, const ModelConfig* expected = nullptr) {
    std::size_t pos = 0;
    auto take = [&](void* out, std::size_t n) {
        if (pos + n > buf.size()) throw Error(ErrorKind::CorruptFile, "parameter file truncated");
        std::memcpy(out, buf.data() + pos, n);
        pos += n;
    };
    auto get_i32 = [&] {
        std::int32_t v;
        take(&v, sizeof v);
        return v;
    };
    char magic[8];
    take(magic, sizeof magic);
    if (std::memcmp(magic, kParamMagic, sizeof magic) != 0) throw Error(ErrorKind::CorruptFile, "bad magic");
    std::uint32_t version = 0;
    take(&version, sizeof version);
    if (version != kParamSchemaVersion)
        throw Error(ErrorKind::VersionMismatch, "schema version " + std::to_string(version));
    if (buf.size() < sizeof(std::uint64_t)) throw Error(ErrorKind::CorruptFile, "parameter file truncated");
    std::uint64_t stored = 0;
    std::memcpy(&stored, buf.data() + buf.size() - sizeof stored, sizeof stored);
    if (Hasher().bytes(buf.data(), buf.size() - sizeof stored).value() != stored)
        throw Error(ErrorKind::CorruptFile, "checksum mismatch (truncated or modified file)");

    DenoiserParams p;
    p.config.hidden = get_i32();
    p.config.layers = get_i32();
    p.config.steps = get_i32();
    p.config.neighbors = get_i32();
    if (expected && !(*expected == p.config))
        throw Error(ErrorKind::VersionMismatch,
                    "file has hidden=" + std::to_string(p.config.hidden) + " layers=" + std::to_string(p.config.layers) +
                        " T=" + std::to_string(p.config.steps) + ", expected hidden=" + std::to_string(expected->hidden) +
                        " layers=" + std::to_string(expected->layers) + " T=" + std::to_string(expected->steps));
    take(&p.manifest_hash, sizeof p.manifest_hash);
    auto reference = DenoiserParams::init(p.config, 0);
    int count = get_i32();
    if (count != static_cast<int>(reference.tensors.size())) throw Error(ErrorKind::CorruptFile, "tensor count");
    for (int k = 0; k < count; ++k) {
        int rows = get_i32(), cols = get_i32();
        const auto& ref = reference.tensors[static_cast<std::size_t>(k)];
        if (rows != ref.rows() || cols != ref.cols()) throw Error(ErrorKind::CorruptFile, "tensor shape");
        Matrix m(rows, cols);
        take(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
        p.tensors.push_back(std::move(m));
    }
    p.names = reference.names;
    if (pos + sizeof(std::uint64_t) != buf.size()) throw Error(ErrorKind::CorruptFile, "trailing bytes");
    return p;
}

inline void save_params(const DenoiserParams& p, const std::string& path) { write_text_file(path, serialize_params(p)); }

inline DenoiserParams load_params(const std::string& path, const ModelConfig* expected = nullptr) {
    return deserialize_params(read_text_file(path), expected);
}

}  // namespace abloop
