#pragma once

// Neural building blocks on top of the tape: input embeddings, diffusion-time
// embedding, EGCL, GVP transition, equivariant temporal attention, and
// invariant layer norm. Trajectory features are kept flat as (T*N, ...) rows;
// vector features use the (rows, 3, channels) layout so channel mixing is a
// plain matmul and rotations act on the middle axis.

#include "egi/geom.hpp"
#include "egi/tensor.hpp"

namespace egi::nn {

constexpr long kHidden = 128;
constexpr long kAtomEmbed = 30;
constexpr long kEdgeEmbed = 4;
constexpr long kTimeEmbed = 32;
constexpr long kHeads = 4;
constexpr long kHeadDim = 64;
constexpr long kMaxFrames = 512;
constexpr long kVecChannels = 8;
constexpr long kEdgeInDim = 2 * kHidden + 1 + kEdgeEmbed + kTimeEmbed;  // 297

struct Param {
    std::string name;
    ten::Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool trainable = true;

    long size() const { return ten::numel(shape); }
    void zero_grad() { grad.assign(size(), 0.0); }
};

inline Param make_param(std::string name, ten::Shape shape) {
    Param p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.value.assign(ten::numel(p.shape), 0.0);
    p.grad.assign(p.value.size(), 0.0);
    return p;
}

inline void init_linear(Param& p, Rng& rng) {
    const long fan_in = p.shape.size() == 2 ? p.shape[0] : p.size();
    const long fan_out = p.shape.size() == 2 ? p.shape[1] : p.size();
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : p.value) v = rng.uniform(-a, a);
}

inline void init_normal(Param& p, Rng& rng, double std_dev) {
    for (double& v : p.value) v = std_dev * rng.normal();
}

inline void init_constant(Param& p, double c) {
    std::fill(p.value.begin(), p.value.end(), c);
}

using ParamList = std::vector<Param*>;

// One grad-tracked leaf per parameter per tape; gradients are pulled back out
// after backward.
class LeafCache {
public:
    LeafCache(ten::Tape& tape, bool train) : tape_(&tape), train_(train) {}

    ten::Tensor get(Param& p) {
        auto it = leaves_.find(&p);
        if (it != leaves_.end()) return it->second;
        ten::Tensor t = tape_->leaf(p.shape, p.value, train_ && p.trainable);
        leaves_.emplace(&p, t);
        return t;
    }

    // Add tape gradients into Param::grad. Call after Tape::backward.
    void accumulate_grads() {
        for (auto& [p, t] : leaves_) {
            if (!(train_ && p->trainable)) continue;
            const auto& g = tape_->node(t.id).grad;
            if (g.empty()) continue;
            for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
        }
    }

    ten::Tape& tape() { return *tape_; }
    bool train_mode() const { return train_; }

private:
    ten::Tape* tape_;
    bool train_;
    std::unordered_map<Param*, ten::Tensor> leaves_;
};

// Catalog-pure 2-D transpose: flatten, permute rows, reshape.
inline ten::Tensor transpose2d(ten::Tensor a) {
    const ten::Shape& s = a.shape();
    if (s.size() != 2) fail("shape-mismatch", "transpose2d needs rank-2");
    const long r = s[0], c = s[1];
    std::vector<long> perm(r * c);
    for (long i = 0; i < c; ++i)
        for (long j = 0; j < r; ++j) perm[i * r + j] = j * c + i;
    ten::Tensor flat = ten::reshape(a, {r * c, 1});
    return ten::reshape(ten::gather_rows(flat, perm), {c, r});
}

inline ten::Tensor linear(LeafCache& lc, ten::Tensor x, Param& w, Param& b) {
    return ten::add(ten::matmul(x, lc.get(w)), lc.get(b));
}

// Subtract the per-frame mean from a (T*N, 3) update so the coordinate stream
// stays in the zero-CoM subspace; a zero update stays bitwise zero.
inline ten::Tensor center_update(ten::Tensor dx, long T, long N) {
    ten::Tensor d3 = ten::reshape(dx, {T, N, 3});
    ten::Tensor mean = ten::mean_axis(d3, 1, true);
    ten::Tensor centered = ten::sub(d3, ten::broadcast(mean, {T, N, 3}));
    return ten::reshape(centered, {T * N, 3});
}

// Sinusoidal diffusion-step embedding: pairs (sin(tau/w_i), cos(tau/w_i)),
// frequencies log-spaced in [1, 1e4].
inline std::vector<double> timestep_embedding(long tau, long dim = kTimeEmbed) {
    std::vector<double> out(dim);
    const long pairs = dim / 2;
    for (long i = 0; i < pairs; ++i) {
        const double omega = std::pow(10.0, 4.0 * static_cast<double>(i) /
                                                static_cast<double>(pairs - 1));
        out[2 * i] = std::sin(static_cast<double>(tau) / omega);
        out[2 * i + 1] = std::cos(static_cast<double>(tau) / omega);
    }
    return out;
}

// ---- embeddings ------------------------------------------------------------

struct EmbeddingTables {
    Param atom_table;  // kinds x 30
    Param edge_table;  // 4 x 4 (no-bond, bond, second, third)
    Param input_proj;  // (30 + feature width) x 128

    void init(Rng& rng, const std::string& prefix) {
        atom_table = make_param(prefix + ".atom_table", {geom::kMaxAtomKinds, kAtomEmbed});
        edge_table = make_param(prefix + ".edge_table", {4, kEdgeEmbed});
        input_proj = make_param(prefix + ".input_proj", {kAtomEmbed + geom::kFeatureDim, kHidden});
        init_normal(atom_table, rng, 0.5);
        init_normal(edge_table, rng, 0.5);
        init_linear(input_proj, rng);
    }
    void collect(ParamList& out) {
        out.push_back(&atom_table);
        out.push_back(&edge_table);
        out.push_back(&input_proj);
    }
};

// h0 = project(concat(kind embedding, features)), identical across frames;
// the caller adds the condition-state embedding where it applies.
inline ten::Tensor embed_inputs(LeafCache& lc, EmbeddingTables& tables,
                                const geom::MoleculeGraph& mol, long T) {
    const long N = mol.n_atoms;
    for (int k : mol.atom_kinds)
        if (k < 0 || k >= geom::kMaxAtomKinds) fail("unknown-atom-kind", std::to_string(k));
    std::vector<long> kinds(mol.atom_kinds.begin(), mol.atom_kinds.end());
    ten::Tensor kind_rows = ten::gather_rows(lc.get(tables.atom_table), kinds);
    ten::Tensor feats =
        lc.tape().leaf({N, geom::kFeatureDim}, mol.atom_features, false);
    ten::Tensor h0 = ten::matmul(ten::concat_axis({kind_rows, feats}, 1), lc.get(tables.input_proj));
    if (T == 1) return h0;
    ten::Tensor tiled = ten::broadcast(ten::reshape(h0, {1, N, kHidden}), {T, N, kHidden});
    return ten::reshape(tiled, {T * N, kHidden});
}

// Per-frame condition-state embedding added to h. The two-state table is
// realized as a fixed zero row for state 0 and a learned row for state 1, so
// unconditioned frames match the pretrained path bit-for-bit and only
// conditioned frames route gradient into the state row.
inline ten::Tensor add_condition_state(LeafCache& lc, Param& cond_row, ten::Tensor h,
                                       const std::vector<int>& mask, long N) {
    const long T = static_cast<long>(mask.size());
    bool any = false;
    for (int m : mask) any = any || m != 0;
    if (!any) return h;
    std::vector<double> mvals(T);
    for (long t = 0; t < T; ++t) mvals[t] = mask[t] ? 1.0 : 0.0;
    ten::Tensor mcol = lc.tape().leaf({T, 1}, mvals, false);
    ten::Tensor per_frame =
        ten::mul(ten::broadcast(mcol, {T, kHidden}),
                 ten::broadcast(ten::reshape(lc.get(cond_row), {kHidden}), {T, kHidden}));
    ten::Tensor tiled =
        ten::broadcast(ten::reshape(per_frame, {T, 1, kHidden}), {T, N, kHidden});
    return ten::add(h, ten::reshape(tiled, {T * N, kHidden}));
}

// ---- molecule graph index --------------------------------------------------

// Edge endpoints replicated across frames, plus per-node neighbor counts.
struct GraphIndex {
    long T = 0, N = 0, E = 0;            // E = directed edges per frame
    std::vector<long> src, dst;          // T*E row indices into (T*N, .)
    std::vector<long> edge_code;         // T*E order codes
    std::vector<double> inv_degree;      // T*N x 1
    std::vector<std::vector<long>> node_rows;  // per node: its T row indices

    static GraphIndex build(const geom::MoleculeGraph& mol, long T) {
        GraphIndex g;
        g.T = T;
        g.N = mol.n_atoms;
        g.E = static_cast<long>(mol.edges.size());
        g.src.reserve(T * g.E);
        g.dst.reserve(T * g.E);
        g.edge_code.reserve(T * g.E);
        std::vector<long> degree(g.N, 0);
        for (const geom::Edge& e : mol.edges) ++degree[e.i];
        for (long t = 0; t < T; ++t)
            for (const geom::Edge& e : mol.edges) {
                g.src.push_back(t * g.N + e.i);
                g.dst.push_back(t * g.N + e.j);
                g.edge_code.push_back(e.order);
            }
        g.inv_degree.resize(T * g.N);
        for (long t = 0; t < T; ++t)
            for (long i = 0; i < g.N; ++i)
                g.inv_degree[t * g.N + i] = 1.0 / static_cast<double>(std::max<long>(degree[i], 1));
        g.node_rows.resize(g.N);
        for (long i = 0; i < g.N; ++i) {
            g.node_rows[i].resize(T);
            for (long t = 0; t < T; ++t) g.node_rows[i][t] = t * g.N + i;
        }
        return g;
    }
};

// ---- EGCL -------------------------------------------------------------------

struct EgclParams {
    Param w_e1, b_e1, w_e2, b_e2;  // edge network
    Param w_x1, b_x1, w_x2, b_x2;  // coordinate network; final layer zero-init
    Param w_h1, b_h1, w_h2, b_h2;  // node network

    void init(Rng& rng, const std::string& prefix) {
        w_e1 = make_param(prefix + ".w_e1", {kEdgeInDim, kHidden});
        b_e1 = make_param(prefix + ".b_e1", {kHidden});
        w_e2 = make_param(prefix + ".w_e2", {kHidden, kHidden});
        b_e2 = make_param(prefix + ".b_e2", {kHidden});
        w_x1 = make_param(prefix + ".w_x1", {kHidden, kHidden});
        b_x1 = make_param(prefix + ".b_x1", {kHidden});
        w_x2 = make_param(prefix + ".w_x2", {kHidden, 1});
        b_x2 = make_param(prefix + ".b_x2", {1});
        w_h1 = make_param(prefix + ".w_h1", {2 * kHidden, kHidden});
        b_h1 = make_param(prefix + ".b_h1", {kHidden});
        w_h2 = make_param(prefix + ".w_h2", {kHidden, kHidden});
        b_h2 = make_param(prefix + ".b_h2", {kHidden});
        init_linear(w_e1, rng);
        init_linear(w_e2, rng);
        init_linear(w_x1, rng);
        init_linear(w_h1, rng);
        init_linear(w_h2, rng);
        // w_x2/b_x2 stay zero: the untrained layer is the identity on coordinates
    }
    void collect(ParamList& out) {
        for (Param* p : {&w_e1, &b_e1, &w_e2, &b_e2, &w_x1, &b_x1, &w_x2, &b_x2, &w_h1, &b_h1,
                         &w_h2, &b_h2})
            out.push_back(p);
    }
};

struct EgclOut {
    ten::Tensor h;
    ten::Tensor x;
};

// m_ij = phi_e(h_i, h_j, |x_i-x_j|^2, edge_embed, tau_embed)
// x'_i = x_i + (1/|N(i)|) sum_j (x_i - x_j) phi_x(m_ij), update re-centered
// h'_i = h_i + phi_h(h_i, sum_j m_ij)
inline EgclOut egcl_forward(LeafCache& lc, EgclParams& p, ten::Tensor edge_emb_rows,
                            ten::Tensor h, ten::Tensor x, const GraphIndex& g,
                            ten::Tensor tau_emb) {
    const long TN = g.T * g.N, TE = g.T * g.E;
    ten::Tensor hi = ten::gather_rows(h, g.src);
    ten::Tensor hj = ten::gather_rows(h, g.dst);
    ten::Tensor rel = ten::sub(ten::gather_rows(x, g.src), ten::gather_rows(x, g.dst));
    ten::Tensor d2 = ten::sum_axis(ten::square(rel), 1, true);                 // (TE,1)
    ten::Tensor tau_rows = ten::broadcast(ten::reshape(tau_emb, {1, kTimeEmbed}), {TE, kTimeEmbed});
    ten::Tensor m_in = ten::concat_axis({hi, hj, d2, edge_emb_rows, tau_rows}, 1);
    ten::Tensor m = ten::silu(linear(lc, m_in, p.w_e1, p.b_e1));
    m = ten::silu(linear(lc, m, p.w_e2, p.b_e2));

    ten::Tensor u = ten::silu(linear(lc, m, p.w_x1, p.b_x1));
    ten::Tensor w = linear(lc, u, p.w_x2, p.b_x2);                             // (TE,1)
    ten::Tensor contrib = ten::mul(rel, ten::broadcast(w, {TE, 3}));
    ten::Tensor agg = ten::scatter_add_rows(contrib, g.src, TN);
    ten::Tensor inv_deg = lc.tape().leaf({TN, 1}, g.inv_degree, false);
    ten::Tensor dx = ten::mul(agg, ten::broadcast(inv_deg, {TN, 3}));

    ten::Tensor msum = ten::scatter_add_rows(m, g.src, TN);
    ten::Tensor hupd = ten::silu(linear(lc, ten::concat_axis({h, msum}, 1), p.w_h1, p.b_h1));
    hupd = linear(lc, hupd, p.w_h2, p.b_h2);

    EgclOut out;
    out.h = ten::add(h, hupd);
    out.x = ten::add(x, center_update(dx, g.T, g.N));
    return out;
}

// ---- GVP transition ----------------------------------------------------------

struct GvpParams {
    Param w_lift;            // 8: lift centered coordinates into vector channels
    Param w_v1, w_v2;        // 8x8 channel mixes
    Param w_s1, b_s1, w_s2, b_s2;  // scalar perceptron on (h, channel norms)
    Param w_g, b_g;          // per-channel gates from the scalar stream
    Param w_comb;            // 8: combine channels back into a coordinate update (zero-init)

    void init(Rng& rng, const std::string& prefix) {
        w_lift = make_param(prefix + ".w_lift", {kVecChannels});
        w_v1 = make_param(prefix + ".w_v1", {kVecChannels, kVecChannels});
        w_v2 = make_param(prefix + ".w_v2", {kVecChannels, kVecChannels});
        w_s1 = make_param(prefix + ".w_s1", {kHidden + kVecChannels, kHidden});
        b_s1 = make_param(prefix + ".b_s1", {kHidden});
        w_s2 = make_param(prefix + ".w_s2", {kHidden, kHidden});
        b_s2 = make_param(prefix + ".b_s2", {kHidden});
        w_g = make_param(prefix + ".w_g", {kHidden, kVecChannels});
        b_g = make_param(prefix + ".b_g", {kVecChannels});
        w_comb = make_param(prefix + ".w_comb", {kVecChannels});
        init_constant(w_lift, 1.0);
        init_linear(w_v1, rng);
        init_linear(w_v2, rng);
        init_linear(w_s1, rng);
        init_linear(w_s2, rng);
        init_linear(w_g, rng);
        // w_comb stays zero: the transition starts as the identity on coordinates
    }
    void collect(ParamList& out) {
        for (Param* p : {&w_lift, &w_v1, &w_v2, &w_s1, &b_s1, &w_s2, &b_s2, &w_g, &b_g, &w_comb})
            out.push_back(p);
    }
};

struct GvpOut {
    ten::Tensor h;
    ten::Tensor v;  // (rows, 3, channels)
};

// Scalar channels mix with vector norms; vector channels are mixed by channel
// matrices and gated by scalars. Rotations act channel-wise on v.
inline GvpOut gvp_transition(LeafCache& lc, GvpParams& p, ten::Tensor h, ten::Tensor v) {
    const long R = h.shape()[0];
    ten::Tensor v1 = ten::reshape(
        ten::matmul(ten::reshape(v, {R * 3, kVecChannels}), lc.get(p.w_v1)), {R, 3, kVecChannels});
    ten::Tensor eps2 = lc.tape().leaf_scalar(1e-16);
    ten::Tensor norms = ten::sqrt(ten::add(ten::sum_axis(ten::square(v1), 1), eps2));  // (R,8)
    ten::Tensor s_mid = ten::silu(linear(lc, ten::concat_axis({h, norms}, 1), p.w_s1, p.b_s1));
    ten::Tensor h_out = ten::add(h, linear(lc, s_mid, p.w_s2, p.b_s2));
    ten::Tensor gate = ten::sigmoid(linear(lc, s_mid, p.w_g, p.b_g));                  // (R,8)
    ten::Tensor v2 = ten::reshape(
        ten::matmul(ten::reshape(v1, {R * 3, kVecChannels}), lc.get(p.w_v2)), {R, 3, kVecChannels});
    ten::Tensor v_out =
        ten::mul(v2, ten::broadcast(ten::reshape(gate, {R, 1, kVecChannels}), {R, 3, kVecChannels}));
    return {h_out, v_out};
}

// Full transition step on the coordinate stream: lift centered coordinates,
// run the GVP, fold the gated channels back into a centered update.
inline EgclOut gvp_coordinate_transition(LeafCache& lc, GvpParams& p, ten::Tensor h,
                                         ten::Tensor x, long T, long N) {
    const long R = T * N;
    ten::Tensor xc = center_update(x, T, N);  // centered copy of positions
    ten::Tensor v0 = ten::mul(ten::broadcast(ten::reshape(xc, {R, 3, 1}), {R, 3, kVecChannels}),
                              lc.get(p.w_lift));
    GvpOut g = gvp_transition(lc, p, h, v0);
    ten::Tensor dx = ten::sum_axis(ten::mul(g.v, lc.get(p.w_comb)), 2);  // (R,3)
    return {g.h, ten::add(x, center_update(dx, T, N))};
}

// ---- equivariant temporal attention -----------------------------------------

struct EtParams {
    Param w_q, w_k;      // 128 -> heads*64
    Param pos;           // max-T x 128 learned positions
    Param w_gate, b_gate;  // per-head scalar gate on the coordinate value (zero-init)
    Param w_o, b_o;      // output map for the invariant stream (zero-init)

    void init(Rng& rng, const std::string& prefix) {
        w_q = make_param(prefix + ".w_q", {kHidden, kHeads * kHeadDim});
        w_k = make_param(prefix + ".w_k", {kHidden, kHeads * kHeadDim});
        pos = make_param(prefix + ".pos", {kMaxFrames, kHidden});
        w_gate = make_param(prefix + ".w_gate", {kHeadDim, kHeads});
        b_gate = make_param(prefix + ".b_gate", {kHeads});
        w_o = make_param(prefix + ".w_o", {kHidden, kHidden});
        b_o = make_param(prefix + ".b_o", {kHidden});
        init_linear(w_q, rng);
        init_linear(w_k, rng);
        init_normal(pos, rng, 0.02);
        // w_gate/b_gate/w_o/b_o stay zero: the untrained layer is an exact
        // identity on coordinates
    }
    void collect(ParamList& out) {
        for (Param* p : {&w_q, &w_k, &pos, &w_gate, &b_gate, &w_o, &b_o}) out.push_back(p);
    }
};

// Per-node attention over frames. Logits come from invariant features plus
// learned positions; the coordinate value is the difference of frame-centered
// positions, which keeps the update rotation-equivariant and translation-free.
inline EgclOut temporal_attention_forward(LeafCache& lc, EtParams& p, ten::Tensor h,
                                          ten::Tensor x, const GraphIndex& g) {
    const long T = g.T, N = g.N, TN = T * N;
    if (T > kMaxFrames) fail("bad-arg", "trajectory longer than the positional table");
    ten::Tensor pos_rows = ten::slice(lc.get(p.pos), 0, 0, T);  // (T,128)
    ten::Tensor pos_tiled =
        ten::reshape(ten::broadcast(ten::reshape(pos_rows, {T, 1, kHidden}), {T, N, kHidden}),
                     {TN, kHidden});
    ten::Tensor hp = ten::add(h, pos_tiled);
    ten::Tensor Q = ten::matmul(hp, lc.get(p.w_q));  // (TN, heads*64)
    ten::Tensor K = ten::matmul(hp, lc.get(p.w_k));

    ten::Tensor x3 = ten::reshape(x, {T, N, 3});
    ten::Tensor xmean = ten::mean_axis(x3, 1, true);
    ten::Tensor cent = ten::reshape(ten::sub(x3, ten::broadcast(xmean, {T, N, 3})), {TN, 3});

    ten::Tensor scale = lc.tape().leaf_scalar(1.0 / std::sqrt(static_cast<double>(kHeadDim)));
    ten::Tensor inv_heads = lc.tape().leaf_scalar(1.0 / static_cast<double>(kHeads));

    std::vector<ten::Tensor> h_upd_nodes, x_upd_nodes;
    std::vector<long> scatter_rows;
    for (long i = 0; i < N; ++i) {
        const std::vector<long>& rows = g.node_rows[i];
        scatter_rows.insert(scatter_rows.end(), rows.begin(), rows.end());
        ten::Tensor qi = ten::gather_rows(Q, rows);   // (T, heads*64)
        ten::Tensor ki = ten::gather_rows(K, rows);
        ten::Tensor hi = ten::gather_rows(h, rows);   // (T,128)
        ten::Tensor ci = ten::gather_rows(cent, rows);  // (T,3)
        ten::Tensor h_acc, x_acc;
        for (long head = 0; head < kHeads; ++head) {
            ten::Tensor qh = ten::slice(qi, 1, head * kHeadDim, (head + 1) * kHeadDim);
            ten::Tensor kh = ten::slice(ki, 1, head * kHeadDim, (head + 1) * kHeadDim);
            ten::Tensor logits = ten::mul(ten::matmul(qh, transpose2d(kh)), scale);
            ten::Tensor attn = ten::softmax_axis(logits, 1);  // rows sum to 1 over frames
            ten::Tensor hv = ten::matmul(attn, hi);
            ten::Tensor gate = ten::add(ten::matmul(qh, ten::slice(lc.get(p.w_gate), 1, head, head + 1)),
                                        ten::slice(lc.get(p.b_gate), 0, head, head + 1));
            ten::Tensor delta = ten::sub(ten::matmul(attn, ci), ci);
            ten::Tensor xv = ten::mul(delta, ten::broadcast(gate, {T, 3}));
            h_acc = head == 0 ? hv : ten::add(h_acc, hv);
            x_acc = head == 0 ? xv : ten::add(x_acc, xv);
        }
        h_upd_nodes.push_back(ten::mul(h_acc, inv_heads));
        x_upd_nodes.push_back(x_acc);
    }
    ten::Tensor h_stack = ten::concat_axis(h_upd_nodes, 0);  // (N*T, 128), node-major
    ten::Tensor x_stack = ten::concat_axis(x_upd_nodes, 0);
    ten::Tensor h_upd = ten::scatter_add_rows(linear(lc, h_stack, p.w_o, p.b_o), scatter_rows, TN);
    ten::Tensor x_upd = ten::scatter_add_rows(x_stack, scatter_rows, TN);
    return {ten::add(h, h_upd), ten::add(x, center_update(x_upd, T, N))};
}

// ---- invariant layer norm ----------------------------------------------------

struct LayerNormParams {
    Param scale, shift;
    void init(const std::string& prefix) {
        scale = make_param(prefix + ".scale", {kHidden});
        shift = make_param(prefix + ".shift", {kHidden});
        init_constant(scale, 1.0);
    }
    void collect(ParamList& out) {
        out.push_back(&scale);
        out.push_back(&shift);
    }
};

// Row-wise mean 0 / variance 1, then learned scale and shift. Applied only to
// invariant features. Rows with vanishing variance are stabilized with 1e-5.
inline ten::Tensor invariant_layer_norm(LeafCache& lc, LayerNormParams& p, ten::Tensor h) {
    const long R = h.shape()[0], C = h.shape()[1];
    ten::Tensor mu = ten::mean_axis(h, 1, true);
    ten::Tensor d = ten::sub(h, ten::broadcast(mu, {R, C}));
    ten::Tensor var = ten::mean_axis(ten::square(d), 1, true);
    double vmin = std::numeric_limits<double>::infinity();
    for (double v : var.value()) vmin = std::min(vmin, v);
    if (vmin < 1e-8) var = ten::add(var, lc.tape().leaf_scalar(1e-5));
    ten::Tensor normed = ten::div(d, ten::broadcast(ten::sqrt(var), {R, C}));
    return ten::add(ten::mul(normed, lc.get(p.scale)), lc.get(p.shift));
}

}  // namespace egi::nn
