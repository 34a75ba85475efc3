#pragma once

// The MD denoiser: a pretrained per-frame conformer stack (theta) combined
// with a temporal stack (phi) through learnable sigmoid-mixed interpolation,
// either as one output-level mix (Simple) or block-wise (Cascaded).

#include "egi/layers.hpp"

namespace egi::model {

using nn::LeafCache;
using nn::Param;
using nn::ParamList;
using ten::Tensor;

constexpr long kBlocks = 6;
constexpr int kSitesPerBlock = 4;  // after ET, after ES, after ET, block combine

enum class Variant { simple, cascaded };

inline const char* variant_name(Variant v) { return v == Variant::simple ? "simple" : "cascaded"; }
inline Variant variant_from_name(const std::string& s) {
    if (s == "simple") return Variant::simple;
    if (s == "cascaded") return Variant::cascaded;
    fail("bad-arg", "unknown variant " + s);
}

struct MixConfig {
    Variant variant = Variant::cascaded;
    double lambda = 1.0;        // inference-time pull of alphas toward 1
    bool force_alpha_one = false;
};

struct ConformerBlock {
    nn::EgclParams egcl;
    nn::GvpParams gvp;
    void init(Rng& rng, const std::string& prefix) {
        egcl.init(rng, prefix + ".egcl");
        gvp.init(rng, prefix + ".gvp");
    }
    void collect(ParamList& out) {
        egcl.collect(out);
        gvp.collect(out);
    }
};

struct ConformerDenoiser {
    nn::EmbeddingTables embed;
    std::vector<ConformerBlock> blocks;

    void init(Rng& rng, long n_blocks) {
        embed.init(rng, "conformer.embed");
        blocks.resize(n_blocks);
        for (long l = 0; l < n_blocks; ++l)
            blocks[l].init(rng, "conformer.block" + std::to_string(l));
    }
    void collect(ParamList& out) {
        embed.collect(out);
        for (auto& b : blocks) b.collect(out);
    }
};

struct TemporalBlock {
    nn::EtParams et1;
    nn::EgclParams es;
    nn::EtParams et2;
    void init(Rng& rng, const std::string& prefix) {
        et1.init(rng, prefix + ".et1");
        es.init(rng, prefix + ".es");
        et2.init(rng, prefix + ".et2");
    }
    void collect(ParamList& out) {
        et1.collect(out);
        es.collect(out);
        et2.collect(out);
    }
};

struct TemporalStack {
    Param cond_state;                      // learned state-1 embedding row
    std::vector<TemporalBlock> blocks;
    std::vector<Param> k_h, k_x;           // cascaded logits, one per (block, site)
    std::vector<nn::LayerNormParams> site_norms;  // temporal-branch norms per (block, site)
    Param k_simple;                        // single logit of the Simple variant

    void init(Rng& rng, long n_blocks, double logit_init) {
        cond_state = nn::make_param("temporal.cond_state", {1, nn::kHidden});
        blocks.resize(n_blocks);
        k_h.clear();
        k_x.clear();
        site_norms.clear();
        for (long l = 0; l < n_blocks; ++l) {
            const std::string prefix = "temporal.block" + std::to_string(l);
            blocks[l].init(rng, prefix);
            for (int s = 0; s < kSitesPerBlock; ++s) {
                k_h.push_back(nn::make_param(prefix + ".alpha_h" + std::to_string(s), {1}));
                k_x.push_back(nn::make_param(prefix + ".alpha_x" + std::to_string(s), {1}));
                nn::init_constant(k_h.back(), logit_init);
                nn::init_constant(k_x.back(), logit_init);
                site_norms.emplace_back();
                site_norms.back().init(prefix + ".site_norm" + std::to_string(s));
            }
        }
        k_simple = nn::make_param("temporal.alpha_simple", {1});
        nn::init_constant(k_simple, logit_init);
    }
    void collect(ParamList& out) {
        out.push_back(&cond_state);
        for (auto& b : blocks) b.collect(out);
        for (auto& p : k_h) out.push_back(&p);
        for (auto& p : k_x) out.push_back(&p);
        for (auto& n : site_norms) n.collect(out);
        out.push_back(&k_simple);
    }
};

struct DenoiserModel {
    long n_blocks = kBlocks;
    ConformerDenoiser conformer;
    TemporalStack temporal;
    MixConfig mix;

    // Logit init 2.0 biases early stage-two training toward the pretrained
    // stream (alpha ~ 0.88).
    void init(std::uint64_t seed, long blocks = kBlocks, double logit_init = 2.0) {
        n_blocks = blocks;
        Rng rng(seed);
        Rng r_theta = rng.fork(1);
        Rng r_phi = rng.fork(2);
        conformer.init(r_theta, blocks);
        temporal.init(r_phi, blocks, logit_init);
    }

    ParamList theta() {
        ParamList out;
        conformer.collect(out);
        return out;
    }
    ParamList phi() {
        ParamList out;
        temporal.collect(out);
        return out;
    }
    ParamList all() {
        ParamList out = theta();
        ParamList p = phi();
        out.insert(out.end(), p.begin(), p.end());
        return out;
    }
    void set_theta_trainable(bool trainable) {
        for (Param* p : theta()) p->trainable = trainable;
    }
};

// lambda-perturbed inference: alpha' = lambda * alpha + (1 - lambda).
inline void set_inference_lambda(DenoiserModel& m, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail("bad-arg", "lambda must lie in [0, 1]");
    m.mix.lambda = lambda;
}

struct ModelInputs {
    const geom::MoleculeGraph* mol = nullptr;
    const nn::GraphIndex* gidx = nullptr;  // built for (mol, T)
    long T = 0;
    std::vector<int> mask;  // per-frame condition flags; empty = unconditional
    long tau = 0;
};

namespace detail {

inline Tensor tau_leaf(LeafCache& lc, long tau) {
    return lc.tape().leaf({nn::kTimeEmbed}, nn::timestep_embedding(tau), false);
}

struct StreamState {
    Tensor h;
    Tensor x;
};

inline StreamState conformer_block_forward(LeafCache& lc, ConformerBlock& blk, Tensor edge_emb,
                                           StreamState s, const nn::GraphIndex& g, Tensor tau) {
    nn::EgclOut a = nn::egcl_forward(lc, blk.egcl, edge_emb, s.h, s.x, g, tau);
    nn::EgclOut b = nn::gvp_coordinate_transition(lc, blk.gvp, a.h, a.x, g.T, g.N);
    return {b.h, b.x};
}

// alpha as a tape scalar so gradients reach the mixing logit; the lambda
// perturbation folds in as alpha' = lambda * alpha + (1 - lambda).
inline Tensor effective_alpha(LeafCache& lc, Param& k, double lambda) {
    Tensor a = ten::sigmoid(lc.get(k));
    if (lambda == 1.0) return a;
    Tensor lam = lc.tape().leaf_scalar(lambda);
    Tensor rest = lc.tape().leaf_scalar(1.0 - lambda);
    return ten::add(ten::mul(lam, a), rest);
}

inline Tensor mix_pair(LeafCache& lc, Tensor alpha, Tensor s, Tensor t) {
    Tensor one = lc.tape().leaf_scalar(1.0);
    return ten::add(ten::mul(alpha, s), ten::mul(ten::sub(one, alpha), t));
}

}  // namespace detail

// Per-frame conformer denoiser applied to every frame of x (batched, no
// cross-frame flow): eps_hat = stack(x) - x on centered coordinates.
inline Tensor conformer_denoise(LeafCache& lc, DenoiserModel& m, Tensor x, const ModelInputs& in) {
    Tensor h = nn::embed_inputs(lc, m.conformer.embed, *in.mol, in.T);
    Tensor edge_emb = ten::gather_rows(lc.get(m.conformer.embed.edge_table), in.gidx->edge_code);
    Tensor tau = detail::tau_leaf(lc, in.tau);
    detail::StreamState s{h, x};
    for (auto& blk : m.conformer.blocks)
        s = detail::conformer_block_forward(lc, blk, edge_emb, s, *in.gidx, tau);
    return ten::sub(s.x, x);
}

// s_phi applied to (x + eps_hat); returns eps_tp = s(x + eps_hat) - x.
// With every temporal update at zero, s is the identity and eps_tp == eps_hat.
inline Tensor temporal_denoise(LeafCache& lc, DenoiserModel& m, Tensor x, Tensor eps_hat,
                               const ModelInputs& in) {
    Tensor y = ten::add(x, eps_hat);
    Tensor h = nn::embed_inputs(lc, m.conformer.embed, *in.mol, in.T);
    if (!in.mask.empty())
        h = nn::add_condition_state(lc, m.temporal.cond_state, h, in.mask, in.gidx->N);
    Tensor edge_emb = ten::gather_rows(lc.get(m.conformer.embed.edge_table), in.gidx->edge_code);
    Tensor tau = detail::tau_leaf(lc, in.tau);
    detail::StreamState s{h, y};
    for (auto& blk : m.temporal.blocks) {
        nn::EgclOut a = nn::temporal_attention_forward(lc, blk.et1, s.h, s.x, *in.gidx);
        nn::EgclOut b = nn::egcl_forward(lc, blk.es, edge_emb, a.h, a.x, *in.gidx, tau);
        nn::EgclOut c = nn::temporal_attention_forward(lc, blk.et2, b.h, b.x, *in.gidx);
        s = {c.h, c.x};
    }
    return ten::sub(s.x, x);
}

// eps_md = alpha * eps_hat + (1 - alpha) * eps_tp with alpha = sigmoid(k).
inline Tensor mix_simple(LeafCache& lc, DenoiserModel& m, Tensor eps_hat, Tensor eps_tp) {
    Tensor alpha = detail::effective_alpha(lc, m.temporal.k_simple, m.mix.lambda);
    return detail::mix_pair(lc, alpha, eps_hat, eps_tp);
}

// Block-wise interpolation: the pretrained block runs per frame on the mixed
// stream; the temporal branch (ET/ES/ET) is interpolated against it at each
// of its three layers and once more when the block combines. The temporal
// invariant branch is layer-normalized before each mix so that alpha = 1
// reduces the dataflow exactly to the pretrained stack.
inline Tensor mix_cascaded(LeafCache& lc, DenoiserModel& m, Tensor x, const ModelInputs& in) {
    Tensor h = nn::embed_inputs(lc, m.conformer.embed, *in.mol, in.T);
    if (!in.mask.empty())
        h = nn::add_condition_state(lc, m.temporal.cond_state, h, in.mask, in.gidx->N);
    Tensor edge_emb = ten::gather_rows(lc.get(m.conformer.embed.edge_table), in.gidx->edge_code);
    Tensor tau = detail::tau_leaf(lc, in.tau);
    detail::StreamState stream{h, x};
    for (long l = 0; l < m.n_blocks; ++l) {
        detail::StreamState s =
            detail::conformer_block_forward(lc, m.conformer.blocks[l], edge_emb, stream, *in.gidx, tau);
        detail::StreamState u = stream;
        TemporalBlock& tb = m.temporal.blocks[l];
        for (int site = 0; site < 3; ++site) {
            nn::EgclOut step = site == 0 ? nn::temporal_attention_forward(lc, tb.et1, u.h, u.x, *in.gidx)
                         : site == 1 ? nn::egcl_forward(lc, tb.es, edge_emb, u.h, u.x, *in.gidx, tau)
                                     : nn::temporal_attention_forward(lc, tb.et2, u.h, u.x, *in.gidx);
            const long idx = l * kSitesPerBlock + site;
            Tensor a_h = detail::effective_alpha(lc, m.temporal.k_h[idx], m.mix.lambda);
            Tensor a_x = detail::effective_alpha(lc, m.temporal.k_x[idx], m.mix.lambda);
            Tensor tn = nn::invariant_layer_norm(lc, m.temporal.site_norms[idx], step.h);
            u.h = detail::mix_pair(lc, a_h, s.h, tn);
            u.x = detail::mix_pair(lc, a_x, s.x, step.x);
        }
        const long idx = l * kSitesPerBlock + 3;
        Tensor a_h = detail::effective_alpha(lc, m.temporal.k_h[idx], m.mix.lambda);
        Tensor a_x = detail::effective_alpha(lc, m.temporal.k_x[idx], m.mix.lambda);
        Tensor tn = nn::invariant_layer_norm(lc, m.temporal.site_norms[idx], u.h);
        stream.h = detail::mix_pair(lc, a_h, s.h, tn);
        stream.x = detail::mix_pair(lc, a_x, s.x, u.x);
    }
    return ten::sub(stream.x, x);
}

// Full MD denoiser. force_alpha_one suppresses the temporal network
// structurally, which is bit-identical to mixing with alpha = 1 and skips the
// dead branch.
inline Tensor md_denoise(LeafCache& lc, DenoiserModel& m, Tensor x, const ModelInputs& in) {
    if (m.mix.force_alpha_one) return conformer_denoise(lc, m, x, in);
    if (m.mix.variant == Variant::simple) {
        Tensor eps_hat = conformer_denoise(lc, m, x, in);
        Tensor eps_tp = temporal_denoise(lc, m, x, eps_hat, in);
        return mix_simple(lc, m, eps_hat, eps_tp);
    }
    return mix_cascaded(lc, m, x, in);
}

// Convenience wrapper: plain-vector input/output, no gradients.
inline std::vector<double> md_denoise_values(DenoiserModel& m, const std::vector<double>& x,
                                             const ModelInputs& in) {
    ten::Tape tape;
    LeafCache lc(tape, false);
    Tensor xt = tape.leaf({in.T * in.gidx->N, 3}, x, false);
    return md_denoise(lc, m, xt, in).value();
}

}  // namespace egi::model
