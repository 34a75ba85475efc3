#pragma once

// DDPM machinery: linear schedule, forward noising, Kabsch-aligned noise
// targets, masked trajectory loss, reverse sampling with conditioning
// replacement, and block rollouts.

#include <functional>
#include <iostream>

#include "egi/model.hpp"

namespace egi::diffusion {

using model::DenoiserModel;
using model::ModelInputs;
using nn::LeafCache;
using ten::Tape;
using ten::Tensor;

struct NoiseSchedule {
    long steps = 0;
    std::vector<double> beta;   // beta[tau-1] for tau in 1..steps
    std::vector<double> alpha;  // 1 - beta
    std::vector<double> abar;   // cumulative products

    double beta_at(long tau) const { return beta.at(tau - 1); }
    double alpha_at(long tau) const { return alpha.at(tau - 1); }
    double abar_at(long tau) const { return tau == 0 ? 1.0 : abar.at(tau - 1); }
};

inline NoiseSchedule make_schedule(long steps, double beta1, double betaT) {
    if (!(steps >= 1 && beta1 > 0.0 && beta1 < betaT && betaT < 1.0))
        fail("bad-schedule", "need 0 < beta_1 < beta_T < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.beta.resize(steps);
    s.alpha.resize(steps);
    s.abar.resize(steps);
    double prod = 1.0;
    for (long i = 0; i < steps; ++i) {
        s.beta[i] = steps == 1 ? beta1 : beta1 + (betaT - beta1) * i / static_cast<double>(steps - 1);
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.abar[i] = prod;
    }
    if (s.abar.back() >= 0.01) fail("bad-schedule", "abar_T must fall below 0.01");
    return s;
}

// Desk-scale default: 100 steps with endpoints rescaled to preserve abar_T of
// the 1000-step (1e-4, 0.02) reference schedule.
inline NoiseSchedule desk_schedule() { return make_schedule(100, 1e-3, 0.2); }
inline NoiseSchedule full_schedule() { return make_schedule(1000, 1e-4, 0.02); }

enum class MaskMode { unconditional, forward, interpolation };

inline const char* mask_mode_name(MaskMode m) {
    switch (m) {
        case MaskMode::unconditional: return "uncond";
        case MaskMode::forward: return "forward";
        case MaskMode::interpolation: return "interp";
    }
    return "?";
}

inline MaskMode mask_mode_from_name(const std::string& s) {
    if (s == "uncond" || s == "unconditional") return MaskMode::unconditional;
    if (s == "forward") return MaskMode::forward;
    if (s == "interp" || s == "interpolation") return MaskMode::interpolation;
    fail("bad-arg", "unknown mask mode " + s);
}

inline std::vector<int> make_condition_mask(MaskMode mode, long T) {
    if (mode != MaskMode::unconditional && T < 2)
        fail("bad-arg", "conditioned modes need T >= 2");
    if (mode == MaskMode::interpolation && T < 3)
        fail("bad-arg", "interpolation needs T >= 3");
    std::vector<int> m(T, 0);
    if (mode == MaskMode::forward) m[0] = 1;
    if (mode == MaskMode::interpolation) m[0] = m[T - 1] = 1;
    return m;
}

// i.i.d. standard normal per coordinate, then frame-centered.
inline std::vector<double> centered_noise(Rng& rng, long T, long N) {
    std::vector<double> eps(T * N * 3);
    for (double& v : eps) v = rng.normal();
    geom::remove_com(eps, T, N);
    return eps;
}

inline std::vector<double> forward_noise(const std::vector<double>& x0, long tau,
                                         const std::vector<double>& eps,
                                         const NoiseSchedule& s) {
    const double a = std::sqrt(s.abar_at(tau));
    const double b = std::sqrt(1.0 - s.abar_at(tau));
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

struct AlignedTarget {
    std::vector<double> x_aligned;  // g* applied to the noisy input
    std::vector<double> eps_bar;    // recomputed noise target
    bool degenerate = false;        // alignment fell back to the identity
};

// g* = trajectory_kabsch(x_tau, x0); eps_bar = (g* x_tau - sqrt(abar) x0) / sqrt(1-abar).
inline AlignedTarget aligned_noise_target(const std::vector<double>& x0,
                                          const std::vector<double>& x_tau,
                                          const NoiseSchedule& s, long tau) {
    AlignedTarget out;
    out.x_aligned = x_tau;
    try {
        geom::RigidTransform g = geom::trajectory_kabsch(x_tau, x0);
        g.apply_inplace(out.x_aligned.data(), static_cast<long>(x_tau.size()) / 3);
    } catch (const Error& e) {
        if (e.code() != "degenerate-alignment") throw;
        out.degenerate = true;
        std::cerr << "warning: degenerate alignment, using the unaligned target\n";
    }
    const double a = std::sqrt(s.abar_at(tau));
    const double b = std::sqrt(1.0 - s.abar_at(tau));
    out.eps_bar.resize(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i)
        out.eps_bar[i] = (out.x_aligned[i] - a * x0[i]) / b;
    return out;
}

struct TrainSample {
    const geom::MoleculeGraph* mol = nullptr;
    const nn::GraphIndex* gidx = nullptr;
    long T = 0;
    std::vector<double> x0;    // clean window, frames centered
    std::vector<int> mask;     // per-frame condition flags
    long tau = 0;
    std::vector<double> eps;   // zero-CoM noise draw
};

// Mean over unconditioned frames of |eps_bar - eps_pred|^2. Conditioned
// frames enter the model clean (state embedding 1) and contribute no loss.
inline Tensor training_loss(LeafCache& lc, DenoiserModel& m, const TrainSample& sample,
                            const NoiseSchedule& s) {
    const long T = sample.T, N = sample.mol->n_atoms;
    long n_free = 0;
    for (int mk : sample.mask) n_free += mk == 0 ? 1 : 0;
    if (n_free == 0) fail("all-frames-conditioned", "nothing to learn from this sample");

    std::vector<double> x_in = forward_noise(sample.x0, sample.tau, sample.eps, s);
    for (long t = 0; t < T; ++t)
        if (sample.mask[t])
            std::copy(sample.x0.begin() + t * N * 3, sample.x0.begin() + (t + 1) * N * 3,
                      x_in.begin() + t * N * 3);
    AlignedTarget target = aligned_noise_target(sample.x0, x_in, s, sample.tau);

    ModelInputs in;
    in.mol = sample.mol;
    in.gidx = sample.gidx;
    in.T = T;
    in.mask = sample.mask;
    in.tau = sample.tau;
    Tensor x = lc.tape().leaf({T * N, 3}, target.x_aligned, false);
    Tensor pred = model::md_denoise(lc, m, x, in);
    Tensor eps_bar = lc.tape().leaf({T * N, 3}, target.eps_bar, false);
    std::vector<double> weights(T * N);
    for (long t = 0; t < T; ++t)
        for (long i = 0; i < N; ++i) weights[t * N + i] = sample.mask[t] ? 0.0 : 1.0;
    Tensor w = lc.tape().leaf({T * N, 1}, weights, false);
    Tensor sq = ten::mul(ten::square(ten::sub(pred, eps_bar)), ten::broadcast(w, {T * N, 3}));
    Tensor denom = lc.tape().leaf_scalar(static_cast<double>(n_free));
    return ten::div(ten::sum_all(sq), denom);
}

struct SampleContext {
    DenoiserModel* m = nullptr;
    const geom::MoleculeGraph* mol = nullptr;
    const nn::GraphIndex* gidx = nullptr;
    long T = 0;
    std::vector<int> mask;
    const NoiseSchedule* schedule = nullptr;
    // conditioned frames, centered, keyed by frame index
    std::vector<std::pair<long, std::vector<double>>> clean_centered;
};

// One reverse step: mu + sigma z with the posterior variance, z = 0 at tau = 1,
// then inpainting replacement of conditioned frames at level tau - 1.
// `z_override` (T*N*3, already centered) substitutes the drawn noise.
inline std::vector<double> reverse_step(const SampleContext& ctx, const std::vector<double>& x_tau,
                                        long tau, Rng& rng,
                                        const std::vector<double>* z_override = nullptr) {
    const NoiseSchedule& s = *ctx.schedule;
    const long T = ctx.T, N = ctx.mol->n_atoms;
    ModelInputs in;
    in.mol = ctx.mol;
    in.gidx = ctx.gidx;
    in.T = T;
    in.mask = ctx.mask;
    in.tau = tau;
    std::vector<double> eps = model::md_denoise_values(*ctx.m, x_tau, in);

    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(tau));
    const double coef = s.beta_at(tau) / std::sqrt(1.0 - s.abar_at(tau));
    const double beta_tilde =
        (1.0 - s.abar_at(tau - 1)) / (1.0 - s.abar_at(tau)) * s.beta_at(tau);
    const double sigma = std::sqrt(beta_tilde);

    std::vector<double> out(x_tau.size());
    std::vector<double> z;
    if (tau > 1) z = z_override ? *z_override : centered_noise(rng, T, N);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = inv_sqrt_alpha * (x_tau[i] - coef * eps[i]);
        if (tau > 1) out[i] += sigma * z[i];
    }
    for (const auto& [t, clean] : ctx.clean_centered) {
        std::vector<double> frame;
        if (tau - 1 == 0) {
            frame = clean;
        } else {
            std::vector<double> fn(clean.size());
            for (double& v : fn) v = rng.normal();
            std::vector<double> fe = fn;
            geom::remove_com_frame(fe.data(), N);
            frame = forward_noise(clean, tau - 1, fe, s);
        }
        std::copy(frame.begin(), frame.end(), out.begin() + t * N * 3);
    }
    return out;
}

// Full reverse chain. Conditioned modes restore centroids on the way out:
// forward restores the start-frame centroid everywhere; interpolation blends
// the two endpoint centroids linearly across frames; conditioned output
// frames are finally overwritten with the original inputs.
inline geom::Trajectory sample(DenoiserModel& m, std::shared_ptr<const geom::MoleculeGraph> mol,
                               long T, MaskMode mode,
                               const std::vector<std::vector<double>>& conditioning,
                               std::uint64_t seed, const NoiseSchedule& schedule,
                               double frame_dt = 1.0) {
    const long N = mol->n_atoms;
    std::vector<int> mask = make_condition_mask(mode, T);
    long n_cond = 0;
    for (int mk : mask) n_cond += mk;
    if (static_cast<long>(conditioning.size()) != n_cond)
        fail("missing-conditioning-frame", "mask expects " + std::to_string(n_cond) +
                                               " conditioning frames, got " +
                                               std::to_string(conditioning.size()));

    nn::GraphIndex gidx = nn::GraphIndex::build(*mol, T);
    SampleContext ctx;
    ctx.m = &m;
    ctx.mol = mol.get();
    ctx.gidx = &gidx;
    ctx.T = T;
    ctx.mask = mask;
    ctx.schedule = &schedule;

    std::vector<long> cond_frames;
    for (long t = 0; t < T; ++t)
        if (mask[t]) cond_frames.push_back(t);
    std::vector<Eigen::Vector3d> cond_centroids;
    for (std::size_t c = 0; c < cond_frames.size(); ++c) {
        std::vector<double> centered = conditioning[c];
        if (static_cast<long>(centered.size()) != N * 3)
            fail("bad-arg", "conditioning frame size mismatch");
        cond_centroids.push_back(geom::remove_com_frame(centered.data(), N));
        ctx.clean_centered.emplace_back(cond_frames[c], std::move(centered));
    }

    Rng rng(seed);
    std::vector<double> x = centered_noise(rng, T, N);
    for (const auto& [t, clean] : ctx.clean_centered) {
        std::vector<double> fe = centered_noise(rng, 1, N);
        std::vector<double> noised = forward_noise(clean, schedule.steps, fe, schedule);
        std::copy(noised.begin(), noised.end(), x.begin() + t * N * 3);
    }
    for (long tau = schedule.steps; tau >= 1; --tau) x = reverse_step(ctx, x, tau, rng);

    if (mode == MaskMode::forward) {
        const Eigen::Vector3d c0 = cond_centroids[0];
        for (long t = 0; t < T; ++t)
            for (long i = 0; i < N; ++i)
                for (int d = 0; d < 3; ++d) x[(t * N + i) * 3 + d] += c0[d];
    } else if (mode == MaskMode::interpolation) {
        const Eigen::Vector3d c0 = cond_centroids[0], c1 = cond_centroids[1];
        for (long t = 0; t < T; ++t) {
            const double w = static_cast<double>(t) / static_cast<double>(T - 1);
            const Eigen::Vector3d c = (1.0 - w) * c0 + w * c1;
            for (long i = 0; i < N; ++i)
                for (int d = 0; d < 3; ++d) x[(t * N + i) * 3 + d] += c[d];
        }
    }
    for (std::size_t c = 0; c < cond_frames.size(); ++c)
        std::copy(conditioning[c].begin(), conditioning[c].end(),
                  x.begin() + cond_frames[c] * N * 3);

    geom::Trajectory traj;
    traj.T = T;
    traj.N = N;
    traj.coords = std::move(x);
    traj.frame_dt = frame_dt;
    traj.mol = mol;
    traj.validate();
    return traj;
}

// Chained forward-conditioned generations; block b conditions on the final
// frame of block b-1 and the shared frame is kept once.
inline geom::Trajectory block_rollout(DenoiserModel& m,
                                      std::shared_ptr<const geom::MoleculeGraph> mol,
                                      const std::vector<double>& start_frame, long n_blocks,
                                      long T_block, std::uint64_t seed,
                                      const NoiseSchedule& schedule, double frame_dt = 1.0) {
    if (n_blocks < 1 || T_block < 2) fail("bad-arg", "need n_blocks >= 1 and T_block >= 2");
    const long N = mol->n_atoms;
    geom::Trajectory out;
    out.N = N;
    out.frame_dt = frame_dt;
    out.mol = mol;
    out.coords.insert(out.coords.end(), start_frame.begin(), start_frame.end());
    std::vector<double> cond = start_frame;
    Rng rng(seed);
    for (long b = 0; b < n_blocks; ++b) {
        geom::Trajectory block =
            sample(m, mol, T_block, MaskMode::forward, {cond}, rng.bits(), schedule, frame_dt);
        out.coords.insert(out.coords.end(), block.coords.begin() + N * 3, block.coords.end());
        cond.assign(block.frame(T_block - 1), block.frame(T_block - 1) + N * 3);
    }
    out.T = 1 + n_blocks * (T_block - 1);
    out.validate();
    return out;
}

}  // namespace egi::diffusion
