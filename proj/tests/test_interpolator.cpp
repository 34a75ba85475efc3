#include <catch2/catch_amalgamated.hpp>

#include "egi/gaussian_oracle.hpp"
#include "egi/model.hpp"
#include "egi/toymd.hpp"

using namespace egi;
using namespace egi::model;
using nn::LeafCache;
using ten::Tape;
using ten::Tensor;

namespace {

struct Fixture {
    std::shared_ptr<geom::MoleculeGraph> mol;
    nn::GraphIndex gidx;
    DenoiserModel m;
    long T, N;

    Fixture(long frames, std::uint64_t seed, bool scrambled, long blocks = 3) {
        mol = toymd::build_toy_molecule(5, seed).first;
        T = frames;
        N = mol->n_atoms;
        gidx = nn::GraphIndex::build(*mol, T);
        m.init(seed, blocks);
        if (scrambled) {
            Rng rng(seed ^ 0x5eed);
            for (nn::Param* p : m.all())
                for (double& v : p->value) v = 0.05 * rng.normal();
            for (auto& k : m.temporal.k_h) nn::init_constant(k, 0.7);
            for (auto& k : m.temporal.k_x) nn::init_constant(k, 0.7);
            nn::init_constant(m.temporal.k_simple, 0.7);
        }
    }

    ModelInputs inputs(std::vector<int> mask = {}) const {
        ModelInputs in;
        in.mol = mol.get();
        in.gidx = &gidx;
        in.T = T;
        in.mask = std::move(mask);
        in.tau = 7;
        return in;
    }

    std::vector<double> centered_coords(std::uint64_t seed) const {
        Rng rng(seed);
        std::vector<double> x(T * N * 3);
        for (double& v : x) v = rng.uniform(-1.2, 1.2);
        geom::remove_com(x, T, N);
        return x;
    }
};

}  // namespace

TEST_CASE("conformer denoiser is frame-independent") {
    Fixture f(3, 21, true);
    std::vector<double> x = f.centered_coords(5);
    ModelInputs in = f.inputs();

    Tape tape;
    LeafCache lc(tape, false);
    Tensor xt = tape.leaf({f.T * f.N, 3}, x, false);
    auto out = conformer_denoise(lc, f.m, xt, in).value();

    // permuting frames permutes outputs
    std::vector<long> perm = {2, 0, 1};
    std::vector<double> xp(x.size());
    for (long t = 0; t < 3; ++t)
        std::copy(x.begin() + perm[t] * f.N * 3, x.begin() + (perm[t] + 1) * f.N * 3,
                  xp.begin() + t * f.N * 3);
    Tape tape2;
    LeafCache lc2(tape2, false);
    Tensor xt2 = tape2.leaf({f.T * f.N, 3}, xp, false);
    auto out2 = conformer_denoise(lc2, f.m, xt2, in).value();
    for (long t = 0; t < 3; ++t)
        for (long i = 0; i < f.N * 3; ++i)
            REQUIRE(out2[t * f.N * 3 + i] == Catch::Approx(out[perm[t] * f.N * 3 + i]).margin(1e-14));

    // duplicated frame gives duplicated output rows
    std::vector<double> xd = x;
    std::copy(x.begin(), x.begin() + f.N * 3, xd.begin() + f.N * 3);  // frame1 := frame0
    Tape tape3;
    LeafCache lc3(tape3, false);
    auto out3 = conformer_denoise(lc3, f.m, tape3.leaf({f.T * f.N, 3}, xd, false), in).value();
    for (long i = 0; i < f.N * 3; ++i)
        REQUIRE(out3[f.N * 3 + i] == Catch::Approx(out3[i]).margin(1e-14));
}

TEST_CASE("identity temporal stack passes the conformer output through unchanged") {
    Fixture f(4, 31, false);  // fresh init: all temporal coordinate updates are zero
    Rng rng(4);
    for (nn::Param* p : f.m.theta())  // make the conformer stream nontrivial
        for (double& v : p->value) v = 0.05 * rng.normal();
    std::vector<double> x = f.centered_coords(6);
    ModelInputs in = f.inputs();

    Tape tape;
    LeafCache lc(tape, false);
    Tensor xt = tape.leaf({f.T * f.N, 3}, x, false);
    Tensor eps_hat = conformer_denoise(lc, f.m, xt, in);
    Tensor eps_tp = temporal_denoise(lc, f.m, xt, eps_hat, in);
    for (long i = 0; i < f.T * f.N * 3; ++i)
        REQUIRE(eps_tp.value()[i] == eps_hat.value()[i]);  // max dev 0

    // eps_hat = 0 with the identity stack gives 0
    Tensor zero = tape.leaf({f.T * f.N, 3}, std::vector<double>(f.T * f.N * 3, 0.0), false);
    Tensor eps_tp0 = temporal_denoise(lc, f.m, xt, zero, in);
    for (double v : eps_tp0.value()) REQUIRE(v == 0.0);
}

TEST_CASE("simple mixing arithmetic") {
    Fixture f(2, 41, true);
    std::vector<double> x = f.centered_coords(7);
    ModelInputs in = f.inputs();
    f.m.mix.variant = Variant::simple;

    // k = 0: equal average of the two streams
    nn::init_constant(f.m.temporal.k_simple, 0.0);
    Tape tape;
    LeafCache lc(tape, false);
    Tensor xt = tape.leaf({f.T * f.N, 3}, x, false);
    Tensor eps_hat = conformer_denoise(lc, f.m, xt, in);
    Tensor eps_tp = temporal_denoise(lc, f.m, xt, eps_hat, in);
    Tensor mixed = mix_simple(lc, f.m, eps_hat, eps_tp);
    for (long i = 0; i < f.T * f.N * 3; ++i)
        REQUIRE(mixed.value()[i] ==
                Catch::Approx(0.5 * (eps_hat.value()[i] + eps_tp.value()[i])).margin(1e-14));

    // force-alpha-one: output is exactly the conformer stream
    f.m.mix.force_alpha_one = true;
    auto forced = md_denoise_values(f.m, x, in);
    for (long i = 0; i < f.T * f.N * 3; ++i) REQUIRE(forced[i] == eps_hat.value()[i]);
    f.m.mix.force_alpha_one = false;

    // mixing scaled inputs scales the output
    Tensor two = tape.leaf_scalar(2.0);
    Tensor mixed2 = mix_simple(lc, f.m, ten::mul(eps_hat, two), ten::mul(eps_tp, two));
    for (long i = 0; i < f.T * f.N * 3; ++i)
        REQUIRE(mixed2.value()[i] == Catch::Approx(2.0 * mixed.value()[i]).margin(1e-13));
}

TEST_CASE("alpha = 1 reduction holds for both variants to 1e-12") {
    Fixture f(3, 51, true);
    std::vector<double> x = f.centered_coords(8);
    ModelInputs in = f.inputs();

    Tape tape;
    LeafCache lc(tape, false);
    Tensor xt = tape.leaf({f.T * f.N, 3}, x, false);
    auto eps_cf = conformer_denoise(lc, f.m, xt, in).value();

    for (Variant v : {Variant::simple, Variant::cascaded}) {
        f.m.mix.variant = v;
        f.m.mix.force_alpha_one = true;
        auto out = md_denoise_values(f.m, x, in);
        f.m.mix.force_alpha_one = false;
        double dev = 0.0;
        for (long i = 0; i < f.T * f.N * 3; ++i) dev = std::max(dev, std::abs(out[i] - eps_cf[i]));
        INFO(variant_name(v));
        REQUIRE(dev <= 1e-12);
    }

    // lambda = 0 drives every alpha to exactly 1
    f.m.mix.variant = Variant::cascaded;
    set_inference_lambda(f.m, 0.0);
    auto out = md_denoise_values(f.m, x, in);
    double dev = 0.0;
    for (long i = 0; i < f.T * f.N * 3; ++i) dev = std::max(dev, std::abs(out[i] - eps_cf[i]));
    REQUIRE(dev <= 1e-12);
    set_inference_lambda(f.m, 1.0);
}

TEST_CASE("lambda perturbs alphas as alpha' = lambda alpha + (1 - lambda)") {
    Fixture f(2, 61, true);
    f.m.mix.variant = Variant::simple;
    std::vector<double> x = f.centered_coords(9);
    ModelInputs in = f.inputs();

    // sigma(k) = 0.6, lambda = 0.5 -> alpha' = 0.8
    nn::init_constant(f.m.temporal.k_simple, std::log(0.6 / 0.4));
    set_inference_lambda(f.m, 0.5);
    Tape tape;
    LeafCache lc(tape, false);
    Tensor xt = tape.leaf({f.T * f.N, 3}, x, false);
    Tensor eps_hat = conformer_denoise(lc, f.m, xt, in);
    Tensor eps_tp = temporal_denoise(lc, f.m, xt, eps_hat, in);
    Tensor mixed = mix_simple(lc, f.m, eps_hat, eps_tp);
    for (long i = 0; i < 6; ++i)
        REQUIRE(mixed.value()[i] ==
                Catch::Approx(0.8 * eps_hat.value()[i] + 0.2 * eps_tp.value()[i]).margin(1e-12));

    // lambda = 1 is a no-op on parameters and output
    set_inference_lambda(f.m, 1.0);
    Tensor mixed1 = mix_simple(lc, f.m, eps_hat, eps_tp);
    for (long i = 0; i < 6; ++i)
        REQUIRE(mixed1.value()[i] ==
                Catch::Approx(0.6 * eps_hat.value()[i] + 0.4 * eps_tp.value()[i]).margin(1e-12));

    REQUIRE_THROWS_AS(set_inference_lambda(f.m, 1.5), Error);
    REQUIRE_THROWS_AS(set_inference_lambda(f.m, -0.1), Error);
}

TEST_CASE("cascaded mixing chain matches a hand-unrolled 2-block instance") {
    Fixture f(3, 71, false, 2);  // fresh init: temporal updates zero
    // zero ALL temporal parameters so ET and ES act as identities on h and x
    for (nn::Param* p : f.m.phi())
        std::fill(p->value.begin(), p->value.end(), 0.0);
    for (auto& n : f.m.temporal.site_norms) nn::init_constant(n.scale, 1.0);
    for (auto& k : f.m.temporal.k_h) nn::init_constant(k, 0.0);  // alpha = 1/2 everywhere
    for (auto& k : f.m.temporal.k_x) nn::init_constant(k, 0.0);
    Rng rng(3);
    for (nn::Param* p : f.m.theta())
        for (double& v : p->value) v = 0.05 * rng.normal();
    f.m.mix.variant = Variant::cascaded;

    std::vector<double> x = f.centered_coords(11);
    ModelInputs in = f.inputs();
    auto got = md_denoise_values(f.m, x, in);

    // hand unroll with direct layer calls and plain row-normalization for the
    // site norms (temporal layers are identities here)
    Tape tape;
    LeafCache lc(tape, false);
    Tensor xt = tape.leaf({f.T * f.N, 3}, x, false);
    Tensor h = nn::embed_inputs(lc, f.m.conformer.embed, *f.mol, f.T);
    Tensor edge_emb =
        ten::gather_rows(lc.get(f.m.conformer.embed.edge_table), f.gidx.edge_code);
    Tensor tau = tape.leaf({nn::kTimeEmbed}, nn::timestep_embedding(in.tau), false);
    auto ln_plain = [&](Tensor t) {
        ten::Tensor mu = ten::mean_axis(t, 1, true);
        ten::Tensor d = ten::sub(t, ten::broadcast(mu, t.shape()));
        ten::Tensor var = ten::mean_axis(ten::square(d), 1, true);
        return ten::div(d, ten::broadcast(ten::sqrt(var), t.shape()));
    };
    Tensor half = tape.leaf_scalar(0.5);
    Tensor sh = h, sx = xt;
    for (long l = 0; l < 2; ++l) {
        nn::EgclOut a =
            nn::egcl_forward(lc, f.m.conformer.blocks[l].egcl, edge_emb, sh, sx, f.gidx, tau);
        nn::EgclOut b = nn::gvp_coordinate_transition(lc, f.m.conformer.blocks[l].gvp, a.h, a.x,
                                                      f.T, f.N);
        Tensor uh = sh, ux = sx;
        for (int site = 0; site < 3; ++site) {
            uh = ten::add(ten::mul(half, b.h), ten::mul(half, ln_plain(uh)));
            ux = ten::add(ten::mul(half, b.x), ten::mul(half, ux));
        }
        sh = ten::add(ten::mul(half, b.h), ten::mul(half, ln_plain(uh)));
        sx = ten::add(ten::mul(half, b.x), ten::mul(half, ux));
    }
    Tensor expect = ten::sub(sx, xt);
    for (long i = 0; i < f.T * f.N * 3; ++i)
        REQUIRE(got[i] == Catch::Approx(expect.value()[i]).margin(1e-12));
}

TEST_CASE("full MD denoiser is rotation-equivariant and translation-invariant") {
    for (Variant v : {Variant::simple, Variant::cascaded}) {
        Fixture f(3, 81, true);
        f.m.mix.variant = v;
        ModelInputs in = f.inputs({1, 0, 0});
        Rng rng(12);
        for (int rep = 0; rep < 5; ++rep) {
            std::vector<double> x = f.centered_coords(100 + rep);
            geom::RigidTransform g = geom::random_rigid_transform(rng);
            std::vector<double> xg = x;
            for (long t = 0; t < f.T; ++t) g.apply_inplace(xg.data() + t * f.N * 3, f.N);
            geom::remove_com(xg, f.T, f.N);
            auto out_a = md_denoise_values(f.m, x, in);
            auto out_b = md_denoise_values(f.m, xg, in);
            double dev = 0.0;
            for (long i = 0; i < f.T * f.N; ++i) {
                Eigen::Vector3d rot =
                    g.rotation * Eigen::Map<const Eigen::Vector3d>(out_a.data() + i * 3);
                for (int c = 0; c < 3; ++c)
                    dev = std::max(dev, std::abs(rot[c] - out_b[i * 3 + c]));
            }
            INFO(variant_name(v));
            REQUIRE(dev <= 1e-9);
        }
    }
}

TEST_CASE("mixing logits receive correct gradients") {
    Fixture f(2, 91, true, 2);
    f.m.mix.variant = Variant::cascaded;
    std::vector<double> x = f.centered_coords(13);
    ModelInputs in = f.inputs();

    auto loss_value = [&]() {
        Tape tape;
        LeafCache lc(tape, false);
        Tensor xt = tape.leaf({f.T * f.N, 3}, x, false);
        return ten::mean_all(ten::square(md_denoise(lc, f.m, xt, in))).scalar();
    };
    std::unordered_map<nn::Param*, double> analytic;
    {
        Tape tape;
        LeafCache lc(tape, true);
        Tensor xt = tape.leaf({f.T * f.N, 3}, x, false);
        Tensor loss = ten::mean_all(ten::square(md_denoise(lc, f.m, xt, in)));
        for (nn::Param* p : f.m.all()) p->zero_grad();
        tape.backward(loss);
        lc.accumulate_grads();
        for (auto& k : f.m.temporal.k_h) analytic[&k] = k.grad[0];
        for (auto& k : f.m.temporal.k_x) analytic[&k] = k.grad[0];
    }
    const double step = 1e-4;
    double num = 0.0, den = 0.0;
    auto probe = [&](nn::Param& k) {
        const double keep = k.value[0];
        k.value[0] = keep + step;
        const double up = loss_value();
        k.value[0] = keep - step;
        const double dn = loss_value();
        k.value[0] = keep;
        const double cd = (up - dn) / (2 * step);
        num += (analytic[&k] - cd) * (analytic[&k] - cd);
        den += cd * cd;
    };
    for (auto& k : f.m.temporal.k_h) probe(k);
    for (auto& k : f.m.temporal.k_x) probe(k);
    REQUIRE(std::sqrt(num) / (std::sqrt(den) + 1e-12) <= 1e-4);
}

TEST_CASE("Gaussian oracle verifies the induced-distribution identity") {
    // rho = 0: the joint equals the product of marginals, eps_phi == eps_hat
    {
        GaussianOracle o;
        o.T = 2;
        o.sigma1 = 1.3;
        o.rho = 0.0;
        REQUIRE(gaussian_theorem_check(o, 0.5, 0.37) <= 1e-12);
        // direct statement of the extreme case
        Eigen::VectorXd x(2);
        x << 0.7, -0.4;
        Eigen::VectorXd eps_phi = (o.eps_md(x, 0.37) - 0.5 * o.eps_hat(x, 0.37)) / 0.5;
        REQUIRE((eps_phi - o.eps_hat(x, 0.37)).cwiseAbs().maxCoeff() <= 1e-12);
    }
    // sigma1 = 1, rho = 0.5, alpha = 0.5 (beta = 2) over a 100-point grid
    {
        GaussianOracle o;
        o.sigma1 = 1.0;
        o.rho = 0.5;
        REQUIRE(gaussian_theorem_check(o, 0.5, 0.37, 10) <= 1e-10);
    }
    // at the joint mean every score is zero and the identity is exact
    {
        GaussianOracle o;
        Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
        REQUIRE(o.score_md(zero, 0.5).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(o.score_hat(zero, 0.5).cwiseAbs().maxCoeff() == 0.0);
    }
    // alpha = 1 leaves beta undefined
    GaussianOracle o;
    REQUIRE_THROWS_AS(gaussian_theorem_check(o, 1.0, 0.5), Error);
}

TEST_CASE("theorem identity holds across the (alpha, rho) grid") {
    for (double alpha : {0.2, 0.5, 0.8})
        for (double rho : {0.0, 0.3, 0.7})
            for (double abar : {0.9, 0.5, 0.1}) {
                GaussianOracle o;
                o.sigma1 = 1.0;
                o.rho = rho;
                REQUIRE(gaussian_theorem_check(o, alpha, abar, 10) <= 1e-10);
            }
}
