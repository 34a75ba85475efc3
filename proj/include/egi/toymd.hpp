#pragma once

// Self-contained ground-truth world: random chain molecules with an analytic
// force field, overdamped Langevin simulation, conformer generation by
// minimization, and dataset emission.

#include <optional>

#include "egi/geom.hpp"

namespace egi::toymd {

struct BondTerm { int i, j; double k, r0; };
struct AngleTerm { int i, j, k; double kq, theta0; };
struct TorsionTerm { int i, j, k, l; double amp; int mult; double phase; };
struct RepulsionPair { int i, j; double eps, sigma; };

struct ToyForceField {
    std::vector<BondTerm> bonds;
    std::vector<AngleTerm> angles;
    std::vector<TorsionTerm> torsions;
    std::vector<RepulsionPair> repulsions;
};

struct LangevinParams {
    double kT = 0.15;
    double gamma = 1.0;
    double dt = 1e-3;
    long stride = 2000;  // steps between saved frames

    void check_stability(const ToyForceField& ff) const {
        double kmax = 0.0;
        for (const BondTerm& b : ff.bonds) kmax = std::max(kmax, b.k);
        for (const AngleTerm& a : ff.angles) kmax = std::max(kmax, a.kq);
        if (kmax > 0.0 && dt > 0.25 / kmax)
            fail("unstable-params", "dt exceeds 0.25/max stiffness");
    }
};

// Fixed per-kind tables (4-letter alphabet used by the generator).
namespace tables {
constexpr double kind_radius[4] = {0.50, 0.56, 0.62, 0.68};
constexpr double kind_bond_k[4] = {40.0, 50.0, 60.0, 70.0};
constexpr double kind_angle_k[4] = {20.0, 25.0, 30.0, 35.0};
constexpr double kind_theta0[4] = {1.911, 2.094, 1.823, 2.000};
// torsion class from the central bond's kind pair: 3-fold barriers sit near
// 4 kT of the default simulation temperature, 1-fold ones are soft rotors
inline int torsion_mult(int ka, int kb) { return 1 + (ka + kb) % 3; }
inline double torsion_amp(int ka, int kb) {
    switch (torsion_mult(ka, kb)) {
        case 1: return (ka + kb) % 2 == 0 ? 0.03 : 0.08;
        case 2: return 0.15;
        default: return 0.30;
    }
}
constexpr double repulsion_eps = 0.05;
constexpr double repulsion_sigma = 1.0;
}  // namespace tables

inline ToyForceField make_force_field(const geom::MoleculeGraph& mol) {
    ToyForceField ff;
    const auto& kinds = mol.atom_kinds;
    for (auto [i, j] : geom::bond_pairs(mol)) {
        const double r0 = tables::kind_radius[kinds[i]] + tables::kind_radius[kinds[j]];
        const double k = 0.5 * (tables::kind_bond_k[kinds[i]] + tables::kind_bond_k[kinds[j]]);
        ff.bonds.push_back({i, j, k, r0});
    }
    for (auto [i, j, k] : geom::angle_triples(mol))
        ff.angles.push_back({i, j, k, tables::kind_angle_k[kinds[j]], tables::kind_theta0[kinds[j]]});
    for (auto [i, j, k, l] : geom::torsion_quads(mol)) {
        const int ka = kinds[j], kb = kinds[k];
        ff.torsions.push_back(
            {i, j, k, l, tables::torsion_amp(ka, kb), tables::torsion_mult(ka, kb), 0.0});
    }
    // soft repulsion only beyond the torsion span (bond-graph distance >= 4)
    std::vector<std::pair<int, int>> bonds;
    for (auto [i, j] : geom::bond_pairs(mol)) {
        bonds.emplace_back(i, j);
        bonds.emplace_back(j, i);
    }
    auto upto3 = geom::build_higher_order_edges(bonds, mol.n_atoms, 3);
    std::vector<std::vector<char>> near(mol.n_atoms, std::vector<char>(mol.n_atoms, 0));
    for (const geom::Edge& e : upto3) near[e.i][e.j] = 1;
    for (int i = 0; i < mol.n_atoms; ++i)
        for (int j = i + 1; j < mol.n_atoms; ++j)
            if (!near[i][j])
                ff.repulsions.push_back({i, j, tables::repulsion_eps, tables::repulsion_sigma});
    return ff;
}

// Random tree topology biased toward chains with occasional branches.
inline std::pair<std::shared_ptr<geom::MoleculeGraph>, ToyForceField> build_toy_molecule(
    int n_atoms, std::uint64_t seed) {
    if (n_atoms < 4 || n_atoms > 16) fail("bad-arg", "n_atoms must be in [4, 16]");
    Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x51ed2701);
    std::vector<std::pair<int, int>> bonds;
    std::vector<int> degree(n_atoms, 0);
    for (int v = 1; v < n_atoms; ++v) {
        int u;
        if (v == 1 || rng.uniform() < 0.8) {
            u = v - 1;  // extend the chain
        } else {
            do {
                u = static_cast<int>(rng.uniform_int(0, v - 1));
            } while (degree[u] >= 3);
        }
        if (degree[u] >= 4) u = v - 1;
        bonds.emplace_back(u, v);
        bonds.emplace_back(v, u);
        ++degree[u];
        ++degree[v];
    }
    auto mol = std::make_shared<geom::MoleculeGraph>();
    mol->n_atoms = n_atoms;
    mol->atom_kinds.resize(n_atoms);
    for (int i = 0; i < n_atoms; ++i) mol->atom_kinds[i] = static_cast<int>(rng.uniform_int(0, 3));
    mol->edges = geom::build_higher_order_edges(bonds, n_atoms, 3);
    mol->atom_features.assign(n_atoms * geom::kFeatureDim, 0.0);
    for (int i = 0; i < n_atoms; ++i) {
        double* f = mol->atom_features.data() + i * geom::kFeatureDim;
        f[std::min(degree[i], geom::kMaxDegree)] = 1.0;  // degree one-hot
        f[geom::kMaxDegree + 1] = 0.0;                   // ring flag (trees have none)
        f[geom::kMaxDegree + 2 + mol->atom_kinds[i]] = 1.0;
    }
    mol->validate();
    ToyForceField ff = make_force_field(*mol);
    return {mol, ff};
}

// E and analytic forces F = -grad E.
inline std::pair<double, std::vector<double>> energy_forces(const ToyForceField& ff,
                                                            const double* x, int n_atoms) {
    double E = 0.0;
    std::vector<double> F(n_atoms * 3, 0.0);
    auto at = [&](int i) { return Eigen::Map<const Eigen::Vector3d>(x + i * 3); };
    auto f_at = [&](int i) { return Eigen::Map<Eigen::Vector3d>(F.data() + i * 3); };

    for (const BondTerm& b : ff.bonds) {
        Eigen::Vector3d d = at(b.i) - at(b.j);
        const double r = d.norm();
        E += 0.5 * b.k * (r - b.r0) * (r - b.r0);
        Eigen::Vector3d g = b.k * (r - b.r0) / r * d;  // dE/dx_i
        f_at(b.i) -= g;
        f_at(b.j) += g;
    }
    for (const AngleTerm& a : ff.angles) {
        Eigen::Vector3d u = at(a.i) - at(a.j);
        Eigen::Vector3d v = at(a.k) - at(a.j);
        const double nu = u.norm(), nv = v.norm();
        const double cosq = std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
        const double theta = std::acos(cosq);
        const double sinq = std::max(std::sqrt(1.0 - cosq * cosq), 1e-8);
        const double dEdq = a.kq * (theta - a.theta0);
        E += 0.5 * a.kq * (theta - a.theta0) * (theta - a.theta0);
        Eigen::Vector3d dcos_du = v / (nu * nv) - cosq * u / (nu * nu);
        Eigen::Vector3d dcos_dv = u / (nu * nv) - cosq * v / (nv * nv);
        Eigen::Vector3d gi = dEdq * (-1.0 / sinq) * dcos_du;
        Eigen::Vector3d gk = dEdq * (-1.0 / sinq) * dcos_dv;
        f_at(a.i) -= gi;
        f_at(a.k) -= gk;
        f_at(a.j) += gi + gk;
    }
    for (const TorsionTerm& t : ff.torsions) {
        Eigen::Vector3d b1 = at(t.j) - at(t.i);
        Eigen::Vector3d b2 = at(t.k) - at(t.j);
        Eigen::Vector3d b3 = at(t.l) - at(t.k);
        Eigen::Vector3d m = b1.cross(b2);
        Eigen::Vector3d n = b2.cross(b3);
        const double m2 = m.squaredNorm(), n2 = n.squaredNorm();
        const double nb2 = b2.norm();
        if (m2 < 1e-12 || n2 < 1e-12) continue;  // colinear: torsion undefined, no force
        const double y = m.cross(n).dot(b2) / nb2;
        const double c = m.dot(n);
        const double phi = std::atan2(y, c);
        E += t.amp * (1.0 + std::cos(t.mult * phi - t.phase));
        const double dEdphi = -t.amp * t.mult * std::sin(t.mult * phi - t.phase);
        Eigen::Vector3d dphi_di = -(nb2 / m2) * m;
        Eigen::Vector3d dphi_dl = (nb2 / n2) * n;
        const double p = b1.dot(b2) / (nb2 * nb2);
        const double q = b3.dot(b2) / (nb2 * nb2);
        Eigen::Vector3d dphi_dj = -(1.0 + p) * dphi_di + q * dphi_dl;
        Eigen::Vector3d dphi_dk = p * dphi_di - (1.0 + q) * dphi_dl;
        f_at(t.i) -= dEdphi * dphi_di;
        f_at(t.j) -= dEdphi * dphi_dj;
        f_at(t.k) -= dEdphi * dphi_dk;
        f_at(t.l) -= dEdphi * dphi_dl;
    }
    for (const RepulsionPair& r : ff.repulsions) {
        Eigen::Vector3d d = at(r.i) - at(r.j);
        const double dist = d.norm();
        if (dist < 1e-8) fail("coincident-atoms", "repulsion pair at zero distance");
        const double s6 = std::pow(r.sigma / dist, 6);
        E += r.eps * s6;
        Eigen::Vector3d g = -6.0 * r.eps * s6 / (dist * dist) * d;  // dE/dx_i
        f_at(r.i) -= g;
        f_at(r.j) += g;
    }
    return {E, std::move(F)};
}

inline double energy(const ToyForceField& ff, const double* x, int n_atoms) {
    return energy_forces(ff, x, n_atoms).first;
}

// Overdamped update x <- x + (dt/gamma) F + sqrt(2 kT dt / gamma) xi.
inline geom::Trajectory langevin_simulate(const ToyForceField& ff,
                                          std::shared_ptr<const geom::MoleculeGraph> mol,
                                          const std::vector<double>& x_init,
                                          const LangevinParams& params, long n_frames,
                                          std::uint64_t seed, long burn_in_steps = 0) {
    params.check_stability(ff);
    const int n = mol->n_atoms;
    Rng rng(seed * 0x2545f4914f6cdd1dULL + 1);
    std::vector<double> x = x_init;
    const double drift = params.dt / params.gamma;
    const double kick = std::sqrt(2.0 * params.kT * params.dt / params.gamma);
    geom::Trajectory traj;
    traj.T = n_frames;
    traj.N = n;
    traj.frame_dt = params.dt * static_cast<double>(params.stride);
    traj.mol = mol;
    traj.coords.reserve(n_frames * n * 3);
    auto step = [&] {
        auto [E, F] = energy_forces(ff, x.data(), n);
        (void)E;
        for (int i = 0; i < n * 3; ++i) x[i] += drift * F[i] + kick * rng.normal();
        for (double v : x)
            if (!std::isfinite(v) || std::abs(v) > 1e3)
                fail("unstable-simulation", "coordinates diverged");
    };
    for (long s = 0; s < burn_in_steps; ++s) step();
    traj.coords.insert(traj.coords.end(), x.begin(), x.end());
    for (long f = 1; f < n_frames; ++f) {
        for (long s = 0; s < params.stride; ++s) step();
        traj.coords.insert(traj.coords.end(), x.begin(), x.end());
    }
    traj.validate();
    return traj;
}

// Gradient descent with backtracking until the max force component <= tol.
// Returns the centered frame. Energy decreases over accepted steps.
inline std::vector<double> minimize_conformer(const ToyForceField& ff, int n_atoms,
                                              const std::vector<double>& x_init,
                                              double tol = 1e-6, long max_iter = 100000) {
    std::vector<double> x = x_init;
    double alpha = 1e-3;
    auto [E, F] = energy_forces(ff, x.data(), n_atoms);
    for (long it = 0; it < max_iter; ++it) {
        double fmax = 0.0;
        for (double f : F) fmax = std::max(fmax, std::abs(f));
        if (fmax <= tol) {
            geom::remove_com_frame(x.data(), n_atoms);
            return x;
        }
        std::vector<double> trial(x.size());
        while (true) {
            for (std::size_t i = 0; i < x.size(); ++i) trial[i] = x[i] + alpha * F[i];
            double Et;
            try {
                Et = energy(ff, trial.data(), n_atoms);
            } catch (const Error&) {
                Et = std::numeric_limits<double>::infinity();
            }
            if (Et < E) {
                x.swap(trial);
                E = Et;
                alpha *= 1.3;
                break;
            }
            alpha *= 0.5;
            if (alpha < 1e-14) fail("minimization-stalled", "backtracking reached zero step");
        }
        std::tie(E, F) = energy_forces(ff, x.data(), n_atoms);
    }
    fail("minimization-iteration-cap", "no convergence within the iteration cap");
}

inline std::vector<double> random_start(Rng& rng, int n_atoms, double scale = 1.2) {
    while (true) {
        std::vector<double> x(n_atoms * 3);
        for (double& v : x) v = scale * rng.normal();
        double dmin = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n_atoms; ++i)
            for (int j = i + 1; j < n_atoms; ++j)
                dmin = std::min(dmin, geom::bond_length(x.data(), i, j));
        if (dmin > 0.25) return x;
    }
}

// ---- dataset emission ------------------------------------------------------

struct ToyDatasetConfig {
    int train_molecules = 24;
    int val_molecules = 8;
    int test_molecules = 8;
    int conformers_per_molecule = 50;
    int trajectories_per_molecule = 4;  // test molecules get one extra oracle run
    long frames = 512;
    LangevinParams langevin;
    int min_atoms = 5;
    int max_atoms = 8;
    double dedup_rmsd = 0.1;
    long burn_in_steps = 5000;
};

struct MoleculeData {
    std::shared_ptr<geom::MoleculeGraph> mol;
    ToyForceField ff;
    std::uint64_t molecule_seed = 0;
    std::vector<std::vector<double>> conformers;  // centered frames
    std::vector<geom::Trajectory> trajectories;   // reference replicas
    std::optional<geom::Trajectory> oracle;       // held-out replica (test split)
};

struct DatasetBundle {
    ToyDatasetConfig config;
    std::uint64_t seed = 0;
    std::vector<MoleculeData> train, val, test;
};

inline MoleculeData generate_molecule_data(const ToyDatasetConfig& cfg, std::uint64_t mol_seed,
                                           bool with_oracle) {
    MoleculeData md;
    md.molecule_seed = mol_seed;
    Rng rng(mol_seed);
    const int n_atoms = static_cast<int>(rng.uniform_int(cfg.min_atoms, cfg.max_atoms));
    std::tie(md.mol, md.ff) = build_toy_molecule(n_atoms, rng.bits());

    const int attempts = cfg.conformers_per_molecule * 3;
    for (int a = 0; a < attempts &&
                    static_cast<int>(md.conformers.size()) < cfg.conformers_per_molecule;
         ++a) {
        std::vector<double> start = random_start(rng, n_atoms);
        std::vector<double> min;
        try {
            min = minimize_conformer(md.ff, n_atoms, start);
        } catch (const Error&) {
            continue;
        }
        bool fresh = true;
        for (const auto& kept : md.conformers)
            if (geom::rmsd_aligned(min, kept) <= cfg.dedup_rmsd) {
                fresh = false;
                break;
            }
        if (fresh) md.conformers.push_back(std::move(min));
    }
    if (md.conformers.empty()) fail("no-conformers", "minimization produced nothing");

    const int runs = cfg.trajectories_per_molecule + (with_oracle ? 1 : 0);
    for (int r = 0; r < runs; ++r) {
        const auto& start = md.conformers[r % md.conformers.size()];
        geom::Trajectory traj = langevin_simulate(md.ff, md.mol, start, cfg.langevin, cfg.frames,
                                                  rng.bits(), cfg.burn_in_steps);
        if (with_oracle && r == runs - 1)
            md.oracle = std::move(traj);
        else
            md.trajectories.push_back(std::move(traj));
    }
    return md;
}

// Disjoint train/val/test molecule splits, deterministic in seed.
inline DatasetBundle generate_datasets(const ToyDatasetConfig& cfg, std::uint64_t seed) {
    DatasetBundle out;
    out.config = cfg;
    out.seed = seed;
    Rng rng(seed);
    auto gen_split = [&](int count, bool with_oracle) {
        std::vector<MoleculeData> split;
        split.reserve(count);
        for (int i = 0; i < count; ++i)
            split.push_back(generate_molecule_data(cfg, rng.bits() | 1ULL, with_oracle));
        return split;
    };
    out.train = gen_split(cfg.train_molecules, false);
    out.val = gen_split(cfg.val_molecules, false);
    out.test = gen_split(cfg.test_molecules, true);
    return out;
}

}  // namespace egi::toymd
