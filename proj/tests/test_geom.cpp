#include <catch2/catch_amalgamated.hpp>

#include "egi/geom.hpp"

using namespace egi;
using namespace egi::geom;

namespace {

std::vector<double> random_frame(Rng& rng, long n, double scale = 1.5) {
    std::vector<double> x(n * 3);
    for (double& v : x) v = rng.uniform(-scale, scale);
    return x;
}

// Independent oracle: exhaustive Euler-angle grid with the translation solved
// in closed form (centroid match). Returns the minimal sum of squares.
double grid_residual(const std::vector<double>& P, const std::vector<double>& Q,
                     double step_deg, const Eigen::Matrix3d& around = Eigen::Matrix3d::Identity()) {
    const long n = static_cast<long>(P.size()) / 3;
    Eigen::Vector3d pc = Eigen::Vector3d::Zero(), qc = Eigen::Vector3d::Zero();
    for (long i = 0; i < n; ++i) {
        pc += Eigen::Map<const Eigen::Vector3d>(P.data() + i * 3);
        qc += Eigen::Map<const Eigen::Vector3d>(Q.data() + i * 3);
    }
    pc /= n;
    qc /= n;
    double cP = 0.0, cQ = 0.0;
    Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
    for (long i = 0; i < n; ++i) {
        Eigen::Vector3d p = Eigen::Map<const Eigen::Vector3d>(P.data() + i * 3) - pc;
        Eigen::Vector3d q = Eigen::Map<const Eigen::Vector3d>(Q.data() + i * 3) - qc;
        cP += p.squaredNorm();
        cQ += q.squaredNorm();
        H += p * q.transpose();
    }
    const double step = step_deg * M_PI / 180.0;
    double best = std::numeric_limits<double>::infinity();
    for (double a = 0.0; a < 2 * M_PI - 1e-9; a += step)
        for (double b = 0.0; b <= M_PI + 1e-9; b += step)
            for (double c = 0.0; c < 2 * M_PI - 1e-9; c += step) {
                Eigen::Matrix3d R = around *
                                    (Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()) *
                                     Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()) *
                                     Eigen::AngleAxisd(c, Eigen::Vector3d::UnitZ()))
                                        .toRotationMatrix();
                const double ss = cP + cQ - 2.0 * (R * H).trace();
                best = std::min(best, ss);
            }
    return std::max(best, 0.0);
}

double residual_of(const RigidTransform& g, const std::vector<double>& P,
                   const std::vector<double>& Q) {
    const long n = static_cast<long>(P.size()) / 3;
    double ss = 0.0;
    for (long i = 0; i < n; ++i)
        ss += (g.rotation * Eigen::Map<const Eigen::Vector3d>(P.data() + i * 3) + g.translation -
               Eigen::Map<const Eigen::Vector3d>(Q.data() + i * 3))
                  .squaredNorm();
    return ss;
}

MoleculeGraph chain_molecule(int n) {
    std::vector<std::pair<int, int>> bonds;
    for (int i = 0; i + 1 < n; ++i) {
        bonds.emplace_back(i, i + 1);
        bonds.emplace_back(i + 1, i);
    }
    MoleculeGraph mol;
    mol.n_atoms = n;
    mol.atom_kinds.assign(n, 0);
    mol.atom_features.assign(n * kFeatureDim, 0.0);
    mol.edges = build_higher_order_edges(bonds, n, 3);
    mol.validate();
    return mol;
}

}  // namespace

TEST_CASE("higher-order edges on short paths") {
    // a-b-c, max_order 2 adds (a,c) with code 2
    std::vector<std::pair<int, int>> bonds = {{0, 1}, {1, 0}, {1, 2}, {2, 1}};
    auto edges = build_higher_order_edges(bonds, 3, 2);
    bool found = false;
    for (const Edge& e : edges)
        if (e.i == 0 && e.j == 2) {
            found = true;
            REQUIRE(e.order == 2);
        }
    REQUIRE(found);

    // a-b-c-d, max_order 3: (a,c),(b,d) code 2 and (a,d) code 3
    bonds = {{0, 1}, {1, 0}, {1, 2}, {2, 1}, {2, 3}, {3, 2}};
    edges = build_higher_order_edges(bonds, 4, 3);
    auto order_of = [&](int i, int j) {
        for (const Edge& e : edges)
            if (e.i == i && e.j == j) return e.order;
        return 0;
    };
    REQUIRE(order_of(0, 2) == 2);
    REQUIRE(order_of(1, 3) == 2);
    REQUIRE(order_of(0, 3) == 3);
    REQUIRE(order_of(3, 0) == 3);
}

TEST_CASE("six-cycle opposite vertices get code 3, agreeing with a BFS oracle") {
    std::vector<std::pair<int, int>> bonds;
    for (int i = 0; i < 6; ++i) {
        bonds.emplace_back(i, (i + 1) % 6);
        bonds.emplace_back((i + 1) % 6, i);
    }
    auto edges = build_higher_order_edges(bonds, 6, 3);
    for (int i = 0; i < 6; ++i) {
        int opposite = (i + 3) % 6;
        bool seen = false;
        for (const Edge& e : edges)
            if (e.i == i && e.j == opposite) {
                seen = true;
                REQUIRE(e.order == 3);
            }
        REQUIRE(seen);
    }
}

TEST_CASE("higher-order edges match BFS distances on random connected graphs") {
    Rng rng(31337);
    for (int rep = 0; rep < 100; ++rep) {
        const int n = static_cast<int>(rng.uniform_int(3, 12));
        std::vector<std::pair<int, int>> bonds;
        std::vector<std::vector<int>> adj(n);
        for (int v = 1; v < n; ++v) {  // random spanning tree keeps it connected
            int u = static_cast<int>(rng.uniform_int(0, v - 1));
            bonds.emplace_back(u, v);
            bonds.emplace_back(v, u);
            adj[u].push_back(v);
            adj[v].push_back(u);
        }
        for (int extra = 0; extra < n / 3; ++extra) {  // a few cycle edges
            int u = static_cast<int>(rng.uniform_int(0, n - 1));
            int v = static_cast<int>(rng.uniform_int(0, n - 1));
            if (u == v) continue;
            bool dup = false;
            for (int w : adj[u]) dup = dup || w == v;
            if (dup) continue;
            bonds.emplace_back(u, v);
            bonds.emplace_back(v, u);
            adj[u].push_back(v);
            adj[v].push_back(u);
        }
        auto edges = build_higher_order_edges(bonds, n, 3);
        // oracle: plain BFS distances
        std::vector<std::vector<int>> dist(n, std::vector<int>(n, -1));
        for (int s = 0; s < n; ++s) {
            std::deque<int> q{s};
            dist[s][s] = 0;
            while (!q.empty()) {
                int u = q.front();
                q.pop_front();
                for (int v : adj[u])
                    if (dist[s][v] < 0) {
                        dist[s][v] = dist[s][u] + 1;
                        q.push_back(v);
                    }
            }
        }
        std::vector<std::vector<int>> got(n, std::vector<int>(n, 0));
        for (const Edge& e : edges) got[e.i][e.j] = e.order;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const int expect = (i != j && dist[i][j] > 0 && dist[i][j] <= 3) ? dist[i][j] : 0;
                REQUIRE(got[i][j] == expect);
                REQUIRE(got[i][j] == got[j][i]);  // symmetry
            }
    }
}

TEST_CASE("remove_com centers frames and reports centroids") {
    Rng rng(7);
    std::vector<double> x = random_frame(rng, 7);
    std::vector<double> shifted = x;
    for (long i = 0; i < 7; ++i) {
        shifted[i * 3 + 0] += 2.5;
        shifted[i * 3 + 1] -= 1.0;
        shifted[i * 3 + 2] += 0.25;
    }
    Eigen::Vector3d c0 = remove_com_frame(x.data(), 7);
    Eigen::Vector3d c1 = remove_com_frame(shifted.data(), 7);
    REQUIRE((c1 - c0 - Eigen::Vector3d(2.5, -1.0, 0.25)).cwiseAbs().maxCoeff() < 1e-12);
    for (int i = 0; i < 21; ++i) REQUIRE(x[i] == Catch::Approx(shifted[i]).margin(1e-12));
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (long i = 0; i < 7; ++i) mean += Eigen::Map<Eigen::Vector3d>(x.data() + i * 3);
    REQUIRE((mean / 7).cwiseAbs().maxCoeff() <= 1e-12);

    // already-centered frame is unchanged with centroid ~0
    std::vector<double> again = x;
    Eigen::Vector3d c2 = remove_com_frame(again.data(), 7);
    REQUIRE(c2.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("random rigid transforms are deterministic, orthonormal, and isotropic") {
    RigidTransform a = random_rigid_transform(555);
    RigidTransform b = random_rigid_transform(555);
    REQUIRE((a.rotation - b.rotation).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((a.translation - b.translation).cwiseAbs().maxCoeff() == 0.0);

    Rng rng(2);
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (int i = 0; i < 10000; ++i) {
        RigidTransform g = random_rigid_transform(rng);
        g.check();  // R^T R = I, det = +1 to 1e-10
        mean += g.rotation * Eigen::Vector3d::UnitZ();
    }
    REQUIRE((mean / 10000).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("kabsch recovers exact and rigid-copy alignments") {
    Rng rng(11);
    std::vector<double> P = random_frame(rng, 8);
    RigidTransform id = kabsch_align(P, P);
    REQUIRE((id.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE(id.translation.cwiseAbs().maxCoeff() < 1e-10);

    RigidTransform g0 = random_rigid_transform(rng);
    std::vector<double> Q = g0.apply(P);
    RigidTransform rec = kabsch_align(P, Q);
    REQUIRE((rec.rotation - g0.rotation).cwiseAbs().maxCoeff() < 1e-9);
    REQUIRE(residual_of(rec, P, Q) < 1e-18);
    REQUIRE(rmsd_aligned(Q, P) <= 1e-10);
}

TEST_CASE("kabsch residual never exceeds the Euler-grid oracle") {
    Rng rng(21);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> P = random_frame(rng, 8);
        std::vector<double> Q = random_frame(rng, 8);
        RigidTransform g = kabsch_align(P, Q);
        const double ours = residual_of(g, P, Q);
        const double grid = grid_residual(P, Q, 15.0);  // coarse grid is an upper bound
        REQUIRE(ours <= grid + 1e-12);
    }
    // one instance against the full 5-degree grid
    std::vector<double> P = random_frame(rng, 8);
    std::vector<double> Q = random_frame(rng, 8);
    REQUIRE(residual_of(kabsch_align(P, Q), P, Q) <= grid_residual(P, Q, 5.0) + 1e-12);
}

TEST_CASE("rmsd_aligned matches grid-refined oracle and is symmetric") {
    Rng rng(77);
    std::vector<double> P = random_frame(rng, 6);
    std::vector<double> Q = random_frame(rng, 6);
    const double ours = rmsd_aligned(P, Q);
    // refine: 5-degree global grid, then 0.5-degree grid around the optimum
    RigidTransform g = kabsch_align(P, Q);
    double ss = std::min(grid_residual(P, Q, 5.0), grid_residual(P, Q, 0.5, g.rotation));
    const double oracle = std::sqrt(ss / 6.0);
    REQUIRE(std::abs(ours - oracle) < 1e-3);
    REQUIRE(std::abs(rmsd_aligned(P, Q) - rmsd_aligned(Q, P)) < 1e-10);
    REQUIRE(rmsd_aligned(P, P) <= 1e-12);
}

TEST_CASE("degenerate alignment is refused") {
    std::vector<double> line = {0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0};
    std::vector<double> other = {0, 0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0};
    REQUIRE_THROWS_AS(kabsch_align(line, other), Error);
    std::vector<double> two = {0, 0, 0, 1, 1, 1};
    REQUIRE_THROWS_AS(kabsch_align(two, two), Error);
}

TEST_CASE("trajectory kabsch equals kabsch on the flattened cloud") {
    Rng rng(5);
    const long T = 4, N = 5;
    std::vector<double> X0(T * N * 3), Xt(T * N * 3);
    for (double& v : X0) v = rng.uniform(-2, 2);
    for (long i = 0; i < T * N * 3; ++i) Xt[i] = X0[i] + 0.3 * rng.normal();

    RigidTransform a = trajectory_kabsch(Xt, X0);
    RigidTransform b = kabsch_align(Xt, X0);  // same flattening by construction
    REQUIRE((a.rotation - b.rotation).cwiseAbs().maxCoeff() == 0.0);

    // identity and joint-rigid recovery
    RigidTransform id = trajectory_kabsch(X0, X0);
    REQUIRE((id.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-10);
    RigidTransform g0 = random_rigid_transform(rng);
    std::vector<double> Xg = X0;
    for (long t = 0; t < T; ++t) g0.apply_inplace(Xg.data() + t * N * 3, N);
    RigidTransform rec = trajectory_kabsch(Xg, X0);
    REQUIRE(residual_of(rec, Xg, X0) < 1e-18);

    // joint constraint is tighter: trajectory residual >= sum of per-frame optima
    double per_frame = 0.0;
    for (long t = 0; t < T; ++t) {
        std::vector<double> pt(Xt.begin() + t * N * 3, Xt.begin() + (t + 1) * N * 3);
        std::vector<double> p0(X0.begin() + t * N * 3, X0.begin() + (t + 1) * N * 3);
        per_frame += residual_of(kabsch_align(pt, p0), pt, p0);
    }
    REQUIRE(residual_of(a, Xt, X0) >= per_frame - 1e-12);
}

TEST_CASE("internal coordinates: known instances") {
    MoleculeGraph mol = chain_molecule(3);
    // equilateral triangle path: angle at the middle vertex is pi/3
    std::vector<double> tri = {0, 0, 0, 1, 0, 0, 0.5, std::sqrt(3.0) / 2.0, 0};
    auto ic = internal_coordinates(mol, tri.data());
    REQUIRE(ic.bond_angles.size() == 1);
    REQUIRE(ic.bond_angles[0] == Catch::Approx(M_PI / 3.0).margin(1e-12));

    MoleculeGraph chain4 = chain_molecule(4);
    // planar cis: torsion 0; trans: pi
    std::vector<double> cis = {-0.5, 1, 0, 0, 0, 0, 1, 0, 0, 1.5, 1, 0};
    std::vector<double> trans = {-0.5, 1, 0, 0, 0, 0, 1, 0, 0, 1.5, -1, 0};
    auto ic_cis = internal_coordinates(chain4, cis.data());
    auto ic_trans = internal_coordinates(chain4, trans.data());
    REQUIRE(ic_cis.torsions.size() == 1);
    REQUIRE(ic_cis.torsions[0].has_value());
    REQUIRE(*ic_cis.torsions[0] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(*ic_trans.torsions[0] == Catch::Approx(M_PI).margin(1e-12));

    // hand-evaluated instance: i=(0,0,0) j=(1,0,0) k=(1,1,0) l=(1,1,1)
    // b1=(1,0,0) b2=(0,1,0) b3=(0,0,1); n1=(0,0,1) n2=(1,0,0);
    // y = (n1 x n2).b2_hat = 1, c = n1.n2 = 0 -> phi = +pi/2;
    // lengths 1,1,1; both angles pi/2.
    std::vector<double> frame = {0, 0, 0, 1, 0, 0, 1, 1, 0, 1, 1, 1};
    auto ic4 = internal_coordinates(chain4, frame.data());
    for (double b : ic4.bond_lengths) REQUIRE(b == Catch::Approx(1.0).margin(1e-12));
    for (double a : ic4.bond_angles) REQUIRE(a == Catch::Approx(M_PI / 2.0).margin(1e-12));
    REQUIRE(*ic4.torsions[0] == Catch::Approx(M_PI / 2.0).margin(1e-12));

    // colinear j-k-l: torsion reported undefined
    std::vector<double> colinear = {0, 1, 0, 0, 0, 0, 1, 0, 0, 2, 0, 0};
    auto icc = internal_coordinates(chain4, colinear.data());
    REQUIRE_FALSE(icc.torsions[0].has_value());
}

TEST_CASE("internal coordinates are rigid-invariant") {
    Rng rng(13);
    MoleculeGraph mol = chain_molecule(6);
    std::vector<double> x = random_frame(rng, 6);
    auto ref = internal_coordinates(mol, x.data());
    for (int rep = 0; rep < 10; ++rep) {
        RigidTransform g = random_rigid_transform(rng);
        std::vector<double> y = g.apply(x);
        auto got = internal_coordinates(mol, y.data());
        for (std::size_t i = 0; i < ref.bond_lengths.size(); ++i)
            REQUIRE(got.bond_lengths[i] == Catch::Approx(ref.bond_lengths[i]).margin(1e-9));
        for (std::size_t i = 0; i < ref.bond_angles.size(); ++i)
            REQUIRE(got.bond_angles[i] == Catch::Approx(ref.bond_angles[i]).margin(1e-9));
        for (std::size_t i = 0; i < ref.torsions.size(); ++i) {
            REQUIRE(got.torsions[i].has_value() == ref.torsions[i].has_value());
            if (ref.torsions[i])
                REQUIRE(*got.torsions[i] == Catch::Approx(*ref.torsions[i]).margin(1e-9));
        }
        // rmsd of a rigid copy is ~0
        REQUIRE(rmsd_aligned(y, x) <= 1e-10);
    }
}
