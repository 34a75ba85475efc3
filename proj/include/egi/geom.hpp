#pragma once

// Molecular topology, coordinates, SE(3) actions, Kabsch alignment and
// internal coordinates. Shared by training, sampling and evaluation.

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <array>
#include <deque>
#include <memory>
#include <optional>

#include "egi/common.hpp"

namespace egi::geom {

constexpr int kMaxAtomKinds = 8;
constexpr int kMaxDegree = 6;
// degree one-hot (0..6), ring flag, kind one-hot
constexpr int kFeatureDim = (kMaxDegree + 1) + 1 + kMaxAtomKinds;

enum EdgeOrder : int { kNoBond = 0, kBond = 1, kSecond = 2, kThird = 3 };

struct Edge {
    int i;
    int j;
    int order;  // EdgeOrder, never kNoBond in a stored edge list
};

struct MoleculeGraph {
    int n_atoms = 0;
    std::vector<int> atom_kinds;       // n_atoms, values in [0, kMaxAtomKinds)
    std::vector<double> atom_features; // n_atoms x kFeatureDim row-major
    std::vector<Edge> edges;           // symmetric, all orders

    std::vector<std::vector<int>> bond_adjacency() const {
        std::vector<std::vector<int>> adj(n_atoms);
        for (const Edge& e : edges)
            if (e.order == kBond) adj[e.i].push_back(e.j);
        return adj;
    }

    void validate() const {
        if (static_cast<int>(atom_kinds.size()) != n_atoms)
            fail("bad-molecule", "atom kind count mismatch");
        for (int k : atom_kinds)
            if (k < 0 || k >= kMaxAtomKinds) fail("bad-molecule", "atom kind out of range");
        std::vector<std::vector<int>> order_of(n_atoms, std::vector<int>(n_atoms, 0));
        for (const Edge& e : edges) {
            if (e.i == e.j) fail("bad-molecule", "self edge");
            if (e.i < 0 || e.i >= n_atoms || e.j < 0 || e.j >= n_atoms)
                fail("bad-molecule", "edge endpoint out of range");
            if (order_of[e.i][e.j] != 0) fail("bad-molecule", "pair carries two order codes");
            order_of[e.i][e.j] = e.order;
        }
        for (const Edge& e : edges)
            if (order_of[e.j][e.i] != e.order) fail("bad-molecule", "edges not symmetric");
        // bond subgraph connected
        auto adj = bond_adjacency();
        std::vector<char> seen(n_atoms, 0);
        std::deque<int> q{0};
        seen[0] = 1;
        int count = 1;
        while (!q.empty()) {
            int u = q.front();
            q.pop_front();
            for (int v : adj[u])
                if (!seen[v]) {
                    seen[v] = 1;
                    ++count;
                    q.push_back(v);
                }
        }
        if (count != n_atoms) fail("bad-molecule", "bond graph disconnected");
    }
};

struct Trajectory {
    long T = 0;
    long N = 0;
    std::vector<double> coords;  // T x N x 3 row-major
    double frame_dt = 0.0;
    std::shared_ptr<const MoleculeGraph> mol;

    double* frame(long t) { return coords.data() + t * N * 3; }
    const double* frame(long t) const { return coords.data() + t * N * 3; }

    std::vector<double> frame_copy(long t) const {
        return std::vector<double>(frame(t), frame(t) + N * 3);
    }

    void validate() const {
        if (T < 1 || N < 1) fail("bad-trajectory", "T and N must be >= 1");
        if (static_cast<long>(coords.size()) != T * N * 3)
            fail("bad-trajectory", "coordinate payload size mismatch");
        if (mol && mol->n_atoms != N) fail("bad-trajectory", "N does not match molecule");
        for (double v : coords)
            if (!std::isfinite(v)) fail("bad-trajectory", "non-finite coordinate");
    }
};

struct RigidTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    void apply_inplace(double* frame, long n) const {
        for (long i = 0; i < n; ++i) {
            Eigen::Map<Eigen::Vector3d> p(frame + i * 3);
            p = (rotation * p + translation).eval();
        }
    }
    std::vector<double> apply(const std::vector<double>& frame) const {
        std::vector<double> out = frame;
        apply_inplace(out.data(), static_cast<long>(frame.size()) / 3);
        return out;
    }
    void check() const {
        if ((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-10)
            fail("bad-rotation", "R^T R != I");
        if (std::abs(rotation.determinant() - 1.0) > 1e-10) fail("bad-rotation", "det != +1");
    }
};

// Pairs at bond-graph shortest-path distance d <= max_order get order code d.
inline std::vector<Edge> build_higher_order_edges(const std::vector<std::pair<int, int>>& bonds,
                                                  int n_atoms, int max_order) {
    if (max_order < 1 || max_order > 3) fail("bad-arg", "max_order must be in {1,2,3}");
    std::vector<std::vector<int>> adj(n_atoms);
    for (auto [i, j] : bonds) {
        if (i == j || i < 0 || j < 0 || i >= n_atoms || j >= n_atoms)
            fail("bad-arg", "invalid bond");
        adj[i].push_back(j);
    }
    std::vector<Edge> out;
    for (int s = 0; s < n_atoms; ++s) {
        std::vector<int> dist(n_atoms, -1);
        std::deque<int> q{s};
        dist[s] = 0;
        while (!q.empty()) {
            int u = q.front();
            q.pop_front();
            for (int v : adj[u])
                if (dist[v] < 0) {
                    dist[v] = dist[u] + 1;
                    q.push_back(v);
                }
        }
        for (int v = 0; v < n_atoms; ++v) {
            if (v == s) continue;
            if (dist[v] < 0) fail("disconnected-bond-graph", "bond graph is disconnected");
            if (dist[v] <= max_order) out.push_back({s, v, dist[v]});
        }
    }
    return out;
}

// Center a frame; returns the removed centroid.
inline Eigen::Vector3d remove_com_frame(double* frame, long n) {
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (long i = 0; i < n; ++i) c += Eigen::Map<Eigen::Vector3d>(frame + i * 3);
    c /= static_cast<double>(n);
    for (long i = 0; i < n; ++i) Eigen::Map<Eigen::Vector3d>(frame + i * 3) -= c;
    return c;
}

// Per-frame centering of a trajectory block; returns one centroid per frame.
inline std::vector<Eigen::Vector3d> remove_com(std::vector<double>& coords, long T, long N) {
    std::vector<Eigen::Vector3d> centroids(T);
    for (long t = 0; t < T; ++t) centroids[t] = remove_com_frame(coords.data() + t * N * 3, N);
    return centroids;
}

// Rotation uniform on SO(3) via a normalized random quaternion; translation
// components uniform in [-10, 10].
inline RigidTransform random_rigid_transform(Rng& rng) {
    double q[4];
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (double& c : q) {
            c = rng.normal();
            n2 += c * c;
        }
    } while (n2 < 1e-12);
    const double inv = 1.0 / std::sqrt(n2);
    const double w = q[0] * inv, x = q[1] * inv, y = q[2] * inv, z = q[3] * inv;
    RigidTransform g;
    g.rotation << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    for (int i = 0; i < 3; ++i) g.translation[i] = rng.uniform(-10.0, 10.0);
    return g;
}

inline RigidTransform random_rigid_transform(std::uint64_t seed) {
    Rng rng(seed);
    return random_rigid_transform(rng);
}

// Optimal rigid superposition of P onto Q (minimizes sum w |R p + t - q|^2).
// det(R) = +1 enforced by sign-correcting the smallest singular direction.
inline RigidTransform kabsch_align(const double* P, const double* Q, long n,
                                   const double* weights = nullptr) {
    if (n < 3) fail("degenerate-alignment", "need at least 3 points");
    double wsum = 0.0;
    Eigen::Vector3d pc = Eigen::Vector3d::Zero(), qc = Eigen::Vector3d::Zero();
    for (long i = 0; i < n; ++i) {
        const double w = weights ? weights[i] : 1.0;
        pc += w * Eigen::Map<const Eigen::Vector3d>(P + i * 3);
        qc += w * Eigen::Map<const Eigen::Vector3d>(Q + i * 3);
        wsum += w;
    }
    pc /= wsum;
    qc /= wsum;
    Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
    for (long i = 0; i < n; ++i) {
        const double w = weights ? weights[i] : 1.0;
        H += w * (Eigen::Map<const Eigen::Vector3d>(P + i * 3) - pc) *
             (Eigen::Map<const Eigen::Vector3d>(Q + i * 3) - qc).transpose();
    }
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    if (!(sv[1] > 1e-12 * std::max(sv[0], 1e-300)))
        fail("degenerate-alignment", "rank-deficient cross-covariance");
    Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) D(2, 2) = -1.0;
    RigidTransform g;
    g.rotation = svd.matrixV() * D * svd.matrixU().transpose();
    g.translation = qc - g.rotation * pc;
    return g;
}

inline RigidTransform kabsch_align(const std::vector<double>& P, const std::vector<double>& Q,
                                   const std::vector<double>* weights = nullptr) {
    if (P.size() != Q.size()) fail("shape-mismatch", "kabsch_align point counts differ");
    return kabsch_align(P.data(), Q.data(), static_cast<long>(P.size()) / 3,
                        weights ? weights->data() : nullptr);
}

// One rigid transform fit jointly over all frames (stacked T*N point cloud).
inline RigidTransform trajectory_kabsch(const std::vector<double>& Xtau,
                                        const std::vector<double>& X0) {
    if (Xtau.size() != X0.size()) fail("shape-mismatch", "trajectory_kabsch shapes differ");
    return kabsch_align(Xtau.data(), X0.data(), static_cast<long>(Xtau.size()) / 3);
}

inline double rmsd_aligned(const std::vector<double>& P, const std::vector<double>& Q) {
    if (P.size() != Q.size()) fail("shape-mismatch", "rmsd_aligned shapes differ");
    const long n = static_cast<long>(P.size()) / 3;
    RigidTransform g = kabsch_align(P, Q);
    double ss = 0.0;
    for (long i = 0; i < n; ++i) {
        Eigen::Vector3d d =
            g.rotation * Eigen::Map<const Eigen::Vector3d>(P.data() + i * 3) + g.translation -
            Eigen::Map<const Eigen::Vector3d>(Q.data() + i * 3);
        ss += d.squaredNorm();
    }
    return std::sqrt(ss / static_cast<double>(n));
}

// ---- internal coordinates ------------------------------------------------

// Bonded paths are enumerated on the bond subgraph only; higher-order edges
// exist solely for message passing.
inline std::vector<std::pair<int, int>> bond_pairs(const MoleculeGraph& mol) {
    std::vector<std::pair<int, int>> out;
    for (const Edge& e : mol.edges)
        if (e.order == kBond && e.i < e.j) out.emplace_back(e.i, e.j);
    return out;
}

inline std::vector<std::array<int, 3>> angle_triples(const MoleculeGraph& mol) {
    auto adj = mol.bond_adjacency();
    std::vector<std::array<int, 3>> out;
    for (int j = 0; j < mol.n_atoms; ++j)
        for (std::size_t a = 0; a < adj[j].size(); ++a)
            for (std::size_t b = a + 1; b < adj[j].size(); ++b)
                out.push_back({adj[j][a], j, adj[j][b]});
    return out;
}

inline std::vector<std::array<int, 4>> torsion_quads(const MoleculeGraph& mol) {
    auto adj = mol.bond_adjacency();
    std::vector<std::array<int, 4>> out;
    for (const Edge& e : mol.edges) {
        if (e.order != kBond || e.i >= e.j) continue;
        const int j = e.i, k = e.j;
        for (int i : adj[j]) {
            if (i == k) continue;
            for (int l : adj[k]) {
                if (l == j || l == i) continue;
                out.push_back({i, j, k, l});
            }
        }
    }
    return out;
}

inline double bond_length(const double* x, int i, int j) {
    return (Eigen::Map<const Eigen::Vector3d>(x + i * 3) -
            Eigen::Map<const Eigen::Vector3d>(x + j * 3))
        .norm();
}

inline double bond_angle(const double* x, int i, int j, int k) {
    Eigen::Vector3d a = Eigen::Map<const Eigen::Vector3d>(x + i * 3) -
                        Eigen::Map<const Eigen::Vector3d>(x + j * 3);
    Eigen::Vector3d b = Eigen::Map<const Eigen::Vector3d>(x + k * 3) -
                        Eigen::Map<const Eigen::Vector3d>(x + j * 3);
    const double c = a.dot(b) / (a.norm() * b.norm());
    return std::acos(std::clamp(c, -1.0, 1.0));
}

// Dihedral about j->k, right-handed, cis = 0, trans = pi, range (-pi, pi].
// Returns nullopt when a flanking triple is colinear.
inline std::optional<double> dihedral(const double* x, int i, int j, int k, int l) {
    Eigen::Vector3d b1 = Eigen::Map<const Eigen::Vector3d>(x + j * 3) -
                         Eigen::Map<const Eigen::Vector3d>(x + i * 3);
    Eigen::Vector3d b2 = Eigen::Map<const Eigen::Vector3d>(x + k * 3) -
                         Eigen::Map<const Eigen::Vector3d>(x + j * 3);
    Eigen::Vector3d b3 = Eigen::Map<const Eigen::Vector3d>(x + l * 3) -
                         Eigen::Map<const Eigen::Vector3d>(x + k * 3);
    Eigen::Vector3d n1 = b1.cross(b2);
    Eigen::Vector3d n2 = b2.cross(b3);
    const double scale = b2.squaredNorm();
    if (n1.squaredNorm() < 1e-14 * scale || n2.squaredNorm() < 1e-14 * scale) return std::nullopt;
    const double y = n1.cross(n2).dot(b2.normalized());
    const double c = n1.dot(n2);
    double phi = std::atan2(y, c);
    if (phi <= -M_PI) phi = M_PI;
    return phi;
}

struct InternalCoordinates {
    std::vector<double> bond_lengths;                 // aligned with bond_pairs()
    std::vector<double> bond_angles;                  // aligned with angle_triples()
    std::vector<std::optional<double>> torsions;      // aligned with torsion_quads()
};

inline InternalCoordinates internal_coordinates(const MoleculeGraph& mol, const double* frame) {
    InternalCoordinates ic;
    for (auto [i, j] : bond_pairs(mol)) ic.bond_lengths.push_back(bond_length(frame, i, j));
    for (auto [i, j, k] : angle_triples(mol)) ic.bond_angles.push_back(bond_angle(frame, i, j, k));
    for (auto [i, j, k, l] : torsion_quads(mol)) ic.torsions.push_back(dihedral(frame, i, j, k, l));
    return ic;
}

}  // namespace egi::geom
