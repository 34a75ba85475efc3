#pragma once

// Closed-form Gaussian world for checking the interpolation identity: a
// single 1-D coordinate per frame with AR-1 inter-frame correlation. Exact
// denoisers follow from the tau-noised marginals, so the induced-score
// identity can be verified without any trained network.

#include <Eigen/Dense>

#include "egi/common.hpp"

namespace egi::model {

struct GaussianOracle {
    long T = 2;
    double sigma1 = 1.0;  // per-frame marginal std
    double rho = 0.5;     // lag-1 correlation; covariance is sigma1^2 rho^|i-j|

    Eigen::MatrixXd cov_md() const {
        Eigen::MatrixXd c(T, T);
        for (long i = 0; i < T; ++i)
            for (long j = 0; j < T; ++j)
                c(i, j) = sigma1 * sigma1 * std::pow(rho, std::abs(i - j));
        return c;
    }

    // Scores of the tau-noised marginals N(0, abar*Sigma + (1-abar) I).
    Eigen::VectorXd score_md(const Eigen::VectorXd& x, double abar) const {
        Eigen::MatrixXd c = abar * cov_md() +
                            (1.0 - abar) * Eigen::MatrixXd::Identity(T, T);
        return -c.llt().solve(x);
    }
    Eigen::VectorXd score_hat(const Eigen::VectorXd& x, double abar) const {
        const double v = abar * sigma1 * sigma1 + (1.0 - abar);
        return -x / v;
    }
    Eigen::VectorXd score_tilde(const Eigen::VectorXd& x, double abar, double beta) const {
        return beta * score_md(x, abar) + (1.0 - beta) * score_hat(x, abar);
    }

    Eigen::VectorXd eps_md(const Eigen::VectorXd& x, double abar) const {
        return -std::sqrt(1.0 - abar) * score_md(x, abar);
    }
    Eigen::VectorXd eps_hat(const Eigen::VectorXd& x, double abar) const {
        return -std::sqrt(1.0 - abar) * score_hat(x, abar);
    }
};

// Max violation of eps_phi == -sqrt(1-abar) grad log p_tilde over a state
// grid, with eps_phi = (eps_md - alpha eps_hat) / (1 - alpha) and
// beta = 1/(1-alpha). The two sides are computed along independent routes.
inline double gaussian_theorem_check(const GaussianOracle& oracle, double alpha, double abar,
                                     long grid_per_axis = 10, double span = 2.0) {
    if (alpha >= 1.0) fail("bad-arg", "alpha = 1 leaves beta undefined");
    if (alpha <= 0.0) fail("bad-arg", "alpha must be positive");
    const double beta = 1.0 / (1.0 - alpha);
    const long T = oracle.T;
    // grid over the first two coordinates, remaining ones swept diagonally
    double worst = 0.0;
    for (long a = 0; a < grid_per_axis; ++a)
        for (long b = 0; b < grid_per_axis; ++b) {
            Eigen::VectorXd x(T);
            const double u = -span + 2.0 * span * a / (grid_per_axis - 1);
            const double v = -span + 2.0 * span * b / (grid_per_axis - 1);
            for (long t = 0; t < T; ++t) x[t] = t % 2 == 0 ? u : v;
            Eigen::VectorXd lhs =
                (oracle.eps_md(x, abar) - alpha * oracle.eps_hat(x, abar)) / (1.0 - alpha);
            Eigen::VectorXd rhs = -std::sqrt(1.0 - abar) * oracle.score_tilde(x, abar, beta);
            worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
        }
    return worst;
}

}  // namespace egi::model
