#pragma once

#include <cmath>

/// Closed-form moments of ReLU-transformed Gaussian variables.
///
/// For x ~ N(mu, var) with s = sqrt(var), e = mu/s:
///   E[max(0,x)]   = s * SR(e),               SR(x) = phi(x) + x*Phi(x)
///   Var[max(0,x)] = var * (Phi(e)^2 + exp(-Q(e,e,1)))
/// and for a correlated pair with correlation rho:
///   Cov[max(0,x_i), max(0,x_j)] = s_i s_j (rho Phi(e_i) Phi(e_j) + exp(-Q))
/// where exp(-Q) = (rho*g/(2pi)) exp(-alpha (e_i^2+e_j^2) + beta e_i e_j),
///   g     = arcsin(rho) - rho / (1 + sqrt(1-rho^2)),
///   alpha = rho / (2 g (1 + sqrt(1-rho^2))),
///   beta  = (arcsin(rho) - rho) / (rho g).
/// The expansion is exact at e = 0 for every rho and exact to O(rho^2) as
/// rho -> 0; its pointwise error stays below ~1e-3 elsewhere.
///
/// The expected derivative (Heaviside) is Phi(e) on the diagonal.
namespace gdssm::relu_gauss {

inline constexpr double kVarFloor = 1e-12;  ///< variance clamp before forming e = mu/s
inline constexpr double kRhoClip = 0.999;   ///< correlation clip before arcsin terms
inline constexpr double kLogFloor = 1e-12;  ///< floor of rho*g inside the log term

inline double norm_pdf(double x) {
    static constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double norm_cdf(double x) {
    static constexpr double inv_sqrt2 = 0.7071067811865475244008444;
    return 0.5 * std::erfc(-x * inv_sqrt2);
}

/// SR(x) = phi(x) + x Phi(x) = E[max(0, x + Z)] for Z ~ N(0,1).
inline double sr(double x) { return norm_pdf(x) + x * norm_cdf(x); }

struct Scalar2 {
    double value;
    double d_mu;
    double d_var;
};

/// E[max(0,x)] with partials w.r.t. (mu, var).
Scalar2 relu_mean(double mu, double var);

/// Var[max(0,x)] with partials w.r.t. (mu, var).
Scalar2 relu_var(double mu, double var);

/// E[heaviside(x)] = Phi(mu/s) with partials w.r.t. (mu, var).
Scalar2 relu_heaviside(double mu, double var);

struct Pair5 {
    double value;
    double d_mu_i, d_mu_j;
    double d_var_i, d_var_j;
    double d_cov;
};

/// Cov[max(0,x_i), max(0,x_j)] for jointly Gaussian (x_i, x_j), i != j,
/// with partials w.r.t. (mu_i, mu_j, var_i, var_j, cov_ij).
/// When `with_partials` is false only `value` is filled.
Pair5 relu_pair_cov(double mu_i, double mu_j, double var_i, double var_j, double cov_ij,
                    bool with_partials = true);

} // namespace gdssm::relu_gauss
