#include "gdssm/relu_gauss.hpp"

#include <algorithm>

namespace gdssm::relu_gauss {

namespace {
constexpr double kPi = 3.14159265358979323846264338328;
constexpr double kG1 = kPi / 2.0 - 1.0;          // g at rho = 1
constexpr double kK1 = kG1 / (2.0 * kPi);        // exp(-Q) prefactor at rho = 1
constexpr double kC1 = 1.0 / kG1 - 1.0;          // quadratic coefficient at rho = 1
constexpr double kSeriesRho = 1e-4;              // below this, use the small-rho expansion
} // namespace

Scalar2 relu_mean(double mu, double var) {
    const bool clamped = var < kVarFloor;
    const double v = std::max(var, kVarFloor);
    const double s = std::sqrt(v);
    const double e = mu / s;
    Scalar2 out;
    out.value = s * sr(e);
    out.d_mu = norm_cdf(e);
    out.d_var = clamped ? 0.0 : norm_pdf(e) / (2.0 * s);
    return out;
}

Scalar2 relu_var(double mu, double var) {
    const bool clamped = var < kVarFloor;
    const double v = std::max(var, kVarFloor);
    const double s = std::sqrt(v);
    const double e = mu / s;
    const double cdf = norm_cdf(e);
    const double pdf = norm_pdf(e);
    const double expq = kK1 * std::exp(-kC1 * e * e);
    const double t = cdf * cdf + expq;
    const double dt_de = 2.0 * cdf * pdf - 2.0 * kC1 * e * expq;
    Scalar2 out;
    out.value = v * t;
    out.d_mu = s * dt_de;
    out.d_var = clamped ? 0.0 : t - 0.5 * e * dt_de;
    return out;
}

Scalar2 relu_heaviside(double mu, double var) {
    const bool clamped = var < kVarFloor;
    const double v = std::max(var, kVarFloor);
    const double s = std::sqrt(v);
    const double e = mu / s;
    const double pdf = norm_pdf(e);
    Scalar2 out;
    out.value = norm_cdf(e);
    out.d_mu = pdf / s;
    out.d_var = clamped ? 0.0 : -pdf * e / (2.0 * v);
    return out;
}

Pair5 relu_pair_cov(double mu_i, double mu_j, double var_i, double var_j, double cov_ij,
                    bool with_partials) {
    Pair5 out{};
    const bool clamp_i = var_i < kVarFloor;
    const bool clamp_j = var_j < kVarFloor;
    const double vi = std::max(var_i, kVarFloor);
    const double vj = std::max(var_j, kVarFloor);
    const double si = std::sqrt(vi);
    const double sj = std::sqrt(vj);
    const double ei = mu_i / si;
    const double ej = mu_j / sj;
    const double r_raw = cov_ij / (si * sj);
    const bool clipped = std::abs(r_raw) > kRhoClip;
    const double r = std::clamp(r_raw, -kRhoClip, kRhoClip);

    const double cdf_i = norm_cdf(ei);
    const double cdf_j = norm_cdf(ej);
    const double pdf_i = norm_pdf(ei);
    const double pdf_j = norm_pdf(ej);

    double f2 = 0.0, df2_de_i = 0.0, df2_de_j = 0.0, df2_dr = 0.0;
    if (std::abs(r) < kSeriesRho) {
        // rho -> 0 limit: Cov ~ s_i s_j (rho Phi Phi + rho^2/2 phi phi)
        const double pp = pdf_i * pdf_j;
        f2 = r * cdf_i * cdf_j + 0.5 * r * r * pp;
        if (with_partials) {
            df2_dr = cdf_i * cdf_j + r * pp;
            df2_de_i = r * pdf_i * cdf_j - 0.5 * r * r * ei * pp;
            df2_de_j = r * pdf_j * cdf_i - 0.5 * r * r * ej * pp;
        }
    } else {
        const double a = std::asin(r);
        const double rbar = std::sqrt(1.0 - r * r);
        const double g = a - r / (1.0 + rbar);
        const double h_raw = r * g; // >= 0, even in rho
        const double h = std::max(h_raw, kLogFloor);
        const double alpha = r / (2.0 * g * (1.0 + rbar));
        const double beta = (a - r) / h_raw;
        const double expo = std::exp(-alpha * (ei * ei + ej * ej) + beta * ei * ej);
        const double u = h / (2.0 * kPi) * expo;
        f2 = r * cdf_i * cdf_j + u;
        if (with_partials) {
            // d(r*g)/dr = arcsin(r); g' = 1/(1+rbar)
            const double d_big = 2.0 * g * (1.0 + rbar);
            const double d_big_prime = 2.0 * (1.0 - g * r / rbar);
            const double alpha_prime = (d_big - r * d_big_prime) / (d_big * d_big);
            const double beta_prime =
                ((1.0 / rbar - 1.0) * h_raw - (a - r) * a) / (h_raw * h_raw);
            const double du_dr =
                u * (a / h_raw - alpha_prime * (ei * ei + ej * ej) + beta_prime * ei * ej);
            df2_dr = cdf_i * cdf_j + du_dr;
            df2_de_i = r * pdf_i * cdf_j + u * (-2.0 * alpha * ei + beta * ej);
            df2_de_j = r * pdf_j * cdf_i + u * (-2.0 * alpha * ej + beta * ei);
        }
    }

    out.value = si * sj * f2;
    if (!with_partials) return out;

    out.d_mu_i = sj * df2_de_i;
    out.d_mu_j = si * df2_de_j;
    out.d_cov = clipped ? 0.0 : df2_dr;
    const double dr_dvi = (clipped || clamp_i) ? 0.0 : -r / (2.0 * vi);
    const double dr_dvj = (clipped || clamp_j) ? 0.0 : -r / (2.0 * vj);
    out.d_var_i = clamp_i ? 0.0
                          : 0.5 / si * sj * f2 +
                                si * sj * (df2_de_i * (-ei / (2.0 * vi)) + df2_dr * dr_dvi);
    out.d_var_j = clamp_j ? 0.0
                          : 0.5 / sj * si * f2 +
                                si * sj * (df2_de_j * (-ej / (2.0 * vj)) + df2_dr * dr_dvj);
    return out;
}

} // namespace gdssm::relu_gauss
