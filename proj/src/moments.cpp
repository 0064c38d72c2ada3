#include "gdssm/moments.hpp"

#include <cmath>
#include <limits>

namespace gdssm {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kWeightFloor = 1e-12;
} // namespace

GaussianMoments::GaussianMoments(Vector mean_in, StructuredCovariance cov_in)
    : mean(std::move(mean_in)), cov(std::move(cov_in)) {
    require(mean.size() == cov.size(), "GaussianMoments: mean length != M*D");
}

void GaussianMoments::validate() const {
    require(mean.size() == cov.size(), "GaussianMoments: mean length != M*D");
    cov.validate();
    Matrix dense = embed_to_full(cov);
    double jitter = 0.0;
    cholesky_with_jitter(dense, &jitter); // throws when not PSD within policy
}

void GmmBelief::validate() const {
    require(!components.empty(), "GmmBelief: no components");
    require(weights.size() == num_components(), "GmmBelief: weight count mismatch");
    require(weights.minCoeff() >= 0.0, "GmmBelief: negative weight");
    require(std::abs(weights.sum() - 1.0) <= 1e-10, "GmmBelief: weights do not sum to 1");
    const int m = components.front().num_agents();
    const int d = components.front().dim();
    const CovStructure tag = components.front().cov.tag();
    for (const auto& c : components) {
        require(c.num_agents() == m && c.dim() == d && c.cov.tag() == tag,
                "GmmBelief: components disagree on shape metadata");
    }
}

double mvn_log_density(const Vector& mean, const Matrix& cov, const Vector& point) {
    require(mean.size() == point.size() && cov.rows() == mean.size() && cov.cols() == mean.size(),
            "mvn_log_density: shape mismatch");
    Matrix sym = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Matrix> llt = cholesky_with_jitter(sym);
    const Vector diff = point - mean;
    const Vector alpha = llt.matrixL().solve(diff);
    double logdet = 0.0;
    for (int i = 0; i < mean.size(); ++i) logdet += std::log(llt.matrixL()(i, i));
    return -0.5 * (mean.size() * kLog2Pi + alpha.squaredNorm()) - logdet;
}

namespace {

double logsumexp_weighted(const Vector& logw, const Vector& logp) {
    Vector s = logw + logp;
    const double m = s.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((s.array() - m).exp().sum());
}

Vector clamped_log_weights(const Vector& weights) {
    Vector w = weights.cwiseMax(kWeightFloor);
    w /= w.sum();
    return w.array().log().matrix();
}

} // namespace

double gmm_log_density(const GmmBelief& belief, const Vector& point) {
    belief.validate();
    require(point.size() == belief.components.front().size(),
            "gmm_log_density: point length mismatch");
    const int v = belief.num_components();
    Vector logp(v);
    for (int i = 0; i < v; ++i) {
        logp[i] = mvn_log_density(belief.components[i].mean,
                                  embed_to_full(belief.components[i].cov), point);
    }
    return logsumexp_weighted(clamped_log_weights(belief.weights), logp);
}

GaussianMoments agent_marginal(const GaussianMoments& joint, int agent) {
    const int d = joint.dim();
    require(agent >= 0 && agent < joint.num_agents(), "agent_marginal: agent out of range");
    Vector mean = joint.mean.segment(agent * d, d);
    Matrix block = Matrix::Zero(d, d);
    const auto& cov = joint.cov;
    switch (cov.tag()) {
        case CovStructure::Full:
            block = cov.data().block(agent * d, agent * d, d, d);
            break;
        case CovStructure::MainDiagonal:
            block.diagonal() = cov.data().col(0).segment(agent * d, d);
            break;
        case CovStructure::MainBlocks:
            block = cov.data().block(agent * d, 0, d, d);
            break;
        case CovStructure::AllDiagonals:
            for (int i = 0; i < d; ++i) block(i, i) = cov.data()(i * joint.num_agents() + agent, agent);
            break;
    }
    return GaussianMoments(std::move(mean),
                           StructuredCovariance(CovStructure::Full, 1, d, std::move(block)));
}

double gmm_agent_log_density(const GmmBelief& belief, int agent, const Vector& agent_point) {
    belief.validate();
    const int d = belief.components.front().dim();
    require(agent_point.size() == d, "gmm_agent_log_density: point length mismatch");
    const int v = belief.num_components();
    Vector logp(v);
    for (int i = 0; i < v; ++i) {
        GaussianMoments marg = agent_marginal(belief.components[i], agent);
        logp[i] = mvn_log_density(marg.mean, marg.cov.data(), agent_point);
    }
    return logsumexp_weighted(clamped_log_weights(belief.weights), logp);
}

} // namespace gdssm
