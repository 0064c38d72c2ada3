#pragma once

#include "gdssm/structured.hpp"

#include <vector>

namespace gdssm {

/// First two moments of the joint state over all agents (agent-major layout).
struct GaussianMoments {
    Vector mean;              ///< length M*D
    StructuredCovariance cov; ///< structured covariance, same M and D

    GaussianMoments() = default;
    GaussianMoments(Vector mean_in, StructuredCovariance cov_in);

    int num_agents() const { return cov.num_agents(); }
    int dim() const { return cov.dim(); }
    int size() const { return cov.size(); }

    /// Shape consistency plus symmetry/PSD of the dense embedding (with the
    /// jitter tolerance of the repair policy).
    void validate() const;
};

/// Weighted set of Gaussian components sharing shape metadata; the multimodal
/// belief at one time step.
struct GmmBelief {
    Vector weights;                         ///< length V, on the simplex
    std::vector<GaussianMoments> components;

    int num_components() const { return static_cast<int>(components.size()); }
    void validate() const;
};

/// Log-density of a single Gaussian; `cov` is factorized with the jitter policy.
double mvn_log_density(const Vector& mean, const Matrix& cov, const Vector& point);

/// log sum_v pi_v N(point | mean_v, dense cov_v), log-sum-exp stabilized.
/// Weights below 1e-12 are clamped and renormalized first.
double gmm_log_density(const GmmBelief& belief, const Vector& point);

/// Marginal of one agent's block (rows [m*D, (m+1)*D) of the dense embedding).
/// Cross-feature entries absent from the structure are zero.
GaussianMoments agent_marginal(const GaussianMoments& joint, int agent);

/// Per-agent marginal GMM log-density: log sum_v pi_v N(point_m | ...) for one agent.
double gmm_agent_log_density(const GmmBelief& belief, int agent, const Vector& agent_point);

} // namespace gdssm
