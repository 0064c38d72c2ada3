#pragma once

#include "gdssm/model.hpp"

namespace gdssm {

/// One exact ancestral sample from the generative model.
struct TrajectorySample {
    int component = 0;
    Matrix latents; ///< (T+1) x (M*Dx), row 0 = x_0
    Matrix outputs; ///< T x (M*Dy)
};

/// Samples (v, x_{0:T}, y_{1:T}) with point-evaluated networks. All
/// randomness comes from `rng`.
TrajectorySample sample_trajectory(const EngineModel& model, int horizon, RngStream& rng);
TrajectorySample sample_trajectory(const GdssmParams& params, const Context& context,
                                   int horizon, RngStream& rng);

/// Empirical output moments at step t, conditioned on mixture component v,
/// from S independent particles (counter-based substreams; the reduction is a
/// fixed-block pairwise tree, so results do not depend on thread count).
struct McMoments {
    Vector mean;
    Matrix cov;
    Vector std_error; ///< of the mean: sample std / sqrt(S)
    int samples = 0;
};
McMoments mc_component_moments(const EngineModel& model, int t, int v, int samples,
                               RngStream rng, int threads = 1);
McMoments mc_component_moments(const GdssmParams& params, const Context& context, int t, int v,
                               int samples, RngStream rng, int threads = 1);

/// Assumed-density Monte Carlo PLL: per-component empirical moments at every
/// step assemble a GMM; returns sum_t log p(y_t). Degenerate empirical
/// covariances fall under the jitter policy.
double mc_pll(const EngineModel& model, const Matrix& y, int samples, RngStream rng,
              int threads = 1);
double mc_pll(const GdssmParams& params, const Context& context, const Matrix& y, int samples,
              RngStream rng, int threads = 1);

/// Engine view of a parameter set for one context (plain, point-evaluating).
EngineModel engine_model(const GdssmParams& params, const Context& context);

} // namespace gdssm
