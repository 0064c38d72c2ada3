#pragma once

#include "gdssm/layers.hpp"

#include <functional>
#include <memory>
#include <optional>

namespace gdssm {

/// Transition networks: a shared front-end (aggregation/concatenation, no
/// parameters) plus separate mean and variance heads over the same input.
struct TransitionNets {
    std::vector<LayerSpec> trunk;
    std::vector<LayerSpec> f_head; ///< mean update, output M*Dx
    std::vector<LayerSpec> l_head; ///< variance update, output M*Dx, point outputs >= 0
};

/// Linear time-varying system: x_t = (I + F_t) x_{t-1} + N(0, diag(l_t)),
/// y_t = G_t x_t + N(0, diag(gamma_t)), per mixture component.
struct LinearModelSpec {
    int num_agents = 0;
    int dx = 0;
    int dy = 0;
    int horizon = 0;
    Vector weights;                        ///< V
    std::vector<Vector> mu0;               ///< per component, M*Dx
    std::vector<Vector> sigma0_diag;       ///< per component, M*Dx
    std::vector<std::vector<Matrix>> f;    ///< [t-1][v], (M*Dx) x (M*Dx)
    std::vector<std::vector<Vector>> l;    ///< [t-1][v], M*Dx
    std::vector<std::vector<Matrix>> g;    ///< [t-1][v], (M*Dy) x (M*Dx)
    std::vector<std::vector<Vector>> gamma;///< [t-1][v], M*Dy

    int components() const { return static_cast<int>(weights.size()); }
    void validate() const;
};

/// Closed-form moments of the linear system at step t for component v
/// (double-product sum, not the step recursion). `output` is empty at t = 0.
struct LinearMoments {
    GaussianMoments latent;
    std::optional<GaussianMoments> output;
};
LinearMoments linear_closed_form(const LinearModelSpec& spec, int t, int v);

// ---------------------------------------------------------------------------
// Tape-level engine
// ---------------------------------------------------------------------------

struct VarNets {
    std::vector<VarLayer> trunk, f_head, l_head;
};

VarNets lift_nets(ad::Tape& tape, const TransitionNets& nets, bool as_parameter);

/// One horizontal moment-matching step:
///   mu' = mu + E[f];  Sigma' = Sigma + Cov[f] + Cov[x,f] + Cov[x,f]^T + diag(E[L])
/// with Cov[x,f] = Sigma E[grad f]^T (Stein), computed in-structure, then
/// symmetrized and PSD-repaired.
VarMoments horizontal_step_tape(ad::Tape& tape, const VarMoments& x, const VarNets& nets,
                                const GraphTopology& topo);

/// Output moments through the emission stack: a = E[g(x)],
/// B = Cov[g(x)] + diag(gamma). `gamma_diag` has length M*Dy.
VarMoments emission_moments_tape(ad::Tape& tape, const VarMoments& x,
                                 const std::vector<VarLayer>& g_layers, ad::Var gamma_diag,
                                 const GraphTopology& topo);

/// Model view consumed by the engine: initial belief per component plus
/// per-step, per-component networks (fixed nets are the constant special case).
struct VarEngineModel {
    ad::Var log_weights;                                   ///< V x 1
    std::vector<VarMoments> init;                          ///< per component
    std::function<const VarNets&(int t, int v)> nets_at;   ///< t = 1..T
    std::function<const std::vector<VarLayer>&(int t, int v)> emission_at;
    std::function<ad::Var(int t, int v)> gamma_at;         ///< (M*Dy) x 1
    GraphTopology topology;
};

/// Latent trajectory (index 0 = initial moments unchanged).
std::vector<VarMoments> propagate_tape(ad::Tape& tape, const VarMoments& init,
                                       const std::function<const VarNets&(int)>& nets_at,
                                       int horizon, const GraphTopology& topo);

/// Emission beliefs at t = 1..T for every component (outer index component).
std::vector<std::vector<VarMoments>> rollout_outputs_tape(ad::Tape& tape,
                                                          const VarEngineModel& model, int horizon);

/// Joint predictive log-likelihood sum_{t=1..T} log p(y_t | I) on the tape.
/// `y` is T x (M*Dy), one row per future step.
ad::Var pll_joint_tape(ad::Tape& tape, const VarEngineModel& model, const Matrix& y);

// ---------------------------------------------------------------------------
// Plain engine surface
// ---------------------------------------------------------------------------

/// Plain model view; adapters exist for LinearModelSpec and GdssmParams.
struct EngineModel {
    Vector weights;
    std::vector<GaussianMoments> init;
    std::function<const TransitionNets&(int t, int v)> nets_at;
    std::function<const std::vector<LayerSpec>&(int t, int v)> emission_at;
    std::function<Vector(int t, int v)> gamma_at; ///< length Dy (tiled) or M*Dy
    GraphTopology topology;
};

/// Engine realization of a linear model spec (StandardAffine layers).
EngineModel linear_engine_model(std::shared_ptr<const LinearModelSpec> spec);

/// Predictive belief over y_t via per-component bidimensional moment matching.
GmmBelief bmmls_engine(const EngineModel& model, int t, CovStructure structure);

/// Emission beliefs for t = 1..T in one rollout.
std::vector<GmmBelief> rollout_beliefs(const EngineModel& model, int horizon,
                                       CovStructure structure);

/// Plain PLL: sum over t of the joint (or per-agent-marginal) GMM log-density.
double pll_engine(const EngineModel& model, const Matrix& y, CovStructure structure,
                  bool per_agent = false);

// ---------------------------------------------------------------------------
// Plain single-operation surface
// ---------------------------------------------------------------------------

/// Ordered product of per-layer expected Jacobians of the transition mean
/// path (trunk + f head), evaluated at the vertical pass through `in`.
Matrix expected_jacobian_product(const TransitionNets& nets, const GaussianMoments& in,
                                 const GraphTopology& topo);

/// Cov[x, f(x)] = Sigma_x * E[grad f], masked to the working pattern.
StructuredCovariance stein_cross_cov(const StructuredCovariance& cov_x,
                                     const Matrix& expected_jac);

GaussianMoments horizontal_step(const GaussianMoments& moments, const TransitionNets& nets,
                                const GraphTopology& topo);

std::vector<GaussianMoments> propagate(const GaussianMoments& initial,
                                       const TransitionNets& nets, const GraphTopology& topo,
                                       int horizon);

/// `gamma` is the emission variance vector: length Dy (shared across agents)
/// or M*Dy.
GaussianMoments emission_moments(const GaussianMoments& moments,
                                 const std::vector<LayerSpec>& g_layers, const Vector& gamma,
                                 const GraphTopology& topo);

/// Expands a per-agent emission variance vector to length M*Dy.
Vector tile_gamma(const Vector& gamma, int num_agents, int dy);

} // namespace gdssm
