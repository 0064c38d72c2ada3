#pragma once

#include "gdssm/graph.hpp"
#include "gdssm/moments.hpp"
#include "gdssm/tape.hpp"

#include <variant>
#include <vector>

namespace gdssm {

/// Affine map applied to the stacked state of all agents.
struct StandardAffine {
    Matrix weight;
    Vector bias;
};

/// Affine map applied to every agent's features with shared parameters.
struct NodeWiseAffine {
    Matrix weight;
    Vector bias;
};

/// Message computation: features replaced by the row-normalized neighbor mean.
struct MeanAggregation {};

/// Per-agent concatenation [own features; neighbor-mean message].
struct ConcatOwnAndMessage {};

struct Relu {};

using LayerSpec =
    std::variant<StandardAffine, NodeWiseAffine, MeanAggregation, ConcatOwnAndMessage, Relu>;

/// Per-agent output width of a layer given per-agent input width.
int layer_output_dim(const LayerSpec& layer, int in_dim, int num_agents);

/// Deterministic point evaluation (the mean path / Monte Carlo path).
Vector layer_forward(const LayerSpec& layer, const Vector& x, const GraphTopology& topo,
                     int num_agents);
Vector forward_layers(const std::vector<LayerSpec>& layers, const Vector& x,
                      const GraphTopology& topo, int num_agents);

// ---------------------------------------------------------------------------
// Moment propagation (tape level)
// ---------------------------------------------------------------------------

/// Structured covariance carried on the tape; same layouts as StructuredCovariance.
struct VarCov {
    CovStructure tag = CovStructure::Full;
    int m = 0;
    int d = 0;
    ad::Var data;
};

struct VarMoments {
    ad::Var mean; ///< (m*d) x 1
    VarCov cov;
};

/// Layer with parameters living on a tape.
struct VarLayer {
    enum class Kind { StandardAffine, NodeWiseAffine, MeanAggregation, Concat, Relu };
    Kind kind = Kind::Relu;
    ad::Var w, b;
};

VarLayer lift_layer(ad::Tape& tape, const LayerSpec& layer, bool as_parameter);
std::vector<VarLayer> lift_layers(ad::Tape& tape, const std::vector<LayerSpec>& layers,
                                  bool as_parameter);

/// Diagonal (variances) of a structured carrier.
ad::Var cov_diagonal(const VarCov& c);
/// Dense embedding / masking on the tape.
ad::Var cov_to_dense(const VarCov& c);
VarCov dense_to_cov(ad::Var dense, CovStructure tag, int m, int d);
VarCov cov_convert(const VarCov& c, CovStructure target);
VarCov cov_add(const VarCov& a, const VarCov& b);
VarCov cov_add_state_noise(const VarCov& c, ad::Var variances); ///< + diag(v), masked
VarCov cov_psd_repair(const VarCov& c);

/// Lifts plain moments onto a tape as constants.
VarMoments lift_moments(ad::Tape& tape, const GaussianMoments& m);
/// Extracts plain moments from tape values.
GaussianMoments lower_moments(const VarMoments& vm);

/// Output moments of one layer under the input's covariance structure
/// ("zero-fill, propagate, mask": only retained entries are computed).
VarMoments layer_moments(ad::Tape& tape, const VarLayer& layer, const VarMoments& in,
                         const GraphTopology& topo);

/// Propagates through a layer sequence; optionally records each layer's input
/// moments (needed by the expected-Jacobian chain).
VarMoments sequence_moments(ad::Tape& tape, const std::vector<VarLayer>& layers,
                            const VarMoments& in, const GraphTopology& topo,
                            std::vector<VarMoments>* records = nullptr);

/// Dense expected Jacobian of a layer sequence, E[J_L] ... E[J_1], using the
/// recorded per-layer input moments. Aggregation/concat layers are supported
/// at the front of the sequence.
ad::Var expected_jacobian_chain(ad::Tape& tape, const std::vector<VarLayer>& layers,
                                const std::vector<VarMoments>& inputs,
                                const GraphTopology& topo);

// ---------------------------------------------------------------------------
// Plain public surface (wraps the tape in value-only mode)
// ---------------------------------------------------------------------------

/// Output moments of an affine layer (StandardAffine or NodeWiseAffine).
GaussianMoments affine_moments(const LayerSpec& layer, const GaussianMoments& in);

/// Output moments of mean aggregation under the given topology.
GaussianMoments mean_agg_moments(const GraphTopology& topo, const GaussianMoments& in);

/// Joint moments of per-agent [state; message] given the cross-covariance
/// block Cov[state, message] (dense), masked to the state's structure.
GaussianMoments concat_moments(const GaussianMoments& state, const GaussianMoments& message,
                               const Matrix& cross);

/// ReLU output moments under the input's structure.
GaussianMoments relu_moments(const GaussianMoments& in);

/// Dense expected Jacobian of a single layer at the given input moments.
Matrix expected_jacobian(const LayerSpec& layer, const GaussianMoments& in,
                         const GraphTopology& topo);

} // namespace gdssm
