#pragma once

#include "gdssm/bmm.hpp"
#include "gdssm/rng.hpp"

#include <functional>
#include <string>

namespace gdssm {

/// Scene context: observed histories (one flattened row per agent), the
/// interaction graph frozen at the last observed frame, and the sampling
/// interval.
struct Context {
    Matrix histories; ///< M x (2*h_obs), frame-major (x0, y0, x1, y1, ...)
    GraphTopology topology;
    double dt = 0.2;

    int num_agents() const { return static_cast<int>(histories.rows()); }
    void validate() const;
};

/// Architecture hyperparameters. Everything is agent-count free; the same
/// parameters evaluate on scenes of any size.
struct Hyper {
    int dx = 4;            ///< latent dimension per agent
    int dy = 2;            ///< observed dimension per agent
    int v = 1;             ///< mixture components
    int hidden = 24;       ///< transition hidden width
    int f_hidden_layers = 2;
    int l_hidden_layers = 1;
    int g_hidden = 24;     ///< emission hidden width
    int enc_width = 30;    ///< embedding per-agent encoder width
    int trunk_width = 64;  ///< embedding trunk width
    int h_obs = 15;        ///< observed frames per agent
    CovStructure structure = CovStructure::Full;

    bool operator==(const Hyper&) const = default;
    void validate() const;
};

/// Embedding network h: per-agent encoder -> mean aggregation -> shared trunk
/// -> mean / variance (exponential link) / weight (softmax) heads.
struct EmbeddingParams {
    Matrix enc_w;
    Vector enc_b;
    Matrix trunk_w;
    Vector trunk_b;
    Matrix mu_w;
    Vector mu_b;
    Matrix sigma_w;
    Vector sigma_b;
    Matrix pi_w;
    Vector pi_b;
};

struct GdssmParams {
    Hyper hyper;
    EmbeddingParams h;
    TransitionNets nets;
    std::vector<LayerSpec> g;
    Vector gamma_log; ///< emission variance through an exponential link, length Dy

    Vector gamma() const { return gamma_log.array().exp(); }
};

/// Deterministic initialization: affine weights uniform in
/// [-sqrt(1/fan_in), +sqrt(1/fan_in)], biases zero except the variance-head
/// bias log(0.1); gamma starts at 0.1.
GdssmParams init_params(const Hyper& hyper, uint64_t seed);

/// Named view of one parameter tensor (column-major contiguous storage).
struct TensorRef {
    std::string name;
    double* data;
    int rows;
    int cols;
    int size() const { return rows * cols; }
};

/// Every parameter tensor in a fixed canonical order.
std::vector<TensorRef> tensor_refs(GdssmParams& params);

/// Total number of scalar parameters.
int parameter_count(const GdssmParams& params);

/// Initial GMM belief over x_0 (components carry MainDiagonal covariances).
GmmBelief embed(const GdssmParams& params, const Context& context);

/// Tape-side embedding (used by training).
struct VarEmbedding {
    ad::Var enc_w, enc_b, trunk_w, trunk_b, mu_w, mu_b, sigma_w, sigma_b, pi_w, pi_b;
};
struct VarBelief {
    ad::Var log_weights;
    std::vector<VarMoments> components;
};
VarEmbedding lift_embedding(ad::Tape& tape, const EmbeddingParams& h, bool as_parameter);
VarBelief embed_tape(ad::Tape& tape, const VarEmbedding& h, const Context& context,
                     const Hyper& hyper);

/// Full tape model (parameters as inputs when `as_parameter`).
struct VarModel {
    VarEmbedding h;
    VarNets nets;
    std::vector<VarLayer> g;
    ad::Var gamma_log;
};
VarModel lift_model(ad::Tape& tape, const GdssmParams& params, bool as_parameter);

/// Engine view of a tape model for one context (fixed nets across time).
VarEngineModel engine_view(ad::Tape& tape, const VarModel& model, const GdssmParams& params,
                           const Context& context);

/// Predictive belief over y_t (Algorithm "bidimensional moment matching in
/// latent space"): embed, propagate each component t steps, emit.
GmmBelief bmmls(const GdssmParams& params, const Context& context, int t);

/// Emission beliefs for every t = 1..T in one rollout.
std::vector<GmmBelief> bmmls_rollout(const GdssmParams& params, const Context& context,
                                     int horizon);

/// Self-describing versioned text checkpoint (17 significant digits).
void save_checkpoint(const GdssmParams& params, const std::string& path);
GdssmParams load_checkpoint(const std::string& path);
/// Load and verify the stored hyperparameters match `expect`.
GdssmParams load_checkpoint(const std::string& path, const Hyper& expect);

} // namespace gdssm
