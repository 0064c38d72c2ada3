#include "gdssm/bmm.hpp"

#include <cmath>

namespace gdssm {

using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Linear model spec and closed form
// ---------------------------------------------------------------------------

void LinearModelSpec::validate() const {
    const int v = components();
    const int n = num_agents * dx;
    require(v > 0 && static_cast<int>(mu0.size()) == v &&
                static_cast<int>(sigma0_diag.size()) == v,
            "LinearModelSpec: component count mismatch");
    require(static_cast<int>(f.size()) >= horizon && static_cast<int>(l.size()) >= horizon &&
                static_cast<int>(g.size()) >= horizon &&
                static_cast<int>(gamma.size()) >= horizon,
            "LinearModelSpec: missing per-step matrices");
    for (int k = 0; k < v; ++k)
        require(mu0[k].size() == n && sigma0_diag[k].size() == n,
                "LinearModelSpec: initial moment shape");
}

LinearMoments linear_closed_form(const LinearModelSpec& spec, int t, int v) {
    spec.validate();
    require(t >= 0 && t <= spec.horizon, "linear_closed_form: step out of range");
    require(v >= 0 && v < spec.components(), "linear_closed_form: component out of range");
    const int n = spec.num_agents * spec.dx;

    LinearMoments out;
    if (t == 0) {
        Matrix cov = Matrix::Zero(n, n);
        cov.diagonal() = spec.sigma0_diag[v];
        out.latent = GaussianMoments(spec.mu0[v], mask_covariance(cov, CovStructure::Full,
                                                                  spec.num_agents));
        return out;
    }

    // suffix products S_a = prod_{t''=a..t} (I + F_{t''}), built from the back
    std::vector<Matrix> suffix(static_cast<size_t>(t) + 2);
    suffix[static_cast<size_t>(t) + 1] = Matrix::Identity(n, n);
    for (int a = t; a >= 1; --a)
        suffix[a] = suffix[a + 1] * (Matrix::Identity(n, n) + spec.f[a - 1][v]);

    Vector mu = suffix[1] * spec.mu0[v];
    Matrix cov = suffix[1] * spec.sigma0_diag[v].asDiagonal() * suffix[1].transpose();
    for (int tp = 1; tp <= t - 1; ++tp)
        cov += suffix[tp + 1] * spec.l[tp - 1][v].asDiagonal() * suffix[tp + 1].transpose();
    cov += Matrix(spec.l[t - 1][v].asDiagonal());
    cov = 0.5 * (cov + cov.transpose()).eval();
    out.latent = GaussianMoments(mu, mask_covariance(cov, CovStructure::Full, spec.num_agents));

    const Matrix& gt = spec.g[t - 1][v];
    Vector a = gt * mu;
    Matrix b = gt * cov * gt.transpose();
    b += Matrix(spec.gamma[t - 1][v].asDiagonal());
    b = 0.5 * (b + b.transpose()).eval();
    out.output = GaussianMoments(a, mask_covariance(b, CovStructure::Full, spec.num_agents));
    return out;
}

// ---------------------------------------------------------------------------
// Tape engine
// ---------------------------------------------------------------------------

VarNets lift_nets(Tape& tape, const TransitionNets& nets, bool as_parameter) {
    VarNets out;
    out.trunk = lift_layers(tape, nets.trunk, as_parameter);
    out.f_head = lift_layers(tape, nets.f_head, as_parameter);
    out.l_head = lift_layers(tape, nets.l_head, as_parameter);
    return out;
}

VarMoments horizontal_step_tape(Tape& tape, const VarMoments& x, const VarNets& nets,
                                const GraphTopology& topo) {
    const int m = x.cov.m;
    const int d = x.cov.d;

    std::vector<VarMoments> trunk_rec;
    VarMoments shared = sequence_moments(tape, nets.trunk, x, topo, &trunk_rec);
    std::vector<VarMoments> f_rec;
    VarMoments f_out = sequence_moments(tape, nets.f_head, shared, topo, &f_rec);
    require(f_out.cov.m == m && f_out.cov.d == d,
            "horizontal_step: mean head output does not match the state");
    VarMoments l_out = sequence_moments(tape, nets.l_head, shared, topo, nullptr);
    require(l_out.mean.rows() == m * d,
            "horizontal_step: variance head output does not match the state");

    std::vector<VarLayer> chain_layers = nets.trunk;
    chain_layers.insert(chain_layers.end(), nets.f_head.begin(), nets.f_head.end());
    std::vector<VarMoments> chain_inputs = trunk_rec;
    chain_inputs.insert(chain_inputs.end(), f_rec.begin(), f_rec.end());
    Var jac = expected_jacobian_chain(tape, chain_layers, chain_inputs, topo);

    Var stein_sym; // Cov[x,f] + Cov[x,f]^T in the working structure
    switch (x.cov.tag) {
        case CovStructure::Full: {
            Var cross = ad::matmul_nt(x.cov.data, jac);
            stein_sym = ad::add(cross, ad::transpose(cross));
            break;
        }
        case CovStructure::MainDiagonal:
            stein_sym = ad::scale(ad::stein_diag(x.cov.data, jac), 2.0);
            break;
        case CovStructure::MainBlocks: {
            Var s = ad::stein_blocks(x.cov.data, jac, m);
            stein_sym = ad::add(s, ad::blockwise_transpose(s, m));
            break;
        }
        case CovStructure::AllDiagonals: {
            Var s = ad::stein_alldiag(x.cov.data, jac, m, d);
            stein_sym = ad::add(s, ad::blockwise_transpose(s, d));
            break;
        }
    }

    VarMoments out;
    out.mean = ad::add(x.mean, f_out.mean);
    VarCov cov{x.cov.tag, m, d,
               ad::add(ad::add(x.cov.data, f_out.cov.data), stein_sym)};
    cov = cov_add_state_noise(cov, l_out.mean);
    out.cov = cov_psd_repair(cov);
    return out;
}

VarMoments emission_moments_tape(Tape& tape, const VarMoments& x,
                                 const std::vector<VarLayer>& g_layers, Var gamma_diag,
                                 const GraphTopology& topo) {
    for (const auto& l : g_layers)
        require(l.kind != VarLayer::Kind::MeanAggregation && l.kind != VarLayer::Kind::Concat,
                "emission stack must not aggregate across agents");
    VarMoments g_out = sequence_moments(tape, g_layers, x, topo, nullptr);
    require(gamma_diag.rows() == g_out.mean.rows(), "emission: gamma length mismatch");
    VarMoments out;
    out.mean = g_out.mean;
    out.cov = cov_add_state_noise(g_out.cov, gamma_diag);
    return out;
}

std::vector<VarMoments> propagate_tape(Tape& tape, const VarMoments& init,
                                       const std::function<const VarNets&(int)>& nets_at,
                                       int horizon, const GraphTopology& topo) {
    require(horizon >= 0, "propagate: horizon must be non-negative");
    std::vector<VarMoments> out;
    out.reserve(static_cast<size_t>(horizon) + 1);
    out.push_back(init);
    for (int t = 1; t <= horizon; ++t)
        out.push_back(horizontal_step_tape(tape, out.back(), nets_at(t), topo));
    return out;
}

std::vector<std::vector<VarMoments>> rollout_outputs_tape(Tape& tape,
                                                          const VarEngineModel& model,
                                                          int horizon) {
    require(horizon >= 1, "rollout: horizon must be >= 1");
    std::vector<std::vector<VarMoments>> out(model.init.size());
    for (size_t v = 0; v < model.init.size(); ++v) {
        auto nets = [&](int t) -> const VarNets& { return model.nets_at(t, static_cast<int>(v)); };
        std::vector<VarMoments> latents =
            propagate_tape(tape, model.init[v], nets, horizon, model.topology);
        out[v].reserve(horizon);
        for (int t = 1; t <= horizon; ++t)
            out[v].push_back(emission_moments_tape(tape, latents[t],
                                                   model.emission_at(t, static_cast<int>(v)),
                                                   model.gamma_at(t, static_cast<int>(v)),
                                                   model.topology));
    }
    return out;
}

Var pll_joint_tape(Tape& tape, const VarEngineModel& model, const Matrix& y) {
    const int horizon = static_cast<int>(y.rows());
    auto outputs = rollout_outputs_tape(tape, model, horizon);
    Var total;
    for (int t = 1; t <= horizon; ++t) {
        std::vector<Var> logp;
        logp.reserve(outputs.size());
        for (size_t v = 0; v < outputs.size(); ++v) {
            const VarMoments& em = outputs[v][t - 1];
            logp.push_back(ad::mvn_logpdf(em.mean, cov_to_dense(em.cov), y.row(t - 1).transpose()));
        }
        Var step = ad::logsumexp_weighted(model.log_weights, ad::stack_scalars(logp));
        total = (t == 1) ? step : ad::add(total, step);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Plain engine surface
// ---------------------------------------------------------------------------

namespace {

Vector log_weights_clamped(const Vector& w) {
    Vector c = w.cwiseMax(1e-12);
    c /= c.sum();
    return c.array().log().matrix();
}

struct LiftedEngine {
    VarEngineModel model;
    // ownership of per-(t,v) lifted nets
    std::shared_ptr<std::vector<std::vector<VarNets>>> nets;
    std::shared_ptr<std::vector<std::vector<std::vector<VarLayer>>>> emissions;
    std::shared_ptr<std::vector<std::vector<Var>>> gammas;
};

LiftedEngine lift_engine(Tape& tape, const EngineModel& em, int horizon,
                         CovStructure structure) {
    require(!em.init.empty() && em.weights.size() == static_cast<int>(em.init.size()),
            "engine model: weight/component mismatch");
    LiftedEngine out;
    const int vcount = static_cast<int>(em.init.size());
    const int m = em.topology.num_agents;
    out.nets = std::make_shared<std::vector<std::vector<VarNets>>>();
    out.emissions = std::make_shared<std::vector<std::vector<std::vector<VarLayer>>>>();
    out.gammas = std::make_shared<std::vector<std::vector<Var>>>();
    out.nets->resize(horizon);
    out.emissions->resize(horizon);
    out.gammas->resize(horizon);
    for (int t = 1; t <= horizon; ++t) {
        for (int v = 0; v < vcount; ++v) {
            (*out.nets)[t - 1].push_back(lift_nets(tape, em.nets_at(t, v), false));
            const std::vector<LayerSpec>& g_layers = em.emission_at(t, v);
            (*out.emissions)[t - 1].push_back(lift_layers(tape, g_layers, false));
            int dy = em.init[0].dim();
            for (const auto& l : g_layers) dy = layer_output_dim(l, dy, m);
            (*out.gammas)[t - 1].push_back(
                tape.constant(tile_gamma(em.gamma_at(t, v), m, dy)));
        }
    }
    out.model.log_weights = tape.constant(log_weights_clamped(em.weights));
    for (int v = 0; v < vcount; ++v) {
        VarMoments vm = lift_moments(tape, em.init[v]);
        vm.cov = cov_convert(vm.cov, structure);
        out.model.init.push_back(vm);
    }
    auto nets_ptr = out.nets;
    out.model.nets_at = [nets_ptr](int t, int v) -> const VarNets& {
        return (*nets_ptr)[t - 1][v];
    };
    auto em_ptr = out.emissions;
    out.model.emission_at = [em_ptr](int t, int v) -> const std::vector<VarLayer>& {
        return (*em_ptr)[t - 1][v];
    };
    auto g_ptr = out.gammas;
    out.model.gamma_at = [g_ptr](int t, int v) -> Var { return (*g_ptr)[t - 1][v]; };
    out.model.topology = em.topology;
    return out;
}

GmmBelief belief_from_outputs(const Vector& weights,
                              const std::vector<std::vector<VarMoments>>& outputs, int t) {
    GmmBelief belief;
    belief.weights = weights;
    for (const auto& comp : outputs) belief.components.push_back(lower_moments(comp[t - 1]));
    return belief;
}

} // namespace

Vector tile_gamma(const Vector& gamma, int num_agents, int dy) {
    if (gamma.size() == num_agents * dy) return gamma;
    require(gamma.size() == dy, "gamma must have length Dy or M*Dy");
    Vector out(num_agents * dy);
    for (int m = 0; m < num_agents; ++m) out.segment(m * dy, dy) = gamma;
    return out;
}

EngineModel linear_engine_model(std::shared_ptr<const LinearModelSpec> spec) {
    spec->validate();
    EngineModel out;
    out.weights = spec->weights;
    const int n = spec->num_agents * spec->dx;
    for (int v = 0; v < spec->components(); ++v) {
        out.init.emplace_back(
            spec->mu0[v],
            StructuredCovariance(CovStructure::MainDiagonal, spec->num_agents, spec->dx,
                                 spec->sigma0_diag[v]));
    }
    // per-(t,v) StandardAffine realizations, owned by the closures
    auto nets = std::make_shared<std::vector<std::vector<TransitionNets>>>();
    auto emissions = std::make_shared<std::vector<std::vector<std::vector<LayerSpec>>>>();
    nets->resize(spec->horizon);
    emissions->resize(spec->horizon);
    for (int t = 1; t <= spec->horizon; ++t) {
        for (int v = 0; v < spec->components(); ++v) {
            TransitionNets tn;
            tn.f_head.push_back(StandardAffine{spec->f[t - 1][v], Vector::Zero(n)});
            tn.l_head.push_back(StandardAffine{Matrix::Zero(n, n), spec->l[t - 1][v]});
            (*nets)[t - 1].push_back(std::move(tn));
            std::vector<LayerSpec> g_layers;
            g_layers.push_back(StandardAffine{
                spec->g[t - 1][v], Vector::Zero(spec->num_agents * spec->dy)});
            (*emissions)[t - 1].push_back(std::move(g_layers));
        }
    }
    out.nets_at = [nets](int t, int v) -> const TransitionNets& { return (*nets)[t - 1][v]; };
    out.emission_at = [emissions](int t, int v) -> const std::vector<LayerSpec>& {
        return (*emissions)[t - 1][v];
    };
    auto spec_ref = spec;
    out.gamma_at = [spec_ref](int t, int v) { return spec_ref->gamma[t - 1][v]; };
    out.topology = GraphTopology::identity(spec->num_agents);
    return out;
}

GmmBelief bmmls_engine(const EngineModel& model, int t, CovStructure structure) {
    require(t >= 1, "bmmls: horizon step must be >= 1");
    Tape tape(false);
    LiftedEngine lifted = lift_engine(tape, model, t, structure);
    auto outputs = rollout_outputs_tape(tape, lifted.model, t);
    return belief_from_outputs(model.weights, outputs, t);
}

std::vector<GmmBelief> rollout_beliefs(const EngineModel& model, int horizon,
                                       CovStructure structure) {
    Tape tape(false);
    LiftedEngine lifted = lift_engine(tape, model, horizon, structure);
    auto outputs = rollout_outputs_tape(tape, lifted.model, horizon);
    std::vector<GmmBelief> out;
    out.reserve(horizon);
    for (int t = 1; t <= horizon; ++t) out.push_back(belief_from_outputs(model.weights, outputs, t));
    return out;
}

double pll_engine(const EngineModel& model, const Matrix& y, CovStructure structure,
                  bool per_agent) {
    const int horizon = static_cast<int>(y.rows());
    std::vector<GmmBelief> beliefs = rollout_beliefs(model, horizon, structure);
    double total = 0.0;
    for (int t = 1; t <= horizon; ++t) {
        const GmmBelief& b = beliefs[t - 1];
        if (per_agent) {
            const int m = b.components.front().num_agents();
            const int dy = b.components.front().dim();
            for (int agent = 0; agent < m; ++agent)
                total += gmm_agent_log_density(b, agent,
                                               y.row(t - 1).segment(agent * dy, dy).transpose());
        } else {
            total += gmm_log_density(b, y.row(t - 1).transpose());
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Plain single ops
// ---------------------------------------------------------------------------

Matrix expected_jacobian_product(const TransitionNets& nets, const GaussianMoments& in,
                                 const GraphTopology& topo) {
    Tape tape(false);
    VarNets vn = lift_nets(tape, nets, false);
    std::vector<VarLayer> layers = vn.trunk;
    layers.insert(layers.end(), vn.f_head.begin(), vn.f_head.end());
    std::vector<VarMoments> records;
    sequence_moments(tape, layers, lift_moments(tape, in), topo, &records);
    return expected_jacobian_chain(tape, layers, records, topo).value();
}

StructuredCovariance stein_cross_cov(const StructuredCovariance& cov_x,
                                     const Matrix& expected_jac) {
    Tape tape(false);
    Var cov = tape.constant(cov_x.data());
    Var jac = tape.constant(expected_jac);
    const int m = cov_x.num_agents();
    const int d = cov_x.dim();
    Var out;
    switch (cov_x.tag()) {
        case CovStructure::Full: out = ad::matmul_nt(cov, jac); break;
        case CovStructure::MainDiagonal: out = ad::stein_diag(cov, jac); break;
        case CovStructure::MainBlocks: out = ad::stein_blocks(cov, jac, m); break;
        case CovStructure::AllDiagonals: out = ad::stein_alldiag(cov, jac, m, d); break;
    }
    return StructuredCovariance(cov_x.tag(), m, d, out.value());
}

GaussianMoments horizontal_step(const GaussianMoments& moments, const TransitionNets& nets,
                                const GraphTopology& topo) {
    Tape tape(false);
    VarNets vn = lift_nets(tape, nets, false);
    return lower_moments(horizontal_step_tape(tape, lift_moments(tape, moments), vn, topo));
}

std::vector<GaussianMoments> propagate(const GaussianMoments& initial,
                                       const TransitionNets& nets, const GraphTopology& topo,
                                       int horizon) {
    Tape tape(false);
    VarNets vn = lift_nets(tape, nets, false);
    auto at = [&vn](int) -> const VarNets& { return vn; };
    std::vector<VarMoments> traj =
        propagate_tape(tape, lift_moments(tape, initial), at, horizon, topo);
    std::vector<GaussianMoments> out;
    out.reserve(traj.size());
    for (const auto& x : traj) out.push_back(lower_moments(x));
    return out;
}

GaussianMoments emission_moments(const GaussianMoments& moments,
                                 const std::vector<LayerSpec>& g_layers, const Vector& gamma,
                                 const GraphTopology& topo) {
    Tape tape(false);
    std::vector<VarLayer> layers = lift_layers(tape, g_layers, false);
    // emission output width: run the g stack's widths from the latent dim
    int dy = moments.dim();
    for (const auto& l : g_layers) dy = layer_output_dim(l, dy, moments.num_agents());
    Var gamma_diag = tape.constant(tile_gamma(gamma, moments.num_agents(), dy));
    return lower_moments(
        emission_moments_tape(tape, lift_moments(tape, moments), layers, gamma_diag, topo));
}

} // namespace gdssm
