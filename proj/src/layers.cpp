#include "gdssm/layers.hpp"

#include <cmath>

namespace gdssm {

using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Point evaluation
// ---------------------------------------------------------------------------

int layer_output_dim(const LayerSpec& layer, int in_dim, int num_agents) {
    return std::visit(
        [&](const auto& l) -> int {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, StandardAffine>) {
                require(l.weight.cols() == in_dim * num_agents,
                        "StandardAffine: input width mismatch");
                require(l.weight.rows() % num_agents == 0,
                        "StandardAffine: output width not divisible by agent count");
                return static_cast<int>(l.weight.rows()) / num_agents;
            } else if constexpr (std::is_same_v<T, NodeWiseAffine>) {
                require(l.weight.cols() == in_dim, "NodeWiseAffine: input width mismatch");
                return static_cast<int>(l.weight.rows());
            } else if constexpr (std::is_same_v<T, ConcatOwnAndMessage>) {
                return 2 * in_dim;
            } else {
                return in_dim;
            }
        },
        layer);
}

Vector layer_forward(const LayerSpec& layer, const Vector& x, const GraphTopology& topo,
                     int num_agents) {
    const int m = num_agents;
    require(x.size() % m == 0, "layer_forward: state not divisible by agent count");
    const int d = static_cast<int>(x.size()) / m;
    return std::visit(
        [&](const auto& l) -> Vector {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, StandardAffine>) {
                require(l.weight.cols() == x.size(), "layer_forward: shape mismatch");
                return l.weight * x + l.bias;
            } else if constexpr (std::is_same_v<T, NodeWiseAffine>) {
                require(l.weight.cols() == d, "layer_forward: shape mismatch");
                const int dout = static_cast<int>(l.weight.rows());
                Vector out(m * dout);
                for (int k = 0; k < m; ++k)
                    out.segment(k * dout, dout) = l.weight * x.segment(k * d, d) + l.bias;
                return out;
            } else if constexpr (std::is_same_v<T, MeanAggregation>) {
                require(topo.num_agents == m, "layer_forward: agent count mismatch");
                Vector out = Vector::Zero(m * d);
                for (int a = 0; a < m; ++a)
                    for (int k = 0; k < m; ++k)
                        if (topo.adjacency(a, k) != 0.0)
                            out.segment(a * d, d) += topo.adjacency(a, k) * x.segment(k * d, d);
                return out;
            } else if constexpr (std::is_same_v<T, ConcatOwnAndMessage>) {
                Vector msg = layer_forward(MeanAggregation{}, x, topo, m);
                Vector out(2 * m * d);
                for (int k = 0; k < m; ++k) {
                    out.segment(k * 2 * d, d) = x.segment(k * d, d);
                    out.segment(k * 2 * d + d, d) = msg.segment(k * d, d);
                }
                return out;
            } else { // Relu
                return x.cwiseMax(0.0);
            }
        },
        layer);
}

Vector forward_layers(const std::vector<LayerSpec>& layers, const Vector& x,
                      const GraphTopology& topo, int num_agents) {
    Vector cur = x;
    for (const auto& l : layers) cur = layer_forward(l, cur, topo, num_agents);
    return cur;
}

// ---------------------------------------------------------------------------
// Tape lifting and covariance helpers
// ---------------------------------------------------------------------------

VarLayer lift_layer(Tape& tape, const LayerSpec& layer, bool as_parameter) {
    VarLayer out;
    std::visit(
        [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, StandardAffine>) {
                out.kind = VarLayer::Kind::StandardAffine;
                out.w = as_parameter ? tape.input(l.weight) : tape.constant(l.weight);
                out.b = as_parameter ? tape.input(l.bias) : tape.constant(l.bias);
            } else if constexpr (std::is_same_v<T, NodeWiseAffine>) {
                out.kind = VarLayer::Kind::NodeWiseAffine;
                out.w = as_parameter ? tape.input(l.weight) : tape.constant(l.weight);
                out.b = as_parameter ? tape.input(l.bias) : tape.constant(l.bias);
            } else if constexpr (std::is_same_v<T, MeanAggregation>) {
                out.kind = VarLayer::Kind::MeanAggregation;
            } else if constexpr (std::is_same_v<T, ConcatOwnAndMessage>) {
                out.kind = VarLayer::Kind::Concat;
            } else {
                out.kind = VarLayer::Kind::Relu;
            }
        },
        layer);
    return out;
}

std::vector<VarLayer> lift_layers(Tape& tape, const std::vector<LayerSpec>& layers,
                                  bool as_parameter) {
    std::vector<VarLayer> out;
    out.reserve(layers.size());
    for (const auto& l : layers) out.push_back(lift_layer(tape, l, as_parameter));
    return out;
}

Var cov_diagonal(const VarCov& c) {
    switch (c.tag) {
        case CovStructure::Full: return ad::structured_diagonal_full(c.data);
        case CovStructure::MainDiagonal: return c.data;
        case CovStructure::MainBlocks: return ad::structured_diagonal_blocks(c.data, c.m);
        case CovStructure::AllDiagonals:
            return ad::structured_diagonal_alldiag(c.data, c.m, c.d);
    }
    throw Error("unreachable");
}

Var cov_to_dense(const VarCov& c) {
    switch (c.tag) {
        case CovStructure::Full: return c.data;
        case CovStructure::MainDiagonal: return ad::diag_to_full(c.data);
        case CovStructure::MainBlocks: return ad::blocks_to_full(c.data, c.m);
        case CovStructure::AllDiagonals: return ad::alldiag_to_full(c.data, c.m, c.d);
    }
    throw Error("unreachable");
}

VarCov dense_to_cov(Var dense, CovStructure tag, int m, int d) {
    switch (tag) {
        case CovStructure::Full: return {tag, m, d, dense};
        case CovStructure::MainDiagonal: return {tag, m, d, ad::mask_full_diag(dense)};
        case CovStructure::MainBlocks: return {tag, m, d, ad::mask_full_blocks(dense, m)};
        case CovStructure::AllDiagonals:
            return {tag, m, d, ad::mask_full_alldiag(dense, m, d)};
    }
    throw Error("unreachable");
}

VarCov cov_convert(const VarCov& c, CovStructure target) {
    if (c.tag == target) return c;
    if (c.tag == CovStructure::MainDiagonal) {
        // diagonal embeds exactly into every pattern
        switch (target) {
            case CovStructure::Full: return {target, c.m, c.d, ad::diag_to_full(c.data)};
            case CovStructure::MainBlocks:
                return {target, c.m, c.d, ad::diag_to_blocks(c.data, c.m)};
            case CovStructure::AllDiagonals:
                return {target, c.m, c.d, ad::diag_to_alldiag(c.data, c.m, c.d)};
            default: break;
        }
    }
    return dense_to_cov(cov_to_dense(c), target, c.m, c.d);
}

VarCov cov_add(const VarCov& a, const VarCov& b) {
    require(a.tag == b.tag && a.m == b.m && a.d == b.d, "cov_add: structure mismatch");
    return {a.tag, a.m, a.d, ad::add(a.data, b.data)};
}

VarCov cov_add_state_noise(const VarCov& c, Var variances) {
    switch (c.tag) {
        case CovStructure::Full: return {c.tag, c.m, c.d, ad::add_diag(c.data, variances)};
        case CovStructure::MainDiagonal:
            return {c.tag, c.m, c.d, ad::add(c.data, variances)};
        case CovStructure::MainBlocks:
            return {c.tag, c.m, c.d, ad::add_diag_blocks(c.data, variances, c.m)};
        case CovStructure::AllDiagonals:
            return {c.tag, c.m, c.d, ad::add_diag_perdim(c.data, variances, c.m, c.d)};
    }
    throw Error("unreachable");
}

VarCov cov_psd_repair(const VarCov& c) {
    switch (c.tag) {
        case CovStructure::Full: return {c.tag, c.m, c.d, ad::psd_repair_full(c.data)};
        case CovStructure::MainDiagonal:
            return {c.tag, c.m, c.d, ad::floor_check_vec(c.data)};
        case CovStructure::MainBlocks:
            return {c.tag, c.m, c.d, ad::psd_repair_blocks(c.data, c.m)};
        case CovStructure::AllDiagonals:
            return {c.tag, c.m, c.d, ad::psd_repair_alldiag(c.data, c.m, c.d)};
    }
    throw Error("unreachable");
}

VarMoments lift_moments(Tape& tape, const GaussianMoments& m) {
    VarMoments out;
    out.mean = tape.constant(m.mean);
    out.cov = {m.cov.tag(), m.cov.num_agents(), m.cov.dim(), tape.constant(m.cov.data())};
    return out;
}

GaussianMoments lower_moments(const VarMoments& vm) {
    return GaussianMoments(
        vm.mean.value().col(0),
        StructuredCovariance(vm.cov.tag, vm.cov.m, vm.cov.d, vm.cov.data.value()));
}

// ---------------------------------------------------------------------------
// Per-layer moment rules
// ---------------------------------------------------------------------------

namespace {

// Dense constant (A (x) I_d) for Full-structure aggregation.
Matrix kron_identity(const Matrix& a, int d) {
    const int m = static_cast<int>(a.rows());
    Matrix out = Matrix::Zero(m * d, m * d);
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < m; ++k)
            if (a(i, k) != 0.0)
                out.block(i * d, k * d, d, d) = a(i, k) * Matrix::Identity(d, d);
    return out;
}

// Dense constant selecting per-agent [own; message] rows, (2md x md).
Matrix concat_transform(const Matrix& a, int d) {
    const int m = static_cast<int>(a.rows());
    Matrix out = Matrix::Zero(2 * m * d, m * d);
    for (int k = 0; k < m; ++k) {
        out.block(k * 2 * d, k * d, d, d) = Matrix::Identity(d, d);
        for (int j = 0; j < m; ++j)
            if (a(k, j) != 0.0)
                out.block(k * 2 * d + d, j * d, d, d) = a(k, j) * Matrix::Identity(d, d);
    }
    return out;
}

VarMoments standard_affine_moments(const VarLayer& l, const VarMoments& in) {
    const int m = in.cov.m;
    const int n_out = l.w.rows();
    require(n_out % m == 0, "StandardAffine: output width not divisible by agent count");
    const int d_out = n_out / m;
    VarMoments out;
    out.mean = ad::add(ad::matmul(l.w, in.mean), l.b);
    if (in.cov.tag == CovStructure::Full) {
        out.cov = {CovStructure::Full, m, d_out, ad::sandwich(l.w, in.cov.data)};
    } else {
        // inherently dense map: zero-fill, propagate, mask
        Var dense = ad::sandwich(l.w, cov_to_dense(in.cov));
        out.cov = dense_to_cov(dense, in.cov.tag, m, d_out);
    }
    return out;
}

VarMoments nodewise_affine_moments(const VarLayer& l, const VarMoments& in) {
    const int m = in.cov.m;
    const int d_out = l.w.rows();
    VarMoments out;
    out.mean = ad::nodewise_affine_mean(l.w, l.b, in.mean, m);
    switch (in.cov.tag) {
        case CovStructure::Full: {
            Var wd = ad::block_diag_expand(l.w, m);
            out.cov = {CovStructure::Full, m, d_out, ad::sandwich(wd, in.cov.data)};
            break;
        }
        case CovStructure::MainDiagonal:
            out.cov = {in.cov.tag, m, d_out, ad::maindiag_affine_var(l.w, in.cov.data, m)};
            break;
        case CovStructure::MainBlocks:
            out.cov = {in.cov.tag, m, d_out, ad::nodewise_sandwich(l.w, in.cov.data, m)};
            break;
        case CovStructure::AllDiagonals:
            out.cov = {in.cov.tag, m, d_out, ad::alldiag_mix(l.w, in.cov.data, m)};
            break;
    }
    return out;
}

VarMoments aggregation_moments(Tape& tape, const VarMoments& in, const GraphTopology& topo) {
    const int m = in.cov.m;
    const int d = in.cov.d;
    require(topo.num_agents == m, "mean aggregation: agent count mismatch");
    const Matrix& a = topo.adjacency;
    VarMoments out;
    out.mean = ad::agg_mean(a, in.mean, m);
    switch (in.cov.tag) {
        case CovStructure::Full: {
            Var ahat = tape.constant(kron_identity(a, d));
            out.cov = {CovStructure::Full, m, d, ad::sandwich(ahat, in.cov.data)};
            break;
        }
        case CovStructure::MainDiagonal:
            out.cov = {in.cov.tag, m, d, ad::maindiag_agg_var(a, in.cov.data, m)};
            break;
        case CovStructure::MainBlocks: {
            Matrix a2 = a.array().square();
            out.cov = {in.cov.tag, m, d, ad::blocks_mix(a2, in.cov.data, m)};
            break;
        }
        case CovStructure::AllDiagonals:
            out.cov = {in.cov.tag, m, d, ad::perdim_sandwich(a, in.cov.data, m)};
            break;
    }
    return out;
}

VarMoments concat_layer_moments(Tape& tape, const VarMoments& in, const GraphTopology& topo) {
    const int m = in.cov.m;
    const int d = in.cov.d;
    require(topo.num_agents == m, "concat: agent count mismatch");
    const Matrix& a = topo.adjacency;
    VarMoments out;
    Var msg_mean = ad::agg_mean(a, in.mean, m);
    out.mean = ad::interleave_agents(in.mean, d, msg_mean, d, m);
    switch (in.cov.tag) {
        case CovStructure::Full: {
            Var t = tape.constant(concat_transform(a, d));
            out.cov = {CovStructure::Full, m, 2 * d, ad::sandwich(t, in.cov.data)};
            break;
        }
        case CovStructure::MainDiagonal: {
            Var msg_var = ad::maindiag_agg_var(a, in.cov.data, m);
            out.cov = {in.cov.tag, m, 2 * d,
                       ad::interleave_agents(in.cov.data, d, msg_var, d, m)};
            break;
        }
        case CovStructure::MainBlocks: {
            Matrix a2 = a.array().square();
            Var msg_blocks = ad::blocks_mix(a2, in.cov.data, m);
            out.cov = {in.cov.tag, m, 2 * d,
                       ad::concat_blocks(in.cov.data, msg_blocks, a.diagonal(), m)};
            break;
        }
        case CovStructure::AllDiagonals: {
            Var msg_stack = ad::perdim_sandwich(a, in.cov.data, m);
            out.cov = {in.cov.tag, m, 2 * d, ad::vcat(in.cov.data, msg_stack)};
            break;
        }
    }
    return out;
}

VarMoments relu_layer_moments(const VarMoments& in) {
    const int m = in.cov.m;
    const int d = in.cov.d;
    VarMoments out;
    Var var = cov_diagonal(in.cov);
    out.mean = ad::relu_mean_vec(in.mean, var);
    switch (in.cov.tag) {
        case CovStructure::Full:
            out.cov = {in.cov.tag, m, d, ad::relu_cov_full(in.mean, in.cov.data)};
            break;
        case CovStructure::MainDiagonal:
            out.cov = {in.cov.tag, m, d, ad::relu_var_vec(in.mean, var)};
            break;
        case CovStructure::MainBlocks:
            out.cov = {in.cov.tag, m, d, ad::relu_cov_blocks(in.mean, in.cov.data, m)};
            break;
        case CovStructure::AllDiagonals:
            out.cov = {in.cov.tag, m, d, ad::relu_cov_alldiag(in.mean, in.cov.data, m, d)};
            break;
    }
    return out;
}

} // namespace

VarMoments layer_moments(Tape& tape, const VarLayer& layer, const VarMoments& in,
                         const GraphTopology& topo) {
    switch (layer.kind) {
        case VarLayer::Kind::StandardAffine: return standard_affine_moments(layer, in);
        case VarLayer::Kind::NodeWiseAffine: return nodewise_affine_moments(layer, in);
        case VarLayer::Kind::MeanAggregation: return aggregation_moments(tape, in, topo);
        case VarLayer::Kind::Concat: return concat_layer_moments(tape, in, topo);
        case VarLayer::Kind::Relu: return relu_layer_moments(in);
    }
    throw Error("unreachable");
}

VarMoments sequence_moments(Tape& tape, const std::vector<VarLayer>& layers,
                            const VarMoments& in, const GraphTopology& topo,
                            std::vector<VarMoments>* records) {
    VarMoments cur = in;
    for (const auto& l : layers) {
        if (records) records->push_back(cur);
        cur = layer_moments(tape, l, cur, topo);
    }
    return cur;
}

// ---------------------------------------------------------------------------
// Expected Jacobian chain
// ---------------------------------------------------------------------------

Var expected_jacobian_chain(Tape& tape, const std::vector<VarLayer>& layers,
                            const std::vector<VarMoments>& inputs, const GraphTopology& topo) {
    require(layers.size() == inputs.size(), "expected_jacobian_chain: record mismatch");
    require(!layers.empty(), "expected_jacobian_chain: empty sequence");
    const int m = inputs.front().cov.m;
    const int d_in = inputs.front().cov.d;

    enum class Front { None, Concat, Agg };
    Front front = Front::None;

    // Per-agent chain state: stacked (m * w) x w0 blocks. Starts as identity.
    bool stacked_mode = true;
    int w0 = d_in;
    Var chain;
    Var dense; // valid when !stacked_mode

    auto stacked_identity = [&](int width) {
        Matrix id = Matrix::Identity(width, width);
        Matrix stack(m * width, width);
        for (int k = 0; k < m; ++k) stack.block(k * width, 0, width, width) = id;
        return tape.constant(stack);
    };

    auto flush_to_dense = [&]() {
        if (!stacked_mode) return;
        switch (front) {
            case Front::None:
                dense = ad::assemble_jac_agg(chain, Matrix::Identity(m, m), m);
                break;
            case Front::Concat:
                dense = ad::assemble_jac_concat(chain, topo.adjacency, m);
                break;
            case Front::Agg:
                dense = ad::assemble_jac_agg(chain, topo.adjacency, m);
                break;
        }
        stacked_mode = false;
    };

    bool first = true;
    for (size_t li = 0; li < layers.size(); ++li) {
        const VarLayer& l = layers[li];
        const VarMoments& in = inputs[li];
        switch (l.kind) {
            case VarLayer::Kind::Concat:
                require(first && stacked_mode,
                        "expected_jacobian_chain: concat supported at the front only");
                front = Front::Concat;
                chain = stacked_identity(2 * w0);
                break;
            case VarLayer::Kind::MeanAggregation:
                require(first && stacked_mode,
                        "expected_jacobian_chain: aggregation supported at the front only");
                front = Front::Agg;
                chain = stacked_identity(w0);
                break;
            case VarLayer::Kind::NodeWiseAffine:
                if (first) chain = stacked_identity(w0);
                if (stacked_mode)
                    chain = ad::nodewise_matmul(l.w, chain, m);
                else
                    dense = ad::matmul(ad::block_diag_expand(l.w, m), dense);
                break;
            case VarLayer::Kind::Relu: {
                if (first) chain = stacked_identity(w0);
                Var jvec = ad::relu_jac_vec(in.mean, cov_diagonal(in.cov));
                if (stacked_mode)
                    chain = ad::rowscale(jvec, chain);
                else
                    dense = ad::rowscale(jvec, dense);
                break;
            }
            case VarLayer::Kind::StandardAffine:
                if (first) chain = stacked_identity(w0);
                flush_to_dense();
                dense = ad::matmul(l.w, dense);
                break;
        }
        first = false;
    }
    flush_to_dense();
    return dense;
}

// ---------------------------------------------------------------------------
// Plain wrappers
// ---------------------------------------------------------------------------

namespace {

GaussianMoments run_layer_plain(const LayerSpec& layer, const GaussianMoments& in,
                                const GraphTopology& topo) {
    ad::Tape tape(false);
    VarLayer vl = lift_layer(tape, layer, false);
    VarMoments vin = lift_moments(tape, in);
    VarMoments out = layer_moments(tape, vl, vin, topo);
    return lower_moments(out);
}

} // namespace

GaussianMoments affine_moments(const LayerSpec& layer, const GaussianMoments& in) {
    require(std::holds_alternative<StandardAffine>(layer) ||
                std::holds_alternative<NodeWiseAffine>(layer),
            "affine_moments: layer is not affine");
    return run_layer_plain(layer, in, GraphTopology::identity(in.num_agents()));
}

GaussianMoments mean_agg_moments(const GraphTopology& topo, const GaussianMoments& in) {
    require(topo.num_agents == in.num_agents(), "mean_agg_moments: agent count mismatch");
    return run_layer_plain(MeanAggregation{}, in, topo);
}

GaussianMoments concat_moments(const GaussianMoments& state, const GaussianMoments& message,
                               const Matrix& cross) {
    const int m = state.num_agents();
    const int d = state.dim();
    require(message.num_agents() == m && message.dim() == d,
            "concat_moments: inconsistent shapes");
    require(cross.rows() == m * d && cross.cols() == m * d,
            "concat_moments: cross block shape mismatch");
    const int n = m * d;
    // dense joint, interleaved per agent, then masked to the working structure
    Matrix joint = Matrix::Zero(2 * n, 2 * n);
    Matrix s_dense = embed_to_full(state.cov);
    Matrix m_dense = embed_to_full(message.cov);
    auto row_of = [&](int agent, int local, bool msg) {
        return agent * 2 * d + (msg ? d : 0) + local;
    };
    for (int a = 0; a < m; ++a)
        for (int i = 0; i < d; ++i)
            for (int b = 0; b < m; ++b)
                for (int j = 0; j < d; ++j) {
                    joint(row_of(a, i, false), row_of(b, j, false)) = s_dense(a * d + i, b * d + j);
                    joint(row_of(a, i, true), row_of(b, j, true)) = m_dense(a * d + i, b * d + j);
                    joint(row_of(a, i, false), row_of(b, j, true)) = cross(a * d + i, b * d + j);
                    joint(row_of(a, i, true), row_of(b, j, false)) = cross(b * d + j, a * d + i);
                }
    Vector mean(2 * n);
    for (int a = 0; a < m; ++a) {
        mean.segment(a * 2 * d, d) = state.mean.segment(a * d, d);
        mean.segment(a * 2 * d + d, d) = message.mean.segment(a * d, d);
    }
    return GaussianMoments(std::move(mean), mask_covariance(joint, state.cov.tag(), m));
}

GaussianMoments relu_moments(const GaussianMoments& in) {
    return run_layer_plain(Relu{}, in, GraphTopology::identity(in.num_agents()));
}

Matrix expected_jacobian(const LayerSpec& layer, const GaussianMoments& in,
                         const GraphTopology& topo) {
    ad::Tape tape(false);
    std::vector<VarLayer> layers{lift_layer(tape, layer, false)};
    std::vector<VarMoments> inputs{lift_moments(tape, in)};
    Var j = expected_jacobian_chain(tape, layers, inputs, topo);
    return j.value();
}

} // namespace gdssm
