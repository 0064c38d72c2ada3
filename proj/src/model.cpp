#include "gdssm/model.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace gdssm {

using ad::Tape;
using ad::Var;

void Context::validate() const {
    require(histories.rows() == topology.num_agents, "Context: agent count mismatch");
    require(histories.cols() >= 2 && histories.cols() % 2 == 0,
            "Context: history width must be 2*h_obs");
    require(histories.allFinite(), "Context: non-finite history");
    require(dt > 0.0, "Context: dt must be positive");
}

void Hyper::validate() const {
    require(dx > 0 && dy > 0 && v > 0 && hidden > 0 && g_hidden > 0 && enc_width > 0 &&
                trunk_width > 0 && h_obs >= 1 && f_hidden_layers >= 1 && l_hidden_layers >= 1,
            "Hyper: all sizes must be positive");
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

Matrix uniform_weights(RngStream& rng, int rows, int cols) {
    const double bound = std::sqrt(1.0 / cols);
    Matrix w(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) w(i, j) = bound * (2.0 * rng.next_uniform() - 1.0);
    return w;
}

NodeWiseAffine make_nodewise(RngStream& rng, int out, int in) {
    return NodeWiseAffine{uniform_weights(rng, out, in), Vector::Zero(out)};
}

} // namespace

GdssmParams init_params(const Hyper& hyper, uint64_t seed) {
    hyper.validate();
    GdssmParams p;
    p.hyper = hyper;
    RngStream rng(seed, 0x6d6f64656cull); // fixed init stream

    const int hist = 2 * hyper.h_obs;
    p.h.enc_w = uniform_weights(rng, hyper.enc_width, hist);
    p.h.enc_b = Vector::Zero(hyper.enc_width);
    p.h.trunk_w = uniform_weights(rng, hyper.trunk_width, hyper.enc_width);
    p.h.trunk_b = Vector::Zero(hyper.trunk_width);
    p.h.mu_w = uniform_weights(rng, hyper.v * hyper.dx, hyper.trunk_width);
    p.h.mu_b = Vector::Zero(hyper.v * hyper.dx);
    p.h.sigma_w = uniform_weights(rng, hyper.v * hyper.dx, hyper.trunk_width);
    p.h.sigma_b = Vector::Constant(hyper.v * hyper.dx, std::log(0.1));
    p.h.pi_w = uniform_weights(rng, hyper.v, hyper.trunk_width);
    p.h.pi_b = Vector::Zero(hyper.v);

    p.nets.trunk.push_back(ConcatOwnAndMessage{});
    p.nets.f_head.push_back(make_nodewise(rng, hyper.hidden, 2 * hyper.dx));
    p.nets.f_head.push_back(Relu{});
    for (int i = 1; i < hyper.f_hidden_layers; ++i) {
        p.nets.f_head.push_back(make_nodewise(rng, hyper.hidden, hyper.hidden));
        p.nets.f_head.push_back(Relu{});
    }
    p.nets.f_head.push_back(make_nodewise(rng, hyper.dx, hyper.hidden));

    p.nets.l_head.push_back(make_nodewise(rng, hyper.hidden, 2 * hyper.dx));
    p.nets.l_head.push_back(Relu{});
    for (int i = 1; i < hyper.l_hidden_layers; ++i) {
        p.nets.l_head.push_back(make_nodewise(rng, hyper.hidden, hyper.hidden));
        p.nets.l_head.push_back(Relu{});
    }
    p.nets.l_head.push_back(make_nodewise(rng, hyper.dx, hyper.hidden));
    p.nets.l_head.push_back(Relu{});

    p.g.push_back(make_nodewise(rng, hyper.g_hidden, hyper.dx));
    p.g.push_back(Relu{});
    p.g.push_back(make_nodewise(rng, hyper.dy, hyper.g_hidden));

    p.gamma_log = Vector::Constant(hyper.dy, std::log(0.1));
    return p;
}

// ---------------------------------------------------------------------------
// Tensor registry
// ---------------------------------------------------------------------------

namespace {

void add_ref(std::vector<TensorRef>& out, const std::string& name, Matrix& m) {
    out.push_back({name, m.data(), static_cast<int>(m.rows()), static_cast<int>(m.cols())});
}

void add_ref(std::vector<TensorRef>& out, const std::string& name, Vector& v) {
    out.push_back({name, v.data(), static_cast<int>(v.rows()), 1});
}

void add_layer_refs(std::vector<TensorRef>& out, const std::string& prefix,
                    std::vector<LayerSpec>& layers) {
    for (size_t i = 0; i < layers.size(); ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        if (auto* sa = std::get_if<StandardAffine>(&layers[i])) {
            add_ref(out, base + ".w", sa->weight);
            add_ref(out, base + ".b", sa->bias);
        } else if (auto* na = std::get_if<NodeWiseAffine>(&layers[i])) {
            add_ref(out, base + ".w", na->weight);
            add_ref(out, base + ".b", na->bias);
        }
    }
}

} // namespace

std::vector<TensorRef> tensor_refs(GdssmParams& p) {
    std::vector<TensorRef> out;
    add_ref(out, "h.enc.w", p.h.enc_w);
    add_ref(out, "h.enc.b", p.h.enc_b);
    add_ref(out, "h.trunk.w", p.h.trunk_w);
    add_ref(out, "h.trunk.b", p.h.trunk_b);
    add_ref(out, "h.mu.w", p.h.mu_w);
    add_ref(out, "h.mu.b", p.h.mu_b);
    add_ref(out, "h.sigma.w", p.h.sigma_w);
    add_ref(out, "h.sigma.b", p.h.sigma_b);
    add_ref(out, "h.pi.w", p.h.pi_w);
    add_ref(out, "h.pi.b", p.h.pi_b);
    add_layer_refs(out, "trunk", p.nets.trunk);
    add_layer_refs(out, "f", p.nets.f_head);
    add_layer_refs(out, "l", p.nets.l_head);
    add_layer_refs(out, "g", p.g);
    add_ref(out, "gamma_log", p.gamma_log);
    return out;
}

int parameter_count(const GdssmParams& params) {
    auto refs = tensor_refs(const_cast<GdssmParams&>(params));
    int n = 0;
    for (const auto& r : refs) n += r.size();
    return n;
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

VarEmbedding lift_embedding(Tape& tape, const EmbeddingParams& h, bool as_parameter) {
    auto lift = [&](const Matrix& m) { return as_parameter ? tape.input(m) : tape.constant(m); };
    VarEmbedding out;
    out.enc_w = lift(h.enc_w);
    out.enc_b = lift(h.enc_b);
    out.trunk_w = lift(h.trunk_w);
    out.trunk_b = lift(h.trunk_b);
    out.mu_w = lift(h.mu_w);
    out.mu_b = lift(h.mu_b);
    out.sigma_w = lift(h.sigma_w);
    out.sigma_b = lift(h.sigma_b);
    out.pi_w = lift(h.pi_w);
    out.pi_b = lift(h.pi_b);
    return out;
}

VarBelief embed_tape(Tape& tape, const VarEmbedding& h, const Context& context,
                     const Hyper& hyper) {
    context.validate();
    require(context.histories.cols() == 2 * hyper.h_obs,
            "embed: history width does not match h_obs");
    const int m = context.num_agents();
    Var x = tape.constant(context.histories.transpose()); // (2*h_obs) x M, column per agent
    Var enc = ad::tanh_elem(ad::colwise_add(ad::matmul(h.enc_w, x), h.enc_b));
    Var at = tape.constant(context.topology.adjacency.transpose());
    Var msg = ad::matmul(enc, at); // column m = sum_k A(m,k) enc_k
    Var trunk = ad::tanh_elem(ad::colwise_add(ad::matmul(h.trunk_w, msg), h.trunk_b));

    Var mu_all = ad::colwise_add(ad::matmul(h.mu_w, trunk), h.mu_b);       // (V*Dx) x M
    Var sig_all = ad::exp_elem(ad::colwise_add(ad::matmul(h.sigma_w, trunk), h.sigma_b));
    Var pooled = ad::rowmean(trunk);
    Var logits = ad::add(ad::matmul(h.pi_w, pooled), h.pi_b);

    VarBelief out;
    out.log_weights = ad::log_softmax(logits);
    for (int v = 0; v < hyper.v; ++v) {
        VarMoments comp;
        comp.mean = ad::reshape(ad::block(mu_all, v * hyper.dx, 0, hyper.dx, m), m * hyper.dx, 1);
        Var sig = ad::reshape(ad::block(sig_all, v * hyper.dx, 0, hyper.dx, m), m * hyper.dx, 1);
        comp.cov = VarCov{CovStructure::MainDiagonal, m, hyper.dx, sig};
        out.components.push_back(comp);
    }
    return out;
}

GmmBelief embed(const GdssmParams& params, const Context& context) {
    Tape tape(false);
    VarEmbedding h = lift_embedding(tape, params.h, false);
    VarBelief belief = embed_tape(tape, h, context, params.hyper);
    GmmBelief out;
    out.weights = belief.log_weights.value().col(0).array().exp();
    out.weights /= out.weights.sum();
    for (const auto& c : belief.components) out.components.push_back(lower_moments(c));
    return out;
}

// ---------------------------------------------------------------------------
// Full model lifting and engine view
// ---------------------------------------------------------------------------

VarModel lift_model(Tape& tape, const GdssmParams& params, bool as_parameter) {
    VarModel out;
    out.h = lift_embedding(tape, params.h, as_parameter);
    out.nets = lift_nets(tape, params.nets, as_parameter);
    out.g = lift_layers(tape, params.g, as_parameter);
    out.gamma_log =
        as_parameter ? tape.input(params.gamma_log) : tape.constant(params.gamma_log);
    return out;
}

VarEngineModel engine_view(Tape& tape, const VarModel& model, const GdssmParams& params,
                           const Context& context) {
    const int m = context.num_agents();
    const Hyper& hyper = params.hyper;
    VarBelief belief = embed_tape(tape, model.h, context, hyper);

    VarEngineModel out;
    out.log_weights = belief.log_weights;
    for (auto& comp : belief.components) {
        VarMoments c = comp;
        c.cov = cov_convert(c.cov, hyper.structure);
        out.init.push_back(c);
    }
    // tile exp(gamma_log) to all agents with a constant 0/1 matrix
    Matrix tile = Matrix::Zero(m * hyper.dy, hyper.dy);
    for (int k = 0; k < m; ++k) tile.block(k * hyper.dy, 0, hyper.dy, hyper.dy) =
        Matrix::Identity(hyper.dy, hyper.dy);
    Var gamma_diag = ad::matmul(tape.constant(tile), ad::exp_elem(model.gamma_log));

    auto nets = std::make_shared<VarNets>(model.nets);
    auto g_layers = std::make_shared<std::vector<VarLayer>>(model.g);
    out.nets_at = [nets](int, int) -> const VarNets& { return *nets; };
    out.emission_at = [g_layers](int, int) -> const std::vector<VarLayer>& { return *g_layers; };
    out.gamma_at = [gamma_diag](int, int) -> Var { return gamma_diag; };
    out.topology = context.topology;
    return out;
}

GmmBelief bmmls(const GdssmParams& params, const Context& context, int t) {
    require(t >= 1, "bmmls: horizon step must be >= 1");
    std::vector<GmmBelief> all = bmmls_rollout(params, context, t);
    return all.back();
}

std::vector<GmmBelief> bmmls_rollout(const GdssmParams& params, const Context& context,
                                     int horizon) {
    Tape tape(false);
    VarModel model = lift_model(tape, params, false);
    VarEngineModel em = engine_view(tape, model, params, context);
    auto outputs = rollout_outputs_tape(tape, em, horizon);
    Vector weights = em.log_weights.value().col(0).array().exp();
    weights /= weights.sum();
    std::vector<GmmBelief> out;
    out.reserve(horizon);
    for (int t = 1; t <= horizon; ++t) {
        GmmBelief b;
        b.weights = weights;
        for (const auto& comp : outputs) b.components.push_back(lower_moments(comp[t - 1]));
        out.push_back(std::move(b));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr int kCheckpointVersion = 1;

std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
} // namespace

void save_checkpoint(const GdssmParams& params, const std::string& path) {
    std::ostringstream out;
    out << "gdssm-checkpoint " << kCheckpointVersion << "\n";
    const Hyper& h = params.hyper;
    out << "hyper dx " << h.dx << "\n";
    out << "hyper dy " << h.dy << "\n";
    out << "hyper v " << h.v << "\n";
    out << "hyper hidden " << h.hidden << "\n";
    out << "hyper f_hidden_layers " << h.f_hidden_layers << "\n";
    out << "hyper l_hidden_layers " << h.l_hidden_layers << "\n";
    out << "hyper g_hidden " << h.g_hidden << "\n";
    out << "hyper enc_width " << h.enc_width << "\n";
    out << "hyper trunk_width " << h.trunk_width << "\n";
    out << "hyper h_obs " << h.h_obs << "\n";
    out << "hyper structure " << to_string(h.structure) << "\n";
    auto refs = tensor_refs(const_cast<GdssmParams&>(params));
    for (const auto& r : refs) {
        out << "tensor " << r.name << " " << r.rows << " " << r.cols << "\n";
        // row-major listing
        for (int i = 0; i < r.rows; ++i) {
            for (int j = 0; j < r.cols; ++j) {
                if (j) out << " ";
                out << format_value(r.data[j * r.rows + i]);
            }
            out << "\n";
        }
    }
    out << "end\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f << out.str();
}

GdssmParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read checkpoint: " + path);
    std::string word;
    int version = -1;
    if (!(f >> word >> version) || word != "gdssm-checkpoint")
        throw DataError("malformed checkpoint: missing header");
    if (version != kCheckpointVersion)
        throw DataError("checkpoint version mismatch: got " + std::to_string(version) +
                        ", expected " + std::to_string(kCheckpointVersion));
    Hyper h;
    // hyper lines until the first tensor
    while (f >> word) {
        if (word == "tensor" || word == "end") break;
        if (word != "hyper") throw DataError("malformed checkpoint: expected hyper or tensor");
        std::string key;
        if (!(f >> key)) throw DataError("malformed checkpoint: truncated hyper line");
        if (key == "structure") {
            std::string s;
            if (!(f >> s)) throw DataError("malformed checkpoint: truncated hyper line");
            h.structure = cov_structure_from_string(s);
        } else {
            int value = 0;
            if (!(f >> value)) throw DataError("malformed checkpoint: truncated hyper line");
            if (key == "dx") h.dx = value;
            else if (key == "dy") h.dy = value;
            else if (key == "v") h.v = value;
            else if (key == "hidden") h.hidden = value;
            else if (key == "f_hidden_layers") h.f_hidden_layers = value;
            else if (key == "l_hidden_layers") h.l_hidden_layers = value;
            else if (key == "g_hidden") h.g_hidden = value;
            else if (key == "enc_width") h.enc_width = value;
            else if (key == "trunk_width") h.trunk_width = value;
            else if (key == "h_obs") h.h_obs = value;
            else throw DataError("malformed checkpoint: unknown hyper key " + key);
        }
    }
    if (!f) throw DataError("malformed checkpoint: truncated before tensors");

    GdssmParams params = init_params(h, 0);
    auto refs = tensor_refs(params);
    size_t next = 0;
    while (word == "tensor") {
        std::string name;
        int rows = 0, cols = 0;
        if (!(f >> name >> rows >> cols)) throw DataError("malformed checkpoint: tensor header");
        if (next >= refs.size()) throw ShapeError("checkpoint has unexpected tensor " + name);
        TensorRef& r = refs[next++];
        if (name != r.name)
            throw ShapeError("checkpoint tensor order mismatch: got " + name + ", expected " +
                             r.name);
        if (rows != r.rows || cols != r.cols)
            throw ShapeError("checkpoint tensor " + name + " shape mismatch against hyper");
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                double value = 0.0;
                if (!(f >> value)) throw DataError("malformed checkpoint: truncated tensor data");
                r.data[j * rows + i] = value;
            }
        if (!(f >> word)) throw DataError("malformed checkpoint: truncated after tensor");
    }
    if (word != "end") throw DataError("malformed checkpoint: missing end marker");
    if (next != refs.size()) throw ShapeError("checkpoint is missing tensors");
    return params;
}

GdssmParams load_checkpoint(const std::string& path, const Hyper& expect) {
    GdssmParams params = load_checkpoint(path);
    if (!(params.hyper == expect))
        throw ShapeError("checkpoint hyperparameters do not match the expected configuration");
    return params;
}

} // namespace gdssm
