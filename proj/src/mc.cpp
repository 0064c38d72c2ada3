#include "gdssm/mc.hpp"

#include <cmath>
#include <thread>

namespace gdssm {

namespace {

// Samples a categorical index from the cumulative weights.
int sample_component(const Vector& weights, RngStream& rng) {
    const double u = rng.next_uniform();
    double acc = 0.0;
    for (int v = 0; v < weights.size(); ++v) {
        acc += weights[v];
        if (u <= acc) return v;
    }
    return static_cast<int>(weights.size()) - 1;
}

Vector sample_gaussian_diag(const Vector& mean, const Vector& var, RngStream& rng) {
    Vector out(mean.size());
    for (int i = 0; i < mean.size(); ++i)
        out[i] = mean[i] + std::sqrt(std::max(0.0, var[i])) * rng.next_normal();
    return out;
}

// Latent rollout conditioned on a component; fills one row per step.
void rollout_conditioned(const EngineModel& model, int component, int horizon, RngStream& rng,
                         Matrix* latents, Matrix* outputs) {
    const GaussianMoments& init = model.init[component];
    const int m = init.num_agents();
    require(init.cov.tag() == CovStructure::MainDiagonal,
            "mc sampling expects a diagonal initial covariance");
    Vector x = sample_gaussian_diag(init.mean, init.cov.data().col(0), rng);
    if (latents) latents->row(0) = x.transpose();
    int dy = -1;
    for (int t = 1; t <= horizon; ++t) {
        const TransitionNets& nets = model.nets_at(t, component);
        Vector shared = forward_layers(nets.trunk, x, model.topology, m);
        Vector drift = forward_layers(nets.f_head, shared, model.topology, m);
        Vector noise_var = forward_layers(nets.l_head, shared, model.topology, m);
        x = sample_gaussian_diag(x + drift, noise_var, rng);
        if (latents) latents->row(t) = x.transpose();
        const std::vector<LayerSpec>& g_layers = model.emission_at(t, component);
        Vector y_mean = forward_layers(g_layers, x, model.topology, m);
        if (dy < 0) dy = static_cast<int>(y_mean.size()) / m;
        Vector gamma = tile_gamma(model.gamma_at(t, component), m, dy);
        Vector y = sample_gaussian_diag(y_mean, gamma, rng);
        if (outputs) outputs->row(t - 1) = y.transpose();
    }
}

} // namespace

EngineModel engine_model(const GdssmParams& params, const Context& context) {
    EngineModel out;
    GmmBelief belief = embed(params, context);
    out.weights = belief.weights;
    out.init = belief.components;
    auto nets = std::make_shared<TransitionNets>(params.nets);
    auto g_layers = std::make_shared<std::vector<LayerSpec>>(params.g);
    Vector gamma = params.gamma();
    out.nets_at = [nets](int, int) -> const TransitionNets& { return *nets; };
    out.emission_at = [g_layers](int, int) -> const std::vector<LayerSpec>& { return *g_layers; };
    out.gamma_at = [gamma](int, int) { return gamma; };
    out.topology = context.topology;
    return out;
}

TrajectorySample sample_trajectory(const EngineModel& model, int horizon, RngStream& rng) {
    require(horizon >= 1, "sample_trajectory: horizon must be >= 1");
    TrajectorySample out;
    out.component = sample_component(model.weights, rng);
    const int m = model.topology.num_agents;
    const int n = model.init[out.component].size();
    int dy = model.init[out.component].dim();
    for (const auto& l : model.emission_at(1, out.component)) dy = layer_output_dim(l, dy, m);
    out.latents.resize(horizon + 1, n);
    out.outputs.resize(horizon, m * dy);
    rollout_conditioned(model, out.component, horizon, rng, &out.latents, &out.outputs);
    return out;
}

TrajectorySample sample_trajectory(const GdssmParams& params, const Context& context,
                                   int horizon, RngStream& rng) {
    return sample_trajectory(engine_model(params, context), horizon, rng);
}

// ---------------------------------------------------------------------------
// Moment estimation with a fixed-block pairwise reduction
// ---------------------------------------------------------------------------

namespace {

constexpr int kReduceBlock = 1024; // particles per reduction block (thread-count independent)

struct BlockSums {
    Vector sum;
    Matrix outer;
    void init(int n) {
        sum = Vector::Zero(n);
        outer = Matrix::Zero(n, n);
    }
    void add(const BlockSums& other) {
        sum += other.sum;
        outer += other.outer;
    }
};

// Per-step accumulation over all future steps (used by mc_pll); step_sums has
// one entry per t.
void run_particles(const EngineModel& model, int component, int horizon, int samples,
                   const RngStream& base, int threads, std::vector<std::vector<BlockSums>>* out) {
    const int m = model.topology.num_agents;
    int dy = model.init[component].dim();
    for (const auto& l : model.emission_at(1, component)) dy = layer_output_dim(l, dy, m);
    const int n = m * dy;
    const int blocks = (samples + kReduceBlock - 1) / kReduceBlock;
    std::vector<std::vector<BlockSums>> block_sums(blocks,
                                                   std::vector<BlockSums>(horizon));
    for (auto& per_t : block_sums)
        for (auto& b : per_t) b.init(n);

    auto work = [&](int block_begin, int block_end) {
        Matrix outputs(horizon, n);
        for (int b = block_begin; b < block_end; ++b) {
            const int lo = b * kReduceBlock;
            const int hi = std::min(samples, lo + kReduceBlock);
            for (int p = lo; p < hi; ++p) {
                RngStream rng = base.substream(static_cast<uint64_t>(p));
                rollout_conditioned(model, component, horizon, rng, nullptr, &outputs);
                for (int t = 0; t < horizon; ++t) {
                    const Vector y = outputs.row(t).transpose();
                    block_sums[b][t].sum += y;
                    block_sums[b][t].outer.noalias() += y * y.transpose();
                }
            }
        }
    };

    threads = std::max(1, threads);
    if (threads == 1 || blocks == 1) {
        work(0, blocks);
    } else {
        std::vector<std::thread> pool;
        const int per = (blocks + threads - 1) / threads;
        for (int k = 0; k < threads; ++k) {
            const int lo = k * per;
            const int hi = std::min(blocks, lo + per);
            if (lo >= hi) break;
            pool.emplace_back(work, lo, hi);
        }
        for (auto& th : pool) th.join();
    }

    // deterministic pairwise tree over blocks
    out->assign(1, std::vector<BlockSums>(horizon));
    for (auto& b : (*out)[0]) b.init(n);
    std::vector<std::vector<BlockSums>> level = std::move(block_sums);
    while (level.size() > 1) {
        std::vector<std::vector<BlockSums>> next;
        for (size_t i = 0; i + 1 < level.size(); i += 2) {
            for (int t = 0; t < horizon; ++t) level[i][t].add(level[i + 1][t]);
            next.push_back(std::move(level[i]));
        }
        if (level.size() % 2 == 1) next.push_back(std::move(level.back()));
        level = std::move(next);
    }
    (*out)[0] = std::move(level[0]);
}

McMoments finish_moments(const BlockSums& sums, int samples) {
    McMoments out;
    out.samples = samples;
    out.mean = sums.sum / samples;
    Matrix cov = (sums.outer - samples * (out.mean * out.mean.transpose())) /
                 std::max(1, samples - 1);
    out.cov = 0.5 * (cov + cov.transpose());
    out.std_error = (out.cov.diagonal().cwiseMax(0.0) / samples).cwiseSqrt();
    return out;
}

} // namespace

McMoments mc_component_moments(const EngineModel& model, int t, int v, int samples,
                               RngStream rng, int threads) {
    require(samples >= 2, "mc_component_moments: need at least 2 samples");
    require(t >= 1, "mc_component_moments: step must be >= 1");
    std::vector<std::vector<BlockSums>> reduced;
    run_particles(model, v, t, samples, rng, threads, &reduced);
    return finish_moments(reduced[0][t - 1], samples);
}

McMoments mc_component_moments(const GdssmParams& params, const Context& context, int t, int v,
                               int samples, RngStream rng, int threads) {
    return mc_component_moments(engine_model(params, context), t, v, samples, rng, threads);
}

double mc_pll(const EngineModel& model, const Matrix& y, int samples, RngStream rng,
              int threads) {
    require(samples >= 2, "mc_pll: need at least 2 samples");
    const int horizon = static_cast<int>(y.rows());
    const int vcount = static_cast<int>(model.weights.size());
    // per-component empirical moments at every step
    std::vector<std::vector<McMoments>> comp_moments(vcount);
    for (int v = 0; v < vcount; ++v) {
        RngStream comp_rng = rng.substream(0x504c4cull + static_cast<uint64_t>(v) * 0x10001ull);
        std::vector<std::vector<BlockSums>> reduced;
        run_particles(model, v, horizon, samples, comp_rng, threads, &reduced);
        comp_moments[v].reserve(horizon);
        for (int t = 0; t < horizon; ++t)
            comp_moments[v].push_back(finish_moments(reduced[0][t], samples));
    }
    const int m = model.topology.num_agents;
    double total = 0.0;
    for (int t = 1; t <= horizon; ++t) {
        GmmBelief belief;
        belief.weights = model.weights;
        for (int v = 0; v < vcount; ++v) {
            const McMoments& mm = comp_moments[v][t - 1];
            const int dy = static_cast<int>(mm.mean.size()) / m;
            belief.components.emplace_back(
                mm.mean, mask_covariance(mm.cov, CovStructure::Full, m));
            (void)dy;
        }
        total += gmm_log_density(belief, y.row(t - 1).transpose());
    }
    return total;
}

double mc_pll(const GdssmParams& params, const Context& context, const Matrix& y, int samples,
              RngStream rng, int threads) {
    return mc_pll(engine_model(params, context), y, samples, rng, threads);
}

} // namespace gdssm
