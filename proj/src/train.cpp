#include "gdssm/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace gdssm {

using ad::Tape;
using ad::Var;

void TrainConfig::validate() const {
    require(learning_rate > 0 && batch_size >= 1 && max_updates >= 0 &&
                validation_interval >= 1 && fd_step > 0,
            "TrainConfig: rates and sizes must be positive");
    require(val_fraction >= 0.0 && val_fraction < 1.0, "TrainConfig: val_fraction in [0,1)");
}

// ---------------------------------------------------------------------------
// PLL and gradients
// ---------------------------------------------------------------------------

namespace {

// Tape parameter handles in the canonical tensor_refs order.
std::vector<Var> model_var_refs(const VarModel& model) {
    std::vector<Var> out;
    out.push_back(model.h.enc_w);
    out.push_back(model.h.enc_b);
    out.push_back(model.h.trunk_w);
    out.push_back(model.h.trunk_b);
    out.push_back(model.h.mu_w);
    out.push_back(model.h.mu_b);
    out.push_back(model.h.sigma_w);
    out.push_back(model.h.sigma_b);
    out.push_back(model.h.pi_w);
    out.push_back(model.h.pi_b);
    auto add_layers = [&out](const std::vector<VarLayer>& layers) {
        for (const auto& l : layers) {
            if (l.kind == VarLayer::Kind::StandardAffine ||
                l.kind == VarLayer::Kind::NodeWiseAffine) {
                out.push_back(l.w);
                out.push_back(l.b);
            }
        }
    };
    add_layers(model.nets.trunk);
    add_layers(model.nets.f_head);
    add_layers(model.nets.l_head);
    add_layers(model.g);
    out.push_back(model.gamma_log);
    return out;
}

// Tensor names in the same order, for diagnostics.
std::vector<std::string> tensor_names(const GdssmParams& params) {
    auto refs = tensor_refs(const_cast<GdssmParams&>(params));
    std::vector<std::string> names;
    names.reserve(refs.size());
    for (const auto& r : refs) names.push_back(r.name);
    return names;
}

double reverse_batch(const GdssmParams& params, const std::vector<const Snippet*>& batch,
                     std::vector<Matrix>* grads) {
    Tape tape(grads != nullptr);
    VarModel model = lift_model(tape, params, grads != nullptr);
    Var total;
    for (size_t i = 0; i < batch.size(); ++i) {
        const Snippet& s = *batch[i];
        VarEngineModel em = engine_view(tape, model, params, s.context());
        Var value = pll_joint_tape(tape, em, s.future_matrix());
        total = (i == 0) ? value : ad::add(total, value);
    }
    Var loss = ad::scale(total, 1.0 / static_cast<double>(batch.size()));
    const double value = loss.value()(0, 0);
    if (grads) {
        tape.backward(loss);
        std::vector<Var> refs = model_var_refs(model);
        grads->clear();
        grads->reserve(refs.size());
        for (const auto& v : refs) grads->push_back(tape.grad(v));
    }
    return value;
}

} // namespace

double pll(const GdssmParams& params, const Snippet& snippet, PllMode mode) {
    require(snippet.horizon() >= 1, "pll: snippet future must be non-empty");
    if (mode == PllMode::Joint) {
        std::vector<const Snippet*> batch{&snippet};
        return reverse_batch(params, batch, nullptr);
    }
    std::vector<GmmBelief> beliefs =
        bmmls_rollout(params, snippet.context(), snippet.horizon());
    double total = 0.0;
    const int m = snippet.num_agents();
    const int dy = params.hyper.dy;
    for (int t = 1; t <= snippet.horizon(); ++t) {
        const Vector y = snippet.future_at(t);
        for (int a = 0; a < m; ++a)
            total += gmm_agent_log_density(beliefs[t - 1], a, y.segment(a * dy, dy));
    }
    return total;
}

double batch_pll(const GdssmParams& params, const std::vector<const Snippet*>& batch) {
    require(!batch.empty(), "batch_pll: empty batch");
    return reverse_batch(params, batch, nullptr);
}

std::vector<Matrix> grad_pll(const GdssmParams& params,
                             const std::vector<const Snippet*>& batch, GradMethod method,
                             double fd_step) {
    require(!batch.empty(), "grad_pll: empty batch");
    std::vector<Matrix> grads;
    if (method == GradMethod::ReverseMode) {
        reverse_batch(params, batch, &grads);
    } else {
        GdssmParams work = params;
        auto refs = tensor_refs(work);
        grads.reserve(refs.size());
        for (auto& r : refs) {
            Matrix g(r.rows, r.cols);
            for (int idx = 0; idx < r.size(); ++idx) {
                const double orig = r.data[idx];
                r.data[idx] = orig + fd_step;
                const double up = batch_pll(work, batch);
                r.data[idx] = orig - fd_step;
                const double down = batch_pll(work, batch);
                r.data[idx] = orig;
                g.data()[idx] = (up - down) / (2.0 * fd_step);
            }
            grads.push_back(std::move(g));
        }
    }
    const auto names = tensor_names(params);
    for (size_t i = 0; i < grads.size(); ++i)
        if (!grads[i].allFinite())
            throw NumericError("non-finite gradient in parameter " + names[i]);
    return grads;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

double dataset_nll(const GdssmParams& params, const std::vector<const Snippet*>& snippets) {
    require(!snippets.empty(), "dataset_nll: empty set");
    double total = 0.0;
    long steps = 0;
    for (const Snippet* s : snippets) {
        const int t = s->horizon();
        const int m = s->num_agents();
        total += pll(params, *s, PllMode::PerAgent) / m;
        steps += t;
    }
    return -total / static_cast<double>(steps);
}

TrainResult train(const GdssmParams& init, const Dataset& dataset, const TrainConfig& config) {
    config.validate();
    require(!dataset.empty(), "train: empty dataset");

    // deterministic validation split after a seeded shuffle
    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    RngStream split_rng(config.seed, 0x73706c6974ull);
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1],
                  order[static_cast<size_t>(split_rng.next_uniform() * static_cast<double>(i))]);
    const int val_count =
        std::min(static_cast<int>(dataset.size()) - 1,
                 static_cast<int>(std::floor(config.val_fraction * dataset.size())));
    std::vector<const Snippet*> val_set, train_set;
    for (size_t i = 0; i < order.size(); ++i) {
        const Snippet* s = &dataset.snippets[order[i]];
        if (static_cast<int>(i) < val_count) val_set.push_back(s);
        else train_set.push_back(s);
    }
    require(!train_set.empty(), "train: no training snippets after the split");

    GdssmParams params = init;
    auto refs = tensor_refs(params);
    std::vector<Vector> adam_m(refs.size()), adam_v(refs.size());
    for (size_t i = 0; i < refs.size(); ++i) {
        adam_m[i] = Vector::Zero(refs[i].size());
        adam_v[i] = Vector::Zero(refs[i].size());
    }

    TrainResult result;
    result.params = params;
    std::vector<int> epoch_order(train_set.size());
    std::iota(epoch_order.begin(), epoch_order.end(), 0);
    size_t cursor = 0;
    uint64_t epoch = 0;
    auto reshuffle = [&]() {
        RngStream rng(config.seed, 0x65706f6368ull + epoch);
        for (size_t i = epoch_order.size(); i > 1; --i)
            std::swap(epoch_order[i - 1],
                      epoch_order[static_cast<size_t>(rng.next_uniform() * static_cast<double>(i))]);
        cursor = 0;
        ++epoch;
    };
    reshuffle();

    auto run_validation = [&](int update) {
        if (val_set.empty()) {
            // no held-out data: retain the latest parameters
            result.params = params;
            return;
        }
        double nll;
        try {
            nll = dataset_nll(params, val_set);
        } catch (const NumericError&) {
            // a diverged intermediate model is a diagnostic result, not a
            // training failure; the best checkpoint so far stays retained
            return;
        }
        if (nll < result.best_val_nll) {
            result.best_val_nll = nll;
            result.params = params;
        }
        (void)update;
    };

    try {
        for (int update = 1; update <= config.max_updates; ++update) {
            std::vector<const Snippet*> batch;
            batch.reserve(config.batch_size);
            for (int b = 0; b < config.batch_size; ++b) {
                if (cursor >= epoch_order.size()) reshuffle();
                batch.push_back(train_set[epoch_order[cursor++]]);
            }
            std::vector<Matrix> grads;
            double value;
            if (config.grad_method == GradMethod::ReverseMode) {
                value = reverse_batch(params, batch, &grads);
                const auto names = tensor_names(params);
                for (size_t i = 0; i < grads.size(); ++i)
                    if (!grads[i].allFinite())
                        throw NumericError("non-finite gradient in parameter " + names[i]);
            } else {
                grads = grad_pll(params, batch, config.grad_method, config.fd_step);
                value = batch_pll(params, batch);
            }
            result.curve.emplace_back(update, value);

            const double bc1 = 1.0 - std::pow(config.adam_beta1, update);
            const double bc2 = 1.0 - std::pow(config.adam_beta2, update);
            for (size_t i = 0; i < refs.size(); ++i) {
                Eigen::Map<Vector> theta(refs[i].data, refs[i].size());
                Eigen::Map<const Vector> g(grads[i].data(), grads[i].size());
                adam_m[i] = config.adam_beta1 * adam_m[i] + (1.0 - config.adam_beta1) * g;
                adam_v[i] = config.adam_beta2 * adam_v[i] +
                            (1.0 - config.adam_beta2) * g.cwiseProduct(g);
                // ascent on the PLL
                theta += config.learning_rate *
                         ((adam_m[i] / bc1).array() /
                          ((adam_v[i] / bc2).array().sqrt() + config.adam_eps))
                             .matrix();
            }

            if (update % config.validation_interval == 0) run_validation(update);
        }
        if (config.max_updates == 0 || config.max_updates % config.validation_interval != 0)
            run_validation(config.max_updates);
    } catch (const NumericError&) {
        if (!config.checkpoint_path.empty()) save_checkpoint(params, config.checkpoint_path);
        throw;
    }
    if (config.max_updates == 0) result.params = params;
    return result;
}

void save_loss_curve(const std::vector<std::pair<int, double>>& curve,
                     const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write loss curve: " + path);
    f << "update,batch_pll\n";
    char buf[48];
    for (const auto& [update, value] : curve) {
        std::snprintf(buf, sizeof(buf), "%.17g", value);
        f << update << "," << buf << "\n";
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

EvalReport eval_metrics(const GdssmParams& params, const Dataset& dataset,
                        const std::vector<double>& horizons_s) {
    require(!dataset.empty(), "eval_metrics: empty dataset");
    require(!horizons_s.empty(), "eval_metrics: no horizons");
    std::vector<double> sorted = horizons_s;
    std::sort(sorted.begin(), sorted.end());

    const double dt = dataset.config.dt;
    const int dy = params.hyper.dy;
    std::vector<int> steps;
    for (double h : sorted) {
        const int step = static_cast<int>(std::llround(h / dt));
        require(step >= 1, "eval_metrics: horizon below one step");
        steps.push_back(step);
    }

    const int hcount = static_cast<int>(steps.size());
    std::vector<double> mse(hcount, 0.0), nll(hcount, 0.0), min_mse(hcount, 0.0);

    for (const Snippet& s : dataset.snippets) {
        const int T = s.horizon();
        require(steps.back() <= T, "eval_metrics: horizon beyond the prediction window");
        const int m = s.num_agents();
        std::vector<GmmBelief> beliefs = bmmls_rollout(params, s.context(), T);
        const int vcount = beliefs.front().num_components();

        // proposal choice per agent: lowest error over the complete horizon
        Matrix proposal_err = Matrix::Zero(m, vcount);
        for (int t = 1; t <= T; ++t) {
            const Vector y = s.future_at(t);
            for (int v = 0; v < vcount; ++v) {
                const Vector& a = beliefs[t - 1].components[v].mean;
                for (int agent = 0; agent < m; ++agent)
                    proposal_err(agent, v) +=
                        (y.segment(agent * dy, dy) - a.segment(agent * dy, dy)).squaredNorm();
            }
        }
        std::vector<int> best(m, 0);
        for (int agent = 0; agent < m; ++agent)
            proposal_err.row(agent).minCoeff(&best[agent]);

        for (int hi = 0; hi < hcount; ++hi) {
            const int t = steps[hi];
            const GmmBelief& belief = beliefs[t - 1];
            const Vector y = s.future_at(t);
            Vector mean = Vector::Zero(m * dy);
            for (int v = 0; v < vcount; ++v) mean += belief.weights[v] * belief.components[v].mean;
            double se = 0.0, min_se = 0.0, lp = 0.0;
            for (int agent = 0; agent < m; ++agent) {
                se += (y.segment(agent * dy, dy) - mean.segment(agent * dy, dy)).squaredNorm();
                const Vector& prop = belief.components[best[agent]].mean;
                min_se += (y.segment(agent * dy, dy) - prop.segment(agent * dy, dy)).squaredNorm();
                lp += gmm_agent_log_density(belief, agent, y.segment(agent * dy, dy));
            }
            mse[hi] += se / m;
            min_mse[hi] += min_se / m;
            nll[hi] -= lp / m;
        }
    }

    const double n = static_cast<double>(dataset.size());
    EvalReport report;
    report.horizons_s = sorted;
    for (int hi = 0; hi < hcount; ++hi) {
        report.rmse.push_back(std::sqrt(mse[hi] / n));
        report.nll.push_back(nll[hi] / n);
        report.min_rmse.push_back(std::sqrt(min_mse[hi] / n));
    }
    return report;
}

void save_eval_report(const EvalReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write eval report: " + path);
    f << "horizon_s,rmse,nll,minrmse\n";
    for (size_t i = 0; i < report.horizons_s.size(); ++i)
        f << report.horizons_s[i] << "," << report.rmse[i] << "," << report.nll[i] << ","
          << report.min_rmse[i] << "\n";
}

} // namespace gdssm
