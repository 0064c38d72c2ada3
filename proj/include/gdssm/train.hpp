#pragma once

#include "gdssm/data.hpp"
#include "gdssm/mc.hpp"

#include <map>

namespace gdssm {

enum class GradMethod { ReverseMode, FiniteDifferences };

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int max_updates = 1000;
    int validation_interval = 500;
    double val_fraction = 0.1;
    uint64_t seed = 0;
    GradMethod grad_method = GradMethod::ReverseMode;
    double fd_step = 1e-5;
    std::string checkpoint_path; ///< best / abort checkpoint target (optional)

    void validate() const;
};

enum class PllMode { Joint, PerAgent };

/// Predictive log-likelihood of one snippet's future under the model:
/// sum_{t=1..T} log p(y_t | I). Joint density over all agents by default;
/// PerAgent sums per-agent marginal log-densities instead.
double pll(const GdssmParams& params, const Snippet& snippet, PllMode mode = PllMode::Joint);

/// Gradient of the mean batch PLL over every parameter tensor (canonical
/// order of tensor_refs). Throws NumericError naming the offending tensor on
/// non-finite entries.
std::vector<Matrix> grad_pll(const GdssmParams& params,
                             const std::vector<const Snippet*>& batch, GradMethod method,
                             double fd_step = 1e-5);

/// Mean batch PLL (the training objective value).
double batch_pll(const GdssmParams& params, const std::vector<const Snippet*>& batch);

struct TrainResult {
    GdssmParams params;                          ///< best-validation parameters
    std::vector<std::pair<int, double>> curve;   ///< (update index, batch PLL)
    double best_val_nll = std::numeric_limits<double>::infinity();
};

/// Algorithm-2 style training: deterministic mini-batch ascent on the PLL
/// with Adam. Identical (seed, config, dataset) reproduce bit-identical
/// results. A numeric failure writes the last-good checkpoint (when a path is
/// configured) and rethrows.
TrainResult train(const GdssmParams& init, const Dataset& dataset, const TrainConfig& config);

/// Writes the loss curve as CSV: `update,batch_pll`.
void save_loss_curve(const std::vector<std::pair<int, double>>& curve, const std::string& path);

struct EvalReport {
    std::vector<double> horizons_s;
    std::vector<double> rmse;
    std::vector<double> nll;
    std::vector<double> min_rmse;
};

/// App-style metrics at fixed horizons (seconds -> step index via dt):
/// RMSE of the belief mean, per-agent marginal NLL, and minRMSE over the
/// component means with the best proposal chosen per agent and snippet over
/// the complete prediction horizon.
EvalReport eval_metrics(const GdssmParams& params, const Dataset& dataset,
                        const std::vector<double>& horizons_s);

void save_eval_report(const EvalReport& report, const std::string& path);

/// Mean per-agent, per-step marginal NLL over a set of snippets (the
/// validation criterion; lower is better).
double dataset_nll(const GdssmParams& params, const std::vector<const Snippet*>& snippets);

} // namespace gdssm
