#pragma once

#include "gdssm/model.hpp"

#include <string>
#include <vector>

namespace gdssm {

/// Dataset preprocessing configuration (key=value file on disk).
struct DatasetConfig {
    double dt = 0.2;
    int h_obs = 15;
    int t_future = 25;
    int overlap_pct = 50;
    double radius_m = 30.0;

    int window() const { return h_obs + t_future; }
    int stride() const;
};

DatasetConfig load_dataset_config(const std::string& path);
void save_dataset_config(const DatasetConfig& config, const std::string& path);

/// One scene segment: every listed agent is present for the full
/// history-plus-future window; the interaction graph is frozen at the last
/// observed frame.
struct Snippet {
    long scene_id = 0;
    std::vector<long> agent_ids;
    Matrix history; ///< M x (2*h_obs), frame-major (x, y) pairs
    Matrix future;  ///< M x (2*t_future)
    double dt = 0.2;
    GraphTopology topology;

    int num_agents() const { return static_cast<int>(history.rows()); }
    int horizon() const { return static_cast<int>(future.cols()) / 2; }

    Context context() const;
    /// Ground truth at future step t (1-based), stacked agent-major, length M*2.
    Vector future_at(int t) const;
    /// All future steps as a (T x M*2) matrix (row t-1 = future_at(t)).
    Matrix future_matrix() const;
};

struct Dataset {
    DatasetConfig config;
    std::vector<Snippet> snippets;

    size_t size() const { return snippets.size(); }
    bool empty() const { return snippets.empty(); }
};

/// Sliding-window segmentation of a trajectory CSV
/// (header `scene_id,agent_id,frame,x,y`; frames consecutive per track).
/// Agents not spanning a full window are dropped from that snippet; windows
/// with no agents are skipped.
Dataset load_csv(const std::string& path, const DatasetConfig& config);

/// Writes scenes back out in the same schema (one scene per snippet).
void write_csv(const Dataset& dataset, const std::string& path);

/// Synthetic multimodal toy data: single agent, three equally likely modes
/// with per-step x-velocity c_k in {-1, 0, +1} m/s; both coordinates carry
/// N(0, 0.05^2) observation noise and the history is pure noise, so the mode
/// is unidentifiable from the context. dt = 0.2 s, h_obs = 5, T = 25.
struct ToyDatasets {
    Dataset train;
    Dataset test;
};
ToyDatasets gen_toy(uint64_t seed, int n_train, int n_test);

/// Toy generative constants (exposed for the exact Bayes oracle).
namespace toy {
inline constexpr double kDt = 0.2;
inline constexpr int kHObs = 5;
inline constexpr int kHorizon = 25;
inline constexpr double kNoiseStd = 0.05;
inline constexpr double kModeVelocity[3] = {-1.0, 0.0, 1.0};
} // namespace toy

} // namespace gdssm
