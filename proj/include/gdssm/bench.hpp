#pragma once

#include "gdssm/bmm.hpp"

#include <vector>

namespace gdssm {

struct BenchRow {
    CovStructure structure;
    int num_agents;
    int dx;
    double median_ms;
    double mean_ms;
};

/// Times one horizontal moment-matching step per covariance structure over
/// the (agents, dx) grid: randomly initialized transition nets with
/// `hidden_layers` ReLU layers of width `hidden`, fully connected topology.
std::vector<BenchRow> bench_cov(const std::vector<int>& agents_list,
                                const std::vector<int>& dx_list, int hidden, int hidden_layers,
                                int reps, uint64_t seed);

} // namespace gdssm
