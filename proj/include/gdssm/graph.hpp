#pragma once

#include "gdssm/types.hpp"

namespace gdssm {

/// Agent interaction graph: binary edge set plus its row-normalized adjacency.
/// Self-loops are ordinary edges; none are inserted implicitly here.
struct GraphTopology {
    int num_agents = 0;
    Eigen::MatrixXi edges;  ///< M x M, entries in {0,1}
    Matrix adjacency;       ///< row-normalized: rows sum to 1 (or 0 for isolated nodes)

    GraphTopology() = default;
    explicit GraphTopology(Eigen::MatrixXi edge_set);

    static GraphTopology identity(int num_agents);

    void validate() const;
};

/// Connects agents with strict Euclidean distance < radius_m and adds a
/// self-loop to every node. `positions` is M x 2.
GraphTopology build_graph(const Matrix& positions, double radius_m);

} // namespace gdssm
