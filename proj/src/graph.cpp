#include "gdssm/graph.hpp"

#include <cmath>

namespace gdssm {

GraphTopology::GraphTopology(Eigen::MatrixXi edge_set) {
    require(edge_set.rows() == edge_set.cols(), "GraphTopology: edge set not square");
    num_agents = static_cast<int>(edge_set.rows());
    edges = std::move(edge_set);
    adjacency = Matrix::Zero(num_agents, num_agents);
    for (int m = 0; m < num_agents; ++m) {
        int degree = 0;
        for (int k = 0; k < num_agents; ++k) degree += edges(m, k) != 0;
        if (degree == 0) continue; // isolated node: zero row, message is the zero vector
        for (int k = 0; k < num_agents; ++k)
            if (edges(m, k) != 0) adjacency(m, k) = 1.0 / degree;
    }
}

GraphTopology GraphTopology::identity(int num_agents) {
    return GraphTopology(Eigen::MatrixXi::Identity(num_agents, num_agents));
}

void GraphTopology::validate() const {
    require(edges.rows() == num_agents && edges.cols() == num_agents, "GraphTopology: shape");
    for (int m = 0; m < num_agents; ++m) {
        const double s = adjacency.row(m).sum();
        require(std::abs(s) <= 1e-12 || std::abs(s - 1.0) <= 1e-12,
                "GraphTopology: row sum not in {0,1}");
    }
}

GraphTopology build_graph(const Matrix& positions, double radius_m) {
    require(positions.cols() == 2, "build_graph: positions must be M x 2");
    require(radius_m > 0.0, "build_graph: radius must be positive");
    const int m = static_cast<int>(positions.rows());
    Eigen::MatrixXi edges = Eigen::MatrixXi::Zero(m, m);
    for (int a = 0; a < m; ++a) {
        edges(a, a) = 1;
        for (int b = a + 1; b < m; ++b) {
            const double dist = (positions.row(a) - positions.row(b)).norm();
            if (dist < radius_m) { // strict: agents exactly radius_m apart are not connected
                edges(a, b) = 1;
                edges(b, a) = 1;
            }
        }
    }
    return GraphTopology(std::move(edges));
}

} // namespace gdssm
