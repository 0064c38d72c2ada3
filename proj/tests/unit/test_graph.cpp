#include "gdssm/graph.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

using namespace gdssm;

TEST_SUITE("graph") {

TEST_CASE("two agents inside the radius are mutually connected") {
    Matrix pos(2, 2);
    pos << 0.0, 0.0, 10.0, 0.0;
    GraphTopology g = build_graph(pos, 30.0);
    CHECK(g.edges(0, 1) == 1);
    CHECK(g.adjacency(0, 0) == doctest::Approx(0.5));
    CHECK(g.adjacency(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("agents beyond the radius keep self-loops only") {
    Matrix pos(2, 2);
    pos << 0.0, 0.0, 31.0, 0.0;
    GraphTopology g = build_graph(pos, 30.0);
    CHECK(g.edges(0, 1) == 0);
    CHECK(g.adjacency.isApprox(Matrix::Identity(2, 2)));
}

TEST_CASE("exactly at the radius there is no edge (strict inequality)") {
    Matrix pos(2, 2);
    pos << 0.0, 0.0, 30.0, 0.0;
    GraphTopology g = build_graph(pos, 30.0);
    CHECK(g.edges(0, 1) == 0);
}

TEST_CASE("row sums are 0 or 1 and the edge set is symmetric") {
    RngStream rng(11, 0);
    for (int rep = 0; rep < 200; ++rep) {
        const int m = 1 + static_cast<int>(rng.next_uniform() * 8);
        Matrix pos = oracles::random_matrix(rng, m, 2, 20.0);
        GraphTopology g = build_graph(pos, 25.0);
        g.validate();
        CHECK(g.edges == g.edges.transpose().eval());
        for (int a = 0; a < m; ++a) {
            const double s = g.adjacency.row(a).sum();
            CHECK(std::abs(s - 1.0) <= 1e-12); // self-loops guarantee nonzero rows
        }
    }
}

TEST_CASE("graph construction is permutation equivariant") {
    RngStream rng(12, 0);
    for (int rep = 0; rep < 200; ++rep) {
        const int m = 2 + static_cast<int>(rng.next_uniform() * 5);
        Matrix pos = oracles::random_matrix(rng, m, 2, 20.0);
        std::vector<int> perm(m);
        for (int i = 0; i < m; ++i) perm[i] = i;
        for (int i = m; i > 1; --i)
            std::swap(perm[i - 1], perm[static_cast<size_t>(rng.next_uniform() * i)]);
        Matrix pos_p(m, 2);
        for (int i = 0; i < m; ++i) pos_p.row(i) = pos.row(perm[i]);
        GraphTopology g = build_graph(pos, 25.0);
        GraphTopology gp = build_graph(pos_p, 25.0);
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b)
                CHECK(gp.adjacency(a, b) == doctest::Approx(g.adjacency(perm[a], perm[b])));
    }
}

TEST_CASE("isolated nodes produce a zero adjacency row") {
    Eigen::MatrixXi e = Eigen::MatrixXi::Zero(2, 2);
    e(0, 0) = 1; // node 1 fully isolated, not even a self-loop
    GraphTopology g(e);
    g.validate();
    CHECK(g.adjacency.row(1).sum() == 0.0);
}

} // TEST_SUITE
