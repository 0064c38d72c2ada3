#include "gdssm/moments.hpp"
#include "support/oracles.hpp"

#include <doctest.h>
#include <cmath>

using namespace gdssm;

namespace {

// Brute-force mixture density in long double with analytic 2x2 inverses.
long double gmm_density_reference(const GmmBelief& b, const Vector& point) {
    long double acc = 0.0L;
    for (int v = 0; v < b.num_components(); ++v) {
        Matrix c = embed_to_full(b.components[v].cov);
        const long double a = c(0, 0), bb = c(0, 1), d = c(1, 1);
        const long double det = a * d - bb * bb;
        const long double dx = point[0] - b.components[v].mean[0];
        const long double dy = point[1] - b.components[v].mean[1];
        const long double quad = (d * dx * dx - 2.0L * bb * dx * dy + a * dy * dy) / det;
        acc += static_cast<long double>(b.weights[v]) *
               expl(-0.5L * quad) / (2.0L * static_cast<long double>(M_PI) * sqrtl(det));
    }
    return acc;
}

GmmBelief random_belief_2d(RngStream& rng, int v) {
    GmmBelief b;
    Vector w(v);
    for (int i = 0; i < v; ++i) w[i] = rng.next_uniform() + 0.05;
    b.weights = w / w.sum();
    for (int i = 0; i < v; ++i)
        b.components.push_back(oracles::random_moments(rng, 1, 2, CovStructure::Full));
    return b;
}

} // namespace

TEST_SUITE("moments") {

TEST_CASE("single standard normal at its mean") {
    GmmBelief b;
    b.weights = Vector::Ones(1);
    b.components.emplace_back(Vector::Zero(2),
                              mask_covariance(Matrix::Identity(2, 2), CovStructure::Full, 1));
    CHECK(gmm_log_density(b, Vector::Zero(2)) ==
          doctest::Approx(-std::log(2.0 * M_PI)).epsilon(1e-12));
}

TEST_CASE("mixture of identical components collapses") {
    RngStream rng(5, 0);
    GaussianMoments comp = oracles::random_moments(rng, 1, 2, CovStructure::Full);
    GmmBelief one, two;
    one.weights = Vector::Ones(1);
    one.components = {comp};
    two.weights = Vector::Constant(2, 0.5);
    two.components = {comp, comp};
    Vector point = oracles::random_vector(rng, 2);
    CHECK(gmm_log_density(one, point) == doctest::Approx(gmm_log_density(two, point)).epsilon(1e-13));
}

TEST_CASE("random mixtures match the high-precision reference") {
    RngStream rng(6, 0);
    for (int rep = 0; rep < 200; ++rep) {
        GmmBelief b = random_belief_2d(rng, 3);
        Vector point = oracles::random_vector(rng, 2, 1.5);
        const double got = gmm_log_density(b, point);
        const double want = static_cast<double>(logl(gmm_density_reference(b, point)));
        CHECK(got == doctest::Approx(want).epsilon(1e-11));
    }
}

TEST_CASE("density is invariant under component permutation") {
    RngStream rng(7, 0);
    for (int rep = 0; rep < 200; ++rep) {
        GmmBelief b = random_belief_2d(rng, 3);
        GmmBelief p;
        p.weights = Vector(3);
        p.weights << b.weights[2], b.weights[0], b.weights[1];
        p.components = {b.components[2], b.components[0], b.components[1]};
        Vector point = oracles::random_vector(rng, 2, 1.5);
        CHECK(gmm_log_density(b, point) == doctest::Approx(gmm_log_density(p, point)).epsilon(1e-13));
    }
}

TEST_CASE("single-component density equals the multivariate normal formula") {
    RngStream rng(8, 0);
    for (int rep = 0; rep < 200; ++rep) {
        const int n = 2 + static_cast<int>(rng.next_uniform() * 4);
        GmmBelief b;
        b.weights = Vector::Ones(1);
        b.components.push_back(oracles::random_moments(rng, 1, n, CovStructure::Full));
        Vector pt = oracles::random_vector(rng, n);
        const Matrix c = b.components[0].cov.data();
        const Vector diff = pt - b.components[0].mean;
        const double want = -0.5 * (n * std::log(2.0 * M_PI) + std::log(c.determinant()) +
                                    diff.dot(c.inverse() * diff));
        CHECK(gmm_log_density(b, pt) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("dead-component weights are clamped, not fatal") {
    GmmBelief b;
    b.weights = Vector(2);
    b.weights << 1.0, 0.0; // exactly dead component
    b.components.emplace_back(Vector::Zero(2),
                              mask_covariance(Matrix::Identity(2, 2), CovStructure::Full, 1));
    b.components.emplace_back(Vector::Constant(2, 50.0),
                              mask_covariance(Matrix::Identity(2, 2), CovStructure::Full, 1));
    const double v = gmm_log_density(b, Vector::Zero(2));
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(-std::log(2.0 * M_PI)).epsilon(1e-9));
}

TEST_CASE("singular covariance beyond jitter raises a numeric failure") {
    GmmBelief b;
    b.weights = Vector::Ones(1);
    Matrix bad(2, 2);
    bad << 1.0, 0.0, 0.0, -1.0;
    b.components.emplace_back(Vector::Zero(2), StructuredCovariance(CovStructure::Full, 1, 2, bad));
    CHECK_THROWS_AS(gmm_log_density(b, Vector::Zero(2)), NumericError);
}

TEST_CASE("agent marginal extracts the right block") {
    RngStream rng(9, 0);
    for (auto tag : {CovStructure::Full, CovStructure::MainDiagonal, CovStructure::MainBlocks,
                     CovStructure::AllDiagonals}) {
        GaussianMoments joint = oracles::random_moments(rng, 3, 2, tag);
        Matrix dense = embed_to_full(joint.cov);
        for (int agent = 0; agent < 3; ++agent) {
            GaussianMoments marg = agent_marginal(joint, agent);
            CHECK(marg.mean.isApprox(joint.mean.segment(agent * 2, 2)));
            CHECK(marg.cov.data().isApprox(dense.block(agent * 2, agent * 2, 2, 2)));
        }
    }
}

TEST_CASE("belief validation catches malformed inputs") {
    GmmBelief b;
    b.weights = Vector(2);
    b.weights << 0.6, 0.6;
    b.components.emplace_back(Vector::Zero(2),
                              mask_covariance(Matrix::Identity(2, 2), CovStructure::Full, 1));
    b.components.emplace_back(Vector::Zero(2),
                              mask_covariance(Matrix::Identity(2, 2), CovStructure::Full, 1));
    CHECK_THROWS_AS(b.validate(), ShapeError); // weights sum to 1.2
}

} // TEST_SUITE
