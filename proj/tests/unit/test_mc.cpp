#include "gdssm/mc.hpp"
#include "gdssm/train.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

using namespace gdssm;

namespace {

// Deterministic single-component engine model: zero noise everywhere.
EngineModel noiseless_model(RngStream& rng, int m, int dx, int dy, int horizon) {
    auto spec = std::make_shared<LinearModelSpec>();
    spec->num_agents = m;
    spec->dx = dx;
    spec->dy = dy;
    spec->horizon = horizon;
    spec->weights = Vector::Ones(1);
    spec->mu0.push_back(oracles::random_vector(rng, m * dx));
    spec->sigma0_diag.push_back(Vector::Zero(m * dx));
    spec->f.resize(horizon);
    spec->l.resize(horizon);
    spec->g.resize(horizon);
    spec->gamma.resize(horizon);
    for (int t = 0; t < horizon; ++t) {
        spec->f[t].push_back(oracles::random_matrix(rng, m * dx, m * dx, 0.1));
        spec->l[t].push_back(Vector::Zero(m * dx));
        spec->g[t].push_back(oracles::random_matrix(rng, m * dy, m * dx, 0.5));
        spec->gamma[t].push_back(Vector::Zero(m * dy));
    }
    return linear_engine_model(spec);
}

std::shared_ptr<LinearModelSpec> noisy_linear(RngStream& rng, int m, int dx, int dy,
                                              int horizon, int v) {
    auto spec = std::make_shared<LinearModelSpec>();
    spec->num_agents = m;
    spec->dx = dx;
    spec->dy = dy;
    spec->horizon = horizon;
    Vector w(v);
    for (int i = 0; i < v; ++i) w[i] = 0.3 + rng.next_uniform();
    spec->weights = w / w.sum();
    for (int i = 0; i < v; ++i) {
        spec->mu0.push_back(oracles::random_vector(rng, m * dx));
        spec->sigma0_diag.push_back(
            (oracles::random_vector(rng, m * dx).array().abs() + 0.2).matrix());
    }
    spec->f.resize(horizon);
    spec->l.resize(horizon);
    spec->g.resize(horizon);
    spec->gamma.resize(horizon);
    for (int t = 0; t < horizon; ++t)
        for (int i = 0; i < v; ++i) {
            spec->f[t].push_back(oracles::random_matrix(rng, m * dx, m * dx, 0.12));
            spec->l[t].push_back((oracles::random_vector(rng, m * dx).array().abs() * 0.1).matrix());
            spec->g[t].push_back(oracles::random_matrix(rng, m * dy, m * dx, 0.5));
            spec->gamma[t].push_back(
                (oracles::random_vector(rng, m * dy).array().abs() * 0.05 + 0.02).matrix());
        }
    return spec;
}

} // namespace

TEST_SUITE("mc") {

TEST_CASE("counter rng: identical seeds give identical streams, substreams differ") {
    RngStream a(123, 0), b(123, 0), c(123, 1);
    bool equal = true, differ = false;
    for (int i = 0; i < 1000; ++i) {
        const double va = a.next_uniform();
        equal = equal && va == b.next_uniform();
        differ = differ || va != c.next_uniform();
    }
    CHECK(equal);
    CHECK(differ);
    // substreams are stable regardless of how many draws the parent made
    RngStream parent(9, 0);
    RngStream s1 = parent.substream(5);
    parent.next_uniform();
    RngStream s2 = parent.substream(5);
    CHECK(s1.next_u64() == s2.next_u64());
}

TEST_CASE("uniforms are in (0,1) and normals have sane moments") {
    RngStream rng(7, 3);
    double sum = 0.0, sum2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.next_uniform();
        CHECK(u > 0.0);
        CHECK(u < 1.0);
        const double z = rng.next_normal();
        sum += z;
        sum2 += z * z;
    }
    CHECK(std::abs(sum / n) <= 0.01);
    CHECK(std::abs(sum2 / n - 1.0) <= 0.02);
}

TEST_CASE("noiseless sampling follows the deterministic forward recursion") {
    RngStream rng(70, 0);
    EngineModel model = noiseless_model(rng, 2, 2, 2, 4);
    RngStream srng(1, 0);
    TrajectorySample s = sample_trajectory(model, 4, srng);
    CHECK(s.component == 0);
    Vector x = model.init[0].mean;
    for (int t = 1; t <= 4; ++t) {
        Vector shared = forward_layers(model.nets_at(t, 0).trunk, x, model.topology, 2);
        x = x + forward_layers(model.nets_at(t, 0).f_head, shared, model.topology, 2);
        CHECK((s.latents.row(t).transpose() - x).cwiseAbs().maxCoeff() <= 1e-12);
        Vector y = forward_layers(model.emission_at(t, 0), x, model.topology, 2);
        CHECK((s.outputs.row(t - 1).transpose() - y).cwiseAbs().maxCoeff() <= 1e-12);
    }
    // identical seeds reproduce the trajectory bit for bit
    RngStream r1(5, 0), r2(5, 0);
    TrajectorySample q1 = sample_trajectory(model, 4, r1);
    TrajectorySample q2 = sample_trajectory(model, 4, r2);
    CHECK(q1.latents == q2.latents);
}

TEST_CASE("empirical mean of a linear model stays within 4 standard errors") {
    RngStream rng(71, 0);
    auto spec = noisy_linear(rng, 2, 2, 2, 3, 1);
    EngineModel model = linear_engine_model(spec);
    McMoments mm = mc_component_moments(model, 3, 0, 100000, RngStream(2024, 0));
    LinearMoments cf = linear_closed_form(*spec, 3, 0);
    for (int i = 0; i < mm.mean.size(); ++i)
        CHECK(std::abs(mm.mean[i] - cf.output->mean[i]) <= 4.0 * mm.std_error[i]);
}

TEST_CASE("zero-noise component moments collapse to the deterministic path") {
    RngStream rng(72, 0);
    EngineModel model = noiseless_model(rng, 2, 2, 2, 3);
    McMoments mm = mc_component_moments(model, 3, 0, 64, RngStream(3, 0));
    CHECK(mm.cov.cwiseAbs().maxCoeff() <= 1e-10); // identical samples up to FP cancellation
    RngStream srng(4, 0);
    TrajectorySample s = sample_trajectory(model, 3, srng);
    CHECK((mm.mean - s.outputs.row(2).transpose()).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("standard errors shrink like one over sqrt(2) when samples double") {
    RngStream rng(73, 0);
    auto spec = noisy_linear(rng, 1, 2, 2, 2, 1);
    EngineModel model = linear_engine_model(spec);
    double ratio_sum = 0.0;
    const int trials = 10;
    for (int k = 0; k < trials; ++k) {
        McMoments a = mc_component_moments(model, 2, 0, 4000, RngStream(100 + k, 0));
        McMoments b = mc_component_moments(model, 2, 0, 8000, RngStream(200 + k, 0));
        ratio_sum += b.std_error.mean() / a.std_error.mean();
    }
    const double ratio = ratio_sum / trials;
    CHECK(ratio == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.2));
}

TEST_CASE("empirical covariance of a linear model matches the closed form to 5%") {
    RngStream rng(74, 0);
    auto spec = noisy_linear(rng, 2, 2, 2, 3, 1);
    EngineModel model = linear_engine_model(spec);
    McMoments mm = mc_component_moments(model, 3, 0, 200000, RngStream(11, 0));
    LinearMoments cf = linear_closed_form(*spec, 3, 0);
    const double rel = (mm.cov - cf.output->cov.data()).norm() / cf.output->cov.data().norm();
    CHECK(rel <= 0.05);
}

TEST_CASE("moment reduction does not depend on the thread count") {
    RngStream rng(75, 0);
    auto spec = noisy_linear(rng, 2, 2, 2, 2, 1);
    EngineModel model = linear_engine_model(spec);
    McMoments t1 = mc_component_moments(model, 2, 0, 5000, RngStream(5, 0), 1);
    McMoments t4 = mc_component_moments(model, 2, 0, 5000, RngStream(5, 0), 4);
    CHECK(t1.mean == t4.mean);
    CHECK(t1.cov == t4.cov);
}

TEST_CASE("mc pll handles the degenerate zero-noise case via the jitter floor") {
    RngStream rng(76, 0);
    EngineModel model = noiseless_model(rng, 1, 2, 2, 2);
    RngStream srng(6, 0);
    TrajectorySample s = sample_trajectory(model, 2, srng);
    const double v = mc_pll(model, s.outputs, 64, RngStream(7, 0));
    CHECK(std::isfinite(v));
    CHECK(v > 10.0); // concentrated density at the exact path
}

TEST_CASE("mc pll is invariant under relabeling equal components") {
    RngStream rng(77, 0);
    auto spec = noisy_linear(rng, 1, 2, 2, 2, 2);
    // make both components identical so relabeling is a symmetry of the model
    spec->mu0[1] = spec->mu0[0];
    spec->sigma0_diag[1] = spec->sigma0_diag[0];
    for (int t = 0; t < 2; ++t) {
        spec->f[t][1] = spec->f[t][0];
        spec->l[t][1] = spec->l[t][0];
        spec->g[t][1] = spec->g[t][0];
        spec->gamma[t][1] = spec->gamma[t][0];
    }
    spec->weights = Vector::Constant(2, 0.5);
    EngineModel model = linear_engine_model(spec);
    Matrix y = oracles::random_matrix(rng, 2, 2);
    const double a = mc_pll(model, y, 2000, RngStream(8, 0));
    // swap the component order
    auto swapped = std::make_shared<LinearModelSpec>(*spec);
    std::swap(swapped->mu0[0], swapped->mu0[1]);
    EngineModel model2 = linear_engine_model(swapped);
    const double b = mc_pll(model2, y, 2000, RngStream(8, 0));
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("component frequencies follow the mixture weights") {
    RngStream rng(78, 0);
    auto spec = noisy_linear(rng, 1, 2, 2, 1, 3);
    spec->weights = Vector(3);
    spec->weights << 0.5, 0.3, 0.2;
    EngineModel model = linear_engine_model(spec);
    const int samples = 100000;
    Vector counts = Vector::Zero(3);
    for (int s = 0; s < samples; ++s) {
        RngStream prng = RngStream(999, 0).substream(s);
        TrajectorySample traj = sample_trajectory(model, 1, prng);
        counts[traj.component] += 1.0;
    }
    // chi-square with 2 dof: threshold 13.8 is p ~ 0.001
    double chi2 = 0.0;
    for (int v = 0; v < 3; ++v) {
        const double expected = samples * spec->weights[v];
        chi2 += (counts[v] - expected) * (counts[v] - expected) / expected;
    }
    CHECK(chi2 <= 13.8);
}

} // TEST_SUITE
