#include "gdssm/tape.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

using namespace gdssm;
using ad::Tape;
using ad::Var;

namespace {

// Scalarizes a matrix node with a fixed random weighting so every entry
// contributes to the checked gradient.
Var weighted_sum(Tape& t, Var x, const Matrix& w) {
    Var wc = t.constant(w);
    Var prod = ad::cmul(x, wc);
    Var ones_r = t.constant(Matrix::Ones(1, prod.rows()));
    Var ones_c = t.constant(Matrix::Ones(prod.cols(), 1));
    return ad::matmul(ad::matmul(ones_r, prod), ones_c);
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Central-difference check of d(scalarized op)/d(every input entry).
void gradcheck(const std::string& name, const std::vector<Matrix>& inputs,
               const Builder& build, double tol = 2e-5, double h = 1e-6) {
    RngStream wrng(99, 7);
    Matrix weight;
    {
        Tape probe(false);
        std::vector<Var> vars;
        for (const auto& m : inputs) vars.push_back(probe.input(m));
        Var out = build(probe, vars);
        weight = oracles::random_matrix(wrng, out.rows(), out.cols());
    }
    auto value_at = [&](const std::vector<Matrix>& xs) {
        Tape t(false);
        std::vector<Var> vars;
        for (const auto& m : xs) vars.push_back(t.input(m));
        return weighted_sum(t, build(t, vars), weight).value()(0, 0);
    };

    Tape t(true);
    std::vector<Var> vars;
    for (const auto& m : inputs) vars.push_back(t.input(m));
    Var loss = weighted_sum(t, build(t, vars), weight);
    t.backward(loss);

    for (size_t i = 0; i < inputs.size(); ++i) {
        Matrix grad = t.grad(vars[i]);
        std::vector<Matrix> xs = inputs;
        for (int r = 0; r < inputs[i].rows(); ++r)
            for (int c = 0; c < inputs[i].cols(); ++c) {
                xs[i](r, c) = inputs[i](r, c) + h;
                const double up = value_at(xs);
                xs[i](r, c) = inputs[i](r, c) - h;
                const double down = value_at(xs);
                xs[i](r, c) = inputs[i](r, c);
                const double fd = (up - down) / (2.0 * h);
                const double scale = std::max({1.0, std::abs(fd), std::abs(grad(r, c))});
                INFO(name, " input ", i, " entry (", r, ",", c, ")");
                CHECK(std::abs(grad(r, c) - fd) <= tol * scale);
            }
    }
}

} // namespace

TEST_SUITE("tape") {

TEST_CASE("backward on generic arithmetic ops") {
    RngStream rng(1, 1);
    Matrix a = oracles::random_matrix(rng, 3, 4);
    Matrix b = oracles::random_matrix(rng, 3, 4);
    Matrix c = oracles::random_matrix(rng, 4, 2);
    Matrix sq = oracles::random_matrix(rng, 3, 3);

    gradcheck("add", {a, b}, [](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); });
    gradcheck("sub", {a, b}, [](Tape&, const std::vector<Var>& v) { return ad::sub(v[0], v[1]); });
    gradcheck("scale", {a}, [](Tape&, const std::vector<Var>& v) { return ad::scale(v[0], -2.5); });
    gradcheck("cmul", {a, b}, [](Tape&, const std::vector<Var>& v) { return ad::cmul(v[0], v[1]); });
    gradcheck("matmul", {a, c}, [](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); });
    gradcheck("matmul_nt", {a, b}, [](Tape&, const std::vector<Var>& v) { return ad::matmul_nt(v[0], v[1]); });
    gradcheck("transpose", {a}, [](Tape&, const std::vector<Var>& v) { return ad::transpose(v[0]); });
    gradcheck("symmetrize", {sq}, [](Tape&, const std::vector<Var>& v) { return ad::symmetrize(v[0]); });
    RngStream rng2(1, 2);
    gradcheck("sandwich", {c.transpose(), oracles::random_psd(rng2, 4)},
              [](Tape&, const std::vector<Var>& v) { return ad::sandwich(v[0], v[1]); });
    gradcheck("vcat", {a, b}, [](Tape&, const std::vector<Var>& v) { return ad::vcat(v[0], v[1]); });
    gradcheck("reshape", {a}, [](Tape&, const std::vector<Var>& v) { return ad::reshape(v[0], 2, 6); });
    gradcheck("block", {a}, [](Tape&, const std::vector<Var>& v) { return ad::block(v[0], 1, 1, 2, 3); });
    gradcheck("tanh", {a}, [](Tape&, const std::vector<Var>& v) { return ad::tanh_elem(v[0]); });
    gradcheck("exp", {a}, [](Tape&, const std::vector<Var>& v) { return ad::exp_elem(v[0]); });
    Matrix pos = a.array().abs() + 0.5;
    gradcheck("log", {pos}, [](Tape&, const std::vector<Var>& v) { return ad::log_elem(v[0]); });
}

TEST_CASE("backward on vector-shaping ops") {
    RngStream rng(2, 1);
    Matrix x = oracles::random_matrix(rng, 3, 5);
    Matrix v3 = oracles::random_matrix(rng, 3, 1);
    Matrix sq = oracles::random_matrix(rng, 4, 4);
    Matrix v4 = oracles::random_matrix(rng, 4, 1);

    gradcheck("rowscale", {v3, x}, [](Tape&, const std::vector<Var>& v) { return ad::rowscale(v[0], v[1]); });
    gradcheck("colwise_add", {x, v3}, [](Tape&, const std::vector<Var>& v) { return ad::colwise_add(v[0], v[1]); });
    gradcheck("rowmean", {x}, [](Tape&, const std::vector<Var>& v) { return ad::rowmean(v[0]); });
    gradcheck("add_diag", {sq, v4}, [](Tape&, const std::vector<Var>& v) { return ad::add_diag(v[0], v[1]); });
    gradcheck("log_softmax", {v4}, [](Tape&, const std::vector<Var>& v) { return ad::log_softmax(v[0]); });
    gradcheck("logsumexp_weighted", {v4, oracles::random_vector(rng, 4)},
              [](Tape&, const std::vector<Var>& v) { return ad::logsumexp_weighted(v[0], v[1]); });
    gradcheck("stack_scalars", {v4},
              [](Tape&, const std::vector<Var>& v) {
                  std::vector<Var> xs;
                  for (int i = 0; i < 4; ++i) xs.push_back(ad::block(v[0], i, 0, 1, 1));
                  return ad::stack_scalars(xs);
              });
}

TEST_CASE("backward through the gaussian log-density") {
    RngStream rng(3, 1);
    Matrix mean = oracles::random_vector(rng, 4);
    Matrix cov = oracles::random_psd(rng, 4);
    Vector point = oracles::random_vector(rng, 4);
    gradcheck("mvn_logpdf", {mean, cov},
              [point](Tape&, const std::vector<Var>& v) {
                  return ad::mvn_logpdf(v[0], v[1], point);
              },
              5e-5);
}

TEST_CASE("backward on agent-blocked ops") {
    RngStream rng(4, 1);
    const int m = 3, din = 2, dout = 4;
    Matrix w = oracles::random_matrix(rng, dout, din);
    Matrix b = oracles::random_vector(rng, dout);
    Matrix mu = oracles::random_vector(rng, m * din);
    Matrix adj = oracles::random_topology(rng, m).adjacency;
    Matrix bstack(m * din, din);
    for (int k = 0; k < m; ++k) bstack.block(k * din, 0, din, din) = oracles::random_psd(rng, din);
    Matrix cstack(din * m, m);
    for (int i = 0; i < din; ++i) cstack.block(i * m, 0, m, m) = oracles::random_psd(rng, m);
    Matrix s2 = oracles::random_vector(rng, m * din).array().abs() + 0.3;
    Matrix wsq = oracles::random_matrix(rng, din, din);

    gradcheck("block_diag_expand", {w}, [m](Tape&, const std::vector<Var>& v) { return ad::block_diag_expand(v[0], m); });
    gradcheck("nodewise_affine_mean", {w, b, mu},
              [m](Tape&, const std::vector<Var>& v) { return ad::nodewise_affine_mean(v[0], v[1], v[2], m); });
    gradcheck("agg_mean", {mu}, [m, adj](Tape&, const std::vector<Var>& v) { return ad::agg_mean(adj, v[0], m); });
    gradcheck("interleave_agents", {mu, s2},
              [m, din](Tape&, const std::vector<Var>& v) { return ad::interleave_agents(v[0], din, v[1], din, m); });
    gradcheck("nodewise_sandwich", {wsq, bstack},
              [m](Tape&, const std::vector<Var>& v) { return ad::nodewise_sandwich(v[0], v[1], m); });
    gradcheck("nodewise_matmul", {w, bstack},
              [m](Tape&, const std::vector<Var>& v) { return ad::nodewise_matmul(v[0], v[1], m); });
    gradcheck("blocks_mix", {bstack},
              [m, adj](Tape&, const std::vector<Var>& v) { return ad::blocks_mix(adj, v[0], m); });
    gradcheck("alldiag_mix", {oracles::random_matrix(rng, 3, din), cstack},
              [m](Tape&, const std::vector<Var>& v) { return ad::alldiag_mix(v[0], v[1], m); });
    gradcheck("perdim_sandwich", {cstack},
              [m, adj](Tape&, const std::vector<Var>& v) { return ad::perdim_sandwich(adj, v[0], m); });
    gradcheck("maindiag_affine_var", {w, s2},
              [m](Tape&, const std::vector<Var>& v) { return ad::maindiag_affine_var(v[0], v[1], m); });
    gradcheck("maindiag_agg_var", {s2},
              [m, adj](Tape&, const std::vector<Var>& v) { return ad::maindiag_agg_var(adj, v[0], m); });
    gradcheck("concat_blocks", {bstack, bstack},
              [m, adj](Tape&, const std::vector<Var>& v) {
                  return ad::concat_blocks(v[0], v[1], adj.diagonal(), m);
              });
    gradcheck("blockwise_transpose", {bstack},
              [m](Tape&, const std::vector<Var>& v) { return ad::blockwise_transpose(v[0], m); });
}

TEST_CASE("backward on relu moment ops") {
    RngStream rng(5, 1);
    const int m = 3, d = 2, n = m * d;
    Matrix mu = oracles::random_vector(rng, n);
    Matrix var = oracles::random_vector(rng, n).array().abs() + 0.4;
    Matrix cov = oracles::random_psd(rng, n, 0.6, 0.5); // keeps correlations off the clip
    Matrix bstack(n, d);
    for (int k = 0; k < m; ++k) bstack.block(k * d, 0, d, d) = oracles::random_psd(rng, d, 0.7, 0.5);
    Matrix cstack(d * m, m);
    for (int i = 0; i < d; ++i) cstack.block(i * m, 0, m, m) = oracles::random_psd(rng, m, 0.7, 0.5);

    gradcheck("relu_mean_vec", {mu, var},
              [](Tape&, const std::vector<Var>& v) { return ad::relu_mean_vec(v[0], v[1]); }, 5e-5);
    gradcheck("relu_var_vec", {mu, var},
              [](Tape&, const std::vector<Var>& v) { return ad::relu_var_vec(v[0], v[1]); }, 5e-5);
    gradcheck("relu_jac_vec", {mu, var},
              [](Tape&, const std::vector<Var>& v) { return ad::relu_jac_vec(v[0], v[1]); }, 5e-5);
    gradcheck("relu_cov_full", {mu, cov},
              [](Tape&, const std::vector<Var>& v) { return ad::relu_cov_full(v[0], v[1]); }, 1e-4);
    gradcheck("relu_cov_blocks", {mu, bstack},
              [m](Tape&, const std::vector<Var>& v) { return ad::relu_cov_blocks(v[0], v[1], m); }, 1e-4);
    gradcheck("relu_cov_alldiag", {mu, cstack},
              [m, d](Tape&, const std::vector<Var>& v) { return ad::relu_cov_alldiag(v[0], v[1], m, d); }, 1e-4);
}

TEST_CASE("backward on jacobian assembly and stein ops") {
    RngStream rng(6, 1);
    const int m = 3, d = 2, n = m * d;
    Matrix adj = oracles::random_topology(rng, m).adjacency;
    Matrix nstack2 = oracles::random_matrix(rng, m * d, 2 * d);
    Matrix nstack1 = oracles::random_matrix(rng, m * d, d);
    Matrix jac = oracles::random_matrix(rng, n, n);
    Matrix s2 = oracles::random_vector(rng, n).array().abs() + 0.2;
    Matrix bstack(n, d);
    for (int k = 0; k < m; ++k) bstack.block(k * d, 0, d, d) = oracles::random_psd(rng, d);
    Matrix cstack(d * m, m);
    for (int i = 0; i < d; ++i) cstack.block(i * m, 0, m, m) = oracles::random_psd(rng, m);

    gradcheck("assemble_jac_concat", {nstack2},
              [m, adj](Tape&, const std::vector<Var>& v) { return ad::assemble_jac_concat(v[0], adj, m); });
    gradcheck("assemble_jac_agg", {nstack1},
              [m, adj](Tape&, const std::vector<Var>& v) { return ad::assemble_jac_agg(v[0], adj, m); });
    gradcheck("stein_diag", {s2, jac},
              [](Tape&, const std::vector<Var>& v) { return ad::stein_diag(v[0], v[1]); });
    gradcheck("stein_blocks", {bstack, jac},
              [m](Tape&, const std::vector<Var>& v) { return ad::stein_blocks(v[0], v[1], m); });
    gradcheck("stein_alldiag", {cstack, jac},
              [m, d](Tape&, const std::vector<Var>& v) { return ad::stein_alldiag(v[0], v[1], m, d); });
    gradcheck("add_diag_blocks", {bstack, s2},
              [m](Tape&, const std::vector<Var>& v) { return ad::add_diag_blocks(v[0], v[1], m); });
    gradcheck("add_diag_perdim", {cstack, s2},
              [m, d](Tape&, const std::vector<Var>& v) { return ad::add_diag_perdim(v[0], v[1], m, d); });
}

TEST_CASE("backward on embedding/masking ops") {
    RngStream rng(7, 1);
    const int m = 3, d = 2, n = m * d;
    Matrix vvec = oracles::random_vector(rng, n).array().abs() + 0.1;
    Matrix full = oracles::random_psd(rng, n);
    Matrix bstack(n, d);
    for (int k = 0; k < m; ++k) bstack.block(k * d, 0, d, d) = oracles::random_psd(rng, d);
    Matrix cstack(d * m, m);
    for (int i = 0; i < d; ++i) cstack.block(i * m, 0, m, m) = oracles::random_psd(rng, m);

    gradcheck("diag_to_full", {vvec}, [](Tape&, const std::vector<Var>& v) { return ad::diag_to_full(v[0]); });
    gradcheck("diag_to_blocks", {vvec}, [m](Tape&, const std::vector<Var>& v) { return ad::diag_to_blocks(v[0], m); });
    gradcheck("diag_to_alldiag", {vvec}, [m, d](Tape&, const std::vector<Var>& v) { return ad::diag_to_alldiag(v[0], m, d); });
    gradcheck("blocks_to_full", {bstack}, [m](Tape&, const std::vector<Var>& v) { return ad::blocks_to_full(v[0], m); });
    gradcheck("alldiag_to_full", {cstack}, [m, d](Tape&, const std::vector<Var>& v) { return ad::alldiag_to_full(v[0], m, d); });
    gradcheck("mask_full_diag", {full}, [](Tape&, const std::vector<Var>& v) { return ad::mask_full_diag(v[0]); });
    gradcheck("mask_full_blocks", {full}, [m](Tape&, const std::vector<Var>& v) { return ad::mask_full_blocks(v[0], m); });
    gradcheck("mask_full_alldiag", {full}, [m, d](Tape&, const std::vector<Var>& v) { return ad::mask_full_alldiag(v[0], m, d); });
    gradcheck("structured_diagonal_blocks", {bstack},
              [m](Tape&, const std::vector<Var>& v) { return ad::structured_diagonal_blocks(v[0], m); });
    gradcheck("structured_diagonal_alldiag", {cstack},
              [m, d](Tape&, const std::vector<Var>& v) { return ad::structured_diagonal_alldiag(v[0], m, d); });
    gradcheck("psd_repair_full", {full}, [](Tape&, const std::vector<Var>& v) { return ad::psd_repair_full(v[0]); });
    gradcheck("psd_repair_blocks", {bstack}, [m](Tape&, const std::vector<Var>& v) { return ad::psd_repair_blocks(v[0], m); });
    gradcheck("psd_repair_alldiag", {cstack},
              [m, d](Tape&, const std::vector<Var>& v) { return ad::psd_repair_alldiag(v[0], m, d); });
    gradcheck("floor_check_vec", {vvec}, [](Tape&, const std::vector<Var>& v) { return ad::floor_check_vec(v[0]); });
}

TEST_CASE("no-grad tape rejects backward") {
    Tape t(false);
    Var a = t.input(Matrix::Ones(1, 1));
    Var b = ad::add(a, a);
    CHECK(b.value()(0, 0) == 2.0);
    CHECK_THROWS_AS(t.backward(b), Error);
}

TEST_CASE("gradients accumulate across reuse of a node") {
    Tape t(true);
    Var a = t.input(Matrix::Constant(1, 1, 3.0));
    Var out = ad::add(ad::cmul(a, a), a); // a^2 + a -> d/da = 2a + 1 = 7
    t.backward(out);
    CHECK(t.grad(a)(0, 0) == doctest::Approx(7.0));
}

} // TEST_SUITE
