#include "gdssm/bench.hpp"

#include "gdssm/rng.hpp"

#include <algorithm>
#include <chrono>

namespace gdssm {

namespace {

Matrix uniform_matrix(RngStream& rng, int rows, int cols, double scale) {
    Matrix w(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) w(i, j) = scale * (2.0 * rng.next_uniform() - 1.0);
    return w;
}

TransitionNets random_nets(RngStream& rng, int dx, int hidden, int hidden_layers) {
    TransitionNets nets;
    nets.trunk.push_back(ConcatOwnAndMessage{});
    const double s1 = std::sqrt(1.0 / (2 * dx));
    const double sh = std::sqrt(1.0 / hidden);
    nets.f_head.push_back(NodeWiseAffine{uniform_matrix(rng, hidden, 2 * dx, s1),
                                         Vector::Zero(hidden)});
    nets.f_head.push_back(Relu{});
    for (int i = 1; i < hidden_layers; ++i) {
        nets.f_head.push_back(NodeWiseAffine{uniform_matrix(rng, hidden, hidden, sh),
                                             Vector::Zero(hidden)});
        nets.f_head.push_back(Relu{});
    }
    nets.f_head.push_back(NodeWiseAffine{uniform_matrix(rng, dx, hidden, sh), Vector::Zero(dx)});
    nets.l_head.push_back(NodeWiseAffine{uniform_matrix(rng, hidden, 2 * dx, s1),
                                         Vector::Zero(hidden)});
    nets.l_head.push_back(Relu{});
    nets.l_head.push_back(NodeWiseAffine{uniform_matrix(rng, dx, hidden, sh), Vector::Zero(dx)});
    nets.l_head.push_back(Relu{});
    return nets;
}

} // namespace

std::vector<BenchRow> bench_cov(const std::vector<int>& agents_list,
                                const std::vector<int>& dx_list, int hidden, int hidden_layers,
                                int reps, uint64_t seed) {
    require(reps >= 1, "bench_cov: reps must be >= 1");
    require(!agents_list.empty() && !dx_list.empty(), "bench_cov: empty grid");
    const CovStructure structures[] = {CovStructure::Full, CovStructure::MainDiagonal,
                                       CovStructure::MainBlocks, CovStructure::AllDiagonals};
    std::vector<BenchRow> rows;
    for (int m : agents_list) {
        for (int dx : dx_list) {
            RngStream rng(seed, (static_cast<uint64_t>(m) << 32) | static_cast<uint64_t>(dx));
            TransitionNets nets = random_nets(rng, dx, hidden, hidden_layers);
            GraphTopology topo(Eigen::MatrixXi::Ones(m, m)); // fully connected incl. self-loops
            Vector mean = uniform_matrix(rng, m * dx, 1, 1.0);
            Matrix dense = Matrix::Zero(m * dx, m * dx);
            // mildly correlated PSD input covariance
            Matrix half = uniform_matrix(rng, m * dx, m * dx, 0.1 / std::sqrt(m * dx));
            dense = half * half.transpose() + 0.05 * Matrix::Identity(m * dx, m * dx);
            for (CovStructure s : structures) {
                GaussianMoments x(mean, mask_covariance(dense, s, m));
                // warm-up outside the timed region
                horizontal_step(x, nets, topo);
                std::vector<double> times;
                times.reserve(reps);
                for (int r = 0; r < reps; ++r) {
                    const auto start = std::chrono::steady_clock::now();
                    horizontal_step(x, nets, topo);
                    const auto stop = std::chrono::steady_clock::now();
                    times.push_back(
                        std::chrono::duration<double, std::milli>(stop - start).count());
                }
                std::sort(times.begin(), times.end());
                const double median = (reps % 2 == 1)
                                          ? times[reps / 2]
                                          : 0.5 * (times[reps / 2 - 1] + times[reps / 2]);
                double mean_t = 0.0;
                for (double v : times) mean_t += v;
                mean_t /= reps;
                rows.push_back({s, m, dx, median, mean_t});
            }
        }
    }
    return rows;
}

} // namespace gdssm
