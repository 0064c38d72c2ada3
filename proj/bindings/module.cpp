// Python bindings for the main operations: moment containers, layer moment
// rules, the moment-matching engine, model assembly, Monte Carlo oracles,
// training, metrics, and the toy data generator.

#include "gdssm/bench.hpp"
#include "gdssm/data.hpp"
#include "gdssm/mc.hpp"
#include "gdssm/train.hpp"
#include "gdssm/version.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace gdssm;

namespace {

GaussianMoments make_moments(const Vector& mean, const Matrix& dense, int num_agents,
                             CovStructure tag) {
    return GaussianMoments(mean, mask_covariance(dense, tag, num_agents));
}

py::dict belief_to_dict(const GmmBelief& b) {
    py::dict out;
    out["weights"] = b.weights;
    py::list means, covs;
    for (const auto& c : b.components) {
        means.append(c.mean);
        covs.append(embed_to_full(c.cov));
    }
    out["means"] = means;
    out["covariances"] = covs;
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Deterministic moment-matching inference for graph deep state-space models";
    m.attr("__version__") = kVersion;

    py::register_exception<Error>(m, "GdssmError");

    py::enum_<CovStructure>(m, "CovStructure")
        .value("FULL", CovStructure::Full)
        .value("MAIN_DIAGONAL", CovStructure::MainDiagonal)
        .value("MAIN_BLOCKS", CovStructure::MainBlocks)
        .value("ALL_DIAGONALS", CovStructure::AllDiagonals);

    py::class_<GraphTopology>(m, "GraphTopology")
        .def(py::init<Eigen::MatrixXi>(), py::arg("edges"))
        .def_static("identity", &GraphTopology::identity)
        .def_readonly("num_agents", &GraphTopology::num_agents)
        .def_readonly("edges", &GraphTopology::edges)
        .def_readonly("adjacency", &GraphTopology::adjacency);
    m.def("build_graph", &build_graph, py::arg("positions"), py::arg("radius_m"),
          "Radius graph with self-loops and row-normalized adjacency");

    py::class_<GaussianMoments>(m, "GaussianMoments")
        .def(py::init(&make_moments), py::arg("mean"), py::arg("covariance"),
             py::arg("num_agents"), py::arg("structure") = CovStructure::Full)
        .def_property_readonly("mean", [](const GaussianMoments& g) { return g.mean; })
        .def_property_readonly("covariance",
                               [](const GaussianMoments& g) { return embed_to_full(g.cov); })
        .def_property_readonly("structure",
                               [](const GaussianMoments& g) { return g.cov.tag(); })
        .def_property_readonly("num_agents", &GaussianMoments::num_agents)
        .def_property_readonly("dim", &GaussianMoments::dim);

    m.def("mask_covariance",
          [](const Matrix& full, CovStructure tag, int num_agents) {
              return embed_to_full(mask_covariance(full, tag, num_agents));
          },
          py::arg("full"), py::arg("structure"), py::arg("num_agents"),
          "Keep the structure's entries, zero elsewhere (dense embedding)");

    m.def("gmm_log_density",
          [](const Vector& weights, const std::vector<Vector>& means,
             const std::vector<Matrix>& covs, const Vector& point) {
              GmmBelief b;
              b.weights = weights;
              for (size_t i = 0; i < means.size(); ++i)
                  b.components.emplace_back(
                      means[i], mask_covariance(covs[i], CovStructure::Full, 1));
              return gmm_log_density(b, point);
          },
          py::arg("weights"), py::arg("means"), py::arg("covariances"), py::arg("point"));

    m.def("relu_moments",
          [](const Vector& mean, const Matrix& cov, int num_agents, CovStructure tag) {
              GaussianMoments out = relu_moments(make_moments(mean, cov, num_agents, tag));
              return py::make_tuple(out.mean, embed_to_full(out.cov));
          },
          py::arg("mean"), py::arg("covariance"), py::arg("num_agents") = 1,
          py::arg("structure") = CovStructure::Full);

    py::class_<Hyper>(m, "Hyper")
        .def(py::init<>())
        .def_readwrite("dx", &Hyper::dx)
        .def_readwrite("dy", &Hyper::dy)
        .def_readwrite("v", &Hyper::v)
        .def_readwrite("hidden", &Hyper::hidden)
        .def_readwrite("f_hidden_layers", &Hyper::f_hidden_layers)
        .def_readwrite("l_hidden_layers", &Hyper::l_hidden_layers)
        .def_readwrite("g_hidden", &Hyper::g_hidden)
        .def_readwrite("enc_width", &Hyper::enc_width)
        .def_readwrite("trunk_width", &Hyper::trunk_width)
        .def_readwrite("h_obs", &Hyper::h_obs)
        .def_readwrite("structure", &Hyper::structure);

    py::class_<GdssmParams>(m, "GdssmParams")
        .def_readonly("hyper", &GdssmParams::hyper)
        .def("gamma", &GdssmParams::gamma);

    py::class_<Context>(m, "Context")
        .def(py::init([](const Matrix& histories, const GraphTopology& topo, double dt) {
                 Context c;
                 c.histories = histories;
                 c.topology = topo;
                 c.dt = dt;
                 return c;
             }),
             py::arg("histories"), py::arg("topology"), py::arg("dt") = 0.2)
        .def_readonly("histories", &Context::histories)
        .def_readonly("dt", &Context::dt);

    m.def("init_params", &init_params, py::arg("hyper"), py::arg("seed"));
    m.def("save_checkpoint", &save_checkpoint, py::arg("params"), py::arg("path"));
    m.def("load_checkpoint", py::overload_cast<const std::string&>(&load_checkpoint),
          py::arg("path"));

    m.def("embed",
          [](const GdssmParams& p, const Context& c) { return belief_to_dict(embed(p, c)); },
          py::arg("params"), py::arg("context"),
          "Initial mixture belief over the latent state");
    m.def("bmmls",
          [](const GdssmParams& p, const Context& c, int t) {
              return belief_to_dict(bmmls(p, c, t));
          },
          py::arg("params"), py::arg("context"), py::arg("t"),
          "Predictive mixture belief over y_t via bidimensional moment matching");

    py::class_<Snippet>(m, "Snippet")
        .def_readonly("scene_id", &Snippet::scene_id)
        .def_readonly("history", &Snippet::history)
        .def_readonly("future", &Snippet::future)
        .def_property_readonly("num_agents", &Snippet::num_agents)
        .def_property_readonly("horizon", &Snippet::horizon)
        .def("context", &Snippet::context);

    py::class_<DatasetConfig>(m, "DatasetConfig")
        .def(py::init<>())
        .def_readwrite("dt", &DatasetConfig::dt)
        .def_readwrite("h_obs", &DatasetConfig::h_obs)
        .def_readwrite("t_future", &DatasetConfig::t_future)
        .def_readwrite("overlap_pct", &DatasetConfig::overlap_pct)
        .def_readwrite("radius_m", &DatasetConfig::radius_m);

    py::class_<Dataset>(m, "Dataset")
        .def_readonly("config", &Dataset::config)
        .def_readonly("snippets", &Dataset::snippets)
        .def("__len__", &Dataset::size);

    m.def("load_csv", &load_csv, py::arg("path"), py::arg("config"));
    m.def("write_csv", &write_csv, py::arg("dataset"), py::arg("path"));
    m.def("gen_toy",
          [](uint64_t seed, int n_train, int n_test) {
              ToyDatasets t = gen_toy(seed, n_train, n_test);
              return py::make_tuple(t.train, t.test);
          },
          py::arg("seed"), py::arg("n_train"), py::arg("n_test"));

    m.def("pll",
          [](const GdssmParams& p, const Snippet& s, bool per_agent) {
              return pll(p, s, per_agent ? PllMode::PerAgent : PllMode::Joint);
          },
          py::arg("params"), py::arg("snippet"), py::arg("per_agent") = false,
          "Predictive log-likelihood of one snippet's future");

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("max_updates", &TrainConfig::max_updates)
        .def_readwrite("validation_interval", &TrainConfig::validation_interval)
        .def_readwrite("val_fraction", &TrainConfig::val_fraction)
        .def_readwrite("seed", &TrainConfig::seed);

    m.def("train",
          [](const GdssmParams& init, const Dataset& data, const TrainConfig& cfg) {
              TrainResult r = train(init, data, cfg);
              return py::make_tuple(r.params, r.curve, r.best_val_nll);
          },
          py::arg("params"), py::arg("dataset"), py::arg("config"));

    m.def("eval_metrics",
          [](const GdssmParams& p, const Dataset& d, const std::vector<double>& horizons) {
              EvalReport r = eval_metrics(p, d, horizons);
              py::dict out;
              out["horizons_s"] = r.horizons_s;
              out["rmse"] = r.rmse;
              out["nll"] = r.nll;
              out["minrmse"] = r.min_rmse;
              return out;
          },
          py::arg("params"), py::arg("dataset"), py::arg("horizons_s"));

    m.def("mc_component_moments",
          [](const GdssmParams& p, const Context& c, int t, int v, int samples, uint64_t seed,
             int threads) {
              McMoments mm = mc_component_moments(p, c, t, v, samples, RngStream(seed, 0),
                                                  threads);
              return py::make_tuple(mm.mean, mm.cov, mm.std_error);
          },
          py::arg("params"), py::arg("context"), py::arg("t"), py::arg("component"),
          py::arg("samples"), py::arg("seed") = 0, py::arg("threads") = 1);

    m.def("mc_pll",
          [](const GdssmParams& p, const Context& c, const Matrix& y, int samples,
             uint64_t seed, int threads) {
              return mc_pll(p, c, y, samples, RngStream(seed, 0), threads);
          },
          py::arg("params"), py::arg("context"), py::arg("future"), py::arg("samples"),
          py::arg("seed") = 0, py::arg("threads") = 1);

    m.def("bench_cov",
          [](const std::vector<int>& agents, const std::vector<int>& dxs, int hidden,
             int hidden_layers, int reps, uint64_t seed) {
              py::list out;
              for (const auto& r : bench_cov(agents, dxs, hidden, hidden_layers, reps, seed)) {
                  py::dict row;
                  row["structure"] = to_string(r.structure);
                  row["agents"] = r.num_agents;
                  row["dx"] = r.dx;
                  row["median_ms"] = r.median_ms;
                  row["mean_ms"] = r.mean_ms;
                  out.append(row);
              }
              return out;
          },
          py::arg("agents"), py::arg("dx"), py::arg("hidden") = 24,
          py::arg("hidden_layers") = 3, py::arg("reps") = 100, py::arg("seed") = 42);
}
