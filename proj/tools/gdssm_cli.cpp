// Command-line front end: reproducible experiments over the library.
// Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.

#include "gdssm/bench.hpp"
#include "gdssm/data.hpp"
#include "gdssm/mc.hpp"
#include "gdssm/train.hpp"
#include "gdssm/version.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gdssm;

namespace {

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Run manifest, written atomically before exit on success or failure.
struct Manifest {
    json doc;
    std::string path;

    Manifest(const std::string& command, const std::string& out_dir) {
        doc["command"] = command;
        doc["version"] = kVersion;
        doc["start"] = iso_timestamp();
        doc["config"] = json::object();
        doc["outputs"] = json::array();
        fs::create_directories(out_dir);
        path = (fs::path(out_dir) / (command + "_manifest.json")).string();
    }

    void set(const std::string& key, const json& value) { doc["config"][key] = value; }
    void output(const std::string& p) { doc["outputs"].push_back(p); }

    void finish(int exit_code, const std::string& error = "") {
        doc["end"] = iso_timestamp();
        doc["exit_code"] = exit_code;
        if (!error.empty()) doc["error"] = error;
        const std::string tmp = path + ".tmp";
        {
            std::ofstream f(tmp, std::ios::binary);
            f << doc.dump(2) << "\n";
        }
        fs::rename(tmp, fs::path(path));
    }
};

Dataset load_dataset_dir(const std::string& data_dir, const std::string& split) {
    const fs::path dir(data_dir);
    DatasetConfig cfg = load_dataset_config((dir / "dataset.cfg").string());
    return load_csv((dir / (split + ".csv")).string(), cfg);
}

struct TrainOptions {
    std::string data_dir;
    std::string config_path;
    int modes = 1;
    std::string structure = "full";
    uint64_t seed = 0;
    std::string out = "checkpoint.txt";
    int dx = 4;
};

// key=value training/model configuration; command-line flags win.
void apply_train_config(const std::string& path, TrainConfig* tc, Hyper* hyper) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read train config: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "lr") tc->learning_rate = std::stod(value);
        else if (key == "batch_size") tc->batch_size = std::stoi(value);
        else if (key == "max_updates") tc->max_updates = std::stoi(value);
        else if (key == "validation_interval") tc->validation_interval = std::stoi(value);
        else if (key == "val_fraction") tc->val_fraction = std::stod(value);
        else if (key == "grad_method")
            tc->grad_method = value == "fd" ? GradMethod::FiniteDifferences : GradMethod::ReverseMode;
        else if (key == "fd_step") tc->fd_step = std::stod(value);
        else if (key == "dx") hyper->dx = std::stoi(value);
        else if (key == "dy") hyper->dy = std::stoi(value);
        else if (key == "hidden") hyper->hidden = std::stoi(value);
        else if (key == "f_hidden_layers") hyper->f_hidden_layers = std::stoi(value);
        else if (key == "l_hidden_layers") hyper->l_hidden_layers = std::stoi(value);
        else if (key == "g_hidden") hyper->g_hidden = std::stoi(value);
        else if (key == "enc_width") hyper->enc_width = std::stoi(value);
        else if (key == "trunk_width") hyper->trunk_width = std::stoi(value);
        else throw DataError(path + ":" + std::to_string(lineno) + ": unknown key " + key);
    }
}

int cmd_gen_toy(uint64_t seed, int n_train, int n_test, const std::string& out_dir) {
    Manifest manifest("gen-toy", out_dir);
    manifest.set("seed", seed);
    manifest.set("n_train", n_train);
    manifest.set("n_test", n_test);
    manifest.set("out_dir", out_dir);
    try {
        ToyDatasets toy = gen_toy(seed, n_train, n_test);
        const fs::path dir(out_dir);
        write_csv(toy.train, (dir / "train.csv").string());
        write_csv(toy.test, (dir / "test.csv").string());
        save_dataset_config(toy.train.config, (dir / "dataset.cfg").string());
        manifest.output((dir / "train.csv").string());
        manifest.output((dir / "test.csv").string());
        manifest.output((dir / "dataset.cfg").string());
        std::cout << "split,snippets\ntrain," << toy.train.size() << "\ntest," << toy.test.size()
                  << "\n";
        manifest.finish(0);
        return 0;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        manifest.finish(3, e.what());
        return 3;
    }
}

int cmd_train(const TrainOptions& opt) {
    const fs::path out_path(opt.out);
    const std::string out_dir =
        out_path.has_parent_path() ? out_path.parent_path().string() : ".";
    Manifest manifest("train", out_dir);
    manifest.set("data", opt.data_dir);
    manifest.set("config", opt.config_path);
    manifest.set("modes", opt.modes);
    manifest.set("cov_structure", opt.structure);
    manifest.set("seed", opt.seed);
    manifest.set("out", opt.out);
    try {
        Dataset data = load_dataset_dir(opt.data_dir, "train");
        TrainConfig tc;
        Hyper hyper;
        if (!opt.config_path.empty()) apply_train_config(opt.config_path, &tc, &hyper);
        tc.seed = opt.seed;
        tc.checkpoint_path = opt.out;
        hyper.v = opt.modes;
        hyper.structure = cov_structure_from_string(opt.structure);
        hyper.h_obs = data.config.h_obs;
        GdssmParams init = init_params(hyper, opt.seed);
        TrainResult result = train(init, data, tc);
        save_checkpoint(result.params, opt.out);
        const std::string curve_path = opt.out + ".loss.csv";
        save_loss_curve(result.curve, curve_path);
        manifest.output(opt.out);
        manifest.output(curve_path);
        std::cout << "updates,best_val_nll\n"
                  << result.curve.size() << "," << result.best_val_nll << "\n";
        manifest.finish(0);
        return 0;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        manifest.finish(4, e.what());
        return 4;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        manifest.finish(3, e.what());
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        manifest.finish(3, e.what());
        return 3;
    }
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint,
             const std::vector<double>& horizons, const std::string& out_csv) {
    const fs::path out_path(out_csv);
    const std::string out_dir =
        out_path.has_parent_path() ? out_path.parent_path().string() : ".";
    Manifest manifest("eval", out_dir);
    manifest.set("data", data_dir);
    manifest.set("checkpoint", checkpoint);
    manifest.set("horizons", horizons);
    try {
        Dataset data = load_dataset_dir(data_dir, "test");
        GdssmParams params = load_checkpoint(checkpoint);
        EvalReport report = eval_metrics(params, data, horizons);
        save_eval_report(report, out_csv);
        manifest.output(out_csv);
        std::cout << "horizon_s,rmse,nll,minrmse\n";
        for (size_t i = 0; i < report.horizons_s.size(); ++i)
            std::cout << report.horizons_s[i] << "," << report.rmse[i] << "," << report.nll[i]
                      << "," << report.min_rmse[i] << "\n";
        manifest.finish(0);
        return 0;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        manifest.finish(4, e.what());
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        manifest.finish(3, e.what());
        return 3;
    }
}

int cmd_mc_compare(const std::string& checkpoint, const std::string& data_dir, int particles,
                   int step, int threads, const std::string& out_dir) {
    Manifest manifest("mc-compare", out_dir);
    manifest.set("checkpoint", checkpoint);
    manifest.set("data", data_dir);
    manifest.set("particles", particles);
    manifest.set("t", step);
    try {
        Dataset data = load_dataset_dir(data_dir, "test");
        if (data.empty()) throw DataError("dataset has no snippets");
        GdssmParams params = load_checkpoint(checkpoint);
        const Context context = data.snippets.front().context(); // first snippet
        GmmBelief belief = bmmls(params, context, step);
        std::cout << "component,mean_dev_se_max,cov_frob_rel_err\n";
        for (int v = 0; v < belief.num_components(); ++v) {
            McMoments mc = mc_component_moments(params, context, step, v, particles,
                                                RngStream(0x6d63ull, v), threads);
            double dev = 0.0;
            for (int i = 0; i < mc.mean.size(); ++i)
                dev = std::max(dev, std::abs(belief.components[v].mean[i] - mc.mean[i]) /
                                        std::max(mc.std_error[i], 1e-12));
            Matrix dense = embed_to_full(belief.components[v].cov);
            const double frob = (dense - mc.cov).norm() / std::max(mc.cov.norm(), 1e-12);
            std::cout << v << "," << dev << "," << frob << "\n";
        }
        manifest.finish(0);
        return 0;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        manifest.finish(4, e.what());
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        manifest.finish(3, e.what());
        return 3;
    }
}

int cmd_bench_cov(const std::vector<int>& agents, const std::vector<int>& dxs, int hidden,
                  int reps, const std::string& out_csv) {
    const fs::path out_path(out_csv);
    const std::string out_dir =
        out_path.has_parent_path() ? out_path.parent_path().string() : ".";
    Manifest manifest("bench-cov", out_dir);
    manifest.set("agents", agents);
    manifest.set("dx", dxs);
    manifest.set("hidden", hidden);
    manifest.set("reps", reps);
    try {
        auto rows = bench_cov(agents, dxs, hidden, 3, reps, 42);
        std::ofstream csv(out_csv, std::ios::binary);
        csv << "structure,agents,dx,median_ms,mean_ms\n";
        std::cout << "structure,agents,dx,median_ms,mean_ms\n";
        for (const auto& r : rows) {
            char line[160];
            std::snprintf(line, sizeof(line), "%s,%d,%d,%.6f,%.6f", to_string(r.structure),
                          r.num_agents, r.dx, r.median_ms, r.mean_ms);
            csv << line << "\n";
            std::cout << line << "\n";
        }
        manifest.output(out_csv);
        manifest.finish(0);
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        manifest.finish(3, e.what());
        return 3;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deterministic moment-matching inference and training for graph deep "
                 "state-space models"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    int threads = static_cast<int>(std::thread::hardware_concurrency());
    app.add_option("--threads", threads, "worker threads for Monte Carlo runs");

    auto* gen = app.add_subcommand("gen-toy", "generate the synthetic multimodal toy dataset");
    uint64_t gen_seed = 0;
    int n_train = 3000, n_test = 500;
    std::string gen_out = "toy";
    gen->add_option("--seed", gen_seed);
    gen->add_option("--n-train", n_train);
    gen->add_option("--n-test", n_test);
    gen->add_option("--out-dir", gen_out);

    auto* tr = app.add_subcommand("train", "train on the predictive log-likelihood");
    TrainOptions topt;
    tr->add_option("--data", topt.data_dir)->required();
    tr->add_option("--config", topt.config_path);
    tr->add_option("--modes", topt.modes);
    tr->add_option("--cov-structure", topt.structure)
        ->check(CLI::IsMember({"full", "main-diag", "main-blocks", "all-diags"}));
    tr->add_option("--seed", topt.seed);
    tr->add_option("--out", topt.out);

    auto* ev = app.add_subcommand("eval", "evaluate RMSE / NLL / minRMSE at fixed horizons");
    std::string eval_data, eval_ckpt, eval_out = "eval.csv";
    std::vector<double> horizons = {1, 2, 3, 4, 5};
    ev->add_option("--data", eval_data)->required();
    ev->add_option("--checkpoint", eval_ckpt)->required();
    ev->add_option("--horizons", horizons)->delimiter(',');
    ev->add_option("--out", eval_out);

    auto* mc = app.add_subcommand(
        "mc-compare", "compare moment matching against Monte Carlo on the first test snippet");
    std::string mc_ckpt, mc_data;
    int particles = 100, mc_t = 5;
    mc->add_option("--checkpoint", mc_ckpt)->required();
    mc->add_option("--data", mc_data)->required();
    mc->add_option("--particles", particles)->check(CLI::PositiveNumber);
    mc->add_option("--t", mc_t)->check(CLI::PositiveNumber);

    auto* bench = app.add_subcommand("bench-cov",
                                     "time one transition step per covariance structure");
    std::vector<int> agents = {8, 16, 32, 64};
    std::vector<int> dxs = {8};
    int hidden = 24, reps = 100;
    std::string bench_out = "bench.csv";
    bench->add_option("--agents-list", agents)->delimiter(',');
    bench->add_option("--dx-list", dxs)->delimiter(',');
    bench->add_option("--hidden", hidden);
    bench->add_option("--reps", reps)->check(CLI::PositiveNumber);
    bench->add_option("--out", bench_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2; // usage errors exit with 2
    }

    try {
        if (gen->parsed()) return cmd_gen_toy(gen_seed, n_train, n_test, gen_out);
        if (tr->parsed()) return cmd_train(topt);
        if (ev->parsed()) return cmd_eval(eval_data, eval_ckpt, horizons, eval_out);
        if (mc->parsed()) return cmd_mc_compare(mc_ckpt, mc_data, particles, mc_t, threads, ".");
        if (bench->parsed()) return cmd_bench_cov(agents, dxs, hidden, reps, bench_out);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
