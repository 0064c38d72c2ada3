#include "gdssm/data.hpp"

#include "gdssm/rng.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace gdssm {

int DatasetConfig::stride() const {
    require(overlap_pct >= 0 && overlap_pct < 100, "overlap_pct must be in [0, 100)");
    const int s = window() - (window() * overlap_pct) / 100;
    return std::max(1, s);
}

DatasetConfig load_dataset_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read dataset config: " + path);
    DatasetConfig c;
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
        try {
            if (key == "dt") c.dt = std::stod(value);
            else if (key == "h_obs") c.h_obs = std::stoi(value);
            else if (key == "t_future") c.t_future = std::stoi(value);
            else if (key == "overlap_pct") c.overlap_pct = std::stoi(value);
            else if (key == "radius_m") c.radius_m = std::stod(value);
            else throw DataError(path + ":" + std::to_string(lineno) + ": unknown key " + key);
        } catch (const std::invalid_argument&) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad value for " + key);
        }
    }
    require(c.dt > 0 && c.h_obs >= 1 && c.t_future >= 1 && c.radius_m > 0,
            "dataset config: invalid values");
    return c;
}

void save_dataset_config(const DatasetConfig& c, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write dataset config: " + path);
    f << "dt=" << c.dt << "\n";
    f << "h_obs=" << c.h_obs << "\n";
    f << "t_future=" << c.t_future << "\n";
    f << "overlap_pct=" << c.overlap_pct << "\n";
    f << "radius_m=" << c.radius_m << "\n";
}

Context Snippet::context() const {
    Context c;
    c.histories = history;
    c.topology = topology;
    c.dt = dt;
    return c;
}

Vector Snippet::future_at(int t) const {
    require(t >= 1 && t <= horizon(), "future_at: step out of range");
    const int m = num_agents();
    Vector out(m * 2);
    for (int a = 0; a < m; ++a) {
        out[a * 2] = future(a, 2 * (t - 1));
        out[a * 2 + 1] = future(a, 2 * (t - 1) + 1);
    }
    return out;
}

Matrix Snippet::future_matrix() const {
    const int T = horizon();
    Matrix out(T, num_agents() * 2);
    for (int t = 1; t <= T; ++t) out.row(t - 1) = future_at(t).transpose();
    return out;
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

namespace {

struct TrackPoint {
    long frame;
    double x, y;
};

using SceneTracks = std::map<long, std::vector<TrackPoint>>; // agent -> points

} // namespace

Dataset load_csv(const std::string& path, const DatasetConfig& config) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read dataset: " + path);
    std::string line;
    int lineno = 0;
    if (!std::getline(f, line)) throw DataError(path + ": empty file");
    ++lineno;
    // tolerate trailing \r from foreign line endings
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "scene_id,agent_id,frame,x,y")
        throw DataError(path + ":1: expected header scene_id,agent_id,frame,x,y");

    std::map<long, SceneTracks> scenes;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        long scene, agent, frame;
        double x, y;
        auto next_field = [&](const char* what) {
            if (!std::getline(ss, field, ','))
                throw DataError(path + ":" + std::to_string(lineno) + ": missing " + what);
            return field;
        };
        try {
            scene = std::stol(next_field("scene_id"));
            agent = std::stol(next_field("agent_id"));
            frame = std::stol(next_field("frame"));
            x = std::stod(next_field("x"));
            y = std::stod(next_field("y"));
        } catch (const std::exception&) {
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed row");
        }
        if (std::getline(ss, field, ','))
            throw DataError(path + ":" + std::to_string(lineno) + ": extra fields");
        scenes[scene][agent].push_back({frame, x, y});
    }

    Dataset out;
    out.config = config;
    const int window = config.window();
    const int stride = config.stride();

    for (auto& [scene_id, tracks] : scenes) {
        long lo = std::numeric_limits<long>::max();
        long hi = std::numeric_limits<long>::min();
        for (auto& [agent_id, pts] : tracks) {
            std::sort(pts.begin(), pts.end(),
                      [](const TrackPoint& a, const TrackPoint& b) { return a.frame < b.frame; });
            for (size_t i = 1; i < pts.size(); ++i) {
                if (pts[i].frame == pts[i - 1].frame)
                    throw DataError(path + ": scene " + std::to_string(scene_id) + " agent " +
                                    std::to_string(agent_id) + ": duplicate frame " +
                                    std::to_string(pts[i].frame));
                if (pts[i].frame != pts[i - 1].frame + 1)
                    throw DataError(path + ": scene " + std::to_string(scene_id) + " agent " +
                                    std::to_string(agent_id) +
                                    ": non-uniform frame spacing at frame " +
                                    std::to_string(pts[i].frame));
            }
            lo = std::min(lo, pts.front().frame);
            hi = std::max(hi, pts.back().frame);
        }
        // every full-length window at the configured stride yields one snippet
        for (long start = lo; start + window - 1 <= hi; start += stride) {
            std::vector<long> agent_ids;
            for (const auto& [agent_id, pts] : tracks) {
                if (pts.front().frame <= start && pts.back().frame >= start + window - 1)
                    agent_ids.push_back(agent_id);
            }
            if (agent_ids.empty()) continue;
            const int m = static_cast<int>(agent_ids.size());
            Snippet s;
            s.scene_id = scene_id;
            s.agent_ids = agent_ids;
            s.dt = config.dt;
            s.history.resize(m, 2 * config.h_obs);
            s.future.resize(m, 2 * config.t_future);
            Matrix last_pos(m, 2);
            for (int a = 0; a < m; ++a) {
                const auto& pts = tracks[agent_ids[a]];
                const long offset = start - pts.front().frame;
                for (int k = 0; k < config.h_obs; ++k) {
                    const TrackPoint& p = pts[offset + k];
                    s.history(a, 2 * k) = p.x;
                    s.history(a, 2 * k + 1) = p.y;
                }
                const TrackPoint& last = pts[offset + config.h_obs - 1];
                last_pos(a, 0) = last.x;
                last_pos(a, 1) = last.y;
                for (int k = 0; k < config.t_future; ++k) {
                    const TrackPoint& p = pts[offset + config.h_obs + k];
                    s.future(a, 2 * k) = p.x;
                    s.future(a, 2 * k + 1) = p.y;
                }
            }
            s.topology = build_graph(last_pos, config.radius_m);
            out.snippets.push_back(std::move(s));
        }
    }
    return out;
}

void write_csv(const Dataset& dataset, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write dataset: " + path);
    f << "scene_id,agent_id,frame,x,y\n";
    char buf[64];
    for (const auto& s : dataset.snippets) {
        const int h = static_cast<int>(s.history.cols()) / 2;
        const int t = s.horizon();
        for (int a = 0; a < s.num_agents(); ++a) {
            for (int k = 0; k < h + t; ++k) {
                const double x = k < h ? s.history(a, 2 * k) : s.future(a, 2 * (k - h));
                const double y = k < h ? s.history(a, 2 * k + 1) : s.future(a, 2 * (k - h) + 1);
                std::snprintf(buf, sizeof(buf), "%.17g,%.17g", x, y);
                f << s.scene_id << "," << s.agent_ids[a] << "," << k << "," << buf << "\n";
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Toy generator
// ---------------------------------------------------------------------------

namespace {

Dataset gen_toy_split(RngStream rng, int count, const DatasetConfig& config) {
    Dataset out;
    out.config = config;
    out.snippets.reserve(count);
    for (int n = 0; n < count; ++n) {
        RngStream sub = rng.substream(static_cast<uint64_t>(n));
        const int mode = static_cast<int>(sub.next_uniform() * 3.0) % 3;
        Snippet s;
        s.scene_id = n;
        s.agent_ids = {0};
        s.dt = toy::kDt;
        s.history.resize(1, 2 * toy::kHObs);
        s.future.resize(1, 2 * toy::kHorizon);
        for (int k = 0; k < toy::kHObs; ++k) {
            s.history(0, 2 * k) = toy::kNoiseStd * sub.next_normal();
            s.history(0, 2 * k + 1) = toy::kNoiseStd * sub.next_normal();
        }
        for (int t = 1; t <= toy::kHorizon; ++t) {
            const double mean_x = toy::kModeVelocity[mode] * t * toy::kDt;
            s.future(0, 2 * (t - 1)) = mean_x + toy::kNoiseStd * sub.next_normal();
            s.future(0, 2 * (t - 1) + 1) = toy::kNoiseStd * sub.next_normal();
        }
        s.topology = GraphTopology::identity(1);
        out.snippets.push_back(std::move(s));
    }
    return out;
}

} // namespace

ToyDatasets gen_toy(uint64_t seed, int n_train, int n_test) {
    require(n_train >= 1 && n_test >= 1, "gen_toy: counts must be >= 1");
    DatasetConfig config;
    config.dt = toy::kDt;
    config.h_obs = toy::kHObs;
    config.t_future = toy::kHorizon;
    config.overlap_pct = 0;
    config.radius_m = 30.0;
    ToyDatasets out;
    out.train = gen_toy_split(RngStream(seed, 0x746f7954ull), n_train, config);
    out.test = gen_toy_split(RngStream(seed, 0x746f7955ull), n_test, config);
    return out;
}

} // namespace gdssm
