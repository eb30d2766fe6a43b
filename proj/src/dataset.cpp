#include "granflow/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "granflow/archive.hpp"
#include "granflow/random.hpp"

namespace granflow::data {

namespace {

// Value of variable v at cell k of a slice.
double variable(const cg::SliceSample& s, int v, std::size_t k) {
    return v < 3 ? s.velocity.data[v * s.velocity.plane() + k] : s.physics.data[(v - 3) * s.physics.plane() + k];
}

void check_channels(const Field& f, std::span<const int> vars) {
    if (static_cast<std::size_t>(f.channels) != vars.size()) {
        throw ShapeError("normalize: field has " + std::to_string(f.channels) + " channels, expected " +
                         std::to_string(vars.size()));
    }
}

}  // namespace

NormStats compute_active_stats(std::span<const cg::SliceSample* const> slices, double threshold) {
    NormStats st;
    st.threshold = threshold;
    std::array<double, 6> sum{};
    std::size_t n = 0;
    std::vector<std::vector<std::size_t>> active(slices.size());
    for (std::size_t s = 0; s < slices.size(); ++s) {
        const auto mask = cg::activity_mask(slices[s]->velocity, threshold);
        for (std::size_t k = 0; k < mask.size(); ++k) {
            if (mask.data[k]) active[s].push_back(k);
        }
    }
    for (std::size_t s = 0; s < slices.size(); ++s) {
        for (std::size_t k : active[s]) {
            for (int v = 0; v < 6; ++v) sum[v] += variable(*slices[s], v, k);
            ++n;
        }
    }
    if (n == 0) throw ConfigError("stats: no active cells (|v| > " + std::to_string(threshold) + " m/s) in the samples");
    std::array<double, 6> ss{};
    for (int v = 0; v < 6; ++v) st.mean[v] = sum[v] / static_cast<double>(n);
    for (std::size_t s = 0; s < slices.size(); ++s) {
        for (std::size_t k : active[s]) {
            for (int v = 0; v < 6; ++v) {
                const double d = variable(*slices[s], v, k) - st.mean[v];
                ss[v] += d * d;
            }
        }
    }
    for (int v = 0; v < 6; ++v) {
        st.std[v] = std::sqrt(ss[v] / static_cast<double>(n));
        if (!(st.std[v] > 0)) {
            throw NumericError(std::string("stats: zero standard deviation for ") + kVariables[v] + " over " +
                               std::to_string(n) + " active cells");
        }
    }
    st.active_cells = n;
    return st;
}

NormStats compute_active_stats(std::span<const Snapshot* const> snapshots, double threshold) {
    std::vector<const cg::SliceSample*> slices;
    std::vector<int> ids;
    for (const auto* s : snapshots) {
        for (const auto& sl : s->slices) slices.push_back(&sl);
        ids.push_back(s->instance);
    }
    NormStats st = compute_active_stats(std::span<const cg::SliceSample* const>(slices), threshold);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    st.source_instances = ids;
    return st;
}

Field normalize(const Field& f, const NormStats& stats, std::span<const int> vars) {
    check_channels(f, vars);
    Field out = f;
    for (int c = 0; c < f.channels; ++c) {
        const double mu = stats.mean[vars[c]], sd = stats.std[vars[c]];
        for (auto& x : out.channel(c)) x = (x - mu) / sd;
    }
    return out;
}

Field denormalize(const Field& f, const NormStats& stats, std::span<const int> vars) {
    check_channels(f, vars);
    Field out = f;
    for (int c = 0; c < f.channels; ++c) {
        const double mu = stats.mean[vars[c]], sd = stats.std[vars[c]];
        for (auto& x : out.channel(c)) x = x * sd + mu;
    }
    return out;
}

Field observed_components(const Field& velocity) {
    if (velocity.channels != 3) throw ShapeError("observed_components: expected a 3-channel velocity field");
    Field out(2, velocity.rows, velocity.cols);
    for (int k = 0; k < 2; ++k) {
        const auto src = velocity.channel(kObservedVars[k]);
        std::copy(src.begin(), src.end(), out.channel(k).begin());
    }
    return out;
}

int validation_count(int n) { return n >= 2 ? std::max(1, n / 10) : 0; }

DatasetSplit make_splits(const std::vector<Instance>& instances, std::uint64_t seed) {
    if (instances.size() < 2) {
        throw ConfigError("split: need at least 2 instances (development + test), got " +
                          std::to_string(instances.size()));
    }
    DatasetSplit split;
    split.seed = seed;
    split.test_instance = instances.back().id;
    for (std::size_t i = 0; i + 1 < instances.size(); ++i) {
        const auto& inst = instances[i];
        split.dev_instances.push_back(inst.id);
        const int n = static_cast<int>(inst.snapshots.size());
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(inst.id)));
        std::shuffle(order.begin(), order.end(), rng);
        const int nval = validation_count(n);
        std::vector<int> val(order.begin(), order.begin() + nval);
        std::vector<int> train(order.begin() + nval, order.end());
        std::sort(val.begin(), val.end());
        std::sort(train.begin(), train.end());
        for (int k : train) split.train.push_back({inst.id, k, inst.snapshots[k].time});
        for (int k : val) split.val.push_back({inst.id, k, inst.snapshots[k].time});
    }
    return split;
}

const Instance& find_instance(const std::vector<Instance>& instances, int id) {
    for (const auto& inst : instances) {
        if (inst.id == id) return inst;
    }
    throw ConfigError("dataset: unknown instance " + std::to_string(id));
}

std::vector<const Snapshot*> select(const std::vector<Instance>& instances, const std::vector<SnapshotRef>& refs) {
    std::vector<const Snapshot*> out;
    for (const auto& r : refs) {
        const auto& inst = find_instance(instances, r.instance);
        if (r.snapshot < 0 || r.snapshot >= static_cast<int>(inst.snapshots.size())) {
            throw ConfigError("dataset: instance " + std::to_string(r.instance) + " has no snapshot " +
                              std::to_string(r.snapshot));
        }
        out.push_back(&inst.snapshots[r.snapshot]);
    }
    return out;
}

void to_json(nlohmann::json& j, const NormStats& s) {
    nlohmann::json vars = nlohmann::json::object();
    const char* units[6] = {"m/s", "m/s", "m/s", "Pa", "Pa", "m^2/s^2"};
    for (int v = 0; v < 6; ++v) vars[kVariables[v]] = {{"mean", s.mean[v]}, {"std", s.std[v]}, {"units", units[v]}};
    j = nlohmann::json{{"format", "granflow.stats"},
                       {"version", 1},
                       {"variables", vars},
                       {"threshold", s.threshold},
                       {"source_instances", s.source_instances},
                       {"active_cells", s.active_cells}};
}

void from_json(const nlohmann::json& j, NormStats& s) {
    try {
        for (int v = 0; v < 6; ++v) {
            const auto& e = j.at("variables").at(kVariables[v]);
            s.mean[v] = e.at("mean").get<double>();
            s.std[v] = e.at("std").get<double>();
            if (!(s.std[v] > 0)) throw ConfigError(std::string("stats: non-positive std for ") + kVariables[v]);
        }
        s.threshold = j.at("threshold").get<double>();
        s.source_instances = j.at("source_instances").get<std::vector<int>>();
        s.active_cells = j.value("active_cells", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("stats: ") + e.what());
    }
}

namespace {

nlohmann::json refs_json(const std::vector<SnapshotRef>& refs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : refs) {
        a.push_back({{"instance", r.instance}, {"snapshot", r.snapshot}, {"time", r.time}, {"slices", {0, 1, 2, 3}}});
    }
    return a;
}

std::vector<SnapshotRef> refs_from(const nlohmann::json& a) {
    std::vector<SnapshotRef> out;
    for (const auto& e : a) {
        out.push_back({e.at("instance").get<int>(), e.at("snapshot").get<int>(), e.at("time").get<double>()});
    }
    return out;
}

}  // namespace

void to_json(nlohmann::json& j, const DatasetSplit& s) {
    j = nlohmann::json{{"format", "granflow.split"},
                       {"version", 1},
                       {"seed", s.seed},
                       {"test_instance", s.test_instance},
                       {"dev_instances", s.dev_instances},
                       {"train", refs_json(s.train)},
                       {"val", refs_json(s.val)}};
}

void from_json(const nlohmann::json& j, DatasetSplit& s) {
    try {
        s.seed = j.at("seed").get<std::uint64_t>();
        s.test_instance = j.at("test_instance").get<int>();
        s.dev_instances = j.at("dev_instances").get<std::vector<int>>();
        s.train = refs_from(j.at("train"));
        s.val = refs_from(j.at("val"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("split: ") + e.what());
    }
}

Instance load_instance(const std::filesystem::path& fields_dir, int id) {
    const auto archive = io::FieldArchive::load(fields_dir);
    Instance inst;
    inst.id = id;
    inst.source = fields_dir.string();
    try {
        const auto& snaps = archive.attributes.at("snapshots");
        for (const auto& e : snaps) {
            Snapshot s;
            s.instance = id;
            s.snapshot = e.at("index").get<int>();
            if (s.snapshot != static_cast<int>(inst.snapshots.size())) {
                throw ConfigError(fields_dir.string() + ": snapshots must be numbered 0, 1, 2, ...");
            }
            s.time = e.at("time").get<double>();
            const auto layers = archive.attributes.at("slice_layers").get<std::vector<int>>();
            for (int c = 0; c < 4; ++c) {
                s.slices[c] = cg::read_slice(archive, "s" + std::to_string(s.snapshot) + "/slice" + std::to_string(c));
                s.slices[c].index = c;
                s.slices[c].layer = layers.at(c);
                s.slices[c].y_plus = c == 0 ? 0.0 : cg::kSliceDepths[c - 1];
            }
            inst.snapshots.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fields_dir.string() + ": " + e.what());
    }
    return inst;
}

}  // namespace granflow::data
