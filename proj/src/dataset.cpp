#include "p3d/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "p3d/blob.hpp"
#include "p3d/runconfig.hpp"

namespace p3d {

namespace fs = std::filesystem;

void write_dataset(const DatasetContainer& c, const std::string& dir) {
    fs::create_directories(dir);
    Json m;
    m["family"] = c.family;
    m["params"] = c.params;
    m["resolution"] = c.resolution;
    m["domain"] = c.domain;
    m["channels"] = c.channel_names;
    m["dtype"] = "f32";
    m["snapshot_count"] = c.snapshots.size();
    m["dt_store"] = c.dt_store;
    m["seed"] = c.seed;
    std::ofstream mf(dir + "/manifest.json");
    mf << m.dump(2) << "\n";
    if (!mf) throw std::runtime_error("failed to write dataset manifest in " + dir);
    char name[32];
    for (size_t i = 0; i < c.snapshots.size(); ++i) {
        std::snprintf(name, sizeof(name), "snap_%04zu.bin", i);
        write_tensor_blob(dir + "/" + name, name, c.snapshots[i]);
    }
}

DatasetContainer read_dataset(const std::string& dir) {
    Json m = load_json_file(dir + "/manifest.json");
    DatasetContainer c;
    c.family = m.at("family").get<std::string>();
    c.params = m.at("params").get<std::map<std::string, double>>();
    c.resolution = m.at("resolution").get<std::array<int64_t, 3>>();
    c.domain = m.at("domain").get<std::array<double, 3>>();
    c.channel_names = m.at("channels").get<std::vector<std::string>>();
    c.dt_store = m.value("dt_store", 0.0);
    c.seed = m.value("seed", uint64_t(0));
    const size_t count = m.at("snapshot_count").get<size_t>();
    char name[32];
    for (size_t i = 0; i < count; ++i) {
        std::snprintf(name, sizeof(name), "snap_%04zu.bin", i);
        const std::string path = dir + "/" + name;
        if (!fs::exists(path))
            throw std::runtime_error("dataset " + dir + ": manifest lists " + std::to_string(count) +
                                     " snapshots but " + name + " is missing");
        Tensor t = read_tensor_blob(path).tensor;
        const Shape expect{static_cast<int64_t>(c.channel_names.size()), c.resolution[0], c.resolution[1],
                           c.resolution[2]};
        if (t.shape() != expect)
            throw std::runtime_error("dataset " + dir + "/" + name + ": blob shape " +
                                     shape_str(t.shape()) + " does not match manifest " +
                                     shape_str(expect));
        c.snapshots.push_back(std::move(t));
    }
    return c;
}

std::vector<std::string> list_dataset_dirs(const std::vector<std::string>& roots) {
    std::vector<std::string> out;
    for (const auto& root : roots) {
        if (!fs::exists(root)) throw std::runtime_error("dataset path does not exist: " + root);
        if (fs::exists(root + "/manifest.json")) {
            out.push_back(root);
            continue;
        }
        std::vector<std::string> subs;
        for (const auto& entry : fs::directory_iterator(root))
            if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
                subs.push_back(entry.path().string());
        std::sort(subs.begin(), subs.end());
        out.insert(out.end(), subs.begin(), subs.end());
    }
    return out;
}

Tensor pad_channels(const Tensor& t, int64_t n_channels) {
    const Shape& s = t.shape();
    if (s.size() != 4) throw std::runtime_error("pad_channels: expected [C,X,Y,Z]");
    if (s[0] > n_channels)
        throw std::runtime_error("pad_channels: field has " + std::to_string(s[0]) +
                                 " channels, model takes " + std::to_string(n_channels));
    if (s[0] == n_channels) return t.clone();
    Tensor out({n_channels, s[1], s[2], s[3]}, t.dtype());
    const int64_t per = s[1] * s[2] * s[3];
    for (int64_t i = 0; i < s[0] * per; ++i) out.set(i, t.at(i));
    return out;
}

PdePairSampler::PdePairSampler(std::vector<const DatasetContainer*> sims, int64_t n_channels,
                               std::vector<std::string> param_keys)
    : sims_(std::move(sims)), n_channels_(n_channels), param_keys_(std::move(param_keys)) {
    if (sims_.empty()) throw std::runtime_error("PdePairSampler: no simulations");
    for (const auto* s : sims_)
        if (s->snapshots.size() < 2)
            throw std::runtime_error("PdePairSampler: simulation with fewer than 2 snapshots");
}

int64_t PdePairSampler::num_pairs() const {
    int64_t n = 0;
    for (const auto* s : sims_) n += static_cast<int64_t>(s->snapshots.size()) - 1;
    return n;
}

SamplePair PdePairSampler::pair_at(int64_t sim, int64_t t) const {
    const DatasetContainer& c = *sims_.at(sim);
    SamplePair sp;
    sp.in = pad_channels(c.snapshots.at(t), n_channels_);
    sp.out = pad_channels(c.snapshots.at(t + 1), n_channels_);
    for (const auto& k : param_keys_) {
        auto it = c.params.find(k);
        if (it == c.params.end())
            throw std::runtime_error("PdePairSampler: simulation lacks param '" + k + "'");
        sp.cond.params.push_back(it->second);
    }
    sp.id = sim * 100000 + t;
    return sp;
}

SamplePair PdePairSampler::sample(Rng& rng) {
    const int64_t sim = rng.uniform_int(0, static_cast<int64_t>(sims_.size()) - 1);
    const int64_t t = rng.uniform_int(0, static_cast<int64_t>(sims_[sim]->snapshots.size()) - 2);
    return pair_at(sim, t);
}

}  // namespace p3d
