#pragma once

#include <map>

#include "p3d/training.hpp"

namespace p3d {

/// One stored simulation run: manifest plus per-snapshot [C,X,Y,Z] blobs.
struct DatasetContainer {
    std::string family;
    std::map<std::string, double> params;
    std::array<int64_t, 3> resolution{};
    std::array<double, 3> domain{1.0, 1.0, 1.0};
    std::vector<std::string> channel_names;
    double dt_store = 0.0;
    uint64_t seed = 0;
    std::vector<Tensor> snapshots;  // f32 [C,X,Y,Z]
};

void write_dataset(const DatasetContainer& c, const std::string& dir);
DatasetContainer read_dataset(const std::string& dir);

/// All sim_* subdirectories under each root, in sorted order.
std::vector<std::string> list_dataset_dirs(const std::vector<std::string>& roots);

/// Zero-pad the channel axis up to n_channels.
Tensor pad_channels(const Tensor& t, int64_t n_channels);

/// Uniformly samples consecutive snapshot pairs from a set of simulations,
/// zero-padded to a fixed channel count. Conditioning params are taken from
/// the listed manifest keys (empty = unconditioned, the multi-PDE setting).
class PdePairSampler : public PairSampler {
public:
    PdePairSampler(std::vector<const DatasetContainer*> sims, int64_t n_channels,
                   std::vector<std::string> param_keys = {});
    SamplePair sample(Rng& rng) override;
    int64_t num_pairs() const;
    /// Deterministic enumeration used by evaluation code.
    SamplePair pair_at(int64_t sim, int64_t t) const;
    const std::vector<const DatasetContainer*>& sims() const { return sims_; }

private:
    std::vector<const DatasetContainer*> sims_;
    int64_t n_channels_;
    std::vector<std::string> param_keys_;
};

}  // namespace p3d
