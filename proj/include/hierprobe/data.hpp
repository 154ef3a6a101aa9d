#ifndef HIERPROBE_DATA_HPP
#define HIERPROBE_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hierprobe/rng.hpp"
#include "hierprobe/tensor.hpp"

namespace hierprobe {

struct HierarchySpec {
    std::vector<std::string> superclass_names;
    std::vector<std::string> fine_names;
    std::vector<int> fine_to_coarse; // total, surjective onto superclasses

    int num_superclasses() const { return static_cast<int>(superclass_names.size()); }
    int num_fine() const { return static_cast<int>(fine_names.size()); }
    void validate() const;
};

// One split (train or test) of a hierarchically labeled image set. Pixels are
// doubles in [0, 1], stored contiguously per record.
class HierarchicalDataset {
public:
    HierarchySpec hierarchy;
    int channels = 0, height = 0, width = 0;
    std::vector<int> fine_labels;
    std::vector<int> coarse_labels;
    std::vector<double> pixels;
    std::string split; // "train", "test" or empty

    std::size_t size() const { return fine_labels.size(); }
    std::size_t pixels_per_record() const {
        return static_cast<std::size_t>(channels) * height * width;
    }
    std::array<int, 3> dims() const { return {channels, height, width}; }

    Tensor batch(const std::vector<int>& indices) const;
    std::vector<int> batch_fine(const std::vector<int>& indices) const;
    std::vector<int> batch_coarse(const std::vector<int>& indices) const;

    void append(int fine, int coarse, const double* px);
    void validate() const; // all dataset invariants
};

struct DatasetPair {
    HierarchicalDataset train;
    HierarchicalDataset test;
};

struct SyntheticSpec {
    int superclasses = 2;
    int subclasses_per_super = 4;
    int train_per_sub = 200;
    int test_per_sub = 50;
    int latent_dim = 16;
    double sigma_super = 3.0;
    double sigma_sub = 0.85;
    double sigma_noise = 0.3;
    int channels = 3, height = 8, width = 8;
    std::uint64_t seed = 1000;

    void validate() const;
};

// Gaussian hierarchy in latent space rendered to pixels through a fixed
// seeded linear map, then rescaled into [0, 1] by the global min/max.
DatasetPair synthesize(const SyntheticSpec& spec);

struct SubpopulationSplit {
    std::vector<std::vector<int>> source_fine_per_super; // original fine indices
    std::vector<std::vector<int>> target_fine_per_super;
    std::uint64_t seed = 0;
};

// Seeded choice of source subclasses per superclass; the rest become the
// target. Fine labels are re-indexed densely in superclass-major order,
// coarse labels are preserved.
std::tuple<DatasetPair, DatasetPair, SubpopulationSplit>
subpopulation_split(const DatasetPair& data, int source_per_super, std::uint64_t seed);

// Seeded shuffle into batches; the final partial batch is included.
std::vector<std::vector<int>> make_batches(std::size_t n, int batch_size, Rng& rng);

void save_dataset(const HierarchicalDataset& data, const std::filesystem::path& path);
HierarchicalDataset load_dataset(const std::filesystem::path& path);

// Canonical byte serialization hash, recorded in run manifests.
std::uint64_t dataset_fingerprint(const HierarchicalDataset& data);
std::uint64_t dataset_fingerprint(const DatasetPair& data);

// CIFAR-style raw binary conversion: records of one label byte followed by
// channels*height*width u8 pixels. The hierarchy file has one line per
// superclass with comma-separated fine class names; a name may carry an
// explicit raw label binding as "name=INDEX" (otherwise labels follow order
// of appearance), and a line may start with "SuperclassName:".
HierarchySpec load_hierarchy_file(const std::filesystem::path& path);
HierarchicalDataset convert_raw_dataset(const std::vector<std::filesystem::path>& raw_files,
                                        const HierarchySpec& hierarchy,
                                        int channels, int height, int width);

// "synth:default" or "synth:key=value,..." with keys super, sub, train, test,
// latent, sigma_super, sigma_sub, sigma_noise, channels, height, width, seed.
SyntheticSpec parse_synthetic_spec(const std::string& text);

} // namespace hierprobe

#endif
