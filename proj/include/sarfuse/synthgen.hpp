#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "sarfuse/data_model.hpp"
#include "sarfuse/geosample.hpp"

namespace sarfuse {

struct SynthConfig {
    uint64_t seed = 1234;
    int n_samples = 8;
    int patch_size = 256;
    int n_classes = 5;
    double field_smoothness = 16.0;  // Gaussian-blur radius in pixels
    double cloud_fraction = 0.3;
    int speckle_looks = 4;
    double label_corruption = 0.1;
    std::vector<std::array<float, kTotalBands>> class_signatures;  // empty -> defaults
    int workers = 1;
};

// Throws std::invalid_argument on violated invariants (class count, signature
// separation, ranges).
void validate_synth_config(const SynthConfig& cfg);

// Fixed plausible signatures for the 5-class default taxonomy; seeded
// rejection sampling otherwise. Pairwise L2 gap >= 0.05.
std::vector<std::array<float, kTotalBands>> default_class_signatures(int n_classes, uint64_t seed);

// White noise convolved with a circular Gaussian kernel of the given radius
// (rows then columns), standardized to zero mean / unit variance, clamped to
// [-5, 5]. Bit-identical for identical arguments.
Tensor generate_random_field(uint64_t seed, int size, double smoothness);

// Label raster for one sample before weak-label corruption: codes 1..n from
// quantile-thresholding the sample's label field into equal shares.
std::vector<uint8_t> generate_clean_labels(const SynthConfig& cfg, int index);

// Cloud mask for one sample (1 = cloudy), same derivation generate_sample uses.
std::vector<uint8_t> generate_cloud_mask(const SynthConfig& cfg, int index);

// Deterministic sample synthesis from (cfg.seed, index). Labels are weak:
// a corruption fraction of pixels take the code of a random 8-neighbor.
// Clouds saturate every S2 band to 1.0 and leave S1 untouched; S1 carries
// per-pixel multiplicative speckle with mean 1 and variance 1/speckle_looks.
PatchSample generate_sample(const SynthConfig& cfg, int index, const LonLat& location);

// Writes all samples through the data container, then the manifest (recording
// the seed). Generation is pure per (seed, index), so any worker count gives
// bit-identical payloads.
Manifest generate_dataset(const SynthConfig& cfg, const std::vector<LonLat>& locations,
                          const std::filesystem::path& root, const std::string& dataset_name);

} // namespace sarfuse
