#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sarfuse/tensor.hpp"

namespace sarfuse {

constexpr int kS2Bands = 12;
constexpr int kS1Bands = 2;
constexpr int kTotalBands = kS2Bands + kS1Bands;

// One geolocated paired observation: 12 Sentinel-2 reflectance bands,
// Sentinel-1 VV/VH backscatter, and an optional land-cover code raster
// (0 = no-data). Acquisition dates must lie within 3 days of each other.
struct PatchSample {
    std::string sample_id;
    double lon = 0.0;
    double lat = 0.0;
    int patch_size = 0;
    Tensor s2;                // [12, H, W]
    Tensor s1;                // [2, H, W]
    std::vector<uint8_t> lc;  // H*W row-major, empty when unlabeled
    std::string s2_date;      // ISO-8601 calendar date
    std::string s1_date;

    bool has_label() const { return !lc.empty(); }
};

// Throws std::invalid_argument naming the violated invariant.
void validate_sample(const PatchSample& s);

// Days-since-epoch for an ISO-8601 "YYYY-MM-DD" date. Throws on bad input.
int64_t parse_date_days(const std::string& iso);
std::string format_date(int64_t days_since_epoch);

// Writes `root/<sample_id>/{S2.f32,S1.f32,LC.u8,meta.json}`. Arrays are raw
// little-endian float32/uint8 in C order; LC.u8 is omitted for unlabeled
// samples. Returns the sample directory.
std::filesystem::path write_sample(const PatchSample& s, const std::filesystem::path& root);

// Inverse of write_sample; bit-exact round trip. Throws on missing files or
// byte-length mismatches against meta.json's patch_size.
PatchSample read_sample(const std::filesystem::path& root, const std::string& sample_id);

struct ManifestEntry {
    std::string sample_id;
    double lon = 0.0;
    double lat = 0.0;
    std::string relative_path;
    bool has_label = false;
};

struct Manifest {
    std::string dataset_name;
    int patch_size = 0;
    std::optional<uint64_t> created_seed;
    std::vector<ManifestEntry> entries;
};

void write_manifest(const Manifest& m, const std::filesystem::path& root);
Manifest read_manifest(const std::filesystem::path& root);
// Checks id uniqueness and that every entry resolves to a complete sample dir.
void validate_manifest(const Manifest& m, const std::filesystem::path& root);

struct BandStats {
    std::array<double, kTotalBands> mean{};
    std::array<double, kTotalBands> stddev{};  // population
    int64_t n_pixels = 0;
    std::string source_manifest;  // provenance: dataset the stats came from
};

// Per-channel mean and population std over every pixel of every manifest
// sample. Entries are processed in sample_id order, so the result is exactly
// invariant to manifest permutation.
BandStats compute_band_stats(const Manifest& m, const std::filesystem::path& root);

void write_band_stats(const BandStats& s, const std::filesystem::path& root);
BandStats read_band_stats(const std::filesystem::path& root);

// (concat(s2, s1)[c] - mean[c]) / std[c]; channel order S2 bands 0-11 then
// S1 VV, VH. Output [14, H, W].
Tensor normalize_patch(const PatchSample& s, const BandStats& stats);
Tensor denormalize_patch(const Tensor& x, const BandStats& stats);

} // namespace sarfuse
