#include "sarfuse/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <thread>

#include "sarfuse/rng.hpp"

namespace sarfuse {

namespace {

// purpose tags for per-sample child streams
enum SeedPurpose : uint64_t {
    kLabelField = 1,
    kTextureField,
    kCloudField,
    kSpeckle,
    kCorruption,
    kDates,
};

uint64_t sample_seed(const SynthConfig& cfg, int index, SeedPurpose purpose) {
    return derive_seed(cfg.seed, uint64_t(index), uint64_t(purpose));
}

double min_signature_gap(const std::vector<std::array<float, kTotalBands>>& sigs) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < sigs.size(); ++i)
        for (size_t j = i + 1; j < sigs.size(); ++j) {
            double d2 = 0.0;
            for (int c = 0; c < kTotalBands; ++c) {
                const double d = double(sigs[i][size_t(c)]) - double(sigs[j][size_t(c)]);
                d2 += d * d;
            }
            best = std::min(best, std::sqrt(d2));
        }
    return best;
}

} // namespace

void validate_synth_config(const SynthConfig& cfg) {
    if (cfg.n_samples < 1) throw std::invalid_argument("synth: n_samples must be >= 1");
    if (cfg.patch_size < 8) throw std::invalid_argument("synth: patch_size must be >= 8");
    if (cfg.n_classes < 1 || cfg.n_classes > 250)
        throw std::invalid_argument("synth: n_classes must be in [1,250]");
    if (!(cfg.field_smoothness > 0.0)) throw std::invalid_argument("synth: field_smoothness must be > 0");
    if (cfg.cloud_fraction < 0.0 || cfg.cloud_fraction > 1.0)
        throw std::invalid_argument("synth: cloud_fraction must be in [0,1]");
    if (cfg.speckle_looks < 1) throw std::invalid_argument("synth: speckle_looks must be >= 1");
    if (cfg.label_corruption < 0.0 || cfg.label_corruption > 1.0)
        throw std::invalid_argument("synth: label_corruption must be in [0,1]");
    if (!cfg.class_signatures.empty()) {
        if (int(cfg.class_signatures.size()) != cfg.n_classes)
            throw std::invalid_argument("synth: class_signatures size must equal n_classes");
        if (cfg.n_classes > 1 && min_signature_gap(cfg.class_signatures) < 0.05)
            throw std::invalid_argument("synth: class signatures too close (min L2 gap 0.05)");
    }
    if (cfg.workers < 1) throw std::invalid_argument("synth: workers must be >= 1");
}

std::vector<std::array<float, kTotalBands>> default_class_signatures(int n_classes, uint64_t seed) {
    if (n_classes == 5) {
        // urban, agriculture, natural, wetlands, water; 12 S2 bands then VV, VH
        return {
            std::array<float, 14>{0.42f, 0.44f, 0.45f, 0.46f, 0.46f, 0.47f, 0.47f, 0.48f, 0.48f, 0.45f, 0.44f, 0.43f, 0.66f, 0.48f},
            std::array<float, 14>{0.20f, 0.22f, 0.26f, 0.24f, 0.32f, 0.48f, 0.54f, 0.56f, 0.57f, 0.50f, 0.38f, 0.28f, 0.38f, 0.26f},
            std::array<float, 14>{0.14f, 0.15f, 0.18f, 0.16f, 0.24f, 0.40f, 0.46f, 0.48f, 0.49f, 0.44f, 0.30f, 0.20f, 0.30f, 0.36f},
            std::array<float, 14>{0.16f, 0.18f, 0.20f, 0.20f, 0.24f, 0.30f, 0.33f, 0.34f, 0.34f, 0.32f, 0.26f, 0.22f, 0.20f, 0.14f},
            std::array<float, 14>{0.10f, 0.11f, 0.10f, 0.08f, 0.07f, 0.06f, 0.06f, 0.05f, 0.05f, 0.06f, 0.05f, 0.05f, 0.10f, 0.06f},
        };
    }
    Rng rng(derive_seed(seed, 0x736967));
    std::vector<std::array<float, kTotalBands>> sigs;
    for (int attempt = 0; attempt < 1000 && int(sigs.size()) < n_classes; ++attempt) {
        std::array<float, kTotalBands> cand;
        for (auto& v : cand) v = float(rng.uniform(0.1, 0.7));
        auto trial = sigs;
        trial.push_back(cand);
        if (sigs.empty() || min_signature_gap(trial) >= 0.05) sigs.push_back(cand);
    }
    if (int(sigs.size()) != n_classes)
        throw std::runtime_error("default_class_signatures: rejection sampling failed");
    return sigs;
}

Tensor generate_random_field(uint64_t seed, int size, double smoothness) {
    if (size < 8) throw std::invalid_argument("generate_random_field: size must be >= 8");
    Rng rng(derive_seed(seed, 0x666c64));
    const int64_t n = int64_t(size) * size;
    std::vector<double> field(static_cast<size_t>(n));
    for (auto& v : field) v = rng.normal();

    if (smoothness >= 0.5) {
        const double sigma = smoothness;
        const int half = std::min(size / 2, int(std::ceil(3.0 * sigma)));
        std::vector<double> kernel(size_t(2 * half + 1));
        double ksum = 0.0;
        for (int i = -half; i <= half; ++i) {
            kernel[size_t(i + half)] = std::exp(-double(i) * double(i) / (2.0 * sigma * sigma));
            ksum += kernel[size_t(i + half)];
        }
        for (auto& k : kernel) k /= ksum;

        // circular separable convolution, rows then columns
        std::vector<double> tmp(static_cast<size_t>(n));
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double acc = 0.0;
                for (int i = -half; i <= half; ++i) {
                    int xi = (x + i) % size;
                    if (xi < 0) xi += size;
                    acc += kernel[size_t(i + half)] * field[size_t(y) * size + size_t(xi)];
                }
                tmp[size_t(y) * size + size_t(x)] = acc;
            }
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double acc = 0.0;
                for (int i = -half; i <= half; ++i) {
                    int yi = (y + i) % size;
                    if (yi < 0) yi += size;
                    acc += kernel[size_t(i + half)] * tmp[size_t(yi) * size + size_t(x)];
                }
                field[size_t(y) * size + size_t(x)] = acc;
            }
    }

    double mean = 0.0;
    for (double v : field) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : field) var += (v - mean) * (v - mean);
    var /= double(n);
    const double inv_std = 1.0 / std::sqrt(std::max(var, 1e-30));

    Tensor out({size, size});
    for (int64_t i = 0; i < n; ++i) {
        const double z = (field[size_t(i)] - mean) * inv_std;
        out[i] = float(std::clamp(z, -5.0, 5.0));
    }
    return out;
}

namespace {

// codes 1..n by equal-share quantile thresholds of the field
std::vector<uint8_t> threshold_by_quantiles(const Tensor& field, int n_classes) {
    const int64_t n = field.numel();
    std::vector<float> sorted(field.data(), field.data() + n);
    std::sort(sorted.begin(), sorted.end());
    std::vector<float> cuts;
    for (int k = 1; k < n_classes; ++k)
        cuts.push_back(sorted[size_t(int64_t(k) * n / n_classes)]);
    std::vector<uint8_t> codes(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int c = 0;
        while (c < int(cuts.size()) && field[i] >= cuts[size_t(c)]) ++c;
        codes[size_t(i)] = uint8_t(c + 1);
    }
    return codes;
}

} // namespace

std::vector<uint8_t> generate_clean_labels(const SynthConfig& cfg, int index) {
    const Tensor field =
        generate_random_field(sample_seed(cfg, index, kLabelField), cfg.patch_size, cfg.field_smoothness);
    return threshold_by_quantiles(field, cfg.n_classes);
}

std::vector<uint8_t> generate_cloud_mask(const SynthConfig& cfg, int index) {
    const int64_t n = int64_t(cfg.patch_size) * cfg.patch_size;
    std::vector<uint8_t> mask(size_t(n), 0);
    if (cfg.cloud_fraction <= 0.0) return mask;
    const Tensor field =
        generate_random_field(sample_seed(cfg, index, kCloudField), cfg.patch_size, cfg.field_smoothness);
    if (cfg.cloud_fraction >= 1.0) {
        std::fill(mask.begin(), mask.end(), uint8_t(1));
        return mask;
    }
    std::vector<float> sorted(field.data(), field.data() + n);
    std::sort(sorted.begin(), sorted.end());
    const float thr = sorted[size_t(int64_t((1.0 - cfg.cloud_fraction) * double(n)))];
    for (int64_t i = 0; i < n; ++i) mask[size_t(i)] = field[i] >= thr ? 1 : 0;
    return mask;
}

PatchSample generate_sample(const SynthConfig& cfg, int index, const LonLat& location) {
    validate_synth_config(cfg);
    const auto sigs = cfg.class_signatures.empty()
                          ? default_class_signatures(cfg.n_classes, cfg.seed)
                          : cfg.class_signatures;
    const int p = cfg.patch_size;
    const int64_t sp = int64_t(p) * p;

    const std::vector<uint8_t> clean = generate_clean_labels(cfg, index);
    const std::vector<uint8_t> clouds = generate_cloud_mask(cfg, index);
    const Tensor texture =
        generate_random_field(sample_seed(cfg, index, kTextureField), p, cfg.field_smoothness);

    PatchSample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "sample_%06d", index);
    s.sample_id = idbuf;
    s.lon = location.lon;
    s.lat = location.lat;
    s.patch_size = p;
    s.s2 = Tensor({kS2Bands, p, p});
    s.s1 = Tensor({kS1Bands, p, p});

    for (int c = 0; c < kS2Bands; ++c) {
        float* dst = s.s2.data() + int64_t(c) * sp;
        for (int64_t i = 0; i < sp; ++i) {
            if (clouds[size_t(i)]) {
                dst[i] = 1.0f;
            } else {
                const auto& sig = sigs[size_t(clean[size_t(i)] - 1)];
                dst[i] = sig[size_t(c)] + 0.05f * texture[i];
            }
        }
    }

    Rng speckle_rng(sample_seed(cfg, index, kSpeckle));
    const double looks = double(cfg.speckle_looks);
    for (int c = 0; c < kS1Bands; ++c) {
        float* dst = s.s1.data() + int64_t(c) * sp;
        for (int64_t i = 0; i < sp; ++i) {
            const auto& sig = sigs[size_t(clean[size_t(i)] - 1)];
            const double speckle = speckle_rng.gamma(looks, 1.0 / looks);
            dst[i] = float(double(sig[size_t(kS2Bands + c)]) * speckle);
        }
    }

    // weak labels: corrupted pixels copy the clean code of a random 8-neighbor
    s.lc = clean;
    Rng corrupt_rng(sample_seed(cfg, index, kCorruption));
    static constexpr int dx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
    static constexpr int dy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
    for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) {
            if (corrupt_rng.uniform() >= cfg.label_corruption) continue;
            const int k = int(corrupt_rng.uniform_int(8));
            const int ny = std::clamp(y + dy[k], 0, p - 1);
            const int nx = std::clamp(x + dx[k], 0, p - 1);
            s.lc[size_t(y) * size_t(p) + size_t(x)] = clean[size_t(ny) * size_t(p) + size_t(nx)];
        }

    Rng date_rng(sample_seed(cfg, index, kDates));
    const int64_t base = parse_date_days("2020-01-01") + index % 365;
    const int64_t offset = int64_t(date_rng.uniform_int(7)) - 3;  // [-3, 3]
    s.s2_date = format_date(base);
    s.s1_date = format_date(base + offset);
    return s;
}

Manifest generate_dataset(const SynthConfig& cfg, const std::vector<LonLat>& locations,
                          const std::filesystem::path& root, const std::string& dataset_name) {
    validate_synth_config(cfg);
    if (int(locations.size()) != cfg.n_samples)
        throw std::invalid_argument("generate_dataset: locations size must equal n_samples");
    std::filesystem::create_directories(root);

    Manifest m;
    m.dataset_name = dataset_name;
    m.patch_size = cfg.patch_size;
    m.created_seed = cfg.seed;
    m.entries.resize(size_t(cfg.n_samples));

    auto work = [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            const PatchSample s = generate_sample(cfg, i, locations[size_t(i)]);
            write_sample(s, root);
            m.entries[size_t(i)] = {s.sample_id, s.lon, s.lat, s.sample_id, s.has_label()};
        }
    };

    const int workers = std::min(cfg.workers, cfg.n_samples);
    if (workers <= 1) {
        work(0, cfg.n_samples);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (cfg.n_samples + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            const int begin = w * chunk;
            const int end = std::min(cfg.n_samples, begin + chunk);
            if (begin < end) pool.emplace_back(work, begin, end);
        }
        for (auto& th : pool) th.join();
    }

    write_manifest(m, root);
    return m;
}

} // namespace sarfuse
