#include "sarfuse/data_model.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace sarfuse {

static_assert(std::endian::native == std::endian::little, "raw array payloads are little-endian");

using nlohmann::json;
namespace fs = std::filesystem;

void validate_sample(const PatchSample& s) {
    if (s.sample_id.empty()) throw std::invalid_argument("sample: empty sample_id");
    if (s.sample_id.find('/') != std::string::npos)
        throw std::invalid_argument("sample " + s.sample_id + ": sample_id must not contain '/'");
    if (!(s.lon >= -180.0 && s.lon < 180.0))
        throw std::invalid_argument("sample " + s.sample_id + ": lon out of [-180,180)");
    if (!(s.lat >= -90.0 && s.lat <= 90.0))
        throw std::invalid_argument("sample " + s.sample_id + ": lat out of [-90,90]");
    if (s.patch_size < 1) throw std::invalid_argument("sample " + s.sample_id + ": patch_size must be >= 1");
    const std::vector<int> s2_shape{kS2Bands, s.patch_size, s.patch_size};
    const std::vector<int> s1_shape{kS1Bands, s.patch_size, s.patch_size};
    if (s.s2.shape() != s2_shape)
        throw std::invalid_argument("sample " + s.sample_id + ": S2 shape " + shape_to_string(s.s2.shape()) +
                                    " != " + shape_to_string(s2_shape));
    if (s.s1.shape() != s1_shape)
        throw std::invalid_argument("sample " + s.sample_id + ": S1 shape mismatch");
    if (!s.s2.all_finite() || !s.s1.all_finite())
        throw std::invalid_argument("sample " + s.sample_id + ": non-finite pixel value");
    if (!s.lc.empty() && int64_t(s.lc.size()) != int64_t(s.patch_size) * s.patch_size)
        throw std::invalid_argument("sample " + s.sample_id + ": LC raster size mismatch");
    const int64_t d2 = parse_date_days(s.s2_date);
    const int64_t d1 = parse_date_days(s.s1_date);
    if (std::abs(d2 - d1) > 3)
        throw std::invalid_argument("sample " + s.sample_id + ": acquisition dates more than 3 days apart");
}

int64_t parse_date_days(const std::string& iso) {
    int y = 0, m = 0, d = 0;
    if (iso.size() != 10 || std::sscanf(iso.c_str(), "%4d-%2d-%2d", &y, &m, &d) != 3)
        throw std::invalid_argument("bad ISO date: '" + iso + "'");
    using namespace std::chrono;
    const year_month_day ymd{year{y}, month{unsigned(m)}, day{unsigned(d)}};
    if (!ymd.ok()) throw std::invalid_argument("bad calendar date: '" + iso + "'");
    return sys_days(ymd).time_since_epoch().count();
}

std::string format_date(int64_t days_since_epoch) {
    using namespace std::chrono;
    const year_month_day ymd{sys_days(days{days_since_epoch})};
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", int(ymd.year()), unsigned(ymd.month()),
                  unsigned(ymd.day()));
    return buf;
}

namespace {

void write_raw(const fs::path& path, const void* data, size_t bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(data), std::streamsize(bytes));
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

void read_raw(const fs::path& path, void* data, size_t bytes) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("missing file: " + path.string());
    f.seekg(0, std::ios::end);
    const auto actual = size_t(f.tellg());
    if (actual != bytes)
        throw std::runtime_error("byte-length mismatch for " + path.string() + ": expected " +
                                 std::to_string(bytes) + ", found " + std::to_string(actual));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(data), std::streamsize(bytes));
    if (!f) throw std::runtime_error("read failed: " + path.string());
}

json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("missing file: " + path.string());
    json j;
    f >> j;
    return j;
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
}

} // namespace

fs::path write_sample(const PatchSample& s, const fs::path& root) {
    validate_sample(s);
    const fs::path dir = root / s.sample_id;
    fs::create_directories(dir);
    write_raw(dir / "S2.f32", s.s2.data(), size_t(s.s2.numel()) * sizeof(float));
    write_raw(dir / "S1.f32", s.s1.data(), size_t(s.s1.numel()) * sizeof(float));
    if (s.has_label()) write_raw(dir / "LC.u8", s.lc.data(), s.lc.size());

    json meta;
    meta["sample_id"] = s.sample_id;
    meta["lon"] = s.lon;
    meta["lat"] = s.lat;
    meta["patch_size"] = s.patch_size;
    meta["s2_date"] = s.s2_date;
    meta["s1_date"] = s.s1_date;
    meta["has_label"] = s.has_label();
    write_json_file(dir / "meta.json", meta);
    return dir;
}

PatchSample read_sample(const fs::path& root, const std::string& sample_id) {
    const fs::path dir = root / sample_id;
    const json meta = read_json_file(dir / "meta.json");

    PatchSample s;
    s.sample_id = meta.at("sample_id").get<std::string>();
    s.lon = meta.at("lon").get<double>();
    s.lat = meta.at("lat").get<double>();
    s.patch_size = meta.at("patch_size").get<int>();
    s.s2_date = meta.at("s2_date").get<std::string>();
    s.s1_date = meta.at("s1_date").get<std::string>();
    if (s.patch_size < 1) throw std::runtime_error("sample " + sample_id + ": bad patch_size in meta.json");

    const int p = s.patch_size;
    s.s2 = Tensor({kS2Bands, p, p});
    s.s1 = Tensor({kS1Bands, p, p});
    read_raw(dir / "S2.f32", s.s2.data(), size_t(s.s2.numel()) * sizeof(float));
    read_raw(dir / "S1.f32", s.s1.data(), size_t(s.s1.numel()) * sizeof(float));
    if (meta.at("has_label").get<bool>()) {
        s.lc.resize(size_t(p) * size_t(p));
        read_raw(dir / "LC.u8", s.lc.data(), s.lc.size());
    }
    validate_sample(s);
    return s;
}

void write_manifest(const Manifest& m, const fs::path& root) {
    json j;
    j["dataset_name"] = m.dataset_name;
    j["patch_size"] = m.patch_size;
    if (m.created_seed) j["created_seed"] = *m.created_seed;
    json entries = json::array();
    for (const auto& e : m.entries)
        entries.push_back({{"sample_id", e.sample_id},
                           {"lon", e.lon},
                           {"lat", e.lat},
                           {"relative_path", e.relative_path},
                           {"has_label", e.has_label}});
    j["entries"] = std::move(entries);
    write_json_file(root / "manifest.json", j);
}

Manifest read_manifest(const fs::path& root) {
    const json j = read_json_file(root / "manifest.json");
    Manifest m;
    m.dataset_name = j.at("dataset_name").get<std::string>();
    m.patch_size = j.at("patch_size").get<int>();
    if (j.contains("created_seed")) m.created_seed = j.at("created_seed").get<uint64_t>();
    for (const auto& e : j.at("entries"))
        m.entries.push_back({e.at("sample_id").get<std::string>(), e.at("lon").get<double>(),
                             e.at("lat").get<double>(), e.at("relative_path").get<std::string>(),
                             e.at("has_label").get<bool>()});
    return m;
}

void validate_manifest(const Manifest& m, const fs::path& root) {
    std::vector<std::string> ids;
    for (const auto& e : m.entries) ids.push_back(e.sample_id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw std::runtime_error("manifest: duplicate sample_id");
    for (const auto& e : m.entries) {
        const fs::path dir = root / e.relative_path;
        for (const char* name : {"meta.json", "S2.f32", "S1.f32"})
            if (!fs::exists(dir / name))
                throw std::runtime_error("manifest: incomplete sample directory " + dir.string() +
                                         " (missing " + name + ")");
        if (e.has_label && !fs::exists(dir / "LC.u8"))
            throw std::runtime_error("manifest: labeled sample missing LC.u8: " + dir.string());
    }
}

BandStats compute_band_stats(const Manifest& m, const fs::path& root) {
    if (m.entries.empty()) throw std::invalid_argument("compute_band_stats: empty manifest");

    std::vector<const ManifestEntry*> order;
    for (const auto& e : m.entries) order.push_back(&e);
    std::sort(order.begin(), order.end(),
              [](const ManifestEntry* a, const ManifestEntry* b) { return a->sample_id < b->sample_id; });

    // Neumaier-compensated sums per channel, accumulated in canonical order
    std::array<double, kTotalBands> sum{}, sum_c{}, sumsq{}, sumsq_c{};
    int64_t n_pixels_per_channel = 0;
    auto accumulate = [](double& s, double& comp, double v) {
        const double t = s + v;
        comp += std::abs(s) >= std::abs(v) ? (s - t) + v : (v - t) + s;
        s = t;
    };

    for (const ManifestEntry* e : order) {
        const PatchSample s = read_sample(root, e->sample_id);
        const int64_t sp = int64_t(s.patch_size) * s.patch_size;
        n_pixels_per_channel += sp;
        for (int c = 0; c < kTotalBands; ++c) {
            const float* p = c < kS2Bands ? s.s2.data() + int64_t(c) * sp
                                          : s.s1.data() + int64_t(c - kS2Bands) * sp;
            for (int64_t i = 0; i < sp; ++i) {
                accumulate(sum[size_t(c)], sum_c[size_t(c)], double(p[i]));
                accumulate(sumsq[size_t(c)], sumsq_c[size_t(c)], double(p[i]) * double(p[i]));
            }
        }
    }

    BandStats stats;
    stats.n_pixels = n_pixels_per_channel;
    stats.source_manifest = m.dataset_name;
    for (int c = 0; c < kTotalBands; ++c) {
        const double s1 = sum[size_t(c)] + sum_c[size_t(c)];
        const double s2 = sumsq[size_t(c)] + sumsq_c[size_t(c)];
        const double mean = s1 / double(n_pixels_per_channel);
        const double var = std::max(0.0, s2 / double(n_pixels_per_channel) - mean * mean);
        stats.mean[size_t(c)] = mean;
        stats.stddev[size_t(c)] = std::sqrt(var);
        if (!(stats.stddev[size_t(c)] > 0.0))
            throw std::runtime_error("compute_band_stats: zero variance in channel " + std::to_string(c));
    }
    return stats;
}

void write_band_stats(const BandStats& s, const fs::path& root) {
    json j;
    j["mean"] = s.mean;
    j["std"] = s.stddev;
    j["n_pixels"] = s.n_pixels;
    j["source_manifest"] = s.source_manifest;
    write_json_file(root / "band_stats.json", j);
}

BandStats read_band_stats(const fs::path& root) {
    const json j = read_json_file(root / "band_stats.json");
    BandStats s;
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto stddev = j.at("std").get<std::vector<double>>();
    if (mean.size() != kTotalBands || stddev.size() != kTotalBands)
        throw std::runtime_error("band_stats.json: wrong channel count");
    std::copy(mean.begin(), mean.end(), s.mean.begin());
    std::copy(stddev.begin(), stddev.end(), s.stddev.begin());
    s.n_pixels = j.at("n_pixels").get<int64_t>();
    s.source_manifest = j.value("source_manifest", "");
    return s;
}

Tensor normalize_patch(const PatchSample& s, const BandStats& stats) {
    const int p = s.patch_size;
    const int64_t sp = int64_t(p) * p;
    Tensor out({kTotalBands, p, p});
    for (int c = 0; c < kTotalBands; ++c) {
        const float* src = c < kS2Bands ? s.s2.data() + int64_t(c) * sp
                                        : s.s1.data() + int64_t(c - kS2Bands) * sp;
        float* dst = out.data() + int64_t(c) * sp;
        const double mu = stats.mean[size_t(c)], sd = stats.stddev[size_t(c)];
        for (int64_t i = 0; i < sp; ++i) dst[i] = float((double(src[i]) - mu) / sd);
    }
    return out;
}

Tensor denormalize_patch(const Tensor& x, const BandStats& stats) {
    if (x.rank() != 3 || x.size(0) != kTotalBands)
        throw std::invalid_argument("denormalize_patch: expected [14,H,W]");
    const int64_t sp = int64_t(x.size(1)) * x.size(2);
    Tensor out(x.shape());
    for (int c = 0; c < kTotalBands; ++c) {
        const double mu = stats.mean[size_t(c)], sd = stats.stddev[size_t(c)];
        for (int64_t i = 0; i < sp; ++i)
            out[int64_t(c) * sp + i] = float(double(x[int64_t(c) * sp + i]) * sd + mu);
    }
    return out;
}

} // namespace sarfuse
