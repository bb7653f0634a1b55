#include "sarfuse/geosample.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sarfuse/rng.hpp"

namespace sarfuse {

std::vector<LonLat> sample_sphere_uniform(uint64_t seed, int n) {
    if (n < 1) throw std::invalid_argument("sample_sphere_uniform: n must be >= 1");
    Rng rng(derive_seed(seed, 0x67656f));
    std::vector<LonLat> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        const double lon = rng.uniform(-180.0, 180.0);
        const double z = rng.uniform(-1.0, 1.0);
        const double lat = std::asin(z) * 180.0 / M_PI;
        out.push_back({lon, lat});
    }
    return out;
}

double central_angle_deg(const LonLat& a, const LonLat& b) {
    const double phi1 = a.lat * M_PI / 180.0;
    const double phi2 = b.lat * M_PI / 180.0;
    const double dphi = (b.lat - a.lat) * M_PI / 180.0;
    const double dlam = (b.lon - a.lon) * M_PI / 180.0;
    const double s1 = std::sin(dphi / 2.0), s2 = std::sin(dlam / 2.0);
    const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
    return 2.0 * std::asin(std::min(1.0, std::sqrt(h))) * 180.0 / M_PI;
}

double haversine_km(const LonLat& a, const LonLat& b) {
    return kEarthRadiusKm * central_angle_deg(a, b) * M_PI / 180.0;
}

NeighborGraph build_neighbor_graph(const std::vector<LonLat>& points) {
    if (points.size() < 2) throw std::invalid_argument("build_neighbor_graph: need at least 2 points");
    const int n = int(points.size());
    NeighborGraph g;
    g.points = points;
    g.neighbors.assign(size_t(n), {});

    // latitude banding: |delta lat| <= central angle, so a 1-degree window
    // over latitude-sorted points covers every candidate pair
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return points[size_t(a)].lat < points[size_t(b)].lat; });

    for (int oi = 0; oi < n; ++oi) {
        const int i = order[size_t(oi)];
        for (int oj = oi + 1; oj < n; ++oj) {
            const int j = order[size_t(oj)];
            if (points[size_t(j)].lat - points[size_t(i)].lat > kNeighborLimitDeg) break;
            if (central_angle_deg(points[size_t(i)], points[size_t(j)]) < kNeighborLimitDeg) {
                const double d = haversine_km(points[size_t(i)], points[size_t(j)]);
                g.neighbors[size_t(i)].emplace_back(j, d);
                g.neighbors[size_t(j)].emplace_back(i, d);
            }
        }
    }
    for (auto& adj : g.neighbors) std::sort(adj.begin(), adj.end());
    return g;
}

nlohmann::json NeighborGraph::to_json() const {
    nlohmann::json j;
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points) pts.push_back({p.lon, p.lat});
    j["points"] = std::move(pts);
    nlohmann::json adj = nlohmann::json::array();
    for (const auto& nb : neighbors) {
        nlohmann::json row = nlohmann::json::array();
        for (const auto& [idx, km] : nb) row.push_back({{"index", idx}, {"km", km}});
        adj.push_back(std::move(row));
    }
    j["neighbors"] = std::move(adj);
    return j;
}

TripletDraw draw_triplet(const NeighborGraph& graph, int anchor, uint64_t seed, double temperature_km) {
    if (anchor < 0 || anchor >= int(graph.points.size()))
        throw std::invalid_argument("draw_triplet: anchor out of range");
    const auto& nbrs = graph.neighbors[size_t(anchor)];
    if (nbrs.empty()) throw NoNeighborError(anchor);
    if (!(temperature_km > 0.0)) throw std::invalid_argument("draw_triplet: temperature must be > 0");

    Rng rng(derive_seed(seed, uint64_t(anchor), 0x747269));

    // softmax over negative distances, max-shifted
    std::vector<double> logit(nbrs.size());
    double m = -std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < nbrs.size(); ++k) {
        logit[k] = -nbrs[k].second / temperature_km;
        m = std::max(m, logit[k]);
    }
    double z = 0.0;
    for (double& l : logit) {
        l = std::exp(l - m);
        z += l;
    }
    const double u = rng.uniform() * z;
    size_t pick = nbrs.size() - 1;
    double cum = 0.0;
    for (size_t k = 0; k < nbrs.size(); ++k) {
        cum += logit[k];
        if (u < cum) {
            pick = k;
            break;
        }
    }

    // distant: uniform over indices that are neither the anchor nor neighbors
    std::vector<char> excluded(graph.points.size(), 0);
    excluded[size_t(anchor)] = 1;
    for (const auto& [idx, km] : nbrs) excluded[size_t(idx)] = 1;
    const int n_candidates = int(graph.points.size()) - 1 - int(nbrs.size());
    if (n_candidates < 1)
        throw std::runtime_error("draw_triplet: no non-neighbor population for anchor " +
                                 std::to_string(anchor));
    int target = int(rng.uniform_int(uint64_t(n_candidates)));
    int distant = -1;
    for (int i = 0; i < int(graph.points.size()); ++i) {
        if (excluded[size_t(i)]) continue;
        if (target-- == 0) {
            distant = i;
            break;
        }
    }

    return TripletDraw{anchor, nbrs[pick].first, distant};
}

NearestNeighborStats mean_nearest_neighbor_km(const NeighborGraph& graph) {
    NearestNeighborStats stats;
    double sum = 0.0;
    for (const auto& nbrs : graph.neighbors) {
        if (nbrs.empty()) {
            ++stats.n_isolated;
            continue;
        }
        double best = nbrs.front().second;
        for (const auto& [idx, km] : nbrs) best = std::min(best, km);
        sum += best;
        ++stats.n_with_neighbors;
    }
    if (stats.n_with_neighbors > 0) stats.mean_km = sum / double(stats.n_with_neighbors);
    return stats;
}

double mean_edge_km(const NeighborGraph& graph) {
    double sum = 0.0;
    int64_t n = 0;
    for (const auto& nbrs : graph.neighbors)
        for (const auto& [idx, km] : nbrs) {
            sum += km;
            ++n;
        }
    return n > 0 ? sum / double(n) : 0.0;
}

} // namespace sarfuse
