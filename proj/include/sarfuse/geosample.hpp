#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace sarfuse {

constexpr double kEarthRadiusKm = 6371.0088;
constexpr double kNeighborLimitDeg = 1.0;

struct LonLat {
    double lon = 0.0;
    double lat = 0.0;
};

// Area-uniform sphere sampling: lon ~ U[-180,180), lat = asin(U[-1,1]).
std::vector<LonLat> sample_sphere_uniform(uint64_t seed, int n);

// Central angle between two points in degrees (haversine form).
double central_angle_deg(const LonLat& a, const LonLat& b);

// Great-circle distance on the sphere of radius 6371.0088 km.
double haversine_km(const LonLat& a, const LonLat& b);

// Undirected proximity graph: edge (i,j) iff the central angle is < 1 degree.
// Adjacency lists are sorted by point index.
struct NeighborGraph {
    std::vector<LonLat> points;
    std::vector<std::vector<std::pair<int, double>>> neighbors;  // (index, km)

    nlohmann::json to_json() const;
};

// Built with latitude banding; equals the all-pairs rule exactly.
NeighborGraph build_neighbor_graph(const std::vector<LonLat>& points);

struct TripletDraw {
    int anchor = -1;
    int neighbor = -1;
    int distant = -1;
};

struct NoNeighborError : std::runtime_error {
    explicit NoNeighborError(int anchor)
        : std::runtime_error("anchor " + std::to_string(anchor) + " has no neighbors") {}
};

// Neighbor drawn with probability softmax(-d_k / temperature_km) over the
// anchor's neighbor distances (nearer neighbors more likely); distant drawn
// uniformly from the non-neighbor population. Deterministic under seed.
TripletDraw draw_triplet(const NeighborGraph& graph, int anchor, uint64_t seed, double temperature_km);

struct NearestNeighborStats {
    double mean_km = 0.0;   // over points that have at least one neighbor
    int n_with_neighbors = 0;
    int n_isolated = 0;
};

NearestNeighborStats mean_nearest_neighbor_km(const NeighborGraph& graph);

// Mean over all neighbor-pair distances; the default triplet temperature.
double mean_edge_km(const NeighborGraph& graph);

} // namespace sarfuse
