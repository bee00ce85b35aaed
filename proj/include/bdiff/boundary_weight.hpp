#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <unordered_map>

#include "bdiff/grid.hpp"

namespace bdiff {

// 1 marks a pixel of the boundary band, 0 everything else.
using BoundaryMask = Grid<std::uint8_t>;

// Euclidean distance (in pixels) from each pixel to the nearest band pixel.
using DistanceMap = Grid<double>;

// Per-pixel loss emphasis in [0, 1] for one diffusion step.
struct BoundaryWeightMap {
    Grid<double> weights;
    int t = 0;
    double gamma = 1.0;
};

// Time-dependent exponent of the boundary attention. The exponent moves
// linearly from gamma_max at t = 1 to gamma_min at t = T, so the emphasis
// sharpens as sampling approaches the clean mask.
struct GammaSchedule {
    double gamma_min = 1.0;
    double gamma_max = 4.0;
    int steps = 250;

    void validate() const;
    double gamma(int t) const;
};

// Pixel is on the boundary iff it is foreground and has a background
// 4-neighbour; the image frame counts as background. Single-class masks
// (all background or all foreground) have no boundary.
BoundaryMask extract_boundary(const LabelMask& mask);

// Dilates every band pixel by ceil(H / 100) columns to each side, clipped to
// the row. `height` must equal the band's height.
BoundaryMask extend_boundary_horizontal(const BoundaryMask& band, int height);

// Half-width of the horizontal extension for an image of the given height.
int horizontal_extension(int height);

// Exact Euclidean distance transform to the nearest band pixel.
// Throws EmptyBoundary if the band has no pixels.
DistanceMap distance_map(const BoundaryMask& band);

// W = (1 - d / max d)^gamma(t). A distance map that is zero everywhere
// (band covers the whole image) yields an all-ones map.
BoundaryWeightMap boundary_attention(const DistanceMap& distances, int t, const GammaSchedule& gs);

// Distance map of the extended band for a label mask, or nullopt when the
// mask is single-class. This is the t-independent part of weight_map.
std::optional<DistanceMap> band_distance_map(const LabelMask& mask);

// Full pipeline: boundary -> horizontal extension -> distance map ->
// attention. Single-class masks give the all-zero map.
BoundaryWeightMap weight_map(const LabelMask& mask, int t, const GammaSchedule& gs);

// Memoises band_distance_map per mask content. Concurrent readers share a
// lock; insertion takes it exclusively.
class DistanceMapCache {
public:
    // Returns nullptr for single-class masks.
    std::shared_ptr<const DistanceMap> get(const LabelMask& mask);
    BoundaryWeightMap weight_map(const LabelMask& mask, int t, const GammaSchedule& gs);
    std::size_t size() const;

private:
    struct Entry {
        LabelMask mask;
        std::shared_ptr<const DistanceMap> distances;
    };
    mutable std::shared_mutex mutex_;
    std::unordered_multimap<std::uint64_t, Entry> entries_;
};

}  // namespace bdiff
