#include "bdiff/boundary_weight.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <vector>

namespace bdiff {

void GammaSchedule::validate() const {
    if (steps < 1) throw ConfigError("gamma schedule: steps must be >= 1");
    if (!(gamma_min > 0.0)) throw ConfigError("gamma schedule: gamma_min must be > 0");
    if (!(gamma_max >= gamma_min)) {
        throw ConfigError("gamma schedule: gamma_max must be >= gamma_min");
    }
}

double GammaSchedule::gamma(int t) const {
    if (t < 1 || t > steps) {
        throw IndexError("gamma schedule: timestep " + std::to_string(t) + " outside [1, " +
                         std::to_string(steps) + "]");
    }
    if (steps == 1) return gamma_max;
    const double progress = static_cast<double>(steps - t) / (steps - 1);
    return gamma_min + (gamma_max - gamma_min) * progress;
}

namespace {

bool single_class(const LabelMask& mask) {
    const auto& v = mask.values();
    if (v.empty()) return true;
    return std::all_of(v.begin(), v.end(), [&](std::uint8_t x) { return x == v.front(); });
}

bool any_set(const BoundaryMask& band) {
    const auto& v = band.values();
    return std::any_of(v.begin(), v.end(), [](std::uint8_t x) { return x != 0; });
}

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher). `f` holds
// squared distances along one line; overwritten with the 1-D transform.
void edt_1d(std::vector<double>& f, std::vector<double>& out, std::vector<int>& v,
            std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    constexpr double inf = std::numeric_limits<double>::infinity();
    int k = 0;
    v[0] = 0;
    z[0] = -inf;
    z[1] = inf;
    for (int q = 1; q < n; ++q) {
        double s = 0.0;
        while (true) {
            const int p = v[k];
            s = ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
                (2.0 * (q - p));
            if (s <= z[k] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double d = q - v[k];
        out[q] = d * d + f[v[k]];
    }
    f.swap(out);
}

}  // namespace

BoundaryMask extract_boundary(const LabelMask& mask) {
    require_binary(mask, "extract_boundary");
    const int h = mask.height();
    const int w = mask.width();
    BoundaryMask band(h, w, 0);
    if (single_class(mask)) return band;

    auto background = [&](int r, int c) {
        return r < 0 || r >= h || c < 0 || c >= w || mask(r, c) == 0;
    };
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (mask(r, c) == 0) continue;
            if (background(r - 1, c) || background(r + 1, c) || background(r, c - 1) ||
                background(r, c + 1)) {
                band(r, c) = 1;
            }
        }
    }
    return band;
}

int horizontal_extension(int height) {
    if (height < 0) throw ShapeError("image height must be non-negative");
    return (height + 99) / 100;
}

BoundaryMask extend_boundary_horizontal(const BoundaryMask& band, int height) {
    if (height != band.height()) {
        throw ValidationError("extend_boundary_horizontal: height " + std::to_string(height) +
                              " does not match band height " + std::to_string(band.height()));
    }
    const int e = horizontal_extension(height);
    const int w = band.width();
    BoundaryMask out(band.height(), w, 0);
    for (int r = 0; r < band.height(); ++r) {
        for (int c = 0; c < w; ++c) {
            if (!band(r, c)) continue;
            const int lo = std::max(0, c - e);
            const int hi = std::min(w - 1, c + e);
            for (int k = lo; k <= hi; ++k) out(r, k) = 1;
        }
    }
    return out;
}

DistanceMap distance_map(const BoundaryMask& band) {
    if (!any_set(band)) throw EmptyBoundary("distance_map: boundary band is empty");
    const int h = band.height();
    const int w = band.width();
    // Squared distances of lattice points are integers well below 2^53, so
    // every intermediate is exact; the only rounding is the final sqrt.
    const double far = static_cast<double>(h) * h + static_cast<double>(w) * w + 1.0;

    Grid<double> sq(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) sq(r, c) = band(r, c) ? 0.0 : far;

    const int n = std::max(h, w);
    std::vector<double> f, out(n);
    std::vector<int> v(n);
    std::vector<double> z(n + 1);

    f.resize(h);
    out.resize(h);
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) f[r] = sq(r, c);
        edt_1d(f, out, v, z);
        for (int r = 0; r < h; ++r) sq(r, c) = f[r];
    }
    f.resize(w);
    out.resize(w);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) f[c] = sq(r, c);
        edt_1d(f, out, v, z);
        for (int c = 0; c < w; ++c) sq(r, c) = f[c];
    }

    DistanceMap d(h, w);
    for (std::size_t i = 0; i < d.size(); ++i) d.values()[i] = std::sqrt(sq.values()[i]);
    return d;
}

BoundaryWeightMap boundary_attention(const DistanceMap& distances, int t, const GammaSchedule& gs) {
    gs.validate();
    if (distances.empty()) throw EmptyBoundary("boundary_attention: empty distance map");
    const double gamma = gs.gamma(t);
    const auto& d = distances.values();
    const double max_d = *std::max_element(d.begin(), d.end());

    BoundaryWeightMap out{Grid<double>(distances.height(), distances.width(), 1.0), t, gamma};
    if (max_d <= 0.0) return out;
    auto& w = out.weights.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double base = 1.0 - d[i] / max_d;
        w[i] = base <= 0.0 ? 0.0 : std::pow(base, gamma);
    }
    return out;
}

std::optional<DistanceMap> band_distance_map(const LabelMask& mask) {
    auto band = extract_boundary(mask);
    if (!any_set(band)) return std::nullopt;
    return distance_map(extend_boundary_horizontal(band, mask.height()));
}

BoundaryWeightMap weight_map(const LabelMask& mask, int t, const GammaSchedule& gs) {
    gs.validate();
    auto distances = band_distance_map(mask);
    if (!distances) {
        return BoundaryWeightMap{Grid<double>(mask.height(), mask.width(), 0.0), t, gs.gamma(t)};
    }
    return boundary_attention(*distances, t, gs);
}

namespace {

std::uint64_t mask_hash(const LabelMask& mask) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::uint64_t x) {
        h ^= x;
        h *= 1099511628211ull;
    };
    mix(static_cast<std::uint64_t>(mask.height()));
    mix(static_cast<std::uint64_t>(mask.width()));
    for (auto v : mask.values()) mix(v);
    return h;
}

}  // namespace

std::shared_ptr<const DistanceMap> DistanceMapCache::get(const LabelMask& mask) {
    const auto key = mask_hash(mask);
    {
        std::shared_lock lock(mutex_);
        auto [lo, hi] = entries_.equal_range(key);
        for (auto it = lo; it != hi; ++it) {
            if (it->second.mask == mask) return it->second.distances;
        }
    }
    auto computed = band_distance_map(mask);
    std::shared_ptr<const DistanceMap> value =
        computed ? std::make_shared<const DistanceMap>(std::move(*computed)) : nullptr;

    std::unique_lock lock(mutex_);
    auto [lo, hi] = entries_.equal_range(key);
    for (auto it = lo; it != hi; ++it) {
        if (it->second.mask == mask) return it->second.distances;
    }
    entries_.emplace(key, Entry{mask, value});
    return value;
}

BoundaryWeightMap DistanceMapCache::weight_map(const LabelMask& mask, int t,
                                               const GammaSchedule& gs) {
    gs.validate();
    auto distances = get(mask);
    if (!distances) {
        return BoundaryWeightMap{Grid<double>(mask.height(), mask.width(), 0.0), t, gs.gamma(t)};
    }
    return boundary_attention(*distances, t, gs);
}

std::size_t DistanceMapCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

}  // namespace bdiff
