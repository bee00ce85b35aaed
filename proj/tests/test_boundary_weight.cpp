#include "testing.hpp"

#include <cmath>
#include <random>
#include <thread>

#include "bdiff/boundary_weight.hpp"
#include "oracles.hpp"

using namespace bdiff;

namespace {

int count(const BoundaryMask& b) {
    int n = 0;
    for (auto v : b.values()) n += v;
    return n;
}

LabelMask square8() {
    LabelMask m(8, 8, 0);
    for (int r = 2; r < 6; ++r)
        for (int c = 2; c < 6; ++c) m(r, c) = 1;
    return m;
}

}  // namespace

TEST_CASE("extract_boundary") {
    SUBCASE("empty mask") { CHECK(count(extract_boundary(LabelMask(6, 7, 0))) == 0); }
    SUBCASE("full mask is single-class") { CHECK(count(extract_boundary(LabelMask(6, 7, 1))) == 0); }
    SUBCASE("isolated pixel is its own border") {
        LabelMask m(5, 5, 0);
        m(2, 2) = 1;
        auto b = extract_boundary(m);
        CHECK(count(b) == 1);
        CHECK(b(2, 2) == 1);
    }
    SUBCASE("filled square gives its 12 perimeter pixels") {
        auto m = square8();
        auto b = extract_boundary(m);
        CHECK(count(b) == 12);
        CHECK(b == oracle::boundary(m));
        CHECK(b(3, 3) == 0);
        CHECK(b(2, 3) == 1);
    }
    SUBCASE("image frame counts as background") {
        LabelMask m(4, 4, 0);
        for (int c = 0; c < 4; ++c) m(0, c) = m(1, c) = 1;
        auto b = extract_boundary(m);
        for (int c = 0; c < 4; ++c) {
            CHECK(b(0, c) == 1);
            CHECK(b(1, c) == 1);
        }
    }
    SUBCASE("random masks agree with the padded-scan oracle") {
        std::mt19937_64 rng(5);
        for (int i = 0; i < 100; ++i) {
            auto m = oracle::random_mask(rng, 3 + i % 13, 2 + i % 11, 0.5);
            CHECK(extract_boundary(m) == oracle::boundary(m));
        }
    }
    SUBCASE("non-binary input") {
        LabelMask m(3, 3, 0);
        m(1, 1) = 7;
        CHECK_THROWS_AS(extract_boundary(m), ValidationError);
    }
}

TEST_CASE("horizontal extension width") {
    auto run = [](int h, int col) {
        BoundaryMask b(h, h, 0);
        b(h / 2, col) = 1;
        auto e = extend_boundary_horizontal(b, h);
        int lo = h, hi = -1;
        for (int c = 0; c < h; ++c) {
            if (e(h / 2, c)) {
                lo = std::min(lo, c);
                hi = std::max(hi, c);
            }
        }
        CHECK(count(e) == hi - lo + 1);  // one contiguous run in one row
        return std::pair{lo, hi};
    };
    CHECK(horizontal_extension(256) == 3);
    CHECK(horizontal_extension(128) == 2);
    CHECK(horizontal_extension(100) == 1);
    CHECK(run(256, 100) == std::pair{97, 103});
    CHECK(run(128, 64) == std::pair{62, 66});
    CHECK(run(100, 50) == std::pair{49, 51});
    CHECK(run(256, 0) == std::pair{0, 3});
    CHECK(run(256, 255) == std::pair{252, 255});

    SUBCASE("union of overlapping runs matches the oracle") {
        std::mt19937_64 rng(9);
        for (int i = 0; i < 20; ++i) {
            auto b = oracle::random_mask(rng, 30 + i, 40, 0.05);
            const int e = horizontal_extension(b.height());
            CHECK(extend_boundary_horizontal(b, b.height()) == oracle::extend(b, e));
        }
    }
    CHECK_THROWS_AS(extend_boundary_horizontal(BoundaryMask(10, 10, 0), 12), ValidationError);
}

TEST_CASE("distance_map") {
    SUBCASE("band everywhere") {
        auto d = distance_map(BoundaryMask(4, 6, 1));
        for (double v : d.values()) CHECK(v == 0.0);
    }
    SUBCASE("single band pixel") {
        BoundaryMask b(5, 5, 0);
        b(2, 2) = 1;
        auto d = distance_map(b);
        CHECK(d(0, 0) == doctest::Approx(std::sqrt(8.0)).epsilon(1e-12));
        CHECK(d(2, 0) == 2.0);
        CHECK(d(2, 2) == 0.0);
    }
    SUBCASE("two pixels in a row") {
        BoundaryMask b(1, 5, 0);
        b(0, 0) = b(0, 4) = 1;
        auto d = distance_map(b);
        const std::vector<double> expected{0, 1, 2, 1, 0};
        CHECK(d.values() == expected);
    }
    SUBCASE("empty band") { CHECK_THROWS_AS(distance_map(BoundaryMask(3, 3, 0)), EmptyBoundary); }
    SUBCASE("exact against brute force and 1-Lipschitz") {
        std::mt19937_64 rng(1234);
        std::uniform_int_distribution<int> dim(1, 32);
        std::uniform_real_distribution<double> dens(0.005, 0.3);
        double worst = 0.0;
        int checked = 0;
        while (checked < 200) {
            auto b = oracle::random_mask(rng, dim(rng), dim(rng), dens(rng));
            if (count(b) == 0) continue;
            auto d = distance_map(b);
            auto ref = oracle::distances(b);
            for (std::size_t i = 0; i < d.size(); ++i) worst = std::max(worst, std::abs(d.values()[i] - ref.values()[i]));
            for (int r = 0; r < d.height(); ++r) {
                for (int c = 0; c < d.width(); ++c) {
                    CHECK((d(r, c) == 0.0) == (b(r, c) == 1));
                    if (c + 1 < d.width()) CHECK(std::abs(d(r, c) - d(r, c + 1)) <= 1.0 + 1e-12);
                    if (r + 1 < d.height()) CHECK(std::abs(d(r, c) - d(r + 1, c)) <= 1.0 + 1e-12);
                    if (r + 1 < d.height() && c + 1 < d.width())
                        CHECK(std::abs(d(r, c) - d(r + 1, c + 1)) <= std::sqrt(2.0) + 1e-12);
                }
            }
            ++checked;
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("gamma schedule") {
    GammaSchedule gs{1.0, 4.0, 250};
    CHECK(gs.gamma(1) == 4.0);
    CHECK(gs.gamma(250) == 1.0);
    for (int t = 2; t <= 250; ++t) {
        CHECK(gs.gamma(t) <= gs.gamma(t - 1));
        CHECK(gs.gamma(t) >= 1.0);
        CHECK(gs.gamma(t) <= 4.0);
    }
    CHECK_THROWS_AS(gs.gamma(0), IndexError);
    CHECK_THROWS_AS((GammaSchedule{2.0, 1.0, 10}.validate()), ConfigError);
    CHECK_THROWS_AS((GammaSchedule{0.0, 1.0, 10}.validate()), ConfigError);
}

TEST_CASE("boundary_attention") {
    BoundaryMask b(1, 5, 0);
    b(0, 0) = b(0, 4) = 1;
    auto d = distance_map(b);  // 0 1 2 1 0, max 2

    SUBCASE("unit exponent is 1 - normalised distance") {
        auto w = boundary_attention(d, 17, GammaSchedule{1.0, 1.0, 250});
        const std::vector<double> expected{1.0, 0.5, 0.0, 0.5, 1.0};
        CHECK(w.weights.values() == expected);
        CHECK(w.t == 17);
        CHECK(w.gamma == 1.0);
    }
    SUBCASE("sharper near the clean mask") {
        GammaSchedule gs{1.0, 4.0, 250};
        auto late = boundary_attention(d, 250, gs);
        auto early = boundary_attention(d, 1, gs);
        CHECK(late.weights(0, 1) == 0.5);
        CHECK(early.weights(0, 1) == 0.0625);
        CHECK(early.weights(0, 0) == 1.0);
        CHECK(late.weights(0, 4) == 1.0);
    }
    SUBCASE("zero distance everywhere gives all ones") {
        auto w = boundary_attention(distance_map(BoundaryMask(3, 3, 1)), 5, GammaSchedule{});
        for (double v : w.weights.values()) CHECK(v == 1.0);
    }
    CHECK_THROWS_AS(boundary_attention(d, 0, GammaSchedule{}), IndexError);
}

TEST_CASE("weight_map pipeline") {
    GammaSchedule gs{1.0, 4.0, 200};
    SUBCASE("single-class masks give zero weights") {
        for (std::uint8_t fill : {0, 1}) {
            auto w = weight_map(LabelMask(9, 9, fill), 100, gs);
            for (double v : w.weights.values()) CHECK(v == 0.0);
        }
    }
    SUBCASE("filled square matches the composed oracles") {
        auto m = square8();
        GammaSchedule unit{1.0, 1.0, 200};
        auto w = weight_map(m, 50, unit);
        auto ref = oracle::attention(oracle::distances(oracle::extend(oracle::boundary(m), 1)), 1.0);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(w.weights.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-12));
    }
    SUBCASE("quarter vs three-quarter schedule") {
        auto m = square8();
        auto a = weight_map(m, 50, gs);
        auto b = weight_map(m, 150, gs);
        auto band = extend_boundary_horizontal(extract_boundary(m), 8);
        for (int r = 0; r < 8; ++r) {
            for (int c = 0; c < 8; ++c) {
                if (band(r, c)) {
                    CHECK(a.weights(r, c) == 1.0);
                    CHECK(b.weights(r, c) == 1.0);
                } else {
                    CHECK(a.weights(r, c) <= b.weights(r, c));
                }
            }
        }
    }
}

TEST_CASE("weight map properties over random masks") {
    std::mt19937_64 rng(77);
    const GammaSchedule gs{1.0, 4.0, 250};
    for (int i = 0; i < 120; ++i) {
        auto m = (i % 2) ? oracle::random_blob_mask(rng, 24, 28) : oracle::random_mask(rng, 20, 17, 0.4);
        auto band = extend_boundary_horizontal(extract_boundary(m), m.height());
        if (count(band) == 0) continue;
        auto d = distance_map(band);
        auto w1 = weight_map(m, 40, gs);
        auto w2 = weight_map(m, 180, gs);
        for (std::size_t k = 0; k < d.size(); ++k) {
            const double a = w1.weights.values()[k], b = w2.weights.values()[k];
            CHECK(a >= 0.0);
            CHECK(a <= 1.0);
            CHECK((a == 1.0) == (band.values()[k] == 1));
            CHECK(a <= b);
        }
        for (std::size_t p = 0; p < d.size(); p += 7) {
            for (std::size_t q = 0; q < d.size(); q += 5) {
                if (d.values()[p] < d.values()[q]) CHECK(w1.weights.values()[p] >= w1.weights.values()[q]);
            }
        }
    }
}

TEST_CASE("distance map cache") {
    DistanceMapCache cache;
    auto m = square8();
    GammaSchedule gs{1.0, 4.0, 100};
    auto direct = weight_map(m, 30, gs);
    auto cached = cache.weight_map(m, 30, gs);
    CHECK(direct.weights == cached.weights);
    CHECK(cache.size() == 1);
    cache.weight_map(m, 70, gs);
    CHECK(cache.size() == 1);
    CHECK(cache.get(LabelMask(8, 8, 0)) == nullptr);
    CHECK(cache.size() == 2);

    std::mt19937_64 rng(3);
    std::vector<LabelMask> masks;
    for (int i = 0; i < 16; ++i) masks.push_back(oracle::random_blob_mask(rng, 16, 16));
    std::vector<std::thread> workers;
    std::atomic<int> mismatches{0};
    for (int k = 0; k < 4; ++k) {
        workers.emplace_back([&, k] {
            for (int rep = 0; rep < 3; ++rep) {
                for (std::size_t i = 0; i < masks.size(); ++i) {
                    const int t = 1 + static_cast<int>((i + k) % 100);
                    if (cache.weight_map(masks[i], t, gs).weights != weight_map(masks[i], t, gs).weights) ++mismatches;
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    CHECK(mismatches == 0);
}
