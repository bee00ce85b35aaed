#include "testing.hpp"

#include <random>
#include <sstream>

#include "bdiff/metrics.hpp"
#include "oracles.hpp"

using namespace bdiff;

namespace {

LabelMask from_rows(const std::vector<std::string>& rows) {
    LabelMask m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()), 0);
    for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c) m(r, c) = rows[r][c] == '1';
    return m;
}

}  // namespace

TEST_CASE("confusion counts") {
    auto pred = from_rows({"1100", "0110"});
    auto gt = from_rows({"1000", "0011"});
    auto c = confusion(pred, gt);
    CHECK(c.tp == 2);
    CHECK(c.fp == 2);
    CHECK(c.fn == 1);
    CHECK(c.tn == 3);
    CHECK(c.total() == 8);
    CHECK_THROWS_AS(confusion(pred, LabelMask(3, 4, 0)), ShapeError);
}

TEST_CASE("metric formulas") {
    ConfusionCounts c{40, 10, 20, 30};
    auto m = metrics_report(c);
    CHECK(m.dsc == doctest::Approx(80.0 / 110.0));
    CHECK(m.se == doctest::Approx(40.0 / 60.0));
    CHECK(m.sp == doctest::Approx(30.0 / 40.0));
    CHECK(m.acc == doctest::Approx(70.0 / 100.0));
}

TEST_CASE("perfect and inverted predictions") {
    std::mt19937_64 rng(2);
    auto gt = oracle::random_blob_mask(rng, 20, 20);
    auto perfect = metrics_report(confusion(gt, gt));
    CHECK(perfect.dsc == 1.0);
    CHECK(perfect.se == 1.0);
    CHECK(perfect.sp == 1.0);
    CHECK(perfect.acc == 1.0);

    LabelMask inv = gt;
    for (auto& v : inv.values()) v = 1 - v;
    auto bad = metrics_report(confusion(inv, gt));
    CHECK(bad.dsc == 0.0);
    CHECK(bad.acc == 0.0);
}

TEST_CASE("empty classes") {
    LabelMask empty(4, 4, 0), full(4, 4, 1);
    auto both_empty = metrics_report(confusion(empty, empty));
    CHECK(both_empty.dsc == 1.0);
    CHECK(both_empty.se == 1.0);
    CHECK(both_empty.sp == 1.0);
    auto missed = metrics_report(confusion(empty, full));
    CHECK(missed.dsc == 0.0);
    CHECK(missed.se == 0.0);
    CHECK(missed.sp == 0.0);  // background present in the prediction only
    auto all_fg = metrics_report(confusion(full, full));
    CHECK(all_fg.sp == 1.0);
    auto spurious = metrics_report(confusion(full, empty));
    CHECK(spurious.sp == 0.0);
    CHECK(spurious.dsc == 0.0);
}

TEST_CASE("micro and macro summaries") {
    std::vector<ImageMetrics> ims;
    ConfusionCounts a{10, 0, 0, 90}, b{0, 5, 5, 90};
    ims.push_back({"a", a, metrics_report(a)});
    ims.push_back({"b", b, metrics_report(b)});
    auto s = summarize(ims);
    CHECK(s.macro.dsc == doctest::Approx(0.5));
    CHECK(s.micro.dsc == doctest::Approx(20.0 / 30.0));
    CHECK(s.micro.acc == doctest::Approx(190.0 / 200.0));

    SUBCASE("counts merge in any order") {
        std::mt19937_64 rng(8);
        std::vector<ConfusionCounts> parts;
        for (int i = 0; i < 10; ++i) {
            auto p = oracle::random_mask(rng, 9, 9, 0.5);
            auto g = oracle::random_mask(rng, 9, 9, 0.5);
            parts.push_back(confusion(p, g));
        }
        ConfusionCounts fwd, rev;
        for (auto& p : parts) fwd += p;
        for (auto it = parts.rbegin(); it != parts.rend(); ++it) rev = rev + *it;
        CHECK(fwd == rev);
    }

    SUBCASE("csv layout") {
        auto csv = format_report_csv(s);
        std::istringstream in(csv);
        std::string line;
        std::vector<std::string> lines;
        while (std::getline(in, line)) lines.push_back(line);
        REQUIRE(lines.size() == 5);
        CHECK(lines[0] == "id,dsc,se,sp,acc");
        CHECK(lines[1] == "a,1.000000,1.000000,1.000000,1.000000");
        CHECK(lines[3].rfind("micro,0.666667,", 0) == 0);
        CHECK(lines[4].rfind("macro,0.500000,", 0) == 0);
    }
}
