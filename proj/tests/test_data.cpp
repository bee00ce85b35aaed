#include "testing.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "bdiff/data.hpp"

using namespace bdiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("bdiff_data_" + name);
    fs::remove_all(d);
    fs::create_directories(d / "images");
    fs::create_directories(d / "masks");
    return d;
}

void write_pair(const fs::path& root, const std::string& stem, int size, bool with_mask = true) {
    auto img = torch::rand({3, size, size});
    write_image_png(root / "images" / (stem + ".png"), img);
    if (!with_mask) return;
    LabelMask m(size, size, 0);
    for (int r = size / 4; r < size / 2; ++r)
        for (int c = size / 4; c < size / 2; ++c) m(r, c) = 1;
    write_mask_png(root / "masks" / (stem + ".png"), m);
}

std::vector<std::string> ids(int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("ISIC_" + std::to_string(100000 + i));
    return v;
}

bool binary(const LabelMask& m) {
    for (auto v : m.values())
        if (v > 1) return false;
    return true;
}

Sample sample(int size, std::uint64_t seed) {
    auto d = synth_shapes(1, size, seed);
    return d.samples[0];
}

}  // namespace

TEST_CASE("load_dataset enumerates sorted pairs") {
    auto root = scratch_dir("load");
    write_pair(root, "c", 40);
    write_pair(root, "a", 40);
    write_pair(root, "b", 40);
    LoadOptions lo;
    lo.image_size = 32;
    auto d = load_dataset(root, lo);
    REQUIRE(d.size() == 3);
    CHECK(d[0].id == "a");
    CHECK(d[1].id == "b");
    CHECK(d[2].id == "c");
    for (const auto& s : d.samples) {
        CHECK((s.image.sizes() == std::vector<int64_t>{3, 32, 32}));
        CHECK(s.mask.height() == 32);
        CHECK(binary(s.mask));
        CHECK(s.normalized);
        CHECK(s.image.min().item<float>() >= -1.0f);
        CHECK(s.image.max().item<float>() <= 1.0f);
    }

    SUBCASE("uppercase mask extension") {
        fs::rename(root / "masks" / "b.png", root / "masks" / "b.PNG");
        CHECK(load_dataset(root, lo).size() == 3);
    }
    SUBCASE("missing mask names the stem") {
        write_pair(root, "orphan", 40, false);
        try {
            load_dataset(root, lo);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("orphan") != std::string::npos);
        }
    }
    SUBCASE("gray masks are binarised at half intensity") {
        Grid<double> g(40, 40, 0.45);
        for (int r = 0; r < 40; ++r)
            for (int c = 20; c < 40; ++c) g(r, c) = 0.55;
        write_gray_png(root / "masks" / "a.png", g);
        lo.image_size = 0;
        auto m = load_dataset(root, lo)[0].mask;
        CHECK(m(5, 5) == 0);
        CHECK(m(5, 30) == 1);
    }
    fs::remove_all(root);
    CHECK_THROWS_AS(load_dataset(root, lo), IoError);
}

TEST_CASE("split specifications") {
    SUBCASE("HAM10000-sized split is disjoint and covering") {
        auto all = ids(10015);
        std::vector<std::string> train(all.begin(), all.begin() + 7200);
        std::vector<std::string> val(all.begin() + 7200, all.begin() + 9000);
        std::vector<std::string> test(all.begin() + 9000, all.end());
        auto r = resolve_split(SplitSpec::from_lists(train, val, test), all);
        CHECK(r.train.size() == 7200);
        CHECK(r.val.size() == 1800);
        CHECK(r.test.size() == 1015);
    }
    SUBCASE("fractions are deterministic per seed") {
        auto all = ids(100);
        auto a = resolve_split(SplitSpec::from_fractions(0.7, 0.2, 0.1, 3), all);
        auto b = resolve_split(SplitSpec::from_fractions(0.7, 0.2, 0.1, 3), all);
        CHECK(a.train == b.train);
        CHECK(a.train.size() == 70);
        CHECK(a.val.size() == 20);
        CHECK(a.test.size() == 10);
        std::set<std::string> u(a.train.begin(), a.train.end());
        u.insert(a.val.begin(), a.val.end());
        u.insert(a.test.begin(), a.test.end());
        CHECK(u.size() == 100);
        auto c = resolve_split(SplitSpec::from_fractions(0.7, 0.2, 0.1, 4), all);
        CHECK(a.train != c.train);
        CHECK_THROWS_AS(SplitSpec::from_fractions(0.5, 0.2, 0.2), ConfigError);
    }
    SUBCASE("overlap, unknown ids and gaps are rejected") {
        auto all = ids(4);
        CHECK_THROWS_AS(resolve_split(SplitSpec::from_lists({all[0], all[1]}, {all[1], all[2]}, {all[3]}), all),
                        ValidationError);
        CHECK_THROWS_AS(resolve_split(SplitSpec::from_lists({all[0], all[1]}, {all[2]}, {all[3], "x"}), all),
                        ValidationError);
        CHECK_THROWS_AS(resolve_split(SplitSpec::from_lists({all[0]}, {all[2]}, {all[3]}), all), ValidationError);
    }
    SUBCASE("split directory") {
        auto dir = fs::temp_directory_path() / "bdiff_split";
        fs::create_directories(dir);
        std::ofstream(dir / "train.txt") << "a\nb\r\n\n";
        std::ofstream(dir / "test.txt") << "c\n";
        fs::remove(dir / "val.txt");
        auto spec = SplitSpec::from_directory(dir);
        CHECK((spec.train_ids == std::vector<std::string>{"a", "b"}));
        CHECK(spec.val_ids.empty());
        auto r = resolve_split(spec, {"c", "b", "a"});
        auto data = synth_shapes(3, 16, 0);
        data.samples[0].id = "a";
        data.samples[1].id = "b";
        data.samples[2].id = "c";
        auto parts = apply_split(data, r);
        CHECK(parts.train.size() == 2);
        CHECK(parts.test[0].id == "c");
        fs::remove_all(dir);
    }
}

TEST_CASE("preprocess") {
    Sample s;
    s.id = "x";
    s.image = torch::rand({3, 512, 512});
    s.mask = LabelMask(512, 512, 0);
    s.mask(257, 301) = 1;  // single-pixel lesion
    for (int r = 100; r < 300; ++r)
        for (int c = 50; c < 200; ++c) s.mask(r, c) = 1;
    auto p = preprocess(s, 128);
    CHECK((p.image.sizes() == std::vector<int64_t>{3, 128, 128}));
    CHECK(p.mask.height() == 128);
    CHECK(binary(p.mask));
    CHECK(p.image.min().item<float>() >= -1.0f);
    CHECK(p.image.max().item<float>() <= 1.0f);

    auto again = preprocess(p, 128);
    CHECK(torch::equal(again.image, p.image));
    CHECK(again.mask == p.mask);

    Sample native = s;
    native.image = torch::rand({3, 128, 128});
    native.mask = LabelMask(128, 128, 1);
    auto n = preprocess(native, 128);
    CHECK(torch::allclose(n.image, native.image * 2 - 1));
}

TEST_CASE("augmentation") {
    auto s = sample(48, 3);
    std::mt19937_64 rng(1);

    SUBCASE("identity policy") {
        auto a = augment(s, AugmentPolicy::identity(), rng);
        CHECK(torch::equal(a.image, s.image));
        CHECK(a.mask == s.mask);
    }
    SUBCASE("horizontal flip pairs image and mask") {
        auto p = AugmentPolicy::identity();
        p.hflip_prob = 1.0;
        auto a = augment(s, p, rng);
        for (int r = 0; r < 48; ++r)
            for (int c = 0; c < 48; ++c) CHECK(a.mask(r, c) == s.mask(r, 47 - c));
        CHECK(torch::equal(a.image, s.image.flip({2})));
    }
    SUBCASE("affine moves image and mask together") {
        // Image channel 0 carries the mask itself, so the warped channel must
        // still agree with the warped mask away from interpolation edges.
        auto t = s;
        t.image = t.image.clone();
        for (int r = 0; r < 48; ++r)
            for (int c = 0; c < 48; ++c) t.image[0][r][c] = s.mask(r, c) ? 1.0f : -1.0f;
        auto p = AugmentPolicy::identity();
        p.affine_prob = 1.0;
        int agree = 0;
        auto a = augment(t, p, rng);
        for (int r = 0; r < 48; ++r)
            for (int c = 0; c < 48; ++c) agree += (a.image[0][r][c].item<float>() > 0) == (a.mask(r, c) == 1);
        CHECK(agree >= 48 * 48 * 95 / 100);
    }
    SUBCASE("pixel transforms leave the mask alone") {
        auto p = AugmentPolicy::identity();
        p.noise_prob = 1.0;
        p.rgb_shift_prob = 1.0;
        auto a = augment(s, p, rng);
        CHECK(a.mask == s.mask);
        CHECK_FALSE(torch::equal(a.image, s.image));
        CHECK(a.image.abs().max().item<float>() <= 1.0f);
    }
    SUBCASE("coarse dropout") {
        auto p = AugmentPolicy::identity();
        p.dropout_prob = 1.0;
        auto a = augment(s, p, rng);
        CHECK(a.mask == s.mask);
        p.dropout_fill_mask = true;
        auto b = augment(s, p, rng);
        int fg_a = 0, fg_b = 0;
        for (auto v : s.mask.values()) fg_a += v;
        for (auto v : b.mask.values()) fg_b += v;
        CHECK(fg_b <= fg_a);
    }
    SUBCASE("1000 default draws keep masks binary") {
        AugmentPolicy p;
        bool ok = true;
        for (int i = 0; i < 1000; ++i) ok = ok && binary(augment(s, p, rng).mask);
        CHECK(ok);
    }
    SUBCASE("same seed, same draw") {
        AugmentPolicy p;
        std::mt19937_64 r1(9), r2(9);
        auto a = augment(s, p, r1);
        auto b = augment(s, p, r2);
        CHECK(torch::equal(a.image, b.image));
        CHECK(a.mask == b.mask);
    }
}

TEST_CASE("synthetic corpus") {
    auto a = synth_shapes(6, 64, 11);
    auto b = synth_shapes(6, 64, 11);
    auto c = synth_shapes(6, 64, 12);
    REQUIRE(a.size() == 6);
    CHECK(a[0].id == "synth_00000");
    CHECK(a[5].id == "synth_00005");
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(torch::equal(a[i].image, b[i].image));
        CHECK(a[i].mask == b[i].mask);
        CHECK(a[i].normalized);
        CHECK(binary(a[i].mask));
        int fg = 0;
        for (auto v : a[i].mask.values()) fg += v;
        CHECK(fg >= 64 * 64 / 100);
        CHECK(fg <= 64 * 64 * 9 / 10);
        // The lesion is darker than the surrounding skin on average.
        auto img = a[i].image.mean(0);
        double in = 0, out = 0;
        for (int r = 0; r < 64; ++r)
            for (int col = 0; col < 64; ++col) (a[i].mask(r, col) ? in : out) += img[r][col].item<float>();
        CHECK(in / fg < out / (64 * 64 - fg));
    }
    CHECK_FALSE(a[0].mask == c[0].mask);
    CHECK_THROWS_AS(synth_shapes(0, 64, 0), ConfigError);
}

TEST_CASE("stacking and seeds") {
    auto d = synth_shapes(2, 16, 1);
    std::vector<const Sample*> batch{&d[0], &d[1]};
    auto g = stack_images(batch);
    auto m = stack_masks(batch);
    CHECK((g.sizes() == std::vector<int64_t>{2, 3, 16, 16}));
    CHECK((m.sizes() == std::vector<int64_t>{2, 1, 16, 16}));
    CHECK(m.abs().eq(1).all().item<bool>());
    Sample raw = d[0];
    raw.normalized = false;
    std::vector<const Sample*> bad{&raw};
    CHECK_THROWS_AS(stack_images(bad), ValidationError);

    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 2, 4));
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 3));
}

TEST_CASE("image round trip") {
    auto dir = fs::temp_directory_path() / "bdiff_io";
    fs::create_directories(dir);
    LabelMask m(10, 12, 0);
    m(3, 4) = 1;
    write_mask_png(dir / "m.png", m);
    CHECK(read_mask(dir / "m.png") == m);
    auto img = torch::rand({3, 10, 12});
    write_image_png(dir / "i.png", img);
    auto back = read_image_rgb(dir / "i.png");
    CHECK((back - img).abs().max().item<float>() <= 0.5f / 255.0f + 1e-6f);
    CHECK_THROWS_AS(read_mask(dir / "absent.png"), IoError);
    fs::remove_all(dir);
}
