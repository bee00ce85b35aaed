#include "bdiff/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <unordered_set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace bdiff {

namespace fs = std::filesystem;

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
    // splitmix64 over the three inputs.
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(base) ^ stream) ^ index);
}

// ---------------------------------------------------------------------------
// Tensor <-> cv::Mat

namespace {

cv::Mat to_mat(const torch::Tensor& chw) {
    auto t = chw.to(torch::kFloat32).permute({1, 2, 0}).contiguous();
    const int h = static_cast<int>(t.size(0));
    const int w = static_cast<int>(t.size(1));
    cv::Mat m(h, w, CV_32FC3);
    std::memcpy(m.data, t.data_ptr<float>(), sizeof(float) * h * w * 3);
    return m;
}

torch::Tensor from_mat(const cv::Mat& m) {
    CV_Assert(m.type() == CV_32FC3 && m.isContinuous());
    auto t = torch::from_blob(m.data, {m.rows, m.cols, 3}, torch::kFloat32).clone();
    return t.permute({2, 0, 1}).contiguous();
}

cv::Mat to_mat(const LabelMask& mask) {
    cv::Mat m(mask.height(), mask.width(), CV_8UC1);
    std::memcpy(m.data, mask.values().data(), mask.size());
    return m;
}

LabelMask from_mat_mask(const cv::Mat& m) {
    CV_Assert(m.type() == CV_8UC1 && m.isContinuous());
    LabelMask out(m.rows, m.cols);
    std::memcpy(out.values().data(), m.data, out.size());
    return out;
}

void require_image(const torch::Tensor& image, const char* what) {
    if (!image.defined() || image.dim() != 3 || image.size(0) != 3) {
        throw ShapeError(std::string(what) + ": image must be a [3, H, W] tensor");
    }
}

void require_pair(const Sample& s, const char* what) {
    require_image(s.image, what);
    if (s.image.size(1) != s.mask.height() || s.image.size(2) != s.mask.width()) {
        throw ShapeError(std::string(what) + ": image and mask of '" + s.id +
                         "' have different spatial sizes");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Image I/O

torch::Tensor read_image_rgb(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("cannot read image " + path.string());
    cv::Mat rgb, f;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
    return from_mat(f);
}

LabelMask read_mask(const fs::path& path, bool strict) {
    cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (gray.empty()) throw IoError("cannot read mask " + path.string());
    if (strict) {
        const bool unit = cv::countNonZero(gray > 1) == 0;
        const bool byte = cv::countNonZero((gray != 0) & (gray != 255)) == 0;
        if (!unit && !byte) {
            throw ValidationError("mask " + path.string() + " is not binary (expected values 0/1 or 0/255)");
        }
        if (unit) return from_mat_mask(gray);
    }
    cv::Mat bin;
    cv::threshold(gray, bin, 127, 1, cv::THRESH_BINARY);
    return from_mat_mask(bin);
}

void write_mask_png(const fs::path& path, const LabelMask& mask) {
    cv::Mat m = to_mat(mask) * 255;
    if (!cv::imwrite(path.string(), m)) throw IoError("cannot write " + path.string());
}

void write_gray_png(const fs::path& path, const Grid<double>& values) {
    cv::Mat m(values.height(), values.width(), CV_8UC1);
    for (int r = 0; r < values.height(); ++r) {
        for (int c = 0; c < values.width(); ++c) {
            const double v = std::clamp(values(r, c), 0.0, 1.0);
            m.at<std::uint8_t>(r, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
    if (!cv::imwrite(path.string(), m)) throw IoError("cannot write " + path.string());
}

void write_image_png(const fs::path& path, const torch::Tensor& image01) {
    require_image(image01, "write_image_png");
    cv::Mat f = to_mat(image01.clamp(0.0, 1.0)), u8, bgr;
    f.convertTo(u8, CV_8UC3, 255.0);
    cv::cvtColor(u8, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write " + path.string());
}

std::vector<std::string> list_stems(const fs::path& dir, const std::vector<std::string>& extensions) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (std::find(extensions.begin(), extensions.end(), ext) != extensions.end()) {
            stems.push_back(entry.path().stem().string());
        }
    }
    std::sort(stems.begin(), stems.end());
    return stems;
}

// ---------------------------------------------------------------------------
// Loading and splits

namespace {

std::optional<fs::path> find_with_extension(const fs::path& dir, const std::string& stem,
                                            const std::vector<std::string>& exts) {
    for (const auto& e : exts) {
        for (const auto& variant : {e, [&] {
                 std::string u = e;
                 std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
                 return u;
             }()}) {
            fs::path p = dir / (stem + variant);
            if (fs::exists(p)) return p;
        }
    }
    return std::nullopt;
}

const std::vector<std::string> kImageExts{".png", ".jpg", ".jpeg"};
const std::vector<std::string> kMaskExts{".png"};

}  // namespace

Dataset load_dataset(const fs::path& root, const LoadOptions& options) {
    const fs::path image_dir = root / options.image_dir;
    const fs::path mask_dir = root / options.mask_dir;
    auto image_stems = list_stems(image_dir, kImageExts);
    image_stems.erase(std::unique(image_stems.begin(), image_stems.end()), image_stems.end());
    if (image_stems.empty()) throw IoError("dataset " + root.string() + " has no images");
    auto mask_stems = list_stems(mask_dir, kMaskExts);
    std::set<std::string> masks(mask_stems.begin(), mask_stems.end());

    std::vector<std::string> missing;
    for (const auto& s : image_stems)
        if (!masks.count(s)) missing.push_back(s);
    if (!missing.empty()) {
        std::string msg = "dataset " + root.string() + ": no mask for image stem(s):";
        for (const auto& s : missing) msg += " " + s;
        throw IoError(msg);
    }

    Dataset data;
    data.samples.reserve(image_stems.size());
    for (const auto& stem : image_stems) {
        Sample s;
        s.id = stem;
        s.image = read_image_rgb(*find_with_extension(image_dir, stem, kImageExts));
        s.mask = read_mask(*find_with_extension(mask_dir, stem, kMaskExts));
        if (s.image.size(1) != s.mask.height() || s.image.size(2) != s.mask.width()) {
            throw IoError("dataset " + root.string() + ": image and mask sizes differ for " + stem);
        }
        if (options.image_size > 0) s = preprocess(s, options.image_size);
        data.samples.push_back(std::move(s));
    }
    return data;
}

SplitSpec SplitSpec::from_fractions(double train, double val, double test, std::uint64_t seed) {
    if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
        throw ConfigError("split fractions must be non-negative and sum to 1");
    }
    SplitSpec s;
    s.fractions = std::array<double, 3>{train, val, test};
    s.seed = seed;
    return s;
}

SplitSpec SplitSpec::from_lists(std::vector<std::string> train, std::vector<std::string> val,
                                std::vector<std::string> test) {
    SplitSpec s;
    s.train_ids = std::move(train);
    s.val_ids = std::move(val);
    s.test_ids = std::move(test);
    return s;
}

SplitSpec SplitSpec::from_directory(const fs::path& dir) {
    auto read = [&](const char* name) {
        std::vector<std::string> ids;
        const fs::path p = dir / name;
        if (!fs::exists(p)) return ids;
        std::ifstream in(p);
        if (!in) throw IoError("cannot read split file " + p.string());
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
            if (!line.empty()) ids.push_back(line);
        }
        return ids;
    };
    return from_lists(read("train.txt"), read("val.txt"), read("test.txt"));
}

SplitIds resolve_split(const SplitSpec& spec, std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    SplitIds out;
    if (spec.fractions) {
        std::vector<std::string> order = ids;
        std::mt19937_64 rng(derive_seed(spec.seed, 0x5b1170, 0));
        std::shuffle(order.begin(), order.end(), rng);
        const auto n = order.size();
        const auto n_train = static_cast<std::size_t>(std::llround((*spec.fractions)[0] * n));
        const auto n_val = std::min(n - n_train,
                                    static_cast<std::size_t>(std::llround((*spec.fractions)[1] * n)));
        out.train.assign(order.begin(), order.begin() + n_train);
        out.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
        out.test.assign(order.begin() + n_train + n_val, order.end());
    } else {
        out.train = spec.train_ids;
        out.val = spec.val_ids;
        out.test = spec.test_ids;
    }
    for (auto* part : {&out.train, &out.val, &out.test}) std::sort(part->begin(), part->end());

    std::unordered_set<std::string> seen;
    std::vector<std::string> duplicates;
    for (const auto* part : {&out.train, &out.val, &out.test}) {
        for (const auto& id : *part) {
            if (!seen.insert(id).second) duplicates.push_back(id);
        }
    }
    if (!duplicates.empty()) {
        throw ValidationError("split parts overlap on id '" + duplicates.front() + "' (" +
                              std::to_string(duplicates.size()) + " duplicate(s))");
    }
    const std::set<std::string> all(ids.begin(), ids.end());
    for (const auto& id : seen) {
        if (!all.count(id)) throw ValidationError("split references unknown id '" + id + "'");
    }
    if (seen.size() != all.size()) {
        throw ValidationError("split covers " + std::to_string(seen.size()) + " of " +
                              std::to_string(all.size()) + " ids");
    }
    return out;
}

DatasetSplits apply_split(Dataset data, const SplitIds& ids) {
    std::unordered_map<std::string, Sample*> by_id;
    for (auto& s : data.samples) by_id[s.id] = &s;
    auto take = [&](const std::vector<std::string>& part) {
        Dataset d;
        for (const auto& id : part) {
            auto it = by_id.find(id);
            if (it == by_id.end()) throw ValidationError("split references unknown id '" + id + "'");
            d.samples.push_back(std::move(*it->second));
        }
        return d;
    };
    DatasetSplits out;
    out.train = take(ids.train);
    out.val = take(ids.val);
    out.test = take(ids.test);
    return out;
}

// ---------------------------------------------------------------------------
// Preprocessing and augmentation

Sample preprocess(const Sample& s, int size) {
    require_pair(s, "preprocess");
    if (size < 1) throw ConfigError("preprocess: target size must be >= 1");
    Sample out;
    out.id = s.id;
    if (s.mask.height() == size && s.mask.width() == size) {
        out.image = s.image.to(torch::kFloat32).clone();
        out.mask = s.mask;
    } else {
        cv::Mat img, mask;
        cv::resize(to_mat(s.image), img, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
        cv::resize(to_mat(s.mask), mask, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
        out.image = from_mat(img);
        out.mask = from_mat_mask(mask);
    }
    out.normalized = s.normalized;
    if (!out.normalized) {
        out.image = out.image * 2.0 - 1.0;
        out.normalized = true;
    }
    return out;
}

AugmentPolicy AugmentPolicy::identity() {
    AugmentPolicy p;
    p.hflip_prob = p.vflip_prob = p.affine_prob = 0.0;
    p.dropout_prob = p.noise_prob = p.rgb_shift_prob = 0.0;
    return p;
}

bool AugmentPolicy::is_identity() const {
    return hflip_prob <= 0 && vflip_prob <= 0 && affine_prob <= 0 && dropout_prob <= 0 &&
           noise_prob <= 0 && rgb_shift_prob <= 0;
}

namespace {

void flip_mask(LabelMask& m, bool horizontal) {
    const int h = m.height(), w = m.width();
    if (horizontal) {
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w / 2; ++c) std::swap(m(r, c), m(r, w - 1 - c));
    } else {
        for (int r = 0; r < h / 2; ++r)
            for (int c = 0; c < w; ++c) std::swap(m(r, c), m(h - 1 - r, c));
    }
}

}  // namespace

Sample augment(const Sample& s, const AugmentPolicy& policy, std::mt19937_64& rng) {
    require_pair(s, "augment");
    Sample out = s;
    out.image = s.image.clone();
    if (policy.is_identity()) return out;

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto coin = [&](double p) { return p > 0 && u01(rng) < p; };
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    const int h = s.mask.height(), w = s.mask.width();

    if (coin(policy.hflip_prob)) {
        out.image = out.image.flip({2});
        flip_mask(out.mask, true);
    }
    if (coin(policy.vflip_prob)) {
        out.image = out.image.flip({1});
        flip_mask(out.mask, false);
    }
    if (coin(policy.affine_prob)) {
        const double angle = uniform(-policy.max_rotate_deg, policy.max_rotate_deg);
        const double scale = uniform(1.0 - policy.max_scale, 1.0 + policy.max_scale);
        const double tx = uniform(-policy.max_translate, policy.max_translate) * w;
        const double ty = uniform(-policy.max_translate, policy.max_translate) * h;
        cv::Mat m = cv::getRotationMatrix2D(cv::Point2f((w - 1) / 2.0f, (h - 1) / 2.0f), angle, scale);
        m.at<double>(0, 2) += tx;
        m.at<double>(1, 2) += ty;
        cv::Mat img, mask;
        cv::warpAffine(to_mat(out.image), img, m, cv::Size(w, h), cv::INTER_LINEAR,
                       cv::BORDER_REFLECT_101);
        cv::warpAffine(to_mat(out.mask), mask, m, cv::Size(w, h), cv::INTER_NEAREST,
                       cv::BORDER_REFLECT_101);
        out.image = from_mat(img);
        out.mask = from_mat_mask(mask);
    }
    if (coin(policy.dropout_prob)) {
        const int hole_h = std::max(1, static_cast<int>(std::lround(policy.dropout_size * h)));
        const int hole_w = std::max(1, static_cast<int>(std::lround(policy.dropout_size * w)));
        for (int k = 0; k < policy.dropout_holes; ++k) {
            const int r0 = std::uniform_int_distribution<int>(0, h - hole_h)(rng);
            const int c0 = std::uniform_int_distribution<int>(0, w - hole_w)(rng);
            using torch::indexing::Slice;
            out.image.index_put_({Slice(), Slice(r0, r0 + hole_h), Slice(c0, c0 + hole_w)}, 0.0);
            if (policy.dropout_fill_mask) {
                for (int r = r0; r < r0 + hole_h; ++r)
                    for (int c = c0; c < c0 + hole_w; ++c) out.mask(r, c) = 0;
            }
        }
    }
    if (coin(policy.noise_prob)) {
        std::normal_distribution<float> n01(0.0f, 1.0f);
        auto noise = torch::empty_like(out.image);
        auto* p = noise.data_ptr<float>();
        for (int64_t i = 0; i < noise.numel(); ++i) p[i] = n01(rng);
        out.image = (out.image + noise * policy.noise_sigma).clamp(-1.0, 1.0);
    }
    if (coin(policy.rgb_shift_prob)) {
        std::vector<float> shift(3);
        for (auto& v : shift) v = static_cast<float>(uniform(-policy.rgb_shift, policy.rgb_shift));
        out.image = (out.image + torch::tensor(shift).view({3, 1, 1})).clamp(-1.0, 1.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic lesions

Dataset synth_shapes(int n, int size, std::uint64_t seed) {
    if (n < 1) throw ConfigError("synth_shapes: count must be >= 1");
    if (size < 8) throw ConfigError("synth_shapes: size must be >= 8");
    Dataset data;
    constexpr double pi = std::numbers::pi;
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(derive_seed(seed, 0x5e7a, static_cast<std::uint64_t>(i)));
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::normal_distribution<double> n01(0.0, 1.0);
        auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

        LabelMask mask;
        double cx = 0, cy = 0, rx = 0, ry = 0, theta = 0;
        std::array<double, 3> amp{}, phase{};
        for (int attempt = 0;; ++attempt) {
            cx = uniform(0.35, 0.65) * size;
            cy = uniform(0.35, 0.65) * size;
            rx = uniform(0.15, 0.32) * size;
            ry = uniform(0.15, 0.32) * size;
            theta = uniform(0.0, pi);
            for (int k = 0; k < 3; ++k) {
                amp[k] = uniform(0.0, 0.12);
                phase[k] = uniform(0.0, 2 * pi);
            }
            mask = LabelMask(size, size, 0);
            std::size_t fg = 0;
            for (int r = 0; r < size; ++r) {
                for (int c = 0; c < size; ++c) {
                    const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
                    const double u = (dx * std::cos(theta) + dy * std::sin(theta)) / rx;
                    const double v = (-dx * std::sin(theta) + dy * std::cos(theta)) / ry;
                    const double ang = std::atan2(v, u);
                    double radius = 1.0;
                    for (int k = 0; k < 3; ++k) radius += amp[k] * std::cos((k + 2) * ang + phase[k]);
                    if (std::hypot(u, v) <= radius) {
                        mask(r, c) = 1;
                        ++fg;
                    }
                }
            }
            const double cover = static_cast<double>(fg) / mask.size();
            if (cover >= 0.01 && cover <= 0.9) break;
            if (attempt > 100) throw ValidationError("synth_shapes: could not place a lesion");
        }

        // Skin tone background with a low-frequency shading field.
        const std::array<double, 3> skin{uniform(0.72, 0.9), uniform(0.55, 0.7), uniform(0.45, 0.6)};
        const double darken = uniform(0.6, 0.78);
        const std::array<double, 3> lesion{skin[0] * darken, skin[1] * darken * 0.92,
                                           skin[2] * darken * 0.95};
        const double fx = uniform(0.5, 2.0) * 2 * pi / size, fy = uniform(0.5, 2.0) * 2 * pi / size;
        const double p1 = uniform(0, 2 * pi), p2 = uniform(0, 2 * pi);

        auto image = torch::empty({3, size, size}, torch::kFloat32);
        auto acc = image.accessor<float, 3>();
        for (int r = 0; r < size; ++r) {
            for (int c = 0; c < size; ++c) {
                const double shade = 0.04 * std::sin(fx * c + p1) * std::cos(fy * r + p2);
                const auto& base = mask(r, c) ? lesion : skin;
                for (int ch = 0; ch < 3; ++ch) {
                    const double v = base[ch] + shade + 0.03 * n01(rng);
                    acc[ch][r][c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }

        Sample s;
        char id[32];
        std::snprintf(id, sizeof(id), "synth_%05d", i);
        s.id = id;
        s.image = image;
        s.mask = std::move(mask);
        data.samples.push_back(preprocess(s, size));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Batching

torch::Tensor stack_images(const std::vector<const Sample*>& batch) {
    std::vector<torch::Tensor> images;
    images.reserve(batch.size());
    for (const auto* s : batch) {
        if (!s->normalized) throw ValidationError("sample '" + s->id + "' is not preprocessed");
        images.push_back(s->image.to(torch::kFloat32));
    }
    return torch::stack(images);
}

torch::Tensor stack_masks(const std::vector<const Sample*>& batch) {
    std::vector<torch::Tensor> masks;
    masks.reserve(batch.size());
    for (const auto* s : batch) {
        require_binary(s->mask, "stack_masks");
        auto m = torch::empty({1, s->mask.height(), s->mask.width()}, torch::kFloat32);
        auto* p = m.data_ptr<float>();
        const auto& v = s->mask.values();
        for (std::size_t i = 0; i < v.size(); ++i) p[i] = v[i] ? 1.0f : -1.0f;
        masks.push_back(m);
    }
    return torch::stack(masks);
}

}  // namespace bdiff
