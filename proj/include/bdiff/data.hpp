#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "bdiff/grid.hpp"

namespace bdiff {

// One image/mask pair. `image` is a float32 [3, H, W] tensor, in [0, 1] as
// loaded and in [-1, 1] once `normalized` is set by preprocess().
struct Sample {
    std::string id;
    torch::Tensor image;
    LabelMask mask;
    bool normalized = false;
};

struct Dataset {
    std::vector<Sample> samples;

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }
    const Sample& operator[](std::size_t i) const { return samples[i]; }
};

// Partition of sample ids into train/val/test. Either explicit id lists or
// fractions (applied to the sorted ids after a seeded shuffle).
struct SplitSpec {
    std::vector<std::string> train_ids, val_ids, test_ids;
    std::optional<std::array<double, 3>> fractions;
    std::uint64_t seed = 0;

    static SplitSpec from_fractions(double train, double val, double test, std::uint64_t seed = 0);
    static SplitSpec from_lists(std::vector<std::string> train, std::vector<std::string> val,
                                std::vector<std::string> test);
    // Reads newline-delimited id lists `train.txt`, `val.txt`, `test.txt`
    // from a directory; missing files mean empty lists.
    static SplitSpec from_directory(const std::filesystem::path& dir);
};

struct SplitIds {
    std::vector<std::string> train, val, test;
};

// Resolves a split against the available ids. Throws ValidationError unless
// the three parts are disjoint and together cover `ids` exactly.
SplitIds resolve_split(const SplitSpec& spec, std::vector<std::string> ids);

struct DatasetSplits {
    Dataset train, val, test;
};

DatasetSplits apply_split(Dataset data, const SplitIds& ids);

struct LoadOptions {
    std::string image_dir = "images";
    std::string mask_dir = "masks";
    // Resize target applied while loading; 0 keeps native resolution.
    int image_size = 128;
};

// Loads every `<root>/images/<stem>.{png,jpg,jpeg}` with its
// `<root>/masks/<stem>.png`, sorted by stem. Masks are binarised at 50% gray.
Dataset load_dataset(const std::filesystem::path& root, const LoadOptions& options = {});

// Bilinear resize for the image, nearest-neighbour for the mask, then maps
// the image to [-1, 1]. Idempotent.
Sample preprocess(const Sample& s, int size);

struct AugmentPolicy {
    double hflip_prob = 0.5;
    double vflip_prob = 0.5;
    double affine_prob = 0.5;
    double max_rotate_deg = 20.0;
    double max_scale = 0.1;
    double max_translate = 0.0625;  // fraction of the image side
    double dropout_prob = 0.3;
    int dropout_holes = 4;
    double dropout_size = 0.1;  // hole side as a fraction of the image side
    bool dropout_fill_mask = false;
    double noise_prob = 0.3;
    double noise_sigma = 0.05;
    double rgb_shift_prob = 0.3;
    double rgb_shift = 0.1;

    static AugmentPolicy identity();
    bool is_identity() const;
};

// Spatial transforms hit image and mask with the same geometric map; pixel
// transforms touch the image only. Expects a preprocessed sample.
Sample augment(const Sample& s, const AugmentPolicy& policy, std::mt19937_64& rng);

// Synthetic lesion corpus: a textured skin-toned background with one
// irregular, slightly darker blob per image, and its exact mask.
Dataset synth_shapes(int n, int size, std::uint64_t seed);

// Image I/O (8-bit PNG/JPEG).
torch::Tensor read_image_rgb(const std::filesystem::path& path);
// Thresholds at 50% gray; `strict` instead rejects anything but 0/1 or 0/255.
LabelMask read_mask(const std::filesystem::path& path, bool strict = false);
void write_mask_png(const std::filesystem::path& path, const LabelMask& mask);
// Values in [0, 1] are scaled to 0..255 with rounding; out-of-range values clip.
void write_gray_png(const std::filesystem::path& path, const Grid<double>& values);
void write_image_png(const std::filesystem::path& path, const torch::Tensor& image01);

// Stems of files in `dir` with one of the given extensions, sorted.
std::vector<std::string> list_stems(const std::filesystem::path& dir,
                                    const std::vector<std::string>& extensions);

// Stacks samples into model inputs: images [B, 3, H, W] and model-space
// masks [B, 1, H, W] (both float32).
torch::Tensor stack_images(const std::vector<const Sample*>& batch);
torch::Tensor stack_masks(const std::vector<const Sample*>& batch);

// Deterministic seed for a (base seed, stream, index) triple.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index);

}  // namespace bdiff
