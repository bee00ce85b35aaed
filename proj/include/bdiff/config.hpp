#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "bdiff/data.hpp"
#include "bdiff/denoiser.hpp"
#include "bdiff/inference.hpp"
#include "bdiff/training.hpp"

namespace bdiff {

struct DataConfig {
    std::string root;        // dataset root with images/ and masks/
    std::string split_dir;   // optional directory holding train.txt / val.txt / test.txt
    std::string image_dir = "images";
    std::string mask_dir = "masks";
    // When > 0, train on a generated synthetic corpus of this many images
    // instead of reading `root`.
    int synthetic_count = 0;
};

// Every knob of a run. JSON keys mirror the field names, grouped in the
// sections model / diffusion / training / ensemble / augment / data.
struct RunConfig {
    DenoiserConfig model;
    DiffusionConfig diffusion;
    TrainConfig training;
    EnsembleConfig ensemble;
    AugmentPolicy augment;
    DataConfig data;
    std::string output_dir = "runs/default";
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const DenoiserConfig& c);
nlohmann::json to_json(const DiffusionConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const EnsembleConfig& c);
nlohmann::json to_json(const AugmentPolicy& c);
nlohmann::json to_json(const RunConfig& c);

// Strict parsers: unknown keys and mistyped values are collected into
// `errors` as "section.key: message" instead of throwing one at a time.
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j, std::vector<std::string>& errors,
                                         const std::string& prefix = "model.");
DiffusionConfig diffusion_config_from_json(const nlohmann::json& j, std::vector<std::string>& errors,
                                           const std::string& prefix = "diffusion.");

// Parses and validates a full run configuration. Throws ConfigError listing
// every offending key. `require_data` demands a data source (train only).
RunConfig run_config_from_json(const nlohmann::json& j, bool require_data = true);

// Applies "a.b.c=value" overrides to a JSON document. The value is parsed
// as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides = {}, bool require_data = true);

}  // namespace bdiff
