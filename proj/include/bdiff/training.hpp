#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>

#include <torch/torch.h>

#include "bdiff/boundary_weight.hpp"
#include "bdiff/data.hpp"
#include "bdiff/denoiser.hpp"
#include "bdiff/diffusion.hpp"

namespace bdiff {

enum class LossVariant { baseline, weighted };

const char* to_string(LossVariant v);
LossVariant parse_loss_variant(const std::string& s);

struct DiffusionConfig {
    int steps = 250;
    double beta_start = 0.0004;
    double beta_end = 0.08;
    bool clamp_x0 = false;

    NoiseSchedule schedule() const { return make_linear_schedule(steps, beta_start, beta_end); }
};

struct TrainConfig {
    int batch_size = 32;
    double base_lr = 1e-4;
    double plateau_factor = 0.5;
    int plateau_patience = 10;
    std::int64_t total_iterations = 40000;
    double alpha = 0.2;
    LossVariant loss_variant = LossVariant::weighted;
    std::uint64_t seed = 0;
    double gamma_min = 1.0;
    double gamma_max = 4.0;
    // Exponential moving average of the weights; 0 disables it.
    double ema_decay = 0.0;
    // Write `last.ckpt` every this many iterations (0: only at the end).
    std::int64_t checkpoint_every = 0;
    bool augment = true;

    void validate() const;
    // Coefficient actually applied in the loss (0 for the baseline variant).
    double effective_alpha() const { return loss_variant == LossVariant::baseline ? 0.0 : alpha; }
    GammaSchedule gamma_schedule(int steps) const { return {gamma_min, gamma_max, steps}; }
};

// Mean squared error over all elements.
torch::Tensor loss_baseline(const torch::Tensor& eps, const torch::Tensor& eps_pred);

// Mean over elements of (1 + alpha W) (eps - eps_pred)^2, weights broadcast
// against the error.
torch::Tensor loss_weighted(const torch::Tensor& eps, const torch::Tensor& eps_pred,
                            const torch::Tensor& weights, double alpha);

// Scalar overloads on grids, for single-image use.
double loss_baseline(const Grid<double>& eps, const Grid<double>& eps_pred);
double loss_weighted(const Grid<double>& eps, const Grid<double>& eps_pred,
                     const BoundaryWeightMap& w, double alpha);

// Weight maps of a batch of label masks at per-sample steps: [B, 1, H, W].
torch::Tensor batch_weight_maps(const std::vector<const Sample*>& batch, const torch::Tensor& t,
                                const GammaSchedule& gs, DistanceMapCache* cache = nullptr);

// Multiplies the learning rate by `factor` once `patience` consecutive
// epochs pass without the epoch-mean loss improving on the best seen.
class PlateauScheduler {
public:
    PlateauScheduler(double lr, double factor, int patience);

    // Feeds one epoch-mean loss; returns the (possibly reduced) learning rate.
    double step(double epoch_loss);

    double lr() const noexcept { return lr_; }
    double best() const noexcept { return best_; }
    int bad_epochs() const noexcept { return bad_epochs_; }
    void restore(double lr, double best, int bad_epochs);

private:
    double lr_;
    double factor_;
    int patience_;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_epochs_ = 0;
};

struct TrainStats {
    std::int64_t iteration = 0;  // optimizer steps completed
    double loss = 0.0;
    double lr = 0.0;
    std::int64_t epoch = 0;      // completed dataset passes
};

struct CheckpointRecord {
    std::filesystem::path best;
    std::filesystem::path last;
    std::int64_t iterations = 0;
    double best_loss = std::numeric_limits<double>::infinity();
};

// Everything a checkpoint carries besides tensors.
struct CheckpointMeta {
    static constexpr int kFormatVersion = 1;
    int format_version = kFormatVersion;
    DenoiserConfig model;
    DiffusionConfig diffusion;
    std::string run_config_json;  // resolved run configuration, may be empty
    std::int64_t iteration = 0;
};

// Owns the model, optimizer, RNG streams and schedule state of one run.
// Single-threaded: one trainer mutates its parameters.
class Trainer {
public:
    Trainer(DenoiserConfig model_cfg, DiffusionConfig diffusion, TrainConfig train,
            AugmentPolicy policy = {});

    // One optimizer step on an explicit batch (label-space masks).
    TrainStats train_step(const std::vector<const Sample*>& batch);

    // Next step of the epoch/batch schedule over `data`. Handles epoch
    // boundaries, augmentation and the plateau scheduler.
    TrainStats step(const Dataset& data);

    struct FitOptions {
        std::filesystem::path output_dir;
        std::string run_config_json;
        std::ostream* metrics_log = nullptr;  // one JSON record per line
        // Called after every step; returning false stops the run early.
        std::function<bool(const TrainStats&)> on_step;
    };
    // Runs until total_iterations optimizer steps have been taken (resuming
    // from the current iteration), writing best.ckpt and last.ckpt.
    CheckpointRecord fit(const Dataset& data, const FitOptions& options);

    void save(const std::filesystem::path& path, const std::string& run_config_json = {}) const;
    // Restores model, optimizer, RNG and schedule state saved by save().
    void load(const std::filesystem::path& path);

    Denoiser& model() noexcept { return model_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }
    const TrainConfig& config() const noexcept { return train_; }
    std::int64_t iteration() const noexcept { return iteration_; }
    std::int64_t epoch() const noexcept { return epoch_; }
    double lr() const noexcept { return plateau_.lr(); }
    double best_loss() const noexcept { return best_loss_; }

    // Parameters used for inference: the EMA copy when enabled, else live.
    std::map<std::string, torch::Tensor> inference_parameters() const;

private:
    void set_lr(double lr);
    void update_ema();
    std::vector<const Sample*> next_batch(const Dataset& data);

    DenoiserConfig model_cfg_;
    DiffusionConfig diffusion_;
    TrainConfig train_;
    AugmentPolicy policy_;
    NoiseSchedule schedule_;
    GammaSchedule gamma_;
    Denoiser model_{nullptr};
    std::unique_ptr<torch::optim::Adam> optimizer_;
    at::Generator generator_;
    DistanceMapCache cache_;
    PlateauScheduler plateau_;
    std::map<std::string, torch::Tensor> ema_;

    std::int64_t iteration_ = 0;
    std::int64_t epoch_ = 0;
    std::int64_t batch_in_epoch_ = 0;
    double epoch_loss_sum_ = 0.0;
    std::int64_t epoch_loss_count_ = 0;
    double best_loss_ = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> order_;
    std::vector<Sample> augmented_;
};

// Reads a checkpoint's metadata and parameters into a fresh, frozen model.
struct LoadedModel {
    CheckpointMeta meta;
    Denoiser model{nullptr};
    NoiseSchedule schedule;
};
LoadedModel load_model(const std::filesystem::path& path);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

}  // namespace bdiff
