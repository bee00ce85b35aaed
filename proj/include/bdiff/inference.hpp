#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "bdiff/denoiser.hpp"
#include "bdiff/diffusion.hpp"
#include "bdiff/grid.hpp"

namespace bdiff {

struct EnsembleConfig {
    int n_samples = 9;
    double threshold = 0.0;  // model space
    std::uint64_t seed = 0;
    // Average sign-binarised chains instead of the continuous estimates.
    bool average_binarized = false;
    // Upper bound on chains evaluated in one batched forward pass.
    int max_batch = 72;

    void validate() const;
};

struct SamplerOptions {
    ReverseStepOptions reverse;
    int max_batch = 72;
};

// Generator seeded for one sampling chain.
at::Generator chain_generator(std::uint64_t seed);

// Ancestral sampling from x_T ~ N(0, I) down to t = 1 for a batch of guidance
// images [B, 3, H, W], one generator per chain. Returns continuous model-space
// x0 estimates [B, H, W]. Chain i only draws from generators[i], so the noise a
// chain sees does not depend on which chains share a batch.
torch::Tensor sample_masks(const torch::Tensor& guidance, Denoiser& model, const NoiseSchedule& sched,
                           std::vector<at::Generator>& generators, const SamplerOptions& options = {});

// Single chain for one [3, H, W] guidance image; returns [H, W].
torch::Tensor sample_mask(const torch::Tensor& guidance, Denoiser& model, const NoiseSchedule& sched,
                          at::Generator& rng, const SamplerOptions& options = {});

struct EnsembleResult {
    LabelMask mask;       // label space
    torch::Tensor mean;   // [H, W] float64 mean of the fused chains, model space
};

// Pixelwise mean of the chains, in chain order, then foreground iff the
// mean exceeds the threshold.
EnsembleResult fuse_chains(const std::vector<torch::Tensor>& chains, double threshold,
                           bool average_binarized = false);

// n_samples chains with seeds base + chain index, fused by fuse_chains.
EnsembleResult ensemble_predict(const torch::Tensor& guidance, Denoiser& model,
                                const NoiseSchedule& sched, const EnsembleConfig& ec,
                                const ReverseStepOptions& reverse = {});

// Ensemble for several images [N, 3, H, W], batching chains across images.
// Chain seeds restart at `ec.seed` for every image.
std::vector<EnsembleResult> ensemble_predict_many(const torch::Tensor& guidance, Denoiser& model,
                                                  const NoiseSchedule& sched, const EnsembleConfig& ec,
                                                  const ReverseStepOptions& reverse = {});

}  // namespace bdiff
