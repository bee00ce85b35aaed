#pragma once

#include <span>
#include <vector>

#include <torch/torch.h>

#include "bdiff/grid.hpp"

namespace bdiff {

// Variance schedule of the forward noising chain. Timesteps are 1-indexed
// (t = 1..T) everywhere in the public API. Immutable once built.
class NoiseSchedule {
public:
    static NoiseSchedule linear(int steps, double beta_start, double beta_end);

    int steps() const noexcept { return static_cast<int>(betas_.size()); }
    double beta_start() const noexcept { return beta_start_; }
    double beta_end() const noexcept { return beta_end_; }

    double beta(int t) const { return betas_[checked(t)]; }
    double alpha(int t) const { return alphas_[checked(t)]; }
    double alpha_bar(int t) const { return alpha_bars_[checked(t)]; }
    // ᾱ_{t-1}, with ᾱ_0 = 1.
    double alpha_bar_prev(int t) const;

    std::span<const double> betas() const noexcept { return betas_; }
    std::span<const double> alphas() const noexcept { return alphas_; }
    std::span<const double> alpha_bars() const noexcept { return alpha_bars_; }

    // Throws IndexError unless 1 <= t <= T.
    void require_step(int t) const { (void)checked(t); }

private:
    NoiseSchedule() = default;
    std::size_t checked(int t) const;

    double beta_start_ = 0.0;
    double beta_end_ = 0.0;
    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
};

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

double alpha_bar_at(const NoiseSchedule& sched, int t);

// Closed-form forward sample x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps.
torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                       const NoiseSchedule& sched);

// Batched variant: `t` is an int64 tensor of shape [B], one step per sample.
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& sched);

// One transition of the forward Markov chain:
// x_t = sqrt(1 - β_t) x_{t-1} + sqrt(β_t) eps.
torch::Tensor q_step(const torch::Tensor& x_prev, int t, const torch::Tensor& eps,
                     const NoiseSchedule& sched);

struct ReverseStepOptions {
    // Clamp the implied x0 estimate to [-1, 1] before forming the posterior mean.
    bool clamp_x0 = false;
};

// Ancestral reverse step in the ε-parameterisation with fixed variance σ_t² = β_t:
// x_{t-1} = (x_t - β_t / sqrt(1 - ᾱ_t) · eps_pred) / sqrt(α_t) + σ_t · g_noise.
// `g_noise` may be undefined (treated as zero); it must be zero at t = 1.
torch::Tensor p_sample_step(const torch::Tensor& xt, int t, const torch::Tensor& eps_pred,
                            const torch::Tensor& g_noise, const NoiseSchedule& sched,
                            const ReverseStepOptions& options = {});

// {0,1} label mask -> [-1,+1] model space, as a float64 [H, W] tensor.
torch::Tensor to_model_space(const LabelMask& mask);
// Model-space tensor [H, W] -> label mask (foreground iff value > threshold).
LabelMask to_label_space(const torch::Tensor& model, double threshold = 0.0);

}  // namespace bdiff
