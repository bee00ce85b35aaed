#pragma once

#include <vector>

#include <torch/torch.h>

#include "bdiff/layers.hpp"

namespace bdiff {

struct DenoiserConfig {
    int image_size = 128;
    int stages = 4;
    int base_channels = 64;
    std::vector<int> channel_mults{1, 2, 4, 8};
    int attention_heads = 4;

    // Throws ConfigError describing the first violated constraint.
    void validate() const;

    int stage_channels(int stage) const { return base_channels * channel_mults.at(stage); }
    int time_dim() const { return 4 * base_channels; }
    // Spatial size after all encoder modules, before the tail convolution.
    int encoder_output_size() const { return image_size >> stages; }
    // Stride of the tail convolution that brings the encoder output to 4x4.
    int tail_stride() const { return encoder_output_size() / 4; }
};

// The four products of one encoder module.
struct EncoderStageOutput {
    torch::Tensor x_out;  // noise path, downsampled x2
    torch::Tensor g_out;  // guidance path, downsampled x2
    torch::Tensor h;      // RB1 noise features joined with the guidance path
    torch::Tensor b;      // noise path after L-Att joined with guidance before L-Att
};

// Optional taps into an encoder module's forward pass.
struct EncoderProbe {
    torch::Tensor feedback;       // 1x1 conv of RB2 guidance output
    torch::Tensor gated_noise;    // RB2 noise-path input (RB1 output * feedback)
};

// Dual-path encoder module. The noise path and the guidance path each run
// two ResNet blocks and a linear attention. RB1 noise features are joined
// into the guidance path (h); RB2 guidance features are fed back
// multiplicatively into the noise path's RB2 input; the attended noise
// features are joined with pre-attention guidance features (b) before the
// guidance path's own attention.
struct EncoderModuleImpl : torch::nn::Module {
    EncoderModuleImpl(int in_ch, int out_ch, int time_dim, int heads);

    EncoderStageOutput forward(const torch::Tensor& x_in, const torch::Tensor& g_in,
                               const torch::Tensor& t_x, const torch::Tensor& t_g,
                               EncoderProbe* probe = nullptr);

    ResBlock rb1_x{nullptr}, rb2_x{nullptr}, rb1_g{nullptr}, rb2_g{nullptr};
    torch::nn::Conv2d h_proj{nullptr}, feedback{nullptr}, b_proj{nullptr};
    LinearAttention att_x{nullptr}, att_g{nullptr};
    Downsample down_x{nullptr}, down_g{nullptr};
};
TORCH_MODULE(EncoderModule);

// ResNet block, parallel self-attention / linear attention fused by
// concatenation and a 1x1 projection, ResNet block.
struct BottleneckImpl : torch::nn::Module {
    BottleneckImpl(int channels, int time_dim, int heads);

    // x_L and g_L are concatenated on the channel axis before the first block.
    torch::Tensor forward(const torch::Tensor& x_l, const torch::Tensor& g_l,
                          const torch::Tensor& t_x);

    // Ablation switches: a disabled branch contributes zeros to the fusion.
    bool use_self_attention = true;
    bool use_linear_attention = true;

    ResBlock rb1{nullptr}, rb2{nullptr};
    SelfAttention self_att{nullptr};
    LinearAttention linear_att{nullptr};
    torch::nn::Conv2d fuse{nullptr};
};
TORCH_MODULE(Bottleneck);

// Single-path decoder module: upsample, RB1 on [d, b], RB2 on [d, h], L-Att.
struct DecoderModuleImpl : torch::nn::Module {
    DecoderModuleImpl(int in_ch, int skip_ch, int out_ch, int time_dim, int heads);

    torch::Tensor forward(const torch::Tensor& d_in, const torch::Tensor& h, const torch::Tensor& b,
                          const torch::Tensor& t_x);

    Upsample up{nullptr};
    ResBlock rb1{nullptr}, rb2{nullptr};
    LinearAttention att{nullptr};
};
TORCH_MODULE(DecoderModule);

enum class TimeBranch { noise, guidance };

// Shapes observed during one forward pass, for contract checks.
struct DenoiserTrace {
    std::vector<EncoderStageOutput> stages;
    std::vector<int64_t> tail_shape;        // after the tail convolution
    std::vector<int64_t> bottleneck_shape;
};

// Noise predictor eps_theta(x_t, g, t).
struct DenoiserImpl : torch::nn::Module {
    explicit DenoiserImpl(DenoiserConfig config);

    // x_t: [B, 1, H, W], g: [B, 3, H, W], t: [B] step indices. Returns [B, 1, H, W].
    torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& g, const torch::Tensor& t,
                          DenoiserTrace* trace = nullptr);

    // Projected time embedding for one of the two branches: [B] -> [B, time_dim].
    torch::Tensor time_embedding(const torch::Tensor& t, TimeBranch branch);

    const DenoiserConfig& config() const noexcept { return cfg; }

    DenoiserConfig cfg;
    torch::nn::Conv2d stem_x{nullptr}, stem_g{nullptr};
    TimeEmbedding time_x{nullptr}, time_g{nullptr};
    torch::nn::ModuleList encoders{nullptr};
    torch::nn::Conv2d tail_x{nullptr}, tail_g{nullptr};
    Bottleneck bottleneck{nullptr};
    torch::nn::Conv2d head{nullptr};
    Upsample head_up{nullptr};
    torch::nn::ModuleList decoders{nullptr};
    ResBlock final_block{nullptr};
    torch::nn::GroupNorm final_norm{nullptr};
    torch::nn::Conv2d final_conv{nullptr};
};
TORCH_MODULE(Denoiser);

// Runs the denoiser on a single [H, W] noisy mask with a [3, H, W] guidance
// image at step t and returns the [H, W] noise prediction.
torch::Tensor denoise(Denoiser& model, const torch::Tensor& x_t, const torch::Tensor& g, int t);

}  // namespace bdiff
