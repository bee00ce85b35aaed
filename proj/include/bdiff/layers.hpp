#pragma once

#include <torch/torch.h>

namespace bdiff {

// Group count for GroupNorm: at most 8, and always a divisor of `channels`.
int norm_groups(int channels);

// Sinusoidal features of a (possibly fractional) timestep: [B] -> [B, dim].
torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int dim);

// sinusoidal -> linear -> GELU -> linear.
struct TimeEmbeddingImpl : torch::nn::Module {
    TimeEmbeddingImpl(int sinusoidal_dim, int out_dim);
    torch::Tensor forward(const torch::Tensor& t);

    int sinusoidal_dim;
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TimeEmbedding);

// GroupNorm -> SiLU -> conv3x3, time shift, GroupNorm -> SiLU -> conv3x3,
// plus a 1x1 residual projection when the width changes.
struct ResBlockImpl : torch::nn::Module {
    ResBlockImpl(int in_ch, int out_ch, int time_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

// Efficient attention with linear cost in the number of pixels: queries are
// softmax-normalised over channels, keys over positions, and the keys/values
// are contracted into a per-head context matrix first. Pre-norm residual.
struct LinearAttentionImpl : torch::nn::Module {
    LinearAttentionImpl(int channels, int heads);
    torch::Tensor forward(const torch::Tensor& x);

    int heads;
    torch::nn::GroupNorm norm{nullptr};
    torch::nn::Conv2d to_qkv{nullptr}, to_out{nullptr};
    torch::nn::GroupNorm out_norm{nullptr};
};
TORCH_MODULE(LinearAttention);

// Multi-head softmax attention over all spatial positions. Pre-norm residual.
struct SelfAttentionImpl : torch::nn::Module {
    SelfAttentionImpl(int channels, int heads);
    torch::Tensor forward(const torch::Tensor& x);

    int heads;
    torch::nn::GroupNorm norm{nullptr};
    torch::nn::Conv2d to_qkv{nullptr}, to_out{nullptr};
};
TORCH_MODULE(SelfAttention);

// Strided 3x3 convolution halving the spatial size.
struct DownsampleImpl : torch::nn::Module {
    explicit DownsampleImpl(int channels);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Downsample);

// Nearest-neighbour upsampling by `factor` followed by a 3x3 convolution.
struct UpsampleImpl : torch::nn::Module {
    UpsampleImpl(int channels, int factor = 2);
    torch::Tensor forward(const torch::Tensor& x);
    int factor;
    torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Upsample);

torch::nn::Conv2d conv1x1(int in_ch, int out_ch, bool bias = true);
torch::nn::Conv2d conv3x3(int in_ch, int out_ch, int stride = 1);

}  // namespace bdiff
