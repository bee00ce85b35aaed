#include "bdiff/layers.hpp"

#include <cmath>
#include <numeric>

#include "bdiff/errors.hpp"

namespace bdiff {

namespace F = torch::nn::functional;

int norm_groups(int channels) { return std::gcd(8, channels); }

torch::nn::Conv2d conv1x1(int in_ch, int out_ch, bool bias) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1).bias(bias));
}

torch::nn::Conv2d conv3x3(int in_ch, int out_ch, int stride) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).stride(stride).padding(1));
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("sinusoidal embedding dim must be even and >= 2");
    const int half = dim / 2;
    const double scale = half > 1 ? std::log(10000.0) / (half - 1) : 0.0;
    auto freqs = torch::exp(torch::arange(half, torch::kFloat32) * -scale);
    auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

TimeEmbeddingImpl::TimeEmbeddingImpl(int sinusoidal_dim_, int out_dim)
    : sinusoidal_dim(sinusoidal_dim_) {
    fc1 = register_module("fc1", torch::nn::Linear(sinusoidal_dim, out_dim));
    fc2 = register_module("fc2", torch::nn::Linear(out_dim, out_dim));
}

torch::Tensor TimeEmbeddingImpl::forward(const torch::Tensor& t) {
    return fc2(F::gelu(fc1(sinusoidal_embedding(t, sinusoidal_dim))));
}

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int time_dim) {
    norm1 = register_module("norm1", torch::nn::GroupNorm(norm_groups(in_ch), in_ch));
    conv1 = register_module("conv1", conv3x3(in_ch, out_ch));
    time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out_ch));
    norm2 = register_module("norm2", torch::nn::GroupNorm(norm_groups(out_ch), out_ch));
    conv2 = register_module("conv2", conv3x3(out_ch, out_ch));
    if (in_ch != out_ch) skip = register_module("skip", conv1x1(in_ch, out_ch));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + time_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return h + (skip ? skip(x) : x);
}

namespace {

int head_dim_for(int channels, int heads) {
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError("attention: " + std::to_string(channels) +
                          " channels not divisible by " + std::to_string(heads) + " heads");
    }
    return channels / heads;
}

}  // namespace

LinearAttentionImpl::LinearAttentionImpl(int channels, int heads_) : heads(heads_) {
    head_dim_for(channels, heads);
    norm = register_module("norm", torch::nn::GroupNorm(norm_groups(channels), channels));
    // No q/k/v bias.
    to_qkv = register_module("to_qkv", conv1x1(channels, channels * 3, false));
    to_out = register_module("to_out", conv1x1(channels, channels));
    out_norm = register_module("out_norm", torch::nn::GroupNorm(1, channels));
}

torch::Tensor LinearAttentionImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    const auto d = c / heads;
    auto qkv = to_qkv(norm(x)).chunk(3, 1);
    auto q = qkv[0].reshape({b, heads, d, h * w}).softmax(2) * (1.0 / std::sqrt(double(d)));
    auto k = qkv[1].reshape({b, heads, d, h * w}).softmax(3);
    auto v = qkv[2].reshape({b, heads, d, h * w});
    auto context = torch::matmul(k, v.transpose(2, 3));             // [b, heads, d, d]
    auto out = torch::matmul(context.transpose(2, 3), q);           // [b, heads, d, n]
    out = out.reshape({b, c, h, w});
    return x + out_norm(to_out(out));
}

SelfAttentionImpl::SelfAttentionImpl(int channels, int heads_) : heads(heads_) {
    head_dim_for(channels, heads);
    norm = register_module("norm", torch::nn::GroupNorm(norm_groups(channels), channels));
    to_qkv = register_module("to_qkv", conv1x1(channels, channels * 3, false));
    to_out = register_module("to_out", conv1x1(channels, channels));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    const auto d = c / heads;
    auto qkv = to_qkv(norm(x)).chunk(3, 1);
    auto q = qkv[0].reshape({b, heads, d, h * w});
    auto k = qkv[1].reshape({b, heads, d, h * w});
    auto v = qkv[2].reshape({b, heads, d, h * w});
    auto scores = torch::matmul(q.transpose(2, 3), k) * (1.0 / std::sqrt(double(d)));  // [b, heads, n, n]
    auto attn = scores.softmax(-1);
    auto out = torch::matmul(v, attn.transpose(2, 3));  // [b, heads, d, n]
    return x + to_out(out.reshape({b, c, h, w}));
}

DownsampleImpl::DownsampleImpl(int channels) {
    conv = register_module("conv", conv3x3(channels, channels, 2));
}

torch::Tensor DownsampleImpl::forward(const torch::Tensor& x) { return conv(x); }

UpsampleImpl::UpsampleImpl(int channels, int factor_) : factor(factor_) {
    conv = register_module("conv", conv3x3(channels, channels));
}

torch::Tensor UpsampleImpl::forward(const torch::Tensor& x) {
    auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                    .scale_factor(std::vector<double>{double(factor), double(factor)})
                                    .mode(torch::kNearest));
    return conv(up);
}

}  // namespace bdiff
