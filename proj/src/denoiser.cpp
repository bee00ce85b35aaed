#include "bdiff/denoiser.hpp"

#include <sstream>

#include "bdiff/errors.hpp"

namespace bdiff {

void DenoiserConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
    if (stages < 1) fail("stages must be >= 1");
    if (static_cast<int>(channel_mults.size()) != stages) {
        fail("channel_mults must have one entry per stage (" + std::to_string(stages) + ")");
    }
    if (base_channels < 1) fail("base_channels must be >= 1");
    for (int m : channel_mults)
        if (m < 1) fail("channel_mults entries must be >= 1");
    if (attention_heads < 1) fail("attention_heads must be >= 1");
    for (int s = 0; s < stages; ++s) {
        if (stage_channels(s) % attention_heads != 0) {
            fail("stage width " + std::to_string(stage_channels(s)) +
                 " not divisible by attention_heads");
        }
    }
    if (image_size < 4 || image_size % (1 << stages) != 0) {
        fail("image_size " + std::to_string(image_size) + " must be divisible by 2^stages");
    }
    const int enc = encoder_output_size();
    if (enc < 4 || enc % 4 != 0 || ((enc / 4) & (enc / 4 - 1)) != 0) {
        fail("image_size >> stages = " + std::to_string(enc) +
             " must be 4 times a power of two so the encoder tail reaches 4x4");
    }
}

EncoderModuleImpl::EncoderModuleImpl(int in_ch, int out_ch, int time_dim, int heads) {
    rb1_x = register_module("rb1_x", ResBlock(in_ch, out_ch, time_dim));
    rb1_g = register_module("rb1_g", ResBlock(in_ch, out_ch, time_dim));
    h_proj = register_module("h_proj", conv1x1(2 * out_ch, out_ch));
    rb2_g = register_module("rb2_g", ResBlock(out_ch, out_ch, time_dim));
    feedback = register_module("feedback", conv1x1(out_ch, out_ch));
    rb2_x = register_module("rb2_x", ResBlock(out_ch, out_ch, time_dim));
    att_x = register_module("att_x", LinearAttention(out_ch, heads));
    b_proj = register_module("b_proj", conv1x1(2 * out_ch, out_ch));
    att_g = register_module("att_g", LinearAttention(out_ch, heads));
    down_x = register_module("down_x", Downsample(out_ch));
    down_g = register_module("down_g", Downsample(out_ch));
}

EncoderStageOutput EncoderModuleImpl::forward(const torch::Tensor& x_in, const torch::Tensor& g_in,
                                              const torch::Tensor& t_x, const torch::Tensor& t_g,
                                              EncoderProbe* probe) {
    if (x_in.size(0) != g_in.size(0) || x_in.size(2) != g_in.size(2) ||
        x_in.size(3) != g_in.size(3)) {
        std::ostringstream msg;
        msg << "encoder module: noise input " << x_in.sizes() << " not aligned with guidance "
            << g_in.sizes();
        throw ShapeError(msg.str());
    }
    auto u1 = rb1_x(x_in, t_x);
    auto v1 = rb1_g(g_in, t_g);

    auto h = torch::cat({u1, v1}, 1);
    auto v2 = rb2_g(h_proj(h), t_g);

    auto f = feedback(v2);
    auto gated = u1 * f;
    auto u2 = rb2_x(gated, t_x);

    auto x_att = att_x(u2);
    auto b = torch::cat({x_att, v2}, 1);
    auto g_att = att_g(b_proj(b));

    if (probe) {
        probe->feedback = f;
        probe->gated_noise = gated;
    }
    return {down_x(x_att), down_g(g_att), h, b};
}

BottleneckImpl::BottleneckImpl(int channels, int time_dim, int heads) {
    rb1 = register_module("rb1", ResBlock(channels, channels, time_dim));
    self_att = register_module("self_att", SelfAttention(channels, heads));
    linear_att = register_module("linear_att", LinearAttention(channels, heads));
    fuse = register_module("fuse", conv1x1(2 * channels, channels));
    rb2 = register_module("rb2", ResBlock(channels, channels, time_dim));
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x_l, const torch::Tensor& g_l,
                                      const torch::Tensor& t_x) {
    auto z = rb1(torch::cat({x_l, g_l}, 1), t_x);
    auto s = use_self_attention ? self_att(z) : torch::zeros_like(z);
    auto l = use_linear_attention ? linear_att(z) : torch::zeros_like(z);
    z = fuse(torch::cat({s, l}, 1));
    return rb2(z, t_x);
}

DecoderModuleImpl::DecoderModuleImpl(int in_ch, int skip_ch, int out_ch, int time_dim, int heads) {
    up = register_module("up", Upsample(in_ch));
    rb1 = register_module("rb1", ResBlock(in_ch + skip_ch, out_ch, time_dim));
    rb2 = register_module("rb2", ResBlock(out_ch + skip_ch, out_ch, time_dim));
    att = register_module("att", LinearAttention(out_ch, heads));
}

torch::Tensor DecoderModuleImpl::forward(const torch::Tensor& d_in, const torch::Tensor& h,
                                         const torch::Tensor& b, const torch::Tensor& t_x) {
    auto d = up(d_in);
    auto check = [&](const torch::Tensor& skip, const char* name) {
        if (skip.size(0) != d.size(0) || skip.size(2) != d.size(2) || skip.size(3) != d.size(3)) {
            std::ostringstream msg;
            msg << "decoder module: skip " << name << " " << skip.sizes()
                << " does not match upsampled features " << d.sizes();
            throw ShapeError(msg.str());
        }
    };
    check(b, "b");
    check(h, "h");
    d = rb1(torch::cat({d, b}, 1), t_x);
    d = rb2(torch::cat({d, h}, 1), t_x);
    return att(d);
}

DenoiserImpl::DenoiserImpl(DenoiserConfig config) : cfg(std::move(config)) {
    cfg.validate();
    const int base = cfg.base_channels;
    const int tdim = cfg.time_dim();
    const int heads = cfg.attention_heads;

    stem_x = register_module("stem_x", conv3x3(1, base));
    stem_g = register_module("stem_g", conv3x3(3, base));
    time_x = register_module("time_x", TimeEmbedding(base, tdim));
    time_g = register_module("time_g", TimeEmbedding(base, tdim));

    encoders = register_module("encoders", torch::nn::ModuleList());
    int in_ch = base;
    for (int s = 0; s < cfg.stages; ++s) {
        const int out_ch = cfg.stage_channels(s);
        encoders->push_back(EncoderModule(in_ch, out_ch, tdim, heads));
        in_ch = out_ch;
    }

    const int deep = cfg.stage_channels(cfg.stages - 1);
    const int stride = cfg.tail_stride();
    auto tail = [&](const char* name) {
        return register_module(name, torch::nn::Conv2d(torch::nn::Conv2dOptions(deep, deep, 3)
                                                           .stride(stride)
                                                           .padding(1)));
    };
    tail_x = tail("tail_x");
    tail_g = tail("tail_g");

    bottleneck = register_module("bottleneck", Bottleneck(2 * deep, tdim, heads));
    if (stride > 1) {
        head_up = register_module("head_up", Upsample(2 * deep, stride));
    } else {
        head = register_module("head", conv3x3(2 * deep, 2 * deep));
    }

    // decoders[0] is the deepest module; it consumes the last encoder's skips.
    decoders = register_module("decoders", torch::nn::ModuleList());
    int d_ch = 2 * deep;
    for (int s = cfg.stages - 1; s >= 0; --s) {
        const int out_ch = cfg.stage_channels(s);
        decoders->push_back(DecoderModule(d_ch, 2 * out_ch, out_ch, tdim, heads));
        d_ch = out_ch;
    }

    final_block = register_module("final_block", ResBlock(d_ch + base, base, tdim));
    final_norm = register_module("final_norm", torch::nn::GroupNorm(norm_groups(base), base));
    final_conv = register_module("final_conv", conv3x3(base, 1));
}

torch::Tensor DenoiserImpl::time_embedding(const torch::Tensor& t, TimeBranch branch) {
    return branch == TimeBranch::noise ? time_x(t) : time_g(t);
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& g,
                                    const torch::Tensor& t, DenoiserTrace* trace) {
    const int64_t n = cfg.image_size;
    if (x_t.dim() != 4 || x_t.size(1) != 1 || x_t.size(2) != n || x_t.size(3) != n) {
        std::ostringstream msg;
        msg << "denoiser: noisy mask must be [B, 1, " << n << ", " << n << "], got " << x_t.sizes();
        throw ShapeError(msg.str());
    }
    if (g.dim() != 4 || g.size(0) != x_t.size(0) || g.size(1) != 3 || g.size(2) != n ||
        g.size(3) != n) {
        std::ostringstream msg;
        msg << "denoiser: guidance must be [" << x_t.size(0) << ", 3, " << n << ", " << n
            << "], got " << g.sizes();
        throw ShapeError(msg.str());
    }
    if (t.dim() != 1 || t.size(0) != x_t.size(0)) {
        throw ShapeError("denoiser: expected one timestep per batch sample");
    }

    auto t_x = time_x(t);
    auto t_g = time_g(t);

    auto x0 = stem_x(x_t);
    auto x = x0;
    auto gf = stem_g(g);

    std::vector<EncoderStageOutput> skips;
    skips.reserve(cfg.stages);
    for (const auto& m : *encoders) {
        auto out = m->as<EncoderModule>()->forward(x, gf, t_x, t_g);
        x = out.x_out;
        gf = out.g_out;
        skips.push_back(std::move(out));
    }

    x = tail_x(x);
    gf = tail_g(gf);
    if (trace) trace->tail_shape = x.sizes().vec();

    auto d = bottleneck(x, gf, t_x);
    if (trace) trace->bottleneck_shape = d.sizes().vec();
    d = head_up ? head_up(d) : head(d);

    for (std::size_t i = 0; i < decoders->size(); ++i) {
        const auto& skip = skips[skips.size() - 1 - i];
        d = decoders[i]->as<DecoderModule>()->forward(d, skip.h, skip.b, t_x);
    }

    d = final_block(torch::cat({d, x0}, 1), t_x);
    auto eps = final_conv(torch::silu(final_norm(d)));
    if (trace) trace->stages = std::move(skips);
    return eps;
}

torch::Tensor denoise(Denoiser& model, const torch::Tensor& x_t, const torch::Tensor& g, int t) {
    if (x_t.dim() != 2 || g.dim() != 3) {
        throw ShapeError("denoise: expected an [H, W] mask and a [3, H, W] guidance image");
    }
    auto x = x_t.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
    auto gi = g.to(torch::kFloat32).unsqueeze(0);
    auto ts = torch::full({1}, t, torch::kLong);
    return model->forward(x, gi, ts).squeeze(0).squeeze(0);
}

}  // namespace bdiff
