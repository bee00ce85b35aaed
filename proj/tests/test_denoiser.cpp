#include "testing.hpp"

#include "bdiff/denoiser.hpp"
#include "bdiff/errors.hpp"

using namespace bdiff;

namespace {

DenoiserConfig small64() {
    DenoiserConfig c;
    c.image_size = 64;
    c.stages = 3;
    c.base_channels = 8;
    c.channel_mults = {1, 2, 4};
    c.attention_heads = 4;
    return c;
}

DenoiserConfig small128() {
    DenoiserConfig c;
    c.image_size = 128;
    c.stages = 4;
    c.base_channels = 8;
    c.channel_mults = {1, 2, 4, 8};
    c.attention_heads = 4;
    return c;
}

struct Inputs {
    torch::Tensor x, g, t;
};

Inputs inputs(int batch, int size) {
    return {torch::randn({batch, 1, size, size}), torch::rand({batch, 3, size, size}) * 2 - 1,
            torch::randint(1, 251, {batch}, torch::kLong)};
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(small64().validate());
    CHECK_NOTHROW(small128().validate());
    auto c = small64();
    c.channel_mults = {1, 2};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small64();
    c.image_size = 48;  // 48 >> 3 = 6, not 4 * 2^k
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small64();
    c.attention_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(small128().tail_stride() == 2);
    CHECK(small64().tail_stride() == 2);
}

TEST_CASE("output shape equals input shape") {
    torch::manual_seed(0);
    for (auto cfg : {small64(), small128()}) {
        Denoiser net(cfg);
        auto in = inputs(2, cfg.image_size);
        DenoiserTrace trace;
        auto out = net->forward(in.x, in.g, in.t, &trace);
        CHECK(out.sizes() == in.x.sizes());
        CHECK(torch::isfinite(out).all().item<bool>());
        REQUIRE(trace.tail_shape.size() == 4);
        CHECK(trace.tail_shape[2] == 4);
        CHECK(trace.tail_shape[3] == 4);
        REQUIRE(static_cast<int>(trace.stages.size()) == cfg.stages);
        for (int s = 0; s < cfg.stages; ++s) {
            const auto& st = trace.stages[s];
            CHECK(st.x_out.size(2) == cfg.image_size >> (s + 1));
            CHECK(st.g_out.size(2) == cfg.image_size >> (s + 1));
            CHECK(st.x_out.size(1) == cfg.stage_channels(s));
            CHECK(st.h.size(2) == cfg.image_size >> s);
            CHECK(st.b.size(2) == cfg.image_size >> s);
        }
    }
}

TEST_CASE("shape errors") {
    Denoiser net(small64());
    auto in = inputs(1, 64);
    CHECK_THROWS_AS(net->forward(in.x, in.g.slice(1, 0, 2), in.t), ShapeError);
    CHECK_THROWS_AS(net->forward(torch::randn({1, 1, 32, 32}), in.g, in.t), ShapeError);
    CHECK_THROWS_AS(net->forward(in.x, in.g, torch::ones({2}, torch::kLong)), ShapeError);
}

TEST_CASE("denoise helper matches the batched forward") {
    torch::manual_seed(1);
    Denoiser net(small64());
    net->eval();
    auto in = inputs(1, 64);
    torch::NoGradGuard ng;
    auto a = denoise(net, in.x[0][0], in.g[0], static_cast<int>(in.t[0].item<int64_t>()));
    auto b = net->forward(in.x, in.g, in.t)[0][0];
    CHECK(torch::allclose(a, b, 1e-6, 1e-6));
}

TEST_CASE("batch elements are independent") {
    torch::manual_seed(2);
    Denoiser net(small64());
    auto in = inputs(3, 64);
    torch::NoGradGuard ng;
    auto full = net->forward(in.x, in.g, in.t);
    auto one = net->forward(in.x.slice(0, 1, 2), in.g.slice(0, 1, 2), in.t.slice(0, 1, 2));
    CHECK(torch::allclose(full.slice(0, 1, 2), one, 1e-5, 1e-5));
}

TEST_CASE("time embeddings of the two branches are separate") {
    torch::manual_seed(3);
    Denoiser net(small64());
    auto t = torch::tensor({1, 100, 250}, torch::kLong);
    auto ex = net->time_embedding(t, TimeBranch::noise);
    auto eg = net->time_embedding(t, TimeBranch::guidance);
    CHECK((ex.sizes() == std::vector<int64_t>{3, small64().time_dim()}));
    CHECK_FALSE(torch::allclose(ex, eg));
    CHECK_FALSE(torch::allclose(ex[0], ex[2]));
}

TEST_CASE("encoder feedback gates the noise path") {
    torch::manual_seed(4);
    EncoderModule em(8, 16, 32, 4);
    auto x = torch::randn({2, 8, 16, 16});
    auto g = torch::randn({2, 8, 16, 16});
    auto tx = torch::randn({2, 32});
    auto tg = torch::randn({2, 32});
    EncoderProbe probe;
    auto out = em->forward(x, g, tx, tg, &probe);
    CHECK((out.x_out.sizes() == std::vector<int64_t>{2, 16, 8, 8}));
    CHECK((probe.feedback.sizes() == std::vector<int64_t>{2, 16, 16, 16}));
    CHECK(probe.gated_noise.abs().sum().item<double>() > 0.0);

    torch::NoGradGuard ng;
    em->feedback->weight.zero_();
    em->feedback->bias.zero_();
    EncoderProbe zeroed;
    em->forward(x, g, tx, tg, &zeroed);
    CHECK(zeroed.feedback.abs().max().item<double>() == 0.0);
    CHECK(zeroed.gated_noise.abs().max().item<double>() == 0.0);
}

TEST_CASE("gradient audit") {
    torch::manual_seed(5);
    Denoiser net(small64());
    auto in = inputs(2, 64);
    auto out = net->forward(in.x, in.g, in.t);
    (out - torch::randn_like(out)).square().mean().backward();
    int64_t total = 0, nonzero = 0;
    std::vector<std::string> dead;
    for (const auto& p : net->named_parameters()) {
        total += p.value().numel();
        if (!p.value().grad().defined()) {
            dead.push_back(p.key());
            continue;
        }
        const auto nz = (p.value().grad() != 0).sum().item<int64_t>();
        nonzero += nz;
        if (nz == 0) dead.push_back(p.key());
    }
    INFO("parameters without gradient: " << dead.size());
    CHECK(dead.empty());
    CHECK(static_cast<double>(nonzero) / static_cast<double>(total) >= 0.999);
}

TEST_CASE("bottleneck ablation switches") {
    torch::manual_seed(6);
    Bottleneck bn(16, 32, 4);
    auto xl = torch::randn({1, 8, 4, 4});
    auto gl = torch::randn({1, 8, 4, 4});
    auto t = torch::randn({1, 32});
    torch::NoGradGuard ng;
    auto both = bn->forward(xl, gl, t);
    bn->use_self_attention = false;
    auto lin = bn->forward(xl, gl, t);
    bn->use_self_attention = true;
    bn->use_linear_attention = false;
    auto self = bn->forward(xl, gl, t);
    CHECK(both.sizes() == lin.sizes());
    CHECK_FALSE(torch::allclose(both, lin));
    CHECK_FALSE(torch::allclose(both, self));
}

TEST_CASE("attention blocks") {
    torch::manual_seed(7);
    SUBCASE("self-attention over a single token passes values through") {
        SelfAttention sa(8, 2);
        auto x = torch::randn({1, 8, 1, 1});
        torch::NoGradGuard ng;
        auto v = sa->to_qkv(sa->norm(x)).chunk(3, 1)[2];
        CHECK(torch::allclose(sa->forward(x), x + sa->to_out(v), 1e-6, 1e-6));
    }
    SUBCASE("self-attention is permutation equivariant over positions") {
        SelfAttention sa(8, 2);
        auto x = torch::randn({1, 8, 1, 6});
        auto perm = torch::tensor({3, 0, 5, 1, 4, 2}, torch::kLong);
        torch::NoGradGuard ng;
        auto a = sa->forward(x).index_select(3, perm);
        auto b = sa->forward(x.index_select(3, perm));
        CHECK(torch::allclose(a, b, 1e-5, 1e-5));
    }
    SUBCASE("linear attention matches a direct evaluation") {
        LinearAttention la(8, 2);
        auto x = torch::randn({1, 8, 3, 3});
        torch::NoGradGuard ng;
        auto qkv = la->to_qkv(la->norm(x)).reshape({3, 2, 4, 9});
        auto out = torch::zeros({2, 4, 9});
        for (int h = 0; h < 2; ++h) {
            auto q = qkv[0][h].softmax(0) / 2.0;  // softmax over channels, scaled by 1/sqrt(4)
            auto k = qkv[1][h].softmax(1);        // softmax over positions
            auto v = qkv[2][h];
            for (int n = 0; n < 9; ++n)
                for (int e = 0; e < 4; ++e)
                    for (int d = 0; d < 4; ++d)
                        for (int m = 0; m < 9; ++m)
                            out[h][e][n] += q[d][n] * k[d][m] * v[e][m];
        }
        auto expected = x + la->out_norm(la->to_out(out.reshape({1, 8, 3, 3})));
        CHECK(torch::allclose(la->forward(x), expected, 1e-5, 1e-5));
    }
    CHECK(norm_groups(12) == 4);
    CHECK(norm_groups(64) == 8);
    CHECK(norm_groups(3) == 1);
}
