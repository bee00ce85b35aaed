#include "bdiff/inference.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include "bdiff/errors.hpp"

namespace bdiff {

void EnsembleConfig::validate() const {
    if (n_samples < 1) throw ConfigError("ensemble: n_samples must be >= 1");
    if (max_batch < 1) throw ConfigError("ensemble: max_batch must be >= 1");
}

at::Generator chain_generator(std::uint64_t seed) {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

namespace {

torch::Tensor sample_batch(const torch::Tensor& guidance, Denoiser& model, const NoiseSchedule& sched,
                           std::span<at::Generator> gens, const ReverseStepOptions& reverse) {
    const auto b = guidance.size(0);
    const auto h = guidance.size(2);
    const auto w = guidance.size(3);
    auto draw = [&] {
        std::vector<torch::Tensor> parts;
        parts.reserve(b);
        for (auto& g : gens) parts.push_back(torch::randn({1, 1, h, w}, g, torch::kFloat32));
        return torch::cat(parts, 0);
    };

    auto x = draw();
    const torch::Tensor none;
    for (int t = sched.steps(); t >= 1; --t) {
        auto ts = torch::full({b}, t, torch::kLong);
        auto eps = model->forward(x, guidance, ts);
        x = p_sample_step(x, t, eps, t > 1 ? draw() : none, sched, reverse);
    }
    return x.squeeze(1);
}

}  // namespace

torch::Tensor sample_masks(const torch::Tensor& guidance, Denoiser& model, const NoiseSchedule& sched,
                           std::vector<at::Generator>& generators, const SamplerOptions& options) {
    if (guidance.dim() != 4 || guidance.size(1) != 3) {
        throw ShapeError("sample_masks: guidance must be [B, 3, H, W]");
    }
    if (static_cast<std::size_t>(guidance.size(0)) != generators.size()) {
        throw ShapeError("sample_masks: need one generator per guidance image");
    }
    torch::NoGradGuard no_grad;
    model->eval();
    auto g = guidance.to(torch::kFloat32);
    const int64_t n = g.size(0);
    const int64_t chunk = std::max(1, options.max_batch);
    std::vector<torch::Tensor> out;
    for (int64_t start = 0; start < n; start += chunk) {
        const int64_t end = std::min(n, start + chunk);
        std::span<at::Generator> gens(generators.data() + start, end - start);
        out.push_back(sample_batch(g.slice(0, start, end), model, sched, gens, options.reverse));
    }
    return torch::cat(out, 0);
}

torch::Tensor sample_mask(const torch::Tensor& guidance, Denoiser& model, const NoiseSchedule& sched,
                          at::Generator& rng, const SamplerOptions& options) {
    if (guidance.dim() != 3) throw ShapeError("sample_mask: guidance must be [3, H, W]");
    std::vector<at::Generator> gens{rng};
    return sample_masks(guidance.unsqueeze(0), model, sched, gens, options).squeeze(0);
}

EnsembleResult fuse_chains(const std::vector<torch::Tensor>& chains, double threshold,
                           bool average_binarized) {
    if (chains.empty()) throw ValidationError("fuse_chains: no chains to fuse");
    auto sum = torch::zeros_like(chains.front(), torch::kFloat64);
    for (const auto& c : chains) {
        if (c.sizes() != chains.front().sizes()) throw ShapeError("fuse_chains: chain shapes differ");
        auto v = c.to(torch::kFloat64);
        sum += average_binarized ? torch::where(v > threshold, 1.0, -1.0).to(torch::kFloat64) : v;
    }
    EnsembleResult r;
    r.mean = sum / static_cast<double>(chains.size());
    r.mask = to_label_space(r.mean, threshold);
    return r;
}

std::vector<EnsembleResult> ensemble_predict_many(const torch::Tensor& guidance, Denoiser& model,
                                                  const NoiseSchedule& sched, const EnsembleConfig& ec,
                                                  const ReverseStepOptions& reverse) {
    ec.validate();
    if (guidance.dim() != 4 || guidance.size(1) != 3) {
        throw ShapeError("ensemble_predict: guidance must be [N, 3, H, W]");
    }
    const int64_t n_images = guidance.size(0);
    const int k = ec.n_samples;
    // Row image * k + chain.
    auto tiled = guidance.repeat_interleave(k, 0);
    std::vector<at::Generator> gens;
    gens.reserve(n_images * k);
    for (int64_t i = 0; i < n_images; ++i)
        for (int c = 0; c < k; ++c) gens.push_back(chain_generator(ec.seed + static_cast<std::uint64_t>(c)));

    SamplerOptions opts;
    opts.reverse = reverse;
    opts.max_batch = ec.max_batch;
    auto x0 = sample_masks(tiled, model, sched, gens, opts);

    std::vector<EnsembleResult> results;
    results.reserve(n_images);
    for (int64_t i = 0; i < n_images; ++i) {
        std::vector<torch::Tensor> chains;
        for (int c = 0; c < k; ++c) chains.push_back(x0[i * k + c]);
        results.push_back(fuse_chains(chains, ec.threshold, ec.average_binarized));
    }
    return results;
}

EnsembleResult ensemble_predict(const torch::Tensor& guidance, Denoiser& model,
                                const NoiseSchedule& sched, const EnsembleConfig& ec,
                                const ReverseStepOptions& reverse) {
    if (guidance.dim() != 3) throw ShapeError("ensemble_predict: guidance must be [3, H, W]");
    return std::move(ensemble_predict_many(guidance.unsqueeze(0), model, sched, ec, reverse).front());
}

}  // namespace bdiff
