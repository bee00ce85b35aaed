#include "bdiff/diffusion.hpp"

#include <cmath>
#include <sstream>

namespace bdiff {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) {
        throw ConfigError("noise schedule: steps must be >= 1, got " + std::to_string(steps));
    }
    if (!(beta_start > 0.0)) {
        throw ConfigError("noise schedule: beta_start must be > 0, got " + std::to_string(beta_start));
    }
    if (!(beta_end < 1.0)) {
        throw ConfigError("noise schedule: beta_end must be < 1, got " + std::to_string(beta_end));
    }
    if (!(beta_start <= beta_end)) {
        std::ostringstream msg;
        msg << "noise schedule: beta_start (" << beta_start << ") must not exceed beta_end ("
            << beta_end << ")";
        throw ConfigError(msg.str());
    }

    NoiseSchedule s;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.betas_.resize(steps);
    s.alphas_.resize(steps);
    s.alpha_bars_.resize(steps);
    double running = 1.0;
    for (int i = 0; i < steps; ++i) {
        // Convex combination keeps both endpoints exact.
        const double f = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        s.betas_[i] = beta_start * (1.0 - f) + beta_end * f;
        s.alphas_[i] = 1.0 - s.betas_[i];
        running *= s.alphas_[i];
        s.alpha_bars_[i] = running;
    }
    return s;
}

std::size_t NoiseSchedule::checked(int t) const {
    if (t < 1 || t > steps()) {
        throw IndexError("timestep " + std::to_string(t) + " outside [1, " +
                         std::to_string(steps()) + "]");
    }
    return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::alpha_bar_prev(int t) const {
    const auto i = checked(t);
    return i == 0 ? 1.0 : alpha_bars_[i - 1];
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
    return NoiseSchedule::linear(steps, beta_start, beta_end);
}

double alpha_bar_at(const NoiseSchedule& sched, int t) { return sched.alpha_bar(t); }

namespace {

void require_same_sizes(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) {
        std::ostringstream msg;
        msg << what << ": shape " << a.sizes() << " vs " << b.sizes();
        throw ShapeError(msg.str());
    }
}

}  // namespace

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                       const NoiseSchedule& sched) {
    require_same_sizes(x0, eps, "q_sample");
    const double ab = sched.alpha_bar(t);
    return x0 * std::sqrt(ab) + eps * std::sqrt(1.0 - ab);
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& sched) {
    require_same_sizes(x0, eps, "q_sample");
    if (t.dim() != 1 || t.size(0) != x0.size(0)) {
        throw ShapeError("q_sample: timestep tensor must have one entry per batch sample");
    }
    auto ts = t.to(torch::kLong).contiguous();
    const auto* tp = ts.data_ptr<int64_t>();
    std::vector<double> a(ts.numel()), b(ts.numel());
    for (int64_t i = 0; i < ts.numel(); ++i) {
        const double ab = sched.alpha_bar(static_cast<int>(tp[i]));
        a[i] = std::sqrt(ab);
        b[i] = std::sqrt(1.0 - ab);
    }
    std::vector<int64_t> shape(x0.dim(), 1);
    shape[0] = x0.size(0);
    const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto ca = torch::tensor(a, opts).to(x0.scalar_type()).view(shape);
    auto cb = torch::tensor(b, opts).to(x0.scalar_type()).view(shape);
    return x0 * ca + eps * cb;
}

torch::Tensor q_step(const torch::Tensor& x_prev, int t, const torch::Tensor& eps,
                     const NoiseSchedule& sched) {
    require_same_sizes(x_prev, eps, "q_step");
    const double beta = sched.beta(t);
    return x_prev * std::sqrt(1.0 - beta) + eps * std::sqrt(beta);
}

torch::Tensor p_sample_step(const torch::Tensor& xt, int t, const torch::Tensor& eps_pred,
                            const torch::Tensor& g_noise, const NoiseSchedule& sched,
                            const ReverseStepOptions& options) {
    require_same_sizes(xt, eps_pred, "p_sample_step");
    const double beta = sched.beta(t);
    const double alpha = sched.alpha(t);
    const double ab = sched.alpha_bar(t);
    const bool has_noise = g_noise.defined();
    if (has_noise) {
        require_same_sizes(xt, g_noise, "p_sample_step noise");
        if (t == 1 && g_noise.ne(0).any().item<bool>()) {
            throw ContractViolation("p_sample_step: noise must be zero at t = 1");
        }
    }

    torch::Tensor mean;
    if (!options.clamp_x0) {
        mean = (xt - eps_pred * (beta / std::sqrt(1.0 - ab))) * (1.0 / std::sqrt(alpha));
    } else {
        // Posterior mean written through the x0 estimate so it can be clamped.
        const double ab_prev = sched.alpha_bar_prev(t);
        auto x0_hat = ((xt - eps_pred * std::sqrt(1.0 - ab)) * (1.0 / std::sqrt(ab))).clamp(-1.0, 1.0);
        const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double ct = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
        mean = x0_hat * c0 + xt * ct;
    }
    if (!has_noise) return mean;
    return mean + g_noise * std::sqrt(beta);
}

torch::Tensor to_model_space(const LabelMask& mask) {
    require_binary(mask, "to_model_space");
    auto out = torch::empty({mask.height(), mask.width()}, torch::kFloat64);
    auto* p = out.data_ptr<double>();
    const auto& v = mask.values();
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = v[i] ? 1.0 : -1.0;
    return out;
}

LabelMask to_label_space(const torch::Tensor& model, double threshold) {
    if (model.dim() != 2) throw ShapeError("to_label_space expects an [H, W] tensor");
    auto m = model.to(torch::kFloat64).contiguous();
    LabelMask out(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)));
    const auto* p = m.data_ptr<double>();
    auto& v = out.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i] > threshold ? 1 : 0;
    return out;
}

}  // namespace bdiff
