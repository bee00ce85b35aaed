#include "bdiff/training.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "bdiff/config.hpp"

namespace bdiff {

namespace fs = std::filesystem;

const char* to_string(LossVariant v) {
    return v == LossVariant::baseline ? "baseline" : "weighted";
}

LossVariant parse_loss_variant(const std::string& s) {
    if (s == "baseline") return LossVariant::baseline;
    if (s == "weighted") return LossVariant::weighted;
    throw ConfigError("unknown loss variant '" + s + "'");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("training: " + m); };
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(base_lr > 0.0)) fail("base_lr must be > 0");
    if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) fail("plateau_factor must be in (0, 1]");
    if (plateau_patience < 1) fail("plateau_patience must be >= 1");
    if (total_iterations < 0) fail("total_iterations must be >= 0");
    if (!(alpha >= 0.0)) fail("alpha must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail("ema_decay must be in [0, 1)");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

// ---------------------------------------------------------------------------
// Losses

namespace {

void require_same_sizes(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) {
        std::ostringstream msg;
        msg << what << ": shape " << a.sizes() << " vs " << b.sizes();
        throw ShapeError(msg.str());
    }
}

}  // namespace

torch::Tensor loss_baseline(const torch::Tensor& eps, const torch::Tensor& eps_pred) {
    require_same_sizes(eps, eps_pred, "loss_baseline");
    return (eps - eps_pred).square().mean();
}

torch::Tensor loss_weighted(const torch::Tensor& eps, const torch::Tensor& eps_pred,
                            const torch::Tensor& weights, double alpha) {
    require_same_sizes(eps, eps_pred, "loss_weighted");
    if (!(alpha >= 0.0)) throw ConfigError("loss_weighted: alpha must be >= 0");
    if (weights.dim() > eps.dim()) throw ShapeError("loss_weighted: weights have too many dimensions");
    for (int64_t i = 1; i <= weights.dim(); ++i) {
        const auto ws = weights.size(-i), es = eps.size(-i);
        if (ws != es && ws != 1) throw ShapeError("loss_weighted: weights do not broadcast to the error");
    }
    return ((weights * alpha + 1.0) * (eps - eps_pred).square()).mean();
}

double loss_baseline(const Grid<double>& eps, const Grid<double>& eps_pred) {
    require_same_shape(eps, eps_pred, "loss_baseline");
    double sum = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = eps.values()[i] - eps_pred.values()[i];
        sum += d * d;
    }
    return sum / static_cast<double>(eps.size());
}

double loss_weighted(const Grid<double>& eps, const Grid<double>& eps_pred,
                     const BoundaryWeightMap& w, double alpha) {
    require_same_shape(eps, eps_pred, "loss_weighted");
    require_same_shape(eps, w.weights, "loss_weighted");
    if (!(alpha >= 0.0)) throw ConfigError("loss_weighted: alpha must be >= 0");
    double sum = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = eps.values()[i] - eps_pred.values()[i];
        sum += (1.0 + alpha * w.weights.values()[i]) * (d * d);
    }
    return sum / static_cast<double>(eps.size());
}

torch::Tensor batch_weight_maps(const std::vector<const Sample*>& batch, const torch::Tensor& t,
                                const GammaSchedule& gs, DistanceMapCache* cache) {
    if (t.dim() != 1 || static_cast<std::size_t>(t.size(0)) != batch.size()) {
        throw ShapeError("batch_weight_maps: expected one timestep per sample");
    }
    auto ts = t.to(torch::kLong).contiguous();
    std::vector<torch::Tensor> maps;
    maps.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const int step = static_cast<int>(ts.data_ptr<int64_t>()[i]);
        auto w = cache ? cache->weight_map(batch[i]->mask, step, gs) : weight_map(batch[i]->mask, step, gs);
        auto m = torch::empty({1, w.weights.height(), w.weights.width()}, torch::kFloat32);
        auto* p = m.data_ptr<float>();
        for (std::size_t k = 0; k < w.weights.size(); ++k) p[k] = static_cast<float>(w.weights.values()[k]);
        maps.push_back(m);
    }
    return torch::stack(maps);
}

// ---------------------------------------------------------------------------
// Plateau scheduler

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience)
    : lr_(lr), factor_(factor), patience_(patience) {}

double PlateauScheduler::step(double epoch_loss) {
    if (epoch_loss < best_) {
        best_ = epoch_loss;
        bad_epochs_ = 0;
    } else if (++bad_epochs_ >= patience_) {
        lr_ *= factor_;
        bad_epochs_ = 0;
    }
    return lr_;
}

void PlateauScheduler::restore(double lr, double best, int bad_epochs) {
    lr_ = lr;
    best_ = best;
    bad_epochs_ = bad_epochs;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

constexpr std::uint64_t kNoiseStream = 0x6e6f697365;
constexpr std::uint64_t kShuffleStream = 0x73687566;
constexpr std::uint64_t kAugmentStream = 0x61756775;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::int64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

std::int64_t steps_per_epoch(std::size_t n, int batch) {
    return static_cast<std::int64_t>((n + batch - 1) / batch);
}

}  // namespace

Trainer::Trainer(DenoiserConfig model_cfg, DiffusionConfig diffusion, TrainConfig train,
                 AugmentPolicy policy)
    : model_cfg_(std::move(model_cfg)),
      diffusion_(diffusion),
      train_(train),
      policy_(policy),
      schedule_(diffusion.schedule()),
      gamma_(train.gamma_schedule(diffusion.steps)),
      generator_(at::make_generator<at::CPUGeneratorImpl>(derive_seed(train.seed, kNoiseStream, 0))),
      plateau_(train.base_lr, train.plateau_factor, train.plateau_patience) {
    model_cfg_.validate();
    train_.validate();
    gamma_.validate();
    torch::manual_seed(train_.seed);
    model_ = Denoiser(model_cfg_);
    optimizer_ = std::make_unique<torch::optim::Adam>(model_->parameters(),
                                                      torch::optim::AdamOptions(train_.base_lr));
    if (train_.ema_decay > 0.0) {
        for (const auto& p : model_->named_parameters()) ema_[p.key()] = p.value().detach().clone();
    }
}

void Trainer::set_lr(double lr) {
    for (auto& group : optimizer_->param_groups()) {
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
}

void Trainer::update_ema() {
    if (ema_.empty()) return;
    torch::NoGradGuard no_grad;
    const double d = train_.ema_decay;
    for (const auto& p : model_->named_parameters()) {
        ema_[p.key()].mul_(d).add_(p.value().detach(), 1.0 - d);
    }
}

TrainStats Trainer::train_step(const std::vector<const Sample*>& batch) {
    if (batch.empty()) throw ValidationError("train_step: empty batch");
    model_->train();
    const auto b = static_cast<int64_t>(batch.size());
    auto x0 = stack_masks(batch);
    auto g = stack_images(batch);

    auto t = torch::randint(1, schedule_.steps() + 1, {b}, generator_, torch::kLong);
    auto eps = torch::randn(x0.sizes(), generator_, torch::kFloat32);
    auto xt = q_sample(x0, t, eps, schedule_);

    auto eps_pred = model_->forward(xt, g, t);
    torch::Tensor loss;
    if (train_.loss_variant == LossVariant::weighted) {
        auto w = batch_weight_maps(batch, t, gamma_, &cache_);
        loss = loss_weighted(eps, eps_pred, w, train_.alpha);
    } else {
        loss = loss_baseline(eps, eps_pred);
    }

    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss " << value << " at iteration " << iteration_ + 1 << " (t =";
        for (int64_t i = 0; i < b; ++i) msg << ' ' << t[i].item<int64_t>();
        msg << ")";
        throw NonFiniteLoss(msg.str());
    }

    optimizer_->zero_grad();
    loss.backward();
    optimizer_->step();
    ++iteration_;
    update_ema();

    TrainStats s;
    s.iteration = iteration_;
    s.loss = value;
    s.lr = plateau_.lr();
    s.epoch = epoch_;
    return s;
}

std::vector<const Sample*> Trainer::next_batch(const Dataset& data) {
    const auto n = data.size();
    if (batch_in_epoch_ == 0 || order_.size() != n) order_ = epoch_order(n, train_.seed, epoch_);
    const std::size_t start = static_cast<std::size_t>(batch_in_epoch_) * train_.batch_size;
    const std::size_t end = std::min(n, start + train_.batch_size);

    std::vector<const Sample*> batch;
    const bool do_augment = train_.augment && !policy_.is_identity();
    augmented_.clear();
    augmented_.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
        const Sample& s = data[order_[i]];
        if (do_augment) {
            std::mt19937_64 rng(derive_seed(train_.seed, kAugmentStream + static_cast<std::uint64_t>(epoch_),
                                            order_[i]));
            augmented_.push_back(augment(s, policy_, rng));
        } else {
            batch.push_back(&s);
        }
    }
    if (do_augment) {
        for (const auto& s : augmented_) batch.push_back(&s);
    }
    return batch;
}

TrainStats Trainer::step(const Dataset& data) {
    if (data.empty()) throw ValidationError("training dataset is empty");
    auto batch = next_batch(data);
    auto stats = train_step(batch);
    epoch_loss_sum_ += stats.loss * static_cast<double>(batch.size());
    epoch_loss_count_ += static_cast<std::int64_t>(batch.size());
    if (++batch_in_epoch_ >= steps_per_epoch(data.size(), train_.batch_size)) {
        const double mean = epoch_loss_sum_ / static_cast<double>(epoch_loss_count_);
        set_lr(plateau_.step(mean));
        if (mean < best_loss_) best_loss_ = mean;
        ++epoch_;
        batch_in_epoch_ = 0;
        epoch_loss_sum_ = 0.0;
        epoch_loss_count_ = 0;
    }
    stats.epoch = epoch_;
    stats.lr = plateau_.lr();
    return stats;
}

CheckpointRecord Trainer::fit(const Dataset& data, const FitOptions& options) {
    if (data.empty()) throw ValidationError("fit: training dataset is empty");
    std::error_code ec;
    fs::create_directories(options.output_dir, ec);
    if (ec) throw IoError("cannot create " + options.output_dir.string() + ": " + ec.message());

    CheckpointRecord rec;
    rec.best = options.output_dir / "best.ckpt";
    rec.last = options.output_dir / "last.ckpt";
    bool best_written = false;

    while (iteration_ < train_.total_iterations) {
        const double best_before = best_loss_;
        auto stats = step(data);
        if (options.metrics_log) {
            *options.metrics_log << std::setprecision(10) << "{\"iteration\":" << stats.iteration
                                 << ",\"epoch\":" << stats.epoch << ",\"loss\":" << stats.loss
                                 << ",\"lr\":" << stats.lr << "}\n";
        }
        if (best_loss_ < best_before) {
            save(rec.best, options.run_config_json);
            best_written = true;
        }
        if (train_.checkpoint_every > 0 && iteration_ % train_.checkpoint_every == 0) {
            save(rec.last, options.run_config_json);
        }
        if (options.on_step && !options.on_step(stats)) break;
    }
    if (options.metrics_log) options.metrics_log->flush();

    save(rec.last, options.run_config_json);
    if (!best_written && !fs::exists(rec.best)) save(rec.best, options.run_config_json);
    rec.iterations = iteration_;
    rec.best_loss = best_loss_;
    return rec;
}

std::map<std::string, torch::Tensor> Trainer::inference_parameters() const {
    if (!ema_.empty()) return ema_;
    std::map<std::string, torch::Tensor> out;
    for (const auto& p : model_->named_parameters()) out[p.key()] = p.value().detach();
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
// A pickled dict (readable from Python with torch.load) holding:
//   format_version : int
//   meta           : JSON string {model, diffusion, iteration, run_config}
//   params         : {hierarchical parameter name -> tensor}
//   ema            : {name -> tensor}, empty when EMA is off
//   adam_exp_avg, adam_exp_avg_sq : {name -> tensor}
//   adam_step      : {name -> int}
//   rng            : noise generator state
//   trainer        : {epoch, batch_in_epoch, epoch_loss_sum, epoch_loss_count,
//                     best_loss, lr, plateau_best, plateau_bad}

namespace {

using TensorDict = c10::Dict<std::string, at::Tensor>;
using GenericDict = c10::impl::GenericDict;

std::string meta_json(const DenoiserConfig& model, const DiffusionConfig& diffusion,
                      std::int64_t iteration, const std::string& run_config) {
    nlohmann::json j{{"model", to_json(model)},
                     {"diffusion", to_json(diffusion)},
                     {"iteration", iteration}};
    if (!run_config.empty()) j["run_config"] = nlohmann::json::parse(run_config);
    return j.dump();
}

void write_bytes(const fs::path& path, const std::vector<char>& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write checkpoint " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

GenericDict read_container(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    c10::IValue root;
    try {
        root = torch::pickle_load(bytes);
    } catch (const c10::Error& e) {
        throw CheckpointError("checkpoint " + path.string() + " is not a valid container");
    }
    if (!root.isGenericDict()) throw CheckpointError("checkpoint " + path.string() + " has no root dict");
    auto dict = root.toGenericDict();
    if (!dict.contains("format_version") || !dict.at("format_version").isInt()) {
        throw CheckpointError("checkpoint " + path.string() + " carries no format version");
    }
    const auto version = dict.at("format_version").toInt();
    if (version != CheckpointMeta::kFormatVersion) {
        throw CheckpointError("checkpoint " + path.string() + " has format version " +
                              std::to_string(version) + ", this build reads version " +
                              std::to_string(CheckpointMeta::kFormatVersion));
    }
    return dict;
}

CheckpointMeta parse_meta(const GenericDict& dict, const fs::path& path) {
    auto j = nlohmann::json::parse(dict.at("meta").toStringRef(), nullptr, false);
    if (j.is_discarded()) throw CheckpointError("checkpoint " + path.string() + " has corrupt metadata");
    std::vector<std::string> errors;
    CheckpointMeta m;
    m.model = denoiser_config_from_json(j.value("model", nlohmann::json::object()), errors);
    m.diffusion = diffusion_config_from_json(j.value("diffusion", nlohmann::json::object()), errors);
    m.iteration = j.value("iteration", std::int64_t{0});
    if (j.contains("run_config")) m.run_config_json = j["run_config"].dump();
    if (!errors.empty()) {
        throw CheckpointError("checkpoint " + path.string() + " metadata: " + errors.front());
    }
    return m;
}

TensorDict tensor_dict(const GenericDict& dict, const char* key) {
    if (!dict.contains(key)) return TensorDict();
    return c10::impl::toTypedDict<std::string, at::Tensor>(dict.at(key).toGenericDict());
}

void copy_parameters(Denoiser& model, const TensorDict& params, const fs::path& path) {
    torch::NoGradGuard no_grad;
    for (auto& p : model->named_parameters()) {
        if (!params.contains(p.key())) {
            throw CheckpointError("checkpoint " + path.string() + " lacks parameter " + p.key());
        }
        const auto& src = params.at(p.key());
        if (src.sizes() != p.value().sizes()) {
            throw CheckpointError("checkpoint " + path.string() + ": parameter " + p.key() +
                                  " has a different shape");
        }
        p.value().copy_(src);
    }
}

bool same_model(const DenoiserConfig& a, const DenoiserConfig& b) {
    return to_json(a) == to_json(b);
}

}  // namespace

void Trainer::save(const fs::path& path, const std::string& run_config_json) const {
    GenericDict root(c10::StringType::get(), c10::AnyType::get());
    root.insert("format_version", static_cast<int64_t>(CheckpointMeta::kFormatVersion));
    root.insert("meta", meta_json(model_cfg_, diffusion_, iteration_, run_config_json));

    TensorDict params, ema, exp_avg, exp_avg_sq;
    c10::Dict<std::string, int64_t> adam_step;
    auto& state = optimizer_->state();
    for (const auto& p : model_->named_parameters()) {
        params.insert(p.key(), p.value().detach().clone());
        auto it = state.find(p.value().unsafeGetTensorImpl());
        if (it != state.end()) {
            auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
            exp_avg.insert(p.key(), s.exp_avg().clone());
            exp_avg_sq.insert(p.key(), s.exp_avg_sq().clone());
            adam_step.insert(p.key(), s.step());
        }
    }
    for (const auto& [k, v] : ema_) ema.insert(k, v.clone());
    root.insert("params", params);
    root.insert("ema", ema);
    root.insert("adam_exp_avg", exp_avg);
    root.insert("adam_exp_avg_sq", exp_avg_sq);
    root.insert("adam_step", adam_step);
    root.insert("rng", generator_.get_state());

    c10::Dict<std::string, double> trainer;
    trainer.insert("epoch", static_cast<double>(epoch_));
    trainer.insert("batch_in_epoch", static_cast<double>(batch_in_epoch_));
    trainer.insert("epoch_loss_sum", epoch_loss_sum_);
    trainer.insert("epoch_loss_count", static_cast<double>(epoch_loss_count_));
    trainer.insert("best_loss", best_loss_);
    trainer.insert("lr", plateau_.lr());
    trainer.insert("plateau_best", plateau_.best());
    trainer.insert("plateau_bad", static_cast<double>(plateau_.bad_epochs()));
    root.insert("trainer", trainer);

    write_bytes(path, torch::pickle_save(root));
}

void Trainer::load(const fs::path& path) {
    auto dict = read_container(path);
    auto meta = parse_meta(dict, path);
    if (!same_model(meta.model, model_cfg_)) {
        throw CheckpointError("checkpoint " + path.string() + " was written for a different model config");
    }
    if (to_json(meta.diffusion) != to_json(diffusion_)) {
        throw CheckpointError("checkpoint " + path.string() + " uses a different noise schedule");
    }
    copy_parameters(model_, tensor_dict(dict, "params"), path);

    auto exp_avg = tensor_dict(dict, "adam_exp_avg");
    auto exp_avg_sq = tensor_dict(dict, "adam_exp_avg_sq");
    auto steps = c10::impl::toTypedDict<std::string, int64_t>(dict.at("adam_step").toGenericDict());
    auto& state = optimizer_->state();
    state.clear();
    for (const auto& p : model_->named_parameters()) {
        if (!steps.contains(p.key())) continue;
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->step(steps.at(p.key()));
        s->exp_avg(exp_avg.at(p.key()).clone());
        s->exp_avg_sq(exp_avg_sq.at(p.key()).clone());
        state[p.value().unsafeGetTensorImpl()] = std::move(s);
    }

    ema_.clear();
    for (const auto& e : tensor_dict(dict, "ema")) ema_[e.key()] = e.value().clone();
    if (train_.ema_decay > 0.0 && ema_.empty()) {
        for (const auto& p : model_->named_parameters()) ema_[p.key()] = p.value().detach().clone();
    }

    generator_.set_state(dict.at("rng").toTensor());

    auto tr = c10::impl::toTypedDict<std::string, double>(dict.at("trainer").toGenericDict());
    iteration_ = meta.iteration;
    epoch_ = static_cast<std::int64_t>(tr.at("epoch"));
    batch_in_epoch_ = static_cast<std::int64_t>(tr.at("batch_in_epoch"));
    epoch_loss_sum_ = tr.at("epoch_loss_sum");
    epoch_loss_count_ = static_cast<std::int64_t>(tr.at("epoch_loss_count"));
    best_loss_ = tr.at("best_loss");
    plateau_.restore(tr.at("lr"), tr.at("plateau_best"), static_cast<int>(tr.at("plateau_bad")));
    set_lr(plateau_.lr());
    order_.clear();
}

CheckpointMeta read_checkpoint_meta(const fs::path& path) {
    auto dict = read_container(path);
    return parse_meta(dict, path);
}

LoadedModel load_model(const fs::path& path) {
    auto dict = read_container(path);
    auto meta = parse_meta(dict, path);
    try {
        meta.model.validate();
    } catch (const ConfigError& e) {
        throw CheckpointError("checkpoint " + path.string() + ": " + e.what());
    }
    Denoiser model(meta.model);
    auto ema = tensor_dict(dict, "ema");
    copy_parameters(model, ema.size() > 0 ? ema : tensor_dict(dict, "params"), path);
    model->eval();
    auto schedule = meta.diffusion.schedule();
    return LoadedModel{std::move(meta), model, std::move(schedule)};
}

}  // namespace bdiff
