#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "CLI11.hpp"

#include "bdiff/boundary_weight.hpp"
#include "bdiff/config.hpp"
#include "bdiff/data.hpp"
#include "bdiff/errors.hpp"
#include "bdiff/inference.hpp"
#include "bdiff/metrics.hpp"
#include "bdiff/training.hpp"

namespace fs = std::filesystem;
using namespace bdiff;

namespace {

struct TrainArgs {
    std::string config;
    std::vector<std::string> overrides;
    bool resume = false;
};

struct PredictArgs {
    std::string checkpoint, inputs, out;
    std::optional<int> samples;
    std::optional<std::uint64_t> seed;
    std::optional<double> threshold;
    bool mean_maps = false;
};

struct EvalArgs {
    std::string pred, gt, out;
};

struct InspectArgs {
    std::string mask, t_list, out;
    int steps = 250;
    double gamma_min = 1.0;
    double gamma_max = 4.0;
};

const std::vector<std::string> kImageExts{".png", ".jpg", ".jpeg"};

fs::path find_file(const fs::path& dir, const std::string& stem, const std::vector<std::string>& exts) {
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().stem().string() != stem) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (std::find(exts.begin(), exts.end(), ext) != exts.end()) return entry.path();
    }
    throw IoError("no file for stem '" + stem + "' in " + dir.string());
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

int cmd_train(const TrainArgs& a) {
    const auto cfg = load_run_config(a.config, a.overrides, /*require_data=*/true);
    const fs::path out = cfg.output_dir;
    ensure_dir(out);

    Dataset train;
    if (cfg.data.synthetic_count > 0) {
        train = synth_shapes(cfg.data.synthetic_count, cfg.model.image_size, cfg.seed);
    } else {
        LoadOptions lo;
        lo.image_dir = cfg.data.image_dir;
        lo.mask_dir = cfg.data.mask_dir;
        lo.image_size = cfg.model.image_size;
        auto all = load_dataset(cfg.data.root, lo);
        if (!cfg.data.split_dir.empty()) {
            std::vector<std::string> ids;
            for (const auto& s : all.samples) ids.push_back(s.id);
            auto split = resolve_split(SplitSpec::from_directory(cfg.data.split_dir), ids);
            train = apply_split(std::move(all), split).train;
        } else {
            train = std::move(all);
        }
    }
    if (train.empty()) throw ValidationError("training split is empty");

    const std::string snapshot = to_json(cfg).dump(2);
    {
        std::ofstream f(out / "config.json");
        if (!f) throw IoError("cannot write " + (out / "config.json").string());
        f << snapshot << "\n";
    }

    Trainer trainer(cfg.model, cfg.diffusion, cfg.training,
                    cfg.training.augment ? cfg.augment : AugmentPolicy::identity());
    if (a.resume && fs::exists(out / "last.ckpt")) {
        trainer.load(out / "last.ckpt");
        std::cout << "resumed from " << (out / "last.ckpt").string() << " at iteration " << trainer.iteration()
                  << "\n";
    }
    std::ofstream log(out / "metrics.jsonl", a.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + (out / "metrics.jsonl").string());

    Trainer::FitOptions fo;
    fo.output_dir = out;
    fo.run_config_json = snapshot;
    fo.metrics_log = &log;
    const std::int64_t report_every = std::max<std::int64_t>(1, cfg.training.total_iterations / 20);
    fo.on_step = [&](const TrainStats& s) {
        if (s.iteration % report_every == 0) {
            std::cout << "iteration " << s.iteration << "/" << cfg.training.total_iterations << " loss " << s.loss
                      << " lr " << s.lr << std::endl;
        }
        return true;
    };
    std::cout << "training on " << train.size() << " images, " << to_string(cfg.training.loss_variant)
              << " loss, output " << out.string() << "\n";
    auto rec = trainer.fit(train, fo);
    std::cout << "done: " << rec.iterations << " iterations, best epoch loss " << rec.best_loss << ", checkpoints "
              << rec.best.string() << " " << rec.last.string() << "\n";
    return 0;
}

int cmd_predict(const PredictArgs& a) {
    auto lm = load_model(a.checkpoint);
    EnsembleConfig ec;
    if (!lm.meta.run_config_json.empty()) {
        auto j = nlohmann::json::parse(lm.meta.run_config_json, nullptr, false);
        if (!j.is_discarded()) ec = run_config_from_json(j, /*require_data=*/false).ensemble;
    }
    if (a.samples) ec.n_samples = *a.samples;
    if (a.seed) ec.seed = *a.seed;
    if (a.threshold) ec.threshold = *a.threshold;
    ec.validate();
    ReverseStepOptions reverse;
    reverse.clamp_x0 = lm.meta.diffusion.clamp_x0;

    auto stems = list_stems(a.inputs, kImageExts);
    stems.erase(std::unique(stems.begin(), stems.end()), stems.end());
    if (stems.empty()) throw IoError("no images in " + a.inputs);
    const fs::path out = a.out;
    ensure_dir(out);

    const int size = lm.meta.model.image_size;
    const std::size_t per_call = static_cast<std::size_t>(std::max(1, ec.max_batch / ec.n_samples));
    for (std::size_t start = 0; start < stems.size(); start += per_call) {
        const std::size_t end = std::min(stems.size(), start + per_call);
        std::vector<torch::Tensor> images;
        for (std::size_t i = start; i < end; ++i) {
            Sample s;
            s.id = stems[i];
            s.image = read_image_rgb(find_file(a.inputs, stems[i], kImageExts));
            s.mask = LabelMask(static_cast<int>(s.image.size(1)), static_cast<int>(s.image.size(2)), 0);
            images.push_back(preprocess(s, size).image);
        }
        auto results = ensemble_predict_many(torch::stack(images), lm.model, lm.schedule, ec, reverse);
        for (std::size_t k = 0; k < results.size(); ++k) {
            const auto& stem = stems[start + k];
            write_mask_png(out / (stem + ".png"), results[k].mask);
            if (a.mean_maps) {
                auto m = ((results[k].mean + 1.0) * 0.5).contiguous();
                Grid<double> g(size, size, 0.0);
                std::copy(m.data_ptr<double>(), m.data_ptr<double>() + m.numel(), g.values().begin());
                write_gray_png(out / (stem + "_mean.png"), g);
            }
            std::cout << stem << "\n";
        }
    }
    std::cout << "wrote " << stems.size() << " masks to " << out.string() << " (" << ec.n_samples
              << " samples, seed " << ec.seed << ")\n";
    return 0;
}

int cmd_eval(const EvalArgs& a) {
    auto pred = list_stems(a.pred, {".png"});
    auto gt = list_stems(a.gt, {".png"});
    std::vector<std::string> only_pred, only_gt, both;
    std::set_difference(pred.begin(), pred.end(), gt.begin(), gt.end(), std::back_inserter(only_pred));
    std::set_difference(gt.begin(), gt.end(), pred.begin(), pred.end(), std::back_inserter(only_gt));
    std::set_intersection(pred.begin(), pred.end(), gt.begin(), gt.end(), std::back_inserter(both));
    if (both.empty()) throw ValidationError("no common stems between " + a.pred + " and " + a.gt);
    if (!only_pred.empty() || !only_gt.empty()) {
        std::string msg = "unmatched stems;";
        if (!only_pred.empty()) {
            msg += " only in predictions:";
            for (const auto& s : only_pred) msg += " " + s;
            msg += ";";
        }
        if (!only_gt.empty()) {
            msg += " only in ground truth:";
            for (const auto& s : only_gt) msg += " " + s;
        }
        throw ValidationError(msg);
    }

    std::vector<ImageMetrics> images;
    for (const auto& stem : both) {
        auto p = read_mask(find_file(a.pred, stem, {".png"}));
        auto g = read_mask(find_file(a.gt, stem, {".png"}));
        if (p.height() != g.height() || p.width() != g.width()) {
            throw ShapeError("prediction and ground truth sizes differ for " + stem);
        }
        auto c = confusion(p, g);
        images.push_back({stem, c, metrics_report(c)});
    }
    auto summary = summarize(std::move(images));
    std::ofstream f(a.out);
    if (!f) throw IoError("cannot write " + a.out);
    f << format_report_csv(summary);
    std::cout << "images " << summary.images.size() << "  micro dsc " << summary.micro.dsc << " se "
              << summary.micro.se << " sp " << summary.micro.sp << " acc " << summary.micro.acc << "\n";
    return 0;
}

// "0.25T" is a fraction of the schedule length, a bare integer is a step.
std::vector<int> parse_steps(const std::string& list, int steps) {
    std::vector<int> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        int t = 0;
        try {
            if (item.back() == 'T' || item.back() == 't') {
                const double frac = std::stod(item.substr(0, item.size() - 1));
                t = static_cast<int>(std::lround(frac * steps));
            } else {
                std::size_t used = 0;
                t = std::stoi(item, &used);
                if (used != item.size()) throw std::invalid_argument(item);
            }
        } catch (const std::logic_error&) {
            throw ConfigError("--t: cannot parse '" + item + "'");
        }
        if (t < 1 || t > steps) {
            throw IndexError("--t: step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
        }
        out.push_back(t);
    }
    if (out.empty()) throw ConfigError("--t: no steps given");
    return out;
}

int cmd_inspect(const InspectArgs& a) {
    GammaSchedule gs{a.gamma_min, a.gamma_max, a.steps};
    gs.validate();
    const auto steps = parse_steps(a.t_list, a.steps);
    auto mask = read_mask(a.mask, /*strict=*/true);
    const fs::path out = a.out;
    ensure_dir(out);

    auto distances = band_distance_map(mask);
    Grid<double> render(mask.height(), mask.width(), 0.0);
    if (distances) {
        double mx = 0.0;
        for (double v : distances->values()) mx = std::max(mx, v);
        for (std::size_t i = 0; i < render.size(); ++i) {
            render.values()[i] = mx > 0.0 ? distances->values()[i] / mx : 0.0;
        }
    }
    write_gray_png(out / "distance.png", render);
    for (int t : steps) {
        auto w = weight_map(mask, t, gs);
        const auto name = "weights_t" + std::to_string(t) + ".png";
        write_gray_png(out / name, w.weights);
        std::cout << name << "  gamma " << w.gamma << "\n";
    }
    if (!distances) std::cout << "mask is single-class: weight maps are all zero\n";
    return 0;
}

std::string one_line(std::string s) {
    for (std::size_t p = s.find('\n'); p != std::string::npos; p = s.find('\n', p)) {
        std::size_t q = p + 1;
        while (q < s.size() && s[q] == ' ') ++q;
        s.replace(p, q - p, "; ");
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Boundary-aware diffusion segmentation"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a denoiser from a run configuration");
    t->add_option("--config", train.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    t->add_option("--override", train.overrides, "Dotted-key override, e.g. training.alpha=0");
    t->add_flag("--resume", train.resume, "Continue from <output_dir>/last.ckpt when present");

    PredictArgs predict;
    auto* p = app.add_subcommand("predict", "Segment every image in a directory");
    p->add_option("--checkpoint", predict.checkpoint)->required()->check(CLI::ExistingFile);
    p->add_option("--inputs", predict.inputs)->required()->check(CLI::ExistingDirectory);
    p->add_option("--out", predict.out)->required();
    p->add_option("--samples", predict.samples, "Ensemble size (default from checkpoint, 9)");
    p->add_option("--seed", predict.seed, "Base seed of the sampling chains");
    p->add_option("--threshold", predict.threshold, "Fusion threshold in model space");
    p->add_flag("--mean-maps", predict.mean_maps, "Also write the fused mean as <stem>_mean.png");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Score predicted masks against ground truth");
    e->add_option("--pred", eval.pred)->required()->check(CLI::ExistingDirectory);
    e->add_option("--gt", eval.gt)->required()->check(CLI::ExistingDirectory);
    e->add_option("--out", eval.out, "CSV report path")->required();

    InspectArgs inspect;
    auto* w = app.add_subcommand("inspect-weights", "Render boundary weight maps for a mask");
    w->add_option("--mask", inspect.mask)->required()->check(CLI::ExistingFile);
    w->add_option("--t", inspect.t_list, "Comma-separated steps, e.g. 0.25T,0.5T,0.75T or 10,125")->required();
    w->add_option("--out", inspect.out)->required();
    w->add_option("--steps", inspect.steps, "Schedule length T")->capture_default_str();
    w->add_option("--gamma-min", inspect.gamma_min)->capture_default_str();
    w->add_option("--gamma-max", inspect.gamma_max)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        std::cerr << "error[UsageError]: " << one_line(ex.what()) << "\n";
        return 2;
    }

    try {
        if (*t) return cmd_train(train);
        if (*p) return cmd_predict(predict);
        if (*e) return cmd_eval(eval);
        if (*w) return cmd_inspect(inspect);
    } catch (const Error& ex) {
        std::cerr << "error[" << ex.kind() << "]: " << one_line(ex.what()) << "\n";
        return 1;
    } catch (const std::exception& ex) {
        std::cerr << "error[InternalError]: " << one_line(ex.what()) << "\n";
        return 1;
    }
    return 1;
}
