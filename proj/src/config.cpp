#include "bdiff/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace bdiff {

using nlohmann::json;

nlohmann::json to_json(const DenoiserConfig& c) {
    return json{{"image_size", c.image_size},
                {"stages", c.stages},
                {"base_channels", c.base_channels},
                {"channel_mults", c.channel_mults},
                {"attention_heads", c.attention_heads}};
}

nlohmann::json to_json(const DiffusionConfig& c) {
    return json{{"steps", c.steps},
                {"beta_start", c.beta_start},
                {"beta_end", c.beta_end},
                {"clamp_x0", c.clamp_x0}};
}

nlohmann::json to_json(const TrainConfig& c) {
    return json{{"batch_size", c.batch_size},
                {"base_lr", c.base_lr},
                {"plateau_factor", c.plateau_factor},
                {"plateau_patience", c.plateau_patience},
                {"total_iterations", c.total_iterations},
                {"alpha", c.alpha},
                {"loss_variant", to_string(c.loss_variant)},
                {"gamma_min", c.gamma_min},
                {"gamma_max", c.gamma_max},
                {"ema_decay", c.ema_decay},
                {"checkpoint_every", c.checkpoint_every},
                {"augment", c.augment}};
}

nlohmann::json to_json(const EnsembleConfig& c) {
    return json{{"n_samples", c.n_samples},
                {"threshold", c.threshold},
                {"average_binarized", c.average_binarized},
                {"max_batch", c.max_batch}};
}

nlohmann::json to_json(const AugmentPolicy& c) {
    return json{{"hflip_prob", c.hflip_prob},         {"vflip_prob", c.vflip_prob},
                {"affine_prob", c.affine_prob},       {"max_rotate_deg", c.max_rotate_deg},
                {"max_scale", c.max_scale},           {"max_translate", c.max_translate},
                {"dropout_prob", c.dropout_prob},     {"dropout_holes", c.dropout_holes},
                {"dropout_size", c.dropout_size},     {"dropout_fill_mask", c.dropout_fill_mask},
                {"noise_prob", c.noise_prob},         {"noise_sigma", c.noise_sigma},
                {"rgb_shift_prob", c.rgb_shift_prob}, {"rgb_shift", c.rgb_shift}};
}

nlohmann::json to_json(const RunConfig& c) {
    return json{{"model", to_json(c.model)},
                {"diffusion", to_json(c.diffusion)},
                {"training", to_json(c.training)},
                {"ensemble", to_json(c.ensemble)},
                {"augment", to_json(c.augment)},
                {"data",
                 {{"root", c.data.root},
                  {"split_dir", c.data.split_dir},
                  {"image_dir", c.data.image_dir},
                  {"mask_dir", c.data.mask_dir},
                  {"synthetic_count", c.data.synthetic_count}}},
                {"output_dir", c.output_dir},
                {"seed", c.seed}};
}

namespace {

// Reads typed fields from one JSON object, collecting problems instead of
// throwing.
class SectionReader {
public:
    SectionReader(const json& j, std::string prefix, std::vector<std::string>& errors)
        : j_(j), prefix_(std::move(prefix)), errors_(errors) {
        if (!j_.is_object()) {
            errors_.push_back(trimmed_prefix() + ": expected an object");
            ok_ = false;
        }
    }

    void read(const char* key, int& out) {
        if (auto* v = find(key)) {
            if (v->is_number_integer()) out = v->get<int>();
            else bad(key, "expected an integer");
        }
    }
    void read(const char* key, std::int64_t& out) {
        if (auto* v = find(key)) {
            if (v->is_number_integer()) out = v->get<std::int64_t>();
            else bad(key, "expected an integer");
        }
    }
    void read(const char* key, std::uint64_t& out) {
        if (auto* v = find(key)) {
            if (v->is_number_unsigned() || (v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
                out = v->get<std::uint64_t>();
            } else {
                bad(key, "expected a non-negative integer");
            }
        }
    }
    void read(const char* key, double& out) {
        if (auto* v = find(key)) {
            if (v->is_number()) out = v->get<double>();
            else bad(key, "expected a number");
        }
    }
    void read(const char* key, bool& out) {
        if (auto* v = find(key)) {
            if (v->is_boolean()) out = v->get<bool>();
            else bad(key, "expected true or false");
        }
    }
    void read(const char* key, std::string& out) {
        if (auto* v = find(key)) {
            if (v->is_string()) out = v->get<std::string>();
            else bad(key, "expected a string");
        }
    }
    void read(const char* key, std::vector<int>& out) {
        if (auto* v = find(key)) {
            if (!v->is_array()) return bad(key, "expected an array of integers");
            std::vector<int> vals;
            for (const auto& e : *v) {
                if (!e.is_number_integer()) return bad(key, "expected an array of integers");
                vals.push_back(e.get<int>());
            }
            out = std::move(vals);
        }
    }
    void read(const char* key, LossVariant& out) {
        if (auto* v = find(key)) {
            if (!v->is_string()) return bad(key, "expected \"baseline\" or \"weighted\"");
            try {
                out = parse_loss_variant(v->get<std::string>());
            } catch (const ConfigError&) {
                bad(key, "expected \"baseline\" or \"weighted\"");
            }
        }
    }
    const json* section(const char* key) {
        known_.insert(key);
        if (!ok_ || !j_.contains(key)) return nullptr;
        return &j_.at(key);
    }

    // Reports keys that were never asked for.
    void finish() {
        if (!ok_) return;
        for (const auto& [k, _] : j_.items()) {
            if (!known_.count(k)) errors_.push_back(prefix_ + k + ": unknown key");
        }
    }

private:
    const json* find(const char* key) {
        known_.insert(key);
        if (!ok_) return nullptr;
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    void bad(const char* key, const char* msg) { errors_.push_back(prefix_ + key + ": " + msg); }
    std::string trimmed_prefix() const {
        return prefix_.empty() ? std::string("<root>") : prefix_.substr(0, prefix_.size() - 1);
    }

    const json& j_;
    std::string prefix_;
    std::vector<std::string>& errors_;
    std::set<std::string> known_;
    bool ok_ = true;
};

template <typename Fn>
void check(std::vector<std::string>& errors, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError& e) {
        errors.push_back(e.what());
    }
}

}  // namespace

DenoiserConfig denoiser_config_from_json(const json& j, std::vector<std::string>& errors,
                                         const std::string& prefix) {
    DenoiserConfig c;
    SectionReader r(j, prefix, errors);
    r.read("image_size", c.image_size);
    r.read("stages", c.stages);
    r.read("base_channels", c.base_channels);
    r.read("channel_mults", c.channel_mults);
    r.read("attention_heads", c.attention_heads);
    r.finish();
    return c;
}

DiffusionConfig diffusion_config_from_json(const json& j, std::vector<std::string>& errors,
                                           const std::string& prefix) {
    DiffusionConfig c;
    SectionReader r(j, prefix, errors);
    r.read("steps", c.steps);
    r.read("beta_start", c.beta_start);
    r.read("beta_end", c.beta_end);
    r.read("clamp_x0", c.clamp_x0);
    r.finish();
    return c;
}

RunConfig run_config_from_json(const json& j, bool require_data) {
    std::vector<std::string> errors;
    RunConfig c;
    SectionReader root(j, "", errors);

    if (const auto* s = root.section("model")) c.model = denoiser_config_from_json(*s, errors);
    if (const auto* s = root.section("diffusion")) c.diffusion = diffusion_config_from_json(*s, errors);
    if (const auto* s = root.section("training")) {
        SectionReader r(*s, "training.", errors);
        auto& t = c.training;
        r.read("batch_size", t.batch_size);
        r.read("base_lr", t.base_lr);
        r.read("plateau_factor", t.plateau_factor);
        r.read("plateau_patience", t.plateau_patience);
        r.read("total_iterations", t.total_iterations);
        r.read("alpha", t.alpha);
        r.read("loss_variant", t.loss_variant);
        r.read("gamma_min", t.gamma_min);
        r.read("gamma_max", t.gamma_max);
        r.read("ema_decay", t.ema_decay);
        r.read("checkpoint_every", t.checkpoint_every);
        r.read("augment", t.augment);
        r.finish();
    }
    if (const auto* s = root.section("ensemble")) {
        SectionReader r(*s, "ensemble.", errors);
        r.read("n_samples", c.ensemble.n_samples);
        r.read("threshold", c.ensemble.threshold);
        r.read("average_binarized", c.ensemble.average_binarized);
        r.read("max_batch", c.ensemble.max_batch);
        r.finish();
    }
    if (const auto* s = root.section("augment")) {
        SectionReader r(*s, "augment.", errors);
        auto& a = c.augment;
        r.read("hflip_prob", a.hflip_prob);
        r.read("vflip_prob", a.vflip_prob);
        r.read("affine_prob", a.affine_prob);
        r.read("max_rotate_deg", a.max_rotate_deg);
        r.read("max_scale", a.max_scale);
        r.read("max_translate", a.max_translate);
        r.read("dropout_prob", a.dropout_prob);
        r.read("dropout_holes", a.dropout_holes);
        r.read("dropout_size", a.dropout_size);
        r.read("dropout_fill_mask", a.dropout_fill_mask);
        r.read("noise_prob", a.noise_prob);
        r.read("noise_sigma", a.noise_sigma);
        r.read("rgb_shift_prob", a.rgb_shift_prob);
        r.read("rgb_shift", a.rgb_shift);
        r.finish();
    }
    if (const auto* s = root.section("data")) {
        SectionReader r(*s, "data.", errors);
        r.read("root", c.data.root);
        r.read("split_dir", c.data.split_dir);
        r.read("image_dir", c.data.image_dir);
        r.read("mask_dir", c.data.mask_dir);
        r.read("synthetic_count", c.data.synthetic_count);
        r.finish();
    }
    root.read("output_dir", c.output_dir);
    root.read("seed", c.seed);
    root.finish();

    c.training.seed = c.seed;
    c.ensemble.seed = c.seed;

    check(errors, [&] { c.model.validate(); });
    check(errors, [&] { (void)c.diffusion.schedule(); });
    check(errors, [&] { c.training.validate(); });
    check(errors, [&] { c.training.gamma_schedule(c.diffusion.steps).validate(); });
    check(errors, [&] { c.ensemble.validate(); });
    if (c.data.synthetic_count < 0) errors.push_back("data.synthetic_count: must be >= 0");
    if (require_data && c.data.root.empty() && c.data.synthetic_count == 0) {
        errors.push_back("data.root: required (or set data.synthetic_count > 0)");
    }
    if (c.output_dir.empty()) errors.push_back("output_dir: must not be empty");

    if (!errors.empty()) {
        std::string msg = std::to_string(errors.size()) + " configuration error(s):";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' must have the form key.path=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = raw;

    json* node = &j;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (parts[i].empty()) throw ConfigError("override '" + assignment + "' has an empty key");
        if (!node->is_object()) throw ConfigError("override '" + path + "': not an object");
        node = &(*node)[parts[i]];
        if (node->is_null()) *node = json::object();
    }
    if (!node->is_object()) throw ConfigError("override '" + path + "': not an object");
    (*node)[parts.back()] = std::move(value);
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          bool require_data) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    json j = json::parse(in, nullptr, /*allow_exceptions=*/false, /*ignore_comments=*/true);
    if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    for (const auto& o : overrides) apply_override(j, o);
    return run_config_from_json(j, require_data);
}

}  // namespace bdiff
