#include "sphere/run_config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sphere/errors.hpp"

namespace sphere {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

std::pair<double, double> parse_range(const std::string& key, const std::string& v) {
    const auto comma = v.find(',');
    if (comma == std::string::npos)
        throw ConfigError("config key '" + key + "': expected 'lo,hi', got '" + v + "'");
    return {parse_real(key, trim(v.substr(0, comma))), parse_real(key, trim(v.substr(comma + 1)))};
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key))
            throw ConfigError("config key '" + key + "' appears more than once");
        kv[key] = value;
    }
    return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path.string());
    std::stringstream buffer;
    buffer << is.rdbuf();
    return parse_kv_text(buffer.str());
}

void apply_overrides(std::map<std::string, std::string>& kv,
                     const std::vector<std::string>& overrides) {
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + ov + "' must be key=value");
        kv[trim(ov.substr(0, eq))] = trim(ov.substr(eq + 1));
    }
}

RunConfig RunConfig::defaults() { return RunConfig{}; }

void RunConfig::validate() const {
    model.validate();
    train.validate();
    noise.validate();
    weights.validate();
    sampler.validate();
    dataset.validate();
    if (dataset.image_size != model.image_size || dataset.channels != model.channels)
        throw ConfigError("dataset image size/channels must match the model config");
    if (model.conditional() &&
        static_cast<int64_t>(dataset.classes.size()) != model.n_classes)
        throw ConfigError("n_classes (" + std::to_string(model.n_classes) +
                          ") must match dataset_classes (" +
                          std::to_string(dataset.classes.size()) + ")");
}

RunConfig RunConfig::from_kv(const std::map<std::string, std::string>& kv) {
    RunConfig cfg = defaults();
    for (const auto& [key, v] : kv) {
        // model
        if (key == "model_name") cfg.model_name = v;
        else if (key == "image_size") cfg.model.image_size = parse_int(key, v);
        else if (key == "channels") cfg.model.channels = parse_int(key, v);
        else if (key == "patch_size") cfg.model.patch_size = parse_int(key, v);
        else if (key == "hidden_size") cfg.model.hidden_size = parse_int(key, v);
        else if (key == "n_blocks") cfg.model.n_blocks = parse_int(key, v);
        else if (key == "n_heads") cfg.model.n_heads = parse_int(key, v);
        else if (key == "mixer_depth") cfg.model.mixer_depth = parse_int(key, v);
        else if (key == "latent_d") cfg.model.latent_d = parse_int(key, v);
        else if (key == "n_classes") cfg.model.n_classes = parse_int(key, v);
        else if (key == "cfg_null_drop_prob") cfg.model.cfg_null_drop_prob = parse_real(key, v);
        else if (key == "volume_compression_ratio") {
            // derived quantity; accepted and validated against the model dims below
            cfg.declared_compression_ratio = parse_real(key, v);
        }
        // training
        else if (key == "batch_size") cfg.train.batch_size = parse_int(key, v);
        else if (key == "learning_rate") cfg.train.learning_rate = parse_real(key, v);
        else if (key == "min_lr") cfg.train.min_learning_rate = parse_real(key, v);
        else if (key == "lr_decay_schedule") {
            if (v != "cosine")
                throw ConfigError("lr_decay_schedule: only 'cosine' is supported, got '" + v + "'");
        } else if (key == "optimizer") {
            if (v != "adamw")
                throw ConfigError("optimizer: only 'adamw' is supported, got '" + v + "'");
        }
        else if (key == "weight_decay") cfg.train.weight_decay = parse_real(key, v);
        else if (key == "warmup_epochs") cfg.train.warmup_epochs = parse_int(key, v);
        else if (key == "total_epochs") cfg.train.total_epochs = parse_int(key, v);
        else if (key == "adam_beta1") cfg.train.adam_beta1 = parse_real(key, v);
        else if (key == "adam_beta2") cfg.train.adam_beta2 = parse_real(key, v);
        else if (key == "adam_eps") cfg.train.adam_eps = parse_real(key, v);
        else if (key == "grad_clip_norm") cfg.train.grad_clip_norm = parse_real(key, v);
        else if (key == "seed") cfg.train.seed = static_cast<uint64_t>(parse_int(key, v));
        // noise policy
        else if (key == "noise_mode") {
            if (v == "angle-uniform") cfg.noise.mode = JitterMode::AngleUniform;
            else if (v == "sigma-uniform") cfg.noise.mode = JitterMode::SigmaUniform;
            else throw ConfigError("noise_mode: expected angle-uniform|sigma-uniform, got '" + v + "'");
        } else if (key == "angle_jitter_range") {
            const auto [lo, hi] = parse_range(key, v);
            cfg.noise.base_angle_lo_deg = lo;
            cfg.noise.base_angle_hi_deg = hi;
        } else if (key == "angle_mix_range") {
            if (v == "none") cfg.noise.mix_angle_range_deg.reset();
            else cfg.noise.mix_angle_range_deg = parse_range(key, v);
        }
        else if (key == "angle_mix_probability") cfg.noise.mix_probability = parse_real(key, v);
        else if (key == "sigma_max") cfg.noise.sigma_max_direct = parse_real(key, v);
        // loss weights
        else if (key == "pix_recon_l1_weight") cfg.weights.pix_recon_l1 = parse_real(key, v);
        else if (key == "pix_recon_perceptual_weight") cfg.weights.pix_recon_perceptual = parse_real(key, v);
        else if (key == "pix_con_l1_weight") cfg.weights.pix_con_l1 = parse_real(key, v);
        else if (key == "pix_con_perceptual_weight") cfg.weights.pix_con_perceptual = parse_real(key, v);
        else if (key == "lat_con_weight") cfg.weights.lat_con = parse_real(key, v);
        // sampler plan
        else if (key == "sample_steps") cfg.sampler.steps = parse_int(key, v);
        else if (key == "sample_gamma") cfg.sampler.gamma = parse_real(key, v);
        else if (key == "share_noise") cfg.sampler.share_noise = parse_bool(key, v);
        else if (key == "cfg_scale") cfg.sampler.cfg_scale = parse_real(key, v);
        else if (key == "cfg_position") cfg.sampler.cfg_position = cfg_position_from_string(v);
        else if (key == "truncation") {
            if (v == "none") cfg.sampler.truncation.reset();
            else cfg.sampler.truncation = parse_real(key, v);
        } else if (key == "r_override") {
            if (v == "none") cfg.sampler.r_override.reset();
            else cfg.sampler.r_override = parse_real(key, v);
        }
        else if (key == "sample_seed") cfg.sampler.seed = static_cast<uint64_t>(parse_int(key, v));
        // dataset
        else if (key == "dataset_source") {
            if (v == "synthetic") cfg.dataset.source = DatasetSpec::Source::Synthetic;
            else if (v == "folder") cfg.dataset.source = DatasetSpec::Source::Folder;
            else throw ConfigError("dataset_source: expected synthetic|folder, got '" + v + "'");
        }
        else if (key == "dataset_folder") cfg.dataset.folder = v;
        else if (key == "dataset_classes") cfg.dataset.classes = split_list(v);
        else if (key == "n_per_class") cfg.dataset.n_per_class = parse_int(key, v);
        else if (key == "flip_prob") cfg.dataset.flip_prob = parse_real(key, v);
        else if (key == "center_crop") cfg.dataset.center_crop = parse_bool(key, v);
        // paths
        else if (key == "checkpoint_dir") cfg.checkpoint_dir = v;
        else if (key == "metrics_csv") cfg.metrics_csv = v;
        else if (key == "output_dir") cfg.output_dir = v;
        else if (key == "checkpoint_every") cfg.checkpoint_every = parse_int(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
    }
    cfg.dataset.image_size = cfg.model.image_size;
    cfg.dataset.channels = cfg.model.channels;
    cfg.validate();
    if (cfg.declared_compression_ratio > 0.0 &&
        std::abs(cfg.declared_compression_ratio - cfg.model.compression_ratio()) > 1e-6)
        throw ConfigError("volume_compression_ratio " + std::to_string(cfg.declared_compression_ratio) +
                          " does not match the configured dimensions (" +
                          std::to_string(cfg.model.compression_ratio()) + ")");
    return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    return from_kv(parse_kv_file(path));
}

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << "# resolved run configuration\n";
    os << "model_name = " << model_name << "\n";
    os << "image_size = " << model.image_size << "\n";
    os << "channels = " << model.channels << "\n";
    os << "patch_size = " << model.patch_size << "\n";
    os << "hidden_size = " << model.hidden_size << "\n";
    os << "n_blocks = " << model.n_blocks << "\n";
    os << "n_heads = " << model.n_heads << "\n";
    os << "mixer_depth = " << model.mixer_depth << "\n";
    os << "latent_d = " << model.latent_d << "\n";
    os << "n_classes = " << model.n_classes << "\n";
    os << "cfg_null_drop_prob = " << model.cfg_null_drop_prob << "\n";
    os << "volume_compression_ratio = " << model.compression_ratio() << "\n";
    os << "# latent dim L = " << model.grid() << "x" << model.grid() << "x" << model.latent_d
       << " = " << model.latent_len() << "\n";
    os << "batch_size = " << train.batch_size << "\n";
    os << "learning_rate = " << train.learning_rate << "\n";
    os << "lr_decay_schedule = cosine\n";
    os << "min_lr = " << train.min_learning_rate << "\n";
    os << "weight_decay = " << train.weight_decay << "\n";
    os << "optimizer = adamw\n";
    os << "adam_beta1 = " << train.adam_beta1 << "\n";
    os << "adam_beta2 = " << train.adam_beta2 << "\n";
    os << "adam_eps = " << train.adam_eps << "\n";
    os << "grad_clip_norm = " << train.grad_clip_norm << "\n";
    os << "warmup_epochs = " << train.warmup_epochs << "\n";
    os << "total_epochs = " << train.total_epochs << "\n";
    os << "seed = " << train.seed << "\n";
    os << "noise_mode = "
       << (noise.mode == JitterMode::AngleUniform ? "angle-uniform" : "sigma-uniform") << "\n";
    os << "angle_jitter_range = " << noise.base_angle_lo_deg << "," << noise.base_angle_hi_deg << "\n";
    if (noise.mix_angle_range_deg)
        os << "angle_mix_range = " << noise.mix_angle_range_deg->first << ","
           << noise.mix_angle_range_deg->second << "\n";
    else
        os << "angle_mix_range = none\n";
    os << "angle_mix_probability = " << noise.mix_probability << "\n";
    if (noise.mode == JitterMode::SigmaUniform) os << "sigma_max = " << noise.sigma_max_direct << "\n";
    os << "pix_recon_l1_weight = " << weights.pix_recon_l1 << "\n";
    os << "pix_recon_perceptual_weight = " << weights.pix_recon_perceptual << "\n";
    os << "pix_con_l1_weight = " << weights.pix_con_l1 << "\n";
    os << "pix_con_perceptual_weight = " << weights.pix_con_perceptual << "\n";
    os << "lat_con_weight = " << weights.lat_con << "\n";
    os << "sample_steps = " << sampler.steps << "\n";
    os << "sample_gamma = " << sampler.gamma << "\n";
    os << "share_noise = " << (sampler.share_noise ? "true" : "false") << "\n";
    os << "cfg_scale = " << sampler.cfg_scale << "\n";
    os << "cfg_position = " << to_string(sampler.cfg_position) << "\n";
    os << "truncation = ";
    if (sampler.truncation) os << *sampler.truncation; else os << "none";
    os << "\n";
    os << "r_override = ";
    if (sampler.r_override) os << *sampler.r_override; else os << "none";
    os << "\n";
    os << "sample_seed = " << sampler.seed << "\n";
    os << "dataset_source = "
       << (dataset.source == DatasetSpec::Source::Synthetic ? "synthetic" : "folder") << "\n";
    if (!dataset.folder.empty()) os << "dataset_folder = " << dataset.folder.string() << "\n";
    {
        os << "dataset_classes = ";
        for (size_t i = 0; i < dataset.classes.size(); ++i)
            os << (i ? "," : "") << dataset.classes[i];
        os << "\n";
    }
    os << "n_per_class = " << dataset.n_per_class << "\n";
    os << "flip_prob = " << dataset.flip_prob << "\n";
    os << "center_crop = " << (dataset.center_crop ? "true" : "false") << "\n";
    os << "checkpoint_dir = " << checkpoint_dir.string() << "\n";
    os << "metrics_csv = " << metrics_csv.string() << "\n";
    os << "output_dir = " << output_dir.string() << "\n";
    os << "checkpoint_every = " << checkpoint_every << "\n";
    return os.str();
}

}  // namespace sphere
