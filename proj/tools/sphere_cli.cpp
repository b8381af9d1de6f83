// Command-line entry point: train, generate, reconstruct, interpolate, edit,
// eval, and latent-viz over one shared flat config format. Exit codes:
// 0 success, 2 config error, 3 runtime numeric error, 4 I/O error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sphere/checkpoint.hpp"
#include "sphere/data.hpp"
#include "sphere/errors.hpp"
#include "sphere/evaluation.hpp"
#include "sphere/image_io.hpp"
#include "sphere/run_config.hpp"
#include "sphere/sampling.hpp"
#include "sphere/training.hpp"

namespace fs = std::filesystem;
using namespace sphere;

namespace {

fs::path default_out_dir() {
    if (const char* env = std::getenv("SPHERE_OUT_DIR")) return fs::path(env);
    return fs::path("runs/out");
}

RunConfig load_run_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    std::map<std::string, std::string> kv;
    if (!config_path.empty()) kv = parse_kv_file(config_path);
    apply_overrides(kv, overrides);
    return RunConfig::from_kv(kv);
}

Dataset load_dataset(const RunConfig& cfg) {
    if (cfg.dataset.source == DatasetSpec::Source::Folder)
        return load_folder(cfg.dataset.folder, cfg.dataset);
    return synth_generate(cfg.dataset, cfg.train.seed);
}

struct LoadedModel {
    Model<float> model;
    Checkpoint ckpt;
};

LoadedModel load_model(const fs::path& checkpoint_path) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    Model<float> model(ckpt.config);
    model.load_state_dict(ckpt.arrays);
    return {std::move(model), std::move(ckpt)};
}

TensorData<float> load_input_image(const fs::path& path, const ModelConfig& cfg) {
    TensorData<float> img = read_png(path);
    img = center_crop_square(img);
    return resize_bilinear(img, cfg.image_size, cfg.image_size);
}

std::vector<fs::path> collect_pngs(const fs::path& input) {
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(input);
    }
    if (files.empty()) throw IoError("no PNG inputs under " + input.string());
    return files;
}

TensorData<float> image_row(const TensorData<float>& batch, int64_t i) {
    const int64_t h = batch.shape[1], w = batch.shape[2], c = batch.shape[3];
    TensorData<float> out(Shape{h, w, c});
    std::copy_n(batch.v.data() + i * h * w * c, h * w * c, out.v.data());
    return out;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& resume) {
    RunConfig cfg = load_run_config(config_path, overrides);
    Dataset data = load_dataset(cfg);
    Model<float> model = Model<float>::init(cfg.model, cfg.train.seed);
    FeatureExtractor<float> fx(cfg.model.channels, cfg.train.seed);

    fs::create_directories(cfg.output_dir);
    {
        std::ofstream snap(cfg.output_dir / "config.resolved.txt");
        snap << cfg.serialize();
        snap << "# model params = " << model.param_count() << "\n";
    }

    TrainPaths paths{cfg.checkpoint_dir, cfg.metrics_csv, cfg.checkpoint_every};
    std::optional<fs::path> resume_path;
    if (!resume.empty()) resume_path = fs::path(resume);
    const TrainResult result = run_training(model, fx, data, cfg.train, cfg.noise, cfg.weights,
                                            paths, resume_path);
    std::cout << "trained " << result.steps << " steps; final checkpoint: "
              << result.final_checkpoint.string() << "\n";
    std::cout << "metrics: " << cfg.metrics_csv.string() << "\n";
    return 0;
}

int cmd_generate(const std::string& checkpoint, int64_t n, std::optional<int> class_id,
                 SamplerPlan plan, const std::string& out_dir, int grid_cols) {
    auto [model, ckpt] = load_model(checkpoint);
    NoisePolicy policy;  // angle-uniform defaults; sampling only uses sigma_max
    const auto result = generate(model, n, class_id, plan, policy);

    const fs::path out(out_dir);
    fs::create_directories(out);
    std::ofstream manifest(out / "manifest.csv");
    manifest << "filename,class,seed,steps,cfg,cfg_position,per_position_scale,nfe\n";
    for (int64_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04lld.png", static_cast<long long>(i));
        write_png(out / name, image_row(result.images, i));
        manifest << name << ',' << (class_id ? std::to_string(*class_id) : "null") << ','
                 << plan.seed << ',' << plan.steps << ',' << plan.cfg_scale << ','
                 << to_string(plan.cfg_position) << ',' << result.per_position_scale << ','
                 << result.nfe << "\n";
    }
    write_png_grid(out / "grid.png", result.images, grid_cols);
    std::cout << "wrote " << n << " samples to " << out.string() << " (NFE " << result.nfe
              << ", enc passes " << result.encoder_passes << ", dec passes "
              << result.decoder_passes << ")\n";
    return 0;
}

int cmd_reconstruct(const std::string& checkpoint, const std::string& input,
                    const std::string& out_dir) {
    auto [model, ckpt] = load_model(checkpoint);
    const auto files = collect_pngs(input);
    const int64_t n = static_cast<int64_t>(files.size());
    TensorData<float> batch(Shape{n, model.config().image_size, model.config().image_size,
                                  model.config().channels});
    for (int64_t i = 0; i < n; ++i) {
        const auto img = load_input_image(files[static_cast<size_t>(i)], model.config());
        std::copy(img.v.begin(), img.v.end(), batch.v.begin() + i * img.numel());
    }
    const auto recon = reconstruct(model, batch);

    const fs::path out(out_dir);
    fs::create_directories(out);
    TensorData<float> pairs(Shape{2 * n, batch.shape[1], batch.shape[2], batch.shape[3]});
    for (int64_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "recon_%04lld.png", static_cast<long long>(i));
        write_png(out / name, image_row(recon, i));
        std::copy_n(batch.v.data() + i * batch.numel() / n, batch.numel() / n,
                    pairs.v.data() + (2 * i) * batch.numel() / n);
        std::copy_n(recon.v.data() + i * batch.numel() / n, batch.numel() / n,
                    pairs.v.data() + (2 * i + 1) * batch.numel() / n);
    }
    write_png_grid(out / "pairs.png", pairs, 2);
    std::cout << "reconstructed " << n << " images into " << out.string() << "\n";
    return 0;
}

int cmd_interpolate(const std::string& checkpoint, int grid_n, uint64_t seed,
                    const std::vector<int>& corner_classes, SamplerPlan plan,
                    const std::string& out_dir) {
    auto [model, ckpt] = load_model(checkpoint);
    const int64_t L = model.config().latent_len();
    Rng rng(seed);
    TensorData<float> corners(Shape{4, L});
    for (auto& x : corners.v) x = static_cast<float>(rng.normal());
    plan.seed = seed;
    NoisePolicy policy;
    const auto grid = interpolation_grid(model, corners, corner_classes, grid_n, plan, policy);
    const fs::path out(out_dir);
    fs::create_directories(out);
    write_png_grid(out / "interpolation.png", grid, grid_n);
    std::cout << "wrote " << out.string() << "/interpolation.png\n";
    return 0;
}

int cmd_edit(const std::string& mode, const std::string& checkpoint, const std::string& input,
             const std::string& input_b, int target_class, EditPlan plan,
             const StitchSpec& stitch_spec, const std::string& out_dir) {
    auto [model, ckpt] = load_model(checkpoint);
    NoisePolicy policy;
    const fs::path out(out_dir);
    fs::create_directories(out);

    if (mode == "manipulate") {
        const auto img = load_input_image(input, model.config());
        TensorData<float> batch(Shape{1, img.shape[0], img.shape[1], img.shape[2]}, img.v);
        plan.mode = EditPlan::Mode::Manipulate;
        plan.target_class = target_class;
        const auto result = manipulate(model, batch, plan, policy);
        write_png(out / "edited.png", image_row(result.images, 0));
    } else if (mode == "crossover") {
        if (input_b.empty()) throw ConfigError("crossover needs --input-b");
        const auto a = load_input_image(input, model.config());
        const auto b = load_input_image(input_b, model.config());
        write_png(out / "composite.png", stitch(a, b, stitch_spec));
        const auto result = crossover(a, b, stitch_spec, model, plan, policy);
        write_png(out / "edited.png", image_row(result.images, 0));
    } else {
        throw ConfigError("edit --mode must be manipulate or crossover");
    }
    std::cout << "wrote " << (out / "edited.png").string() << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path,
             const std::vector<std::string>& overrides, int64_t n_samples, SamplerPlan plan,
             int n_projections, const std::string& out_dir) {
    auto [model, ckpt] = load_model(checkpoint);
    RunConfig cfg = load_run_config(config_path, overrides);
    cfg.train.seed = ckpt.seed;  // evaluation uses the training-time extractor and data seeds
    Dataset data = load_dataset(cfg);
    FeatureExtractor<float> fx(model.config().channels, ckpt.seed);

    const auto gen_report = eval_generation(model, plan, cfg.noise, fx, data, n_samples);
    const auto uni_report = conditional_uniformity(model, data, n_projections, plan.seed);

    const fs::path out(out_dir);
    fs::create_directories(out);
    {
        std::ofstream csv(out / "report.csv");
        csv << "metric,value\n";
        csv << "frechet_feature_distance," << gen_report.distance << "\n";
        csv << "noise_baseline_distance," << gen_report.noise_baseline << "\n";
        for (const auto& [cls, d] : gen_report.per_class)
            csv << "frechet_class_" << cls << "," << d << "\n";
        csv << "swd_pooled," << uni_report.pooled_swd << "\n";
        for (const auto& [cls, d] : uni_report.per_class_swd)
            csv << "swd_class_" << cls << "," << d << "\n";
    }
    {
        std::ofstream summary(out / "summary.txt");
        summary << "samples: " << gen_report.n_samples << " (steps " << plan.steps << ", cfg "
                << plan.cfg_scale << " at " << to_string(plan.cfg_position) << ")\n";
        summary << "frechet feature distance (stand-in metric, not comparable to pretrained-"
                   "network FID): "
                << gen_report.distance << "\n";
        summary << "pure-noise baseline: " << gen_report.noise_baseline << "\n";
        summary << "pooled SWD to uniform: " << uni_report.pooled_swd << "\n";
    }
    std::cout << "frechet=" << gen_report.distance << " noise_baseline="
              << gen_report.noise_baseline << " swd_pooled=" << uni_report.pooled_swd << "\n";
    std::cout << "report: " << (out / "report.csv").string() << "\n";
    return 0;
}

int cmd_latent_viz(const std::string& checkpoint, const std::string& config_path,
                   const std::vector<std::string>& overrides, uint64_t seed,
                   const std::string& out_csv) {
    auto [model, ckpt] = load_model(checkpoint);
    RunConfig cfg = load_run_config(config_path, overrides);
    cfg.train.seed = ckpt.seed;
    Dataset data = load_dataset(cfg);

    const auto latents = encode_dataset(model, data);
    Rng rng(seed);
    const auto coords = project_to_3d(latents, rng);

    fs::create_directories(fs::path(out_csv).parent_path());
    std::ofstream csv(out_csv);
    if (!csv) throw IoError("cannot open " + out_csv);
    csv << "class,x,y,z\n";
    for (size_t i = 0; i < coords.size(); ++i)
        csv << data.labels[i] << ',' << coords[i][0] << ',' << coords[i][1] << ',' << coords[i][2]
            << "\n";
    std::cout << "wrote " << coords.size() << " rows to " << out_csv << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sphere: spherical-latent encoder/decoder image generation"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train a model from a config file");
    std::string train_config, train_resume;
    std::vector<std::string> train_overrides;
    int64_t train_total_epochs = -1;
    int64_t train_seed = -1;
    train->add_option("--config", train_config, "flat key=value config file");
    train->add_option("--set", train_overrides, "override: key=value (repeatable)");
    train->add_option("--total-epochs", train_total_epochs, "override total_epochs");
    train->add_option("--seed", train_seed, "override seed");
    train->add_option("--resume", train_resume, "resume from checkpoint");

    // generate
    auto* gen = app.add_subcommand("generate", "sample images from a checkpoint");
    std::string gen_ckpt, gen_out = (default_out_dir() / "generate").string();
    int64_t gen_n = 16;
    int gen_class = -1;
    int64_t gen_steps = 1;
    double gen_gamma = 0.0, gen_cfg = 1.0;
    std::string gen_cfg_pos = "none";
    bool gen_share = true;
    double gen_trunc = 0.0, gen_r_override = -1.0;
    uint64_t gen_seed = 0;
    int gen_cols = 4;
    gen->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
    gen->add_option("--n", gen_n, "number of samples");
    gen->add_option("--class", gen_class, "class id (omit for null/unconditional)");
    gen->add_option("--steps", gen_steps, "sampling steps T");
    gen->add_option("--gamma", gen_gamma, "noise decay exponent");
    gen->add_flag("--share-noise,!--no-share-noise", gen_share, "share noise across steps");
    gen->add_option("--cfg", gen_cfg, "guidance scale");
    gen->add_option("--cfg-position", gen_cfg_pos, "none|enc|dec|combo");
    gen->add_option("--truncation", gen_trunc, "truncated prior bound (0 = off)");
    gen->add_option("--r-override", gen_r_override, "fixed refinement r (< 0 = schedule)");
    gen->add_option("--seed", gen_seed, "rng seed");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--grid-cols", gen_cols, "columns in grid.png");

    // reconstruct
    auto* rec = app.add_subcommand("reconstruct", "encode and decode real images");
    std::string rec_ckpt, rec_input, rec_out = (default_out_dir() / "reconstruct").string();
    rec->add_option("--checkpoint", rec_ckpt)->required();
    rec->add_option("--input", rec_input, "PNG file or directory")->required();
    rec->add_option("--out", rec_out, "output directory");

    // interpolate
    auto* interp = app.add_subcommand("interpolate", "bilinear latent interpolation grid");
    std::string int_ckpt, int_out = (default_out_dir() / "interpolate").string();
    int int_grid = 5;
    uint64_t int_seed = 0;
    std::vector<int> int_classes;
    int64_t int_steps = 1;
    double int_gamma = 0.0;
    bool int_share = true;
    interp->add_option("--checkpoint", int_ckpt)->required();
    interp->add_option("--grid-n", int_grid, "grid side length");
    interp->add_option("--seed", int_seed, "rng seed for corner latents");
    interp->add_option("--classes", int_classes, "four corner class ids")->expected(0, 4);
    interp->add_option("--steps", int_steps, "decode steps per cell");
    interp->add_option("--gamma", int_gamma, "noise decay exponent");
    interp->add_flag("--share-noise,!--no-share-noise", int_share, "share noise across steps");
    interp->add_option("--out", int_out, "output directory");

    // edit
    auto* edit = app.add_subcommand("edit", "conditional manipulation / image crossover");
    std::string edit_mode, edit_ckpt, edit_input, edit_input_b,
        edit_out = (default_out_dir() / "edit").string();
    int edit_class = -1;
    int64_t edit_steps = -1;
    double edit_r = -1.0, edit_gamma = -1.0;
    std::string edit_axis = "vertical";
    double edit_fraction = 0.5;
    uint64_t edit_seed = 0;
    edit->add_option("--mode", edit_mode, "manipulate|crossover")->required();
    edit->add_option("--checkpoint", edit_ckpt)->required();
    edit->add_option("--input", edit_input, "source image")->required();
    edit->add_option("--input-b", edit_input_b, "second source (crossover)");
    edit->add_option("--target-class", edit_class, "target class id (manipulate)");
    edit->add_option("--steps", edit_steps, "refinement steps");
    edit->add_option("--r", edit_r, "noise strength");
    edit->add_option("--gamma", edit_gamma, "decay exponent");
    edit->add_option("--stitch-axis", edit_axis, "vertical|horizontal");
    edit->add_option("--stitch-fraction", edit_fraction, "portion from image A");
    edit->add_option("--seed", edit_seed, "rng seed");
    edit->add_option("--out", edit_out, "output directory");

    // eval
    auto* ev = app.add_subcommand("eval", "feature distance and uniformity diagnostics");
    std::string ev_ckpt, ev_config, ev_out = (default_out_dir() / "eval").string();
    std::vector<std::string> ev_overrides;
    int64_t ev_n = 256;
    int64_t ev_steps = 1;
    double ev_cfg = 1.0;
    std::string ev_cfg_pos = "none";
    int ev_projections = 64;
    uint64_t ev_seed = 0;
    bool ev_share = true;
    double ev_gamma = 0.0;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--config", ev_config, "config for the reference dataset");
    ev->add_option("--set", ev_overrides, "config override (repeatable)");
    ev->add_option("--n", ev_n, "generated sample count");
    ev->add_option("--steps", ev_steps, "sampling steps");
    ev->add_option("--gamma", ev_gamma, "noise decay exponent");
    ev->add_flag("--share-noise,!--no-share-noise", ev_share, "share noise across steps");
    ev->add_option("--cfg", ev_cfg, "guidance scale");
    ev->add_option("--cfg-position", ev_cfg_pos, "none|enc|dec|combo");
    ev->add_option("--n-projections", ev_projections, "SWD projection count");
    ev->add_option("--seed", ev_seed, "rng seed");
    ev->add_option("--out", ev_out, "output directory");

    // latent-viz
    auto* viz = app.add_subcommand("latent-viz", "export 3-D latent projections as CSV");
    std::string viz_ckpt, viz_config, viz_out = (default_out_dir() / "latents.csv").string();
    std::vector<std::string> viz_overrides;
    uint64_t viz_seed = 0;
    viz->add_option("--checkpoint", viz_ckpt)->required();
    viz->add_option("--config", viz_config, "config for the dataset");
    viz->add_option("--set", viz_overrides, "config override (repeatable)");
    viz->add_option("--seed", viz_seed, "projection seed");
    viz->add_option("--out", viz_out, "output CSV path");

    try {
        app.parse(argc, argv);

        if (*train) {
            if (train_total_epochs >= 0)
                train_overrides.push_back("total_epochs=" + std::to_string(train_total_epochs));
            if (train_seed >= 0) train_overrides.push_back("seed=" + std::to_string(train_seed));
            return cmd_train(train_config, train_overrides, train_resume);
        }
        if (*gen) {
            SamplerPlan plan;
            plan.steps = gen_steps;
            plan.gamma = gen_gamma;
            plan.share_noise = gen_share;
            plan.cfg_scale = gen_cfg;
            plan.cfg_position = cfg_position_from_string(gen_cfg_pos);
            if (gen_trunc > 0.0) plan.truncation = gen_trunc;
            if (gen_r_override >= 0.0) plan.r_override = gen_r_override;
            plan.seed = gen_seed;
            std::optional<int> cls;
            if (gen_class >= 0) cls = gen_class;
            return cmd_generate(gen_ckpt, gen_n, cls, plan, gen_out, gen_cols);
        }
        if (*rec) return cmd_reconstruct(rec_ckpt, rec_input, rec_out);
        if (*interp) {
            SamplerPlan plan;
            plan.steps = int_steps;
            plan.gamma = int_gamma;
            plan.share_noise = int_share;
            return cmd_interpolate(int_ckpt, int_grid, int_seed, int_classes, plan, int_out);
        }
        if (*edit) {
            EditPlan plan = edit_mode == "crossover" ? EditPlan::crossover_defaults()
                                                     : EditPlan::manipulate_defaults(edit_class);
            if (edit_steps >= 0) plan.steps = edit_steps;
            if (edit_r >= 0.0) plan.r = edit_r;
            if (edit_gamma >= 0.0) plan.gamma = edit_gamma;
            plan.seed = edit_seed;
            StitchSpec stitch_spec;
            stitch_spec.axis = edit_axis == "horizontal" ? StitchSpec::Axis::Horizontal
                                                         : StitchSpec::Axis::Vertical;
            stitch_spec.fraction = edit_fraction;
            return cmd_edit(edit_mode, edit_ckpt, edit_input, edit_input_b, edit_class, plan,
                            stitch_spec, edit_out);
        }
        if (*ev) {
            SamplerPlan plan;
            plan.steps = ev_steps;
            plan.gamma = ev_gamma;
            plan.share_noise = ev_share;
            plan.cfg_scale = ev_cfg;
            plan.cfg_position = cfg_position_from_string(ev_cfg_pos);
            plan.seed = ev_seed;
            return cmd_eval(ev_ckpt, ev_config, ev_overrides, ev_n, plan, ev_projections, ev_out);
        }
        if (*viz) return cmd_latent_viz(viz_ckpt, viz_config, viz_overrides, viz_seed, viz_out);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
