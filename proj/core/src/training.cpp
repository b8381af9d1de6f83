#include "sphere/training.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

namespace sphere {

namespace {

bool all_finite(const std::vector<float>& v) {
    for (const float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Locate the first sample whose activations went non-finite, for diagnostics.
int64_t first_bad_sample(const TrainForward<float>& fwd) {
    const auto scan = [](const ag::Var<float>& t) -> int64_t {
        const int64_t B = t.shape()[0];
        const int64_t per = t.numel() / B;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < per; ++i)
                if (!std::isfinite(t.val()[static_cast<size_t>(b * per + i)])) return b;
        return -1;
    };
    for (const auto* t : {&fwd.v_flat, &fwd.x_hat_noisy, &fwd.x_hat_heavy, &fwd.re_encoded}) {
        const int64_t b = scan(*t);
        if (b >= 0) return b;
    }
    return -1;
}

}  // namespace

StepReport train_step(Model<float>& model, const FeatureExtractor<float>& fx,
                      const LossWeights& weights, const TrainConfig& tc,
                      const TensorData<float>& images, const std::vector<int>& ids,
                      const std::vector<NoiseDraw>& draws, TrainState& state, double lr) {
    auto input = ag::Var<float>::leaf(images.shape, images.v, false);
    auto fwd = training_forward(model, fx, weights, input, ids, draws);
    if (!std::isfinite(fwd.report.total)) {
        const int64_t bad = first_bad_sample(fwd);
        throw NumericError("non-finite training loss at step " + std::to_string(state.step) +
                           " (batch index " + std::to_string(bad) + ")");
    }
    for (auto& [name, p] : model.params()) p.zero_grad();
    ag::backward(fwd.total);

    StepReport report;
    report.loss = fwd.report;
    report.lr = lr;
    report.grad_norm = clip_global_grad_norm(model.params(), tc.grad_clip_norm);
    state.opt.step(model.params(), lr, tc.weight_decay);
    ++state.step;
    return report;
}

TrainResult run_training(Model<float>& model, const FeatureExtractor<float>& fx, const Dataset& data,
                         const TrainConfig& tc, const NoisePolicy& noise, const LossWeights& weights,
                         const TrainPaths& paths,
                         const std::optional<std::filesystem::path>& resume_from) {
    tc.validate();
    noise.validate();
    weights.validate();
    if (data.n() < 1) throw ConfigError("run_training: dataset is empty");

    const int64_t B = std::min<int64_t>(tc.batch_size, data.n());
    const int64_t steps_per_epoch = std::max<int64_t>(1, data.n() / B);
    const LrSchedule schedule = make_schedule(tc, steps_per_epoch);
    const int64_t L = model.config().latent_len();

    TrainState state;
    state.seed = tc.seed;
    state.opt = AdamW<float>(tc.adam_beta1, tc.adam_beta2, tc.adam_eps);

    bool resumed = false;
    if (resume_from) {
        Checkpoint ckpt = load_into_model(*resume_from, model);
        state.step = static_cast<int64_t>(ckpt.step);
        state.seed = ckpt.seed;
        state.opt.import_arrays(ckpt.arrays, state.step);
        resumed = true;
    }

    if (!paths.checkpoint_dir.empty()) std::filesystem::create_directories(paths.checkpoint_dir);
    if (!paths.metrics_csv.empty()) std::filesystem::create_directories(paths.metrics_csv.parent_path());

    std::ofstream metrics;
    if (!paths.metrics_csv.empty()) {
        const bool append = resumed && std::filesystem::exists(paths.metrics_csv);
        metrics.open(paths.metrics_csv, append ? std::ios::app : std::ios::trunc);
        if (!metrics) throw IoError("cannot open metrics file: " + paths.metrics_csv.string());
        if (!append) metrics << "step,l_pix_recon,l_pix_con,l_lat_con,total\n";
    }

    const Rng master(state.seed);
    const auto save = [&](int64_t step) {
        if (paths.checkpoint_dir.empty()) return std::filesystem::path{};
        Checkpoint ckpt;
        ckpt.config = model.config();
        ckpt.step = static_cast<uint64_t>(step);
        ckpt.seed = state.seed;
        ckpt.arrays = model.state_dict();
        for (auto& [name, arr] : state.opt.export_arrays()) ckpt.arrays.emplace(name, std::move(arr));
        const auto path = paths.checkpoint_dir / ("step_" + std::to_string(step) + ".ckpt");
        save_checkpoint(path, ckpt);
        return path;
    };

    std::vector<int64_t> order(static_cast<size_t>(data.n()));
    int64_t shuffled_epoch = -1;
    TrainResult result;
    const int64_t total_steps = schedule.total_steps;

    for (int64_t step = state.step; step < total_steps; ++step) {
        const int64_t epoch = step / steps_per_epoch;
        const int64_t pos = step % steps_per_epoch;
        if (epoch != shuffled_epoch) {
            std::iota(order.begin(), order.end(), 0);
            Rng shuffle_rng = master.fork("data", static_cast<uint64_t>(epoch));
            shuffle_rng.shuffle(order);
            shuffled_epoch = epoch;
        }

        std::vector<int64_t> batch_idx(order.begin() + pos * B, order.begin() + (pos + 1) * B);
        TensorData<float> images = data.gather(batch_idx);
        Rng aug_rng = master.fork("augment", static_cast<uint64_t>(step));
        for (int64_t b = 0; b < B; ++b)
            augment_in_place(images.v.data() + b * data.sample_size(), data.spec.image_size,
                             data.spec.image_size, data.spec.channels, data.spec.flip_prob, aug_rng);

        std::vector<int> ids;
        if (model.config().conditional()) {
            ids.resize(static_cast<size_t>(B));
            for (int64_t b = 0; b < B; ++b)
                ids[static_cast<size_t>(b)] = data.labels[static_cast<size_t>(batch_idx[static_cast<size_t>(b)])];
            Rng drop_rng = master.fork("dropout", static_cast<uint64_t>(step));
            ids = cfg_dropout(ids, model.config().cfg_null_drop_prob, model.config().null_id(), drop_rng);
        }

        Rng noise_rng = master.fork("noise", static_cast<uint64_t>(step));
        std::vector<NoiseDraw> draws;
        draws.reserve(static_cast<size_t>(B));
        for (int64_t b = 0; b < B; ++b) draws.push_back(draw_noise(noise, L, noise_rng));

        state.step = step;
        const double lr = lr_at(step + 1, schedule);
        const StepReport report = train_step(model, fx, weights, tc, images, ids, draws, state, lr);

        if (metrics.is_open()) {
            metrics << step << ',' << report.loss.pix_recon << ',' << report.loss.pix_con << ','
                    << report.loss.lat_con << ',' << report.loss.total << '\n';
            metrics.flush();
        }
        if (paths.checkpoint_every > 0 && (step + 1) % paths.checkpoint_every == 0 &&
            step + 1 < total_steps)
            save(step + 1);
        result.steps = step + 1;
    }

    result.final_checkpoint = save(total_steps);
    return result;
}

}  // namespace sphere
