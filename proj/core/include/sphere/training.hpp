#pragma once

// Training step and driver: encode, spherify, paired noise draws sharing one
// direction, double decode, re-encode, the three-term loss, AdamW with global
// gradient clipping, linear-warmup + cosine schedule, CFG label dropout.

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sphere/autodiff.hpp"
#include "sphere/checkpoint.hpp"
#include "sphere/data.hpp"
#include "sphere/errors.hpp"
#include "sphere/geometry.hpp"
#include "sphere/losses.hpp"
#include "sphere/network.hpp"
#include "sphere/rng.hpp"

namespace sphere {

struct TrainConfig {
    int64_t batch_size = 16;
    double learning_rate = 1e-3;
    double min_learning_rate = 1e-6;
    int64_t warmup_epochs = 2;
    int64_t total_epochs = 40;
    double weight_decay = 0.0;
    // adaptive-moment defaults of the usual convention
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip_norm = 1.0;
    uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (warmup_epochs >= total_epochs)
            throw ConfigError("TrainConfig: warmup_epochs must be < total_epochs");
        if (min_learning_rate > learning_rate)
            throw ConfigError("TrainConfig: min_learning_rate must be <= learning_rate");
        if (learning_rate <= 0.0) throw ConfigError("TrainConfig: learning_rate must be > 0");
        if (grad_clip_norm <= 0.0) throw ConfigError("TrainConfig: grad_clip_norm must be > 0");
    }
};

struct LrSchedule {
    double lr = 1e-3;
    double min_lr = 1e-6;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
};

// Linear ramp 0 -> lr over the warmup, then cosine from lr to min_lr at the
// final step. The driver evaluates at 1-based step indices so the last
// completed step lands exactly on min_lr.
inline double lr_at(int64_t step, const LrSchedule& s) {
    if (step <= 0) return 0.0;
    if (s.warmup_steps > 0 && step <= s.warmup_steps)
        return s.lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    if (step >= s.total_steps) return s.min_lr;
    const double progress = static_cast<double>(step - s.warmup_steps) /
                            static_cast<double>(s.total_steps - s.warmup_steps);
    return s.min_lr + 0.5 * (s.lr - s.min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

inline LrSchedule make_schedule(const TrainConfig& tc, int64_t steps_per_epoch) {
    return {tc.learning_rate, tc.min_learning_rate, tc.warmup_epochs * steps_per_epoch,
            tc.total_epochs * steps_per_epoch};
}

// Each label independently replaced by null_id with probability p.
inline std::vector<int> cfg_dropout(const std::vector<int>& ids, double p, int null_id, Rng& rng) {
    std::vector<int> out(ids);
    for (auto& id : out)
        if (rng.uniform() < p) id = null_id;
    return out;
}

// Decoupled-weight-decay adaptive-moment optimizer over the named parameter
// map; state iterates in map (name) order so updates are deterministic.
template <typename T>
class AdamW {
  public:
    AdamW(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::map<std::string, ag::Var<T>>& params, double lr, double weight_decay) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, p] : params) {
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.size() != p.val().size()) m.assign(p.val().size(), T(0));
            if (v.size() != p.val().size()) v.assign(p.val().size(), T(0));
            const auto& g = p.grad();
            if (g.empty()) continue;
            auto& w = p.val_mut();
            for (size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
                const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                double wi = static_cast<double>(w[i]);
                if (weight_decay != 0.0) wi -= lr * weight_decay * wi;
                wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
                w[i] = static_cast<T>(wi);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

    std::map<std::string, TensorData<float>> export_arrays() const {
        std::map<std::string, TensorData<float>> out;
        auto dump = [&](const char* prefix, const std::map<std::string, std::vector<T>>& src) {
            for (const auto& [name, vec] : src) {
                TensorData<float> t;
                t.shape = {static_cast<int64_t>(vec.size())};
                t.v.resize(vec.size());
                for (size_t i = 0; i < vec.size(); ++i) t.v[i] = static_cast<float>(vec[i]);
                out.emplace(std::string(prefix) + name, std::move(t));
            }
        };
        dump("opt.m.", m_);
        dump("opt.v.", v_);
        return out;
    }

    void import_arrays(const std::map<std::string, TensorData<float>>& arrays, int64_t steps) {
        t_ = steps;
        for (const auto& [name, arr] : arrays) {
            std::map<std::string, std::vector<T>>* dst = nullptr;
            std::string key;
            if (name.rfind("opt.m.", 0) == 0) {
                dst = &m_;
                key = name.substr(6);
            } else if (name.rfind("opt.v.", 0) == 0) {
                dst = &v_;
                key = name.substr(6);
            } else {
                continue;
            }
            auto& vec = (*dst)[key];
            vec.resize(arr.v.size());
            for (size_t i = 0; i < arr.v.size(); ++i) vec[i] = static_cast<T>(arr.v[i]);
        }
    }

  private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, std::vector<T>> m_;
    std::map<std::string, std::vector<T>> v_;
};

// Scale all gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
template <typename T>
double clip_global_grad_norm(std::map<std::string, ag::Var<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params)
        for (const T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& [name, p] : params) {
            auto& g = const_cast<std::vector<T>&>(p.grad());
            for (auto& x : g) x *= s;
        }
    }
    return norm;
}

// One forward pass of the training graph; exposed so tests can force draws.
template <typename T>
struct TrainForward {
    ag::Var<T> v_flat;        // spherified clean latent [B, L]
    ag::Var<T> x_hat_noisy;   // D(v_noisy)
    ag::Var<T> x_hat_heavy;   // D(v_NOISY)
    ag::Var<T> re_encoded;    // E(D(v_NOISY)) raw latent
    LossTerms<T> terms;
    ag::Var<T> total;
    LossReport report;
};

// When frozen_pixcon_target is set, the pixel-consistency target is that
// constant instead of detach(D(v_noisy)). At the unperturbed parameters both
// paths have identical values and identical analytic gradients; the frozen
// form is what central finite differences must probe, since re-running the
// forward at perturbed parameters would otherwise move the stop-gradient
// target along with them.
template <typename T>
TrainForward<T> training_forward(const Model<T>& model, const FeatureExtractor<T>& fx,
                                 const LossWeights& weights, const ag::Var<T>& images,
                                 const std::vector<int>& ids, const std::vector<NoiseDraw>& draws,
                                 const TensorData<T>* frozen_pixcon_target = nullptr) {
    const int64_t B = images.shape()[0];
    const int64_t L = model.config().latent_len();
    if (static_cast<int64_t>(draws.size()) != B)
        throw ConfigError("training_forward: one noise draw per sample required");

    TensorData<T> e(Shape{B, L});
    std::vector<T> sigma(static_cast<size_t>(B)), sigma_sub(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        const auto& d = draws[static_cast<size_t>(b)];
        if (static_cast<int64_t>(d.direction.size()) != L)
            throw ConfigError("training_forward: noise direction length mismatch");
        for (int64_t i = 0; i < L; ++i)
            e.v[static_cast<size_t>(b * L + i)] = static_cast<T>(d.direction[static_cast<size_t>(i)]);
        sigma[static_cast<size_t>(b)] = static_cast<T>(d.sigma);
        sigma_sub[static_cast<size_t>(b)] = static_cast<T>(d.sigma_sub);
    }

    TrainForward<T> out;
    auto z = model.encode(images, ids);
    out.v_flat = ag::spherify_rows(ag::reshape(z, {B, L}));
    // both perturbations share the same direction e
    auto v_noisy = ag::spherify_rows(ag::add_scaled_noise_rows(out.v_flat, e, sigma_sub));
    auto v_heavy = ag::spherify_rows(ag::add_scaled_noise_rows(out.v_flat, e, sigma));
    out.x_hat_noisy = model.decode(v_noisy, ids);
    out.x_hat_heavy = model.decode(v_heavy, ids);
    out.re_encoded = model.encode(out.x_hat_heavy, ids);

    out.terms.pix_recon = pix_recon_loss(out.x_hat_noisy, images, weights, fx);
    const auto target = frozen_pixcon_target
                            ? ag::Var<T>::leaf(frozen_pixcon_target->shape, frozen_pixcon_target->v)
                            : ag::detach(out.x_hat_noisy);
    out.terms.pix_con = pix_con_loss(out.x_hat_heavy, target, weights, fx);
    out.terms.lat_con = lat_con_loss(out.v_flat, out.re_encoded);
    out.total = total_loss(out.terms, weights, &out.report);
    return out;
}

struct TrainState {
    int64_t step = 0;
    uint64_t seed = 0;
    AdamW<float> opt{0.9, 0.999, 1e-8};
};

struct StepReport {
    LossReport loss;
    double lr = 0.0;
    double grad_norm = 0.0;
};

// Executes one optimizer step on a prepared batch (labels already include CFG
// dropout; draws already sampled). Aborts with the offending batch index on a
// non-finite loss.
StepReport train_step(Model<float>& model, const FeatureExtractor<float>& fx,
                      const LossWeights& weights, const TrainConfig& tc,
                      const TensorData<float>& images, const std::vector<int>& ids,
                      const std::vector<NoiseDraw>& draws, TrainState& state, double lr);

struct TrainPaths {
    std::filesystem::path checkpoint_dir;
    std::filesystem::path metrics_csv;
    int64_t checkpoint_every = 500;
};

struct TrainResult {
    int64_t steps = 0;
    std::filesystem::path final_checkpoint;
};

// Full driver: epoch shuffling, augmentation, CFG dropout, per-sample noise,
// periodic checkpoints (parameters + optimizer moments), metrics CSV with
// header "step,l_pix_recon,l_pix_con,l_lat_con,total". Deterministic under
// (seed, data, config); resuming from a saved checkpoint reproduces the
// uninterrupted trajectory because every RNG stream is derived from
// (seed, step) or (seed, epoch).
TrainResult run_training(Model<float>& model, const FeatureExtractor<float>& fx, const Dataset& data,
                         const TrainConfig& tc, const NoisePolicy& noise, const LossWeights& weights,
                         const TrainPaths& paths,
                         const std::optional<std::filesystem::path>& resume_from = std::nullopt);

}  // namespace sphere
