#pragma once

// Shared harness for the gradient suite: analytic gradients of the full
// training loss on the tiny double-precision model against central finite
// differences.
//
// The pixel-consistency target is frozen at the base parameters for the
// finite-difference probes: that is exactly the function whose gradient the
// stop-gradient (detach) form computes analytically.

#include <cmath>
#include <string>
#include <vector>

#include "sphere/geometry.hpp"
#include "sphere/losses.hpp"
#include "sphere/network.hpp"
#include "sphere/rng.hpp"
#include "sphere/training.hpp"

namespace sphere::testsupport {

inline ModelConfig tiny_gradcheck_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 2;
    cfg.hidden_size = 16;
    cfg.n_blocks = 2;
    cfg.n_heads = 2;
    cfg.mixer_depth = 1;
    cfg.latent_d = 4;  // L = 4*4*4 = 64
    cfg.n_classes = 2;
    return cfg;
}

struct GradcheckReport {
    int64_t params_total = 0;
    int64_t elements_checked = 0;
    double max_rel_err = 0.0;
    std::string worst_param;
    bool frozen_target_matches_detach = false;
};

// stride = n checks every n-th element of each parameter tensor (always
// including element 0); stride 1 covers every parameter element.
inline GradcheckReport run_tiny_gradcheck(int64_t stride, double h = 1e-5) {
    const auto cfg = tiny_gradcheck_config();
    auto model = Model<double>::init(cfg, 404);
    // move off the zero-init manifold so every path carries gradient
    Rng jitter(77);
    for (auto& [name, p] : model.params())
        for (auto& v : p.val_mut()) v += jitter.normal() * 0.05;

    FeatureExtractor<double> fx(cfg.channels, 404);
    LossWeights weights;  // all five weights nonzero by default

    Rng data_rng(505);
    std::vector<double> pixels(static_cast<size_t>(2 * cfg.image_size * cfg.image_size * 3));
    for (auto& v : pixels) v = data_rng.uniform(-1.0, 1.0);
    const auto images = ag::Var<double>::leaf({2, cfg.image_size, cfg.image_size, 3}, pixels);
    const std::vector<int> ids = {0, 1};

    std::vector<NoiseDraw> draws(2);
    for (auto& d : draws) {
        d.direction.resize(static_cast<size_t>(cfg.latent_len()));
        data_rng.fill_normal(d.direction);
    }
    draws[0].sigma = 2.0;
    draws[0].sigma_sub = 0.9;
    draws[1].sigma = 1.0;
    draws[1].sigma_sub = 0.4;

    // capture the detached target at the base point
    TensorData<double> frozen_target;
    double detach_total = 0.0;
    {
        ag::NoGradGuard ng;
        auto fwd = training_forward(model, fx, weights, images, ids, draws);
        frozen_target = TensorData<double>(fwd.x_hat_noisy.shape(), fwd.x_hat_noisy.val());
        detach_total = fwd.report.total;
    }

    GradcheckReport report;

    // analytic gradients on the frozen-target graph
    auto fwd = training_forward(model, fx, weights, images, ids, draws, &frozen_target);
    report.frozen_target_matches_detach = fwd.report.total == detach_total;
    for (auto& [name, p] : model.params()) p.zero_grad();
    ag::backward(fwd.total);
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, p] : model.params()) analytic[name] = p.grad();

    const auto loss_value = [&]() {
        ag::NoGradGuard ng;
        return training_forward(model, fx, weights, images, ids, draws, &frozen_target)
            .report.total;
    };

    for (auto& [name, p] : model.params()) {
        report.params_total += p.numel();
        auto& vals = p.val_mut();
        for (size_t i = 0; i < vals.size(); i += static_cast<size_t>(stride)) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double up = loss_value();
            vals[i] = orig - h;
            const double dn = loss_value();
            vals[i] = orig;
            const double fd = (up - dn) / (2.0 * h);
            const double an = analytic[name][i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            ++report.elements_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

}  // namespace sphere::testsupport
