#pragma once

// The three training losses: pixel reconstruction, pixel consistency with a
// stop-gradient target, and latent consistency (cosine on flattened whole
// samples), plus the frozen convolutional feature pyramid standing in for a
// pretrained perceptual network.

#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "sphere/autodiff.hpp"
#include "sphere/errors.hpp"
#include "sphere/rng.hpp"

namespace sphere {

struct LossWeights {
    double pix_recon_l1 = 1.0;
    double pix_recon_perceptual = 1.0;
    double pix_con_l1 = 0.5;
    double pix_con_perceptual = 0.5;
    double lat_con = 0.1;

    void validate() const {
        for (const double w : {pix_recon_l1, pix_recon_perceptual, pix_con_l1, pix_con_perceptual, lat_con})
            if (w < 0.0) throw ConfigError("LossWeights: weights must be >= 0");
    }
};

// Fixed, seeded, never-trained 3-stage strided conv pyramid (16/32/64
// channels, stride 2 each) with a smooth pointwise nonlinearity.
template <typename T>
class FeatureExtractor {
  public:
    static constexpr int kStages = 3;

    FeatureExtractor(int64_t in_channels, uint64_t seed) : in_channels_(in_channels) {
        Rng rng(seed);
        Rng init = rng.fork("feature-extractor");
        int64_t cin = in_channels;
        const int64_t couts[kStages] = {16, 32, 64};
        for (int s = 0; s < kStages; ++s) {
            const int64_t cout = couts[s];
            const double std_dev = std::sqrt(2.0 / static_cast<double>(3 * 3 * cin));
            std::vector<T> w(static_cast<size_t>(3 * 3 * cin * cout));
            for (auto& x : w) x = static_cast<T>(init.normal() * std_dev);
            weights_.push_back(ag::Var<T>::leaf({3, 3, cin, cout}, std::move(w), false));
            biases_.push_back(ag::Var<T>::leaf({cout}, std::vector<T>(static_cast<size_t>(cout), T(0)), false));
            cin = cout;
        }
    }

    // Replace stage parameters with externally supplied frozen features.
    void set_stage(int stage, ag::Var<T> w, ag::Var<T> b) {
        w.set_requires_grad(false);
        b.set_requires_grad(false);
        weights_.at(static_cast<size_t>(stage)) = std::move(w);
        biases_.at(static_cast<size_t>(stage)) = std::move(b);
    }

    int64_t in_channels() const { return in_channels_; }

    std::vector<ag::Var<T>> stages(const ag::Var<T>& images) const {
        std::vector<ag::Var<T>> out;
        ag::Var<T> x = images;
        for (int s = 0; s < kStages; ++s) {
            x = ag::tanh_act(ag::conv2d_nhwc(x, weights_[static_cast<size_t>(s)],
                                             biases_[static_cast<size_t>(s)], 2, 1));
            out.push_back(x);
        }
        return out;
    }

    // Stable digest of all parameters; the training invariants assert it
    // never changes across optimizer steps.
    uint64_t param_digest() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](const std::vector<T>& v) {
            for (const T x : v) {
                uint64_t bits = 0;
                const auto d = static_cast<double>(x);
                static_assert(sizeof(double) == 8);
                std::memcpy(&bits, &d, 8);
                h = (h ^ bits) * 0x100000001b3ULL;
            }
        };
        for (const auto& w : weights_) mix(w.val());
        for (const auto& b : biases_) mix(b.val());
        return h;
    }

  private:
    int64_t in_channels_;
    std::vector<ag::Var<T>> weights_;
    std::vector<ag::Var<T>> biases_;
};

template <typename T>
ag::Var<T> smooth_l1(const ag::Var<T>& a, const ag::Var<T>& b, double beta = 1.0) {
    return ag::smooth_l1_mean(a, b, beta);
}

// Sum over pyramid stages of mean squared feature differences.
template <typename T>
ag::Var<T> perceptual(const ag::Var<T>& a, const ag::Var<T>& b, const FeatureExtractor<T>& fx) {
    const auto fa = fx.stages(a);
    const auto fb = fx.stages(b);
    ag::Var<T> total = ag::mse_mean(fa[0], fb[0]);
    for (size_t s = 1; s < fa.size(); ++s) total = ag::add(total, ag::mse_mean(fa[s], fb[s]));
    return total;
}

template <typename T>
ag::Var<T> weighted_pixel_loss(const ag::Var<T>& a, const ag::Var<T>& b, double w_l1, double w_perc,
                               const FeatureExtractor<T>& fx) {
    ag::Var<T> total = ag::Var<T>::scalar(T(0));
    if (w_l1 > 0.0) total = ag::add(total, ag::scale(smooth_l1(a, b), static_cast<T>(w_l1)));
    if (w_perc > 0.0) total = ag::add(total, ag::scale(perceptual(a, b, fx), static_cast<T>(w_perc)));
    return total;
}

// D(v_noisy) against the input image x.
template <typename T>
ag::Var<T> pix_recon_loss(const ag::Var<T>& decoded_noisy, const ag::Var<T>& x,
                          const LossWeights& w, const FeatureExtractor<T>& fx) {
    return weighted_pixel_loss(decoded_noisy, x, w.pix_recon_l1, w.pix_recon_perceptual, fx);
}

// D(v_NOISY) against the detached decode of the lightly-noised latent. The
// caller passes the target through ag::detach.
template <typename T>
ag::Var<T> pix_con_loss(const ag::Var<T>& decoded_heavy, const ag::Var<T>& detached_target,
                        const LossWeights& w, const FeatureExtractor<T>& fx) {
    return weighted_pixel_loss(decoded_heavy, detached_target, w.pix_con_l1, w.pix_con_perceptual, fx);
}

// 1 - cos between the flattened sphere latent and the flattened re-encoding.
template <typename T>
ag::Var<T> lat_con_loss(const ag::Var<T>& v_flat, const ag::Var<T>& re_encoded) {
    auto re_flat = ag::reshape(re_encoded, {re_encoded.shape()[0],
                                            re_encoded.numel() / re_encoded.shape()[0]});
    auto v2 = ag::reshape(v_flat, re_flat.shape());
    return ag::cosine_distance_rows_mean(v2, re_flat);
}

template <typename T>
struct LossTerms {
    ag::Var<T> pix_recon;  // already carries its l1/perceptual weights
    ag::Var<T> pix_con;    // already carries its l1/perceptual weights
    ag::Var<T> lat_con;    // unweighted; scaled by weights.lat_con in the total
};

struct LossReport {
    double pix_recon = 0.0;
    double pix_con = 0.0;
    double lat_con = 0.0;
    double total = 0.0;
};

template <typename T>
ag::Var<T> total_loss(const LossTerms<T>& terms, const LossWeights& w, LossReport* report = nullptr) {
    auto total = ag::add(ag::add(terms.pix_recon, terms.pix_con),
                         ag::scale(terms.lat_con, static_cast<T>(w.lat_con)));
    if (report) {
        report->pix_recon = static_cast<double>(terms.pix_recon.item());
        report->pix_con = static_cast<double>(terms.pix_con.item());
        report->lat_con = static_cast<double>(terms.lat_con.item());
        report->total = static_cast<double>(total.item());
    }
    return total;
}

}  // namespace sphere
