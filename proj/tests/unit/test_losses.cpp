#include <doctest.h>

#include <cmath>
#include <vector>

#include "sphere/losses.hpp"
#include "sphere/rng.hpp"

namespace ag = sphere::ag;
using namespace sphere;

namespace {

ag::Var<double> random_images_d(int64_t n, int64_t size, uint64_t seed, bool requires_grad = false) {
    Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(n * size * size * 3));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return ag::Var<double>::leaf({n, size, size, 3}, std::move(v), requires_grad);
}

}  // namespace

TEST_SUITE_BEGIN("losses");

TEST_CASE("smooth L1 piecewise values") {
    auto a = ag::Var<double>::leaf({1}, {0.5});
    auto b = ag::Var<double>::leaf({1}, {0.0});
    CHECK(smooth_l1(a, b).item() == doctest::Approx(0.125));
    auto c = ag::Var<double>::leaf({1}, {2.0});
    CHECK(smooth_l1(c, b).item() == doctest::Approx(1.5));
    CHECK(smooth_l1(a, a).item() == 0.0);
}

TEST_CASE("perceptual term: zero on identical, symmetric, frozen-seed stable") {
    FeatureExtractor<double> fx(3, 77);
    auto a = random_images_d(2, 8, 1);
    auto b = random_images_d(2, 8, 2);
    CHECK(perceptual(a, a, fx).item() == 0.0);
    CHECK(perceptual(a, b, fx).item() == doctest::Approx(perceptual(b, a, fx).item()));

    FeatureExtractor<double> fx2(3, 77);
    CHECK(perceptual(a, b, fx).item() == perceptual(a, b, fx2).item());
    CHECK(fx.param_digest() == fx2.param_digest());
    FeatureExtractor<double> fx3(3, 78);
    CHECK(fx.param_digest() != fx3.param_digest());
}

TEST_CASE("pix_recon composes the separately computed terms") {
    FeatureExtractor<double> fx(3, 5);
    auto a = random_images_d(2, 8, 3);
    auto b = random_images_d(2, 8, 4);
    LossWeights w;
    w.pix_recon_l1 = 1.0;
    w.pix_recon_perceptual = 1.0;
    const double combined = pix_recon_loss(a, b, w, fx).item();
    // oracle: each term computed independently
    const double expect = smooth_l1(a, b).item() + perceptual(a, b, fx).item();
    CHECK(combined == doctest::Approx(expect).epsilon(1e-12));

    w.pix_recon_l1 = 0.0;
    w.pix_recon_perceptual = 0.0;
    CHECK(pix_recon_loss(a, b, w, fx).item() == 0.0);
    CHECK(pix_recon_loss(a, a, LossWeights{}, fx).item() == 0.0);
}

TEST_CASE("pix_con shares the weighted kernel with pix_recon") {
    FeatureExtractor<double> fx(3, 6);
    auto a = random_images_d(2, 8, 5);
    auto b = random_images_d(2, 8, 6);
    LossWeights w;
    w.pix_con_l1 = w.pix_recon_l1 = 0.7;
    w.pix_con_perceptual = w.pix_recon_perceptual = 0.3;
    CHECK(pix_con_loss(a, ag::detach(b), w, fx).item() ==
          doctest::Approx(pix_recon_loss(a, b, w, fx).item()).epsilon(1e-12));
    CHECK(pix_con_loss(a, ag::detach(a), w, fx).item() == 0.0);
}

TEST_CASE("stop-gradient: parameters exclusive to the detached branch get zero gradient") {
    FeatureExtractor<double> fx(3, 7);
    Rng rng(9);
    // phi feeds only the (detached) target branch
    std::vector<double> pv(static_cast<size_t>(2 * 8 * 8 * 3));
    for (auto& x : pv) x = rng.uniform(-0.5, 0.5);
    auto phi = ag::Var<double>::leaf({2, 8, 8, 3}, pv, true);
    auto pred = random_images_d(2, 8, 10, true);

    LossWeights w;
    auto loss = pix_con_loss(pred, ag::detach(ag::tanh_act(phi)), w, fx);
    phi.zero_grad();
    pred.zero_grad();
    ag::backward(loss);
    CHECK(phi.grad().empty());  // never touched by backward
    double pred_grad_mag = 0.0;
    for (const double g : pred.grad()) pred_grad_mag += std::abs(g);
    CHECK(pred_grad_mag > 0.0);
}

TEST_CASE("latent consistency loss values") {
    auto v = ag::Var<double>::leaf({1, 4}, {1.0, 0.0, 1.0, 0.0});
    auto parallel = ag::Var<double>::leaf({1, 4}, {2.0, 0.0, 2.0, 0.0});
    auto ortho = ag::Var<double>::leaf({1, 4}, {0.0, 3.0, 0.0, -3.0});
    CHECK(lat_con_loss(v, parallel).item() == doctest::Approx(0.0));
    CHECK(lat_con_loss(v, ortho).item() == doctest::Approx(1.0));

    // positive-rescale invariance
    Rng rng(11);
    for (int t = 0; t < 10; ++t) {
        const double c = std::exp(rng.uniform(-3.0, 3.0));
        std::vector<double> scaled = {c, 0.0, c, 0.0};
        auto vc = ag::Var<double>::leaf({1, 4}, scaled);
        CHECK(lat_con_loss(v, vc).item() == doctest::Approx(0.0).epsilon(1e-12));
    }

    auto zero = ag::Var<double>::leaf({1, 4}, {0.0, 0.0, 0.0, 0.0});
    CHECK_THROWS_AS(lat_con_loss(v, zero), DegenerateLatent);
}

TEST_CASE("latent consistency accepts grid-shaped re-encodings") {
    auto v = ag::Var<double>::leaf({1, 8}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto grid = ag::Var<double>::leaf({1, 2, 2, 2}, {2, 4, 6, 8, 10, 12, 14, 16});
    CHECK(lat_con_loss(v, grid).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("total loss is the weighted sum with per-term report") {
    LossWeights w;  // defaults carry the documented toy weights
    CHECK(w.pix_recon_l1 == 1.0);
    CHECK(w.pix_recon_perceptual == 1.0);
    CHECK(w.pix_con_l1 == 0.5);
    CHECK(w.pix_con_perceptual == 0.5);
    CHECK(w.lat_con == 0.1);

    LossTerms<double> terms;
    terms.pix_recon = ag::Var<double>::scalar(0.0);
    terms.pix_con = ag::Var<double>::scalar(0.0);
    terms.lat_con = ag::Var<double>::scalar(0.0);
    LossReport report;
    CHECK(total_loss(terms, w, &report).item() == 0.0);
    CHECK(report.total == 0.0);

    terms.lat_con = ag::Var<double>::scalar(2.0);
    CHECK(total_loss(terms, w).item() == doctest::Approx(0.2));
    terms.lat_con = ag::Var<double>::scalar(0.0);
    terms.pix_recon = ag::Var<double>::scalar(3.0);
    CHECK(total_loss(terms, w).item() == doctest::Approx(3.0));

    LossWeights bad;
    bad.lat_con = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("all losses are nonnegative on random inputs") {
    FeatureExtractor<double> fx(3, 21);
    LossWeights w;
    Rng rng(30);
    for (int t = 0; t < 5; ++t) {
        auto a = random_images_d(2, 8, 100 + static_cast<uint64_t>(t));
        auto b = random_images_d(2, 8, 200 + static_cast<uint64_t>(t));
        CHECK(pix_recon_loss(a, b, w, fx).item() >= 0.0);
        CHECK(pix_con_loss(a, ag::detach(b), w, fx).item() >= 0.0);
        std::vector<double> v1(16), v2(16);
        for (auto& x : v1) x = rng.normal();
        for (auto& x : v2) x = rng.normal();
        auto l1 = ag::Var<double>::leaf({1, 16}, v1);
        auto l2 = ag::Var<double>::leaf({1, 16}, v2);
        const double lc = lat_con_loss(l1, l2).item();
        CHECK(lc >= 0.0);
        CHECK(lc <= 2.0);
    }
}

TEST_SUITE_END();
