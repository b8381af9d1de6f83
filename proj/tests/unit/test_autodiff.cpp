#include <doctest.h>

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "sphere/autodiff.hpp"
#include "sphere/rng.hpp"

namespace ag = sphere::ag;
using ag::Var;
using sphere::Rng;
using sphere::Shape;
using sphere::TensorData;

namespace {

Var<double> random_leaf(Shape shape, Rng& rng, double scl = 1.0) {
    std::vector<double> v(static_cast<size_t>(sphere::numel(shape)));
    for (auto& x : v) x = rng.normal() * scl;
    return Var<double>::leaf(std::move(shape), std::move(v), true);
}

// Central finite differences against the analytic gradient for every element
// of every leaf. The loss functor must rebuild the graph from current leaf
// values on each call.
void check_gradients(const std::function<Var<double>()>& loss_fn, std::vector<Var<double>> leaves,
                     double rel_tol = 1e-5, double h = 1e-6) {
    auto loss = loss_fn();
    for (auto& l : leaves) l.zero_grad();
    ag::backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves) analytic.push_back(l.grad());

    ag::NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        for (size_t i = 0; i < leaf.val().size(); ++i) {
            const double orig = leaf.val()[i];
            leaf.val_mut()[i] = orig + h;
            const double up = loss_fn().item();
            leaf.val_mut()[i] = orig - h;
            const double dn = loss_fn().item();
            leaf.val_mut()[i] = orig;
            const double fd = (up - dn) / (2.0 * h);
            const double an = analytic[li][i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
            INFO("leaf ", li, " elem ", i, " analytic=", an, " fd=", fd);
            CHECK(std::abs(fd - an) / denom < rel_tol);
        }
    }
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("elementwise chain") {
    Rng rng(1);
    auto a = random_leaf({3, 4}, rng);
    auto b = random_leaf({3, 4}, rng);
    check_gradients(
        [&] {
            auto y = ag::mul(ag::add(a, b), ag::sub(a, ag::scale(b, 0.5)));
            return ag::mean_all(y);
        },
        {a, b});
}

TEST_CASE("matmul and linear") {
    Rng rng(2);
    auto x = random_leaf({5, 3}, rng);
    auto w = random_leaf({3, 4}, rng);
    auto b = random_leaf({4}, rng);
    check_gradients([&] { return ag::mean_all(ag::matmul(x, w)); }, {x, w});
    check_gradients([&] { return ag::mean_all(ag::linear(x, w, b)); }, {x, w, b});

    auto x3 = random_leaf({2, 5, 3}, rng);
    check_gradients([&] { return ag::mean_all(ag::gelu(ag::linear(x3, w, b))); }, {x3, w, b});
}

TEST_CASE("bmm and transpose") {
    Rng rng(3);
    auto a = random_leaf({2, 3, 4}, rng);
    auto b = random_leaf({2, 4, 5}, rng);
    auto c = random_leaf({2, 5, 4}, rng);
    check_gradients([&] { return ag::mean_all(ag::bmm(a, b)); }, {a, b});
    check_gradients([&] { return ag::mean_all(ag::bmm(a, ag::transpose_last2(c))); }, {a, c});
}

TEST_CASE("permute and reshape round trip") {
    Rng rng(4);
    auto x = random_leaf({2, 3, 4, 5}, rng);
    check_gradients(
        [&] {
            auto p = ag::permute(x, {0, 2, 1, 3});
            auto r = ag::reshape(p, {2 * 4, 3 * 5});
            return ag::mean_all(ag::tanh_act(r));
        },
        {x});

    // permute then inverse permute restores values
    auto p = ag::permute(x, {3, 1, 0, 2});
    auto back = ag::permute(p, {2, 1, 3, 0});
    for (size_t i = 0; i < x.val().size(); ++i) REQUIRE(back.val()[i] == x.val()[i]);
}

TEST_CASE("activations") {
    Rng rng(5);
    auto x = random_leaf({4, 7}, rng);
    check_gradients([&] { return ag::mean_all(ag::gelu(x)); }, {x});
    check_gradients([&] { return ag::mean_all(ag::silu(x)); }, {x});
    check_gradients([&] { return ag::mean_all(ag::tanh_act(x)); }, {x});
}

TEST_CASE("softmax layernorm rmsnorm") {
    Rng rng(6);
    auto x = random_leaf({3, 6}, rng);
    auto g = random_leaf({6}, rng);
    check_gradients([&] { return ag::mean_all(ag::mul(ag::softmax_lastdim(x), x)); }, {x});
    check_gradients([&] { return ag::mean_all(ag::mul(ag::layernorm_lastdim(x), x)); }, {x});
    check_gradients([&] { return ag::mean_all(ag::mul_lastdim(ag::rmsnorm_lastdim(x), g)); }, {x, g});
}

TEST_CASE("modulate gate chunk") {
    Rng rng(7);
    auto x = random_leaf({2, 3, 4}, rng);
    auto cond = random_leaf({2, 12}, rng);
    check_gradients(
        [&] {
            auto parts = ag::chunk_lastdim(cond, 3);
            auto m = ag::modulate_rows(x, parts[0], parts[1]);
            return ag::mean_all(ag::mul(ag::gate_rows(m, parts[2]), x));
        },
        {x, cond});
}

TEST_CASE("embedding gather") {
    Rng rng(8);
    auto table = random_leaf({5, 4}, rng);
    const std::vector<int> ids = {1, 4, 1, 0};
    check_gradients([&] { return ag::mean_all(ag::silu(ag::embedding(table, ids))); }, {table});
}

TEST_CASE("rope rotation preserves norm and has exact inverse gradient") {
    Rng rng(9);
    const int64_t Tk = 6, hd = 8;
    auto cos_t = std::make_shared<TensorData<double>>(Shape{Tk, hd / 2});
    auto sin_t = std::make_shared<TensorData<double>>(Shape{Tk, hd / 2});
    for (int64_t i = 0; i < Tk * hd / 2; ++i) {
        const double ang = rng.uniform(0.0, 6.28);
        cos_t->v[static_cast<size_t>(i)] = std::cos(ang);
        sin_t->v[static_cast<size_t>(i)] = std::sin(ang);
    }
    auto x = random_leaf({2, 3, Tk, hd}, rng);
    auto y = ag::rope_apply(x, cos_t, sin_t);
    // isometry per (b, h, t) vector
    for (int64_t r = 0; r < 2 * 3 * Tk; ++r) {
        double nx = 0.0, ny = 0.0;
        for (int64_t i = 0; i < hd; ++i) {
            nx += x.val()[static_cast<size_t>(r * hd + i)] * x.val()[static_cast<size_t>(r * hd + i)];
            ny += y.val()[static_cast<size_t>(r * hd + i)] * y.val()[static_cast<size_t>(r * hd + i)];
        }
        CHECK(std::abs(std::sqrt(nx) - std::sqrt(ny)) < 1e-9);
    }
    check_gradients([&] { return ag::mean_all(ag::mul(ag::rope_apply(x, cos_t, sin_t), x)); }, {x});
}

TEST_CASE("conv2d nhwc") {
    Rng rng(10);
    auto x = random_leaf({2, 5, 5, 3}, rng);
    auto w = random_leaf({3, 3, 3, 4}, rng, 0.5);
    auto b = random_leaf({4}, rng);
    check_gradients([&] { return ag::mean_all(ag::tanh_act(ag::conv2d_nhwc(x, w, b, 2, 1))); },
                    {x, w, b}, 1e-4);
}

TEST_CASE("spherify rows") {
    Rng rng(11);
    auto x = random_leaf({3, 16}, rng);
    auto y = ag::spherify_rows(x);
    for (int64_t r = 0; r < 3; ++r) {
        double n = 0.0;
        for (int64_t i = 0; i < 16; ++i)
            n += y.val()[static_cast<size_t>(r * 16 + i)] * y.val()[static_cast<size_t>(r * 16 + i)];
        CHECK(std::abs(std::sqrt(n) - 4.0) < 1e-12);
    }
    check_gradients([&] { return ag::mean_all(ag::mul(ag::spherify_rows(x), x)); }, {x});

    auto zero = Var<double>::leaf({1, 4}, {0, 0, 0, 0}, true);
    CHECK_THROWS_AS(ag::spherify_rows(zero), sphere::DegenerateLatent);
}

TEST_CASE("norm bound rows is identity inside the ball") {
    Rng rng(12);
    const double limit = 4.0;  // sqrt(16)
    auto small = random_leaf({1, 16}, rng, 0.1);
    auto bounded = ag::norm_bound_rows(small, limit);
    for (size_t i = 0; i < small.val().size(); ++i) CHECK(bounded.val()[i] == small.val()[i]);

    auto big = random_leaf({2, 16}, rng, 10.0);
    auto y = ag::norm_bound_rows(big, limit);
    for (int64_t r = 0; r < 2; ++r) {
        double n = 0.0;
        for (int64_t i = 0; i < 16; ++i)
            n += y.val()[static_cast<size_t>(r * 16 + i)] * y.val()[static_cast<size_t>(r * 16 + i)];
        CHECK(std::sqrt(n) <= limit + 1e-9);
    }
    check_gradients([&] { return ag::mean_all(ag::mul(ag::norm_bound_rows(big, limit), big)); }, {big});
    check_gradients([&] { return ag::mean_all(ag::mul(ag::norm_bound_rows(small, limit), small)); },
                    {small});
}

TEST_CASE("noise add passes sigma=0 rows through exactly") {
    Rng rng(13);
    auto x = random_leaf({2, 8}, rng);
    TensorData<double> e(Shape{2, 8});
    rng.fill_normal(e.v);
    auto y = ag::add_scaled_noise_rows(x, e, {0.0, 2.0});
    for (int64_t i = 0; i < 8; ++i) CHECK(y.val()[static_cast<size_t>(i)] == x.val()[static_cast<size_t>(i)]);
    for (int64_t i = 0; i < 8; ++i)
        CHECK(y.val()[static_cast<size_t>(8 + i)] ==
              doctest::Approx(x.val()[static_cast<size_t>(8 + i)] + 2.0 * e.v[static_cast<size_t>(8 + i)]));
    check_gradients([&] { return ag::mean_all(ag::mul(ag::add_scaled_noise_rows(x, e, {0.0, 2.0}), x)); },
                    {x});
}

TEST_CASE("losses") {
    Rng rng(14);
    auto a = random_leaf({3, 5}, rng);
    auto b = random_leaf({3, 5}, rng, 3.0);  // spread out so |d| stays away from the beta kink
    check_gradients([&] { return ag::smooth_l1_mean(a, b, 1.0); }, {a, b}, 1e-4);
    check_gradients([&] { return ag::mse_mean(a, b); }, {a, b});
    check_gradients([&] { return ag::cosine_distance_rows_mean(a, b); }, {a, b});

    // value spot checks
    auto zero = ag::smooth_l1_mean(a, a, 1.0);
    CHECK(zero.item() == 0.0);
}

TEST_CASE("detach blocks gradient flow") {
    Rng rng(15);
    auto a = random_leaf({2, 3}, rng);
    auto loss = ag::mean_all(ag::mul(ag::detach(a), a));
    a.zero_grad();
    ag::backward(loss);
    // d/da mean(detach(a) * a) = detach(a)/N, not 2a/N
    for (size_t i = 0; i < a.val().size(); ++i)
        CHECK(a.grad()[i] == doctest::Approx(a.val()[i] / 6.0));
}

TEST_CASE("no-grad mode builds no graph") {
    Rng rng(16);
    auto a = random_leaf({2, 2}, rng);
    ag::NoGradGuard ng;
    auto y = ag::mean_all(ag::mul(a, a));
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("sum_all matches mean_all scaling") {
    Rng rng(17);
    auto a = random_leaf({4, 4}, rng);
    CHECK(ag::sum_all(a).item() == doctest::Approx(ag::mean_all(a).item() * 16.0));
    check_gradients([&] { return ag::sum_all(ag::mul(a, a)); }, {a});
}

TEST_SUITE_END();
