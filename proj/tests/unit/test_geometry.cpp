#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "sphere/geometry.hpp"
#include "sphere/rng.hpp"

using namespace sphere;

namespace {

double norm_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (const double x : v) acc += x * x;
    return std::sqrt(acc);
}

NoisePolicy cifar_policy() {
    NoisePolicy p;
    p.mode = JitterMode::AngleUniform;
    p.base_angle_lo_deg = 0.0;
    p.base_angle_hi_deg = 80.0;
    p.mix_angle_range_deg = {{80.0, 85.0}};
    p.mix_probability = 0.1;
    return p;
}

}  // namespace

TEST_SUITE_BEGIN("geometry");

TEST_CASE("spherify on simple vectors") {
    const auto v1 = spherify({1, 1, 1, 1});
    for (const double x : v1.values) CHECK(x == doctest::Approx(1.0));
    const auto v2 = spherify({2, 2, 2, 2});
    for (const double x : v2.values) CHECK(x == doctest::Approx(1.0));
}

TEST_CASE("spherify norm is sqrt(L) for a 4096-dim gaussian draw") {
    Rng rng(101);
    std::vector<double> z(4096);
    rng.fill_normal(z);
    const auto v = spherify(z);
    CHECK(std::abs(norm_of(v.values) - 64.0) < 1e-4);
}

TEST_CASE("spherify rejects near-zero input") {
    CHECK_THROWS_AS(spherify(std::vector<double>(8, 0.0)), DegenerateLatent);
    CHECK_THROWS_AS(spherify(std::vector<double>(8, 1e-14)), DegenerateLatent);
}

TEST_CASE("spherify is idempotent and scale invariant") {
    Rng rng(102);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> z(256);
        rng.fill_normal(z);
        const auto once = spherify(z);
        const auto twice = spherify(once);
        for (size_t i = 0; i < z.size(); ++i)
            CHECK(std::abs(twice.values[i] - once.values[i]) < 1e-6);

        const double c = std::exp(rng.uniform(-6.0, 6.0));
        std::vector<double> scaled(z);
        for (auto& x : scaled) x *= c;
        const auto rescaled = spherify(scaled);
        for (size_t i = 0; i < z.size(); ++i)
            CHECK(rescaled.values[i] == doctest::Approx(once.values[i]).epsilon(1e-9));
    }
}

TEST_CASE("uniform sphere sampling is reproducible with the right norm") {
    Rng a(5), b(5);
    const auto s1 = sample_sphere_uniform(2, a);
    const auto s2 = sample_sphere_uniform(2, b);
    CHECK(s1.values == s2.values);
    CHECK(norm_of(s1.values) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("uniform sphere coordinates have near-zero mean (10k draws, L=16384)") {
    // Monte Carlo oracle: after scaling, coordinates are approximately standard
    // normal, so per-coordinate means over 10k draws concentrate near 0.
    const int64_t L = 16384;
    const int n = 10000;
    Rng rng(103);
    std::vector<double> sums(static_cast<size_t>(L), 0.0);
    for (int i = 0; i < n; ++i) {
        const auto s = sample_sphere_uniform(L, rng);
        for (size_t j = 0; j < sums.size(); ++j) sums[j] += s.values[j];
    }
    for (size_t j = 0; j < sums.size(); ++j) {
        const double mean = sums[j] / n;
        REQUIRE(mean >= -0.05);
        REQUIRE(mean <= 0.05);
    }
}

TEST_CASE("truncated prior changes coordinates but keeps the sphere norm") {
    const int64_t L = 16384;
    Rng a(104), b(104);
    const auto plain = sample_sphere_uniform(L, a);
    const auto trunc = sample_sphere_uniform(L, b, 0.05);
    CHECK(norm_of(plain.values) == doctest::Approx(std::sqrt(static_cast<double>(L))));
    CHECK(norm_of(trunc.values) == doctest::Approx(std::sqrt(static_cast<double>(L))));
    // Pre-spherify the truncated draw is bounded by 0.05; post-spherify every
    // coordinate is pushed to roughly +-1 magnitude, but distributions differ:
    // the truncated one has no tail beyond ~2x its uniformized bound.
    double max_plain = 0.0, max_trunc = 0.0;
    for (const double x : plain.values) max_plain = std::max(max_plain, std::abs(x));
    for (const double x : trunc.values) max_trunc = std::max(max_trunc, std::abs(x));
    CHECK(max_plain > max_trunc);  // gaussian tail exceeds the clipped one
}

TEST_CASE("noisy spherify with sigma zero is bitwise identity") {
    Rng rng(105);
    const auto v = sample_sphere_uniform(64, rng);
    std::vector<double> e(64);
    rng.fill_normal(e);
    const auto out = noisy_spherify(v, e, 0.0);
    CHECK(out.values == v.values);
}

TEST_CASE("constructed orthogonal noise gives angle arctan(sigma)") {
    // Table anchor: sigma 5.7 <-> 80 degrees.
    const int64_t L = 4096;
    Rng rng(106);
    const auto v = sample_sphere_uniform(L, rng);
    std::vector<double> g(static_cast<size_t>(L));
    rng.fill_normal(g);
    // remove the component along v, then rescale to ||e|| = sqrt(L) = ||v||
    double dot = 0.0, vv = 0.0;
    for (size_t i = 0; i < g.size(); ++i) {
        dot += g[i] * v.values[i];
        vv += v.values[i] * v.values[i];
    }
    for (size_t i = 0; i < g.size(); ++i) g[i] -= dot / vv * v.values[i];
    const double target = std::sqrt(static_cast<double>(L)) / norm_of(g);
    for (auto& x : g) x *= target;

    const auto out = noisy_spherify(v, g, 5.7);
    const double angle = angle_between_deg(out.values, v.values);
    CHECK(std::abs(angle - std::atan(5.7) * 180.0 / 3.14159265358979) < 1e-6);
    CHECK(std::abs(angle - 80.0) < 0.1);
}

TEST_CASE("random gaussian noise mean angle approaches arctan(sigma)") {
    // Monte Carlo oracle at the 85-degree anchor (sigma 11.4).
    const int64_t L = 4096;
    const int trials = 1000;
    Rng rng(107);
    const auto v = sample_sphere_uniform(L, rng);
    std::vector<double> e(static_cast<size_t>(L));
    double acc = 0.0;
    for (int t = 0; t < trials; ++t) {
        rng.fill_normal(e);
        const auto out = noisy_spherify(v, e, 11.4);
        acc += angle_between_deg(out.values, v.values);
    }
    const double mean = acc / trials;
    CHECK(std::abs(mean - 85.0) < 1.0);
}

TEST_CASE("draw_noise endpoints and definitions") {
    NoisePolicy p;
    p.mode = JitterMode::SigmaUniform;
    p.sigma_max_direct = 5.7;
    p.validate();
    CHECK(sigma_from_r(p, 1.0) == doctest::Approx(5.7));
    CHECK(sigma_from_r(p, 0.0) == 0.0);
    CHECK(sigma_sub_from_s(10.0, 0.5) == doctest::Approx(5.0));
}

TEST_CASE("angle-uniform mix probability matches 0.1 over 1e5 draws") {
    const auto p = cifar_policy();
    p.validate();
    Rng rng(108);
    const double sigma_at_80 = angle_to_sigma(80.0);
    int above = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const auto draw = draw_noise(p, 4, rng);
        REQUIRE(draw.sigma_sub <= 0.5 * draw.sigma + 1e-12);
        if (draw.sigma > sigma_at_80) ++above;
    }
    const double frac = static_cast<double>(above) / n;
    CHECK(std::abs(frac - 0.10) < 0.01);
}

TEST_CASE("angle sigma conversions") {
    CHECK(angle_to_sigma(45.0) == doctest::Approx(1.0));
    CHECK(std::abs(angle_to_sigma(88.0) - 28.6) < 0.1);
    CHECK(angle_to_sigma(0.0) == 0.0);
    CHECK_THROWS_AS(angle_to_sigma(90.0), InvalidAngle);
    CHECK_THROWS_AS(angle_to_sigma(-1.0), InvalidAngle);

    for (double a = 0.0; a <= 89.0; a += 0.5)
        CHECK(std::abs(sigma_to_angle(angle_to_sigma(a)) - a) < 1e-9);
}

TEST_CASE("orthogonality concentration") {
    const int64_t L = 1024;
    const int trials = 10000;
    Rng rng(109);
    const auto v = sample_sphere_uniform(L, rng);
    const double vn = norm_of(v.values);
    std::vector<double> e(static_cast<size_t>(L));
    double acc = 0.0;
    for (int t = 0; t < trials; ++t) {
        rng.fill_normal(e);
        double dot = 0.0;
        for (size_t i = 0; i < e.size(); ++i) dot += e[i] * v.values[i];
        acc += std::abs(dot) / (vn * norm_of(e));
    }
    CHECK(acc / trials <= 3.0 / std::sqrt(static_cast<double>(L)));
}

TEST_CASE("lerp endpoints are exact and midpoint of orthogonal latents sits at 45 degrees") {
    Rng rng(110);
    const auto a = sample_sphere_uniform(64, rng);
    // construct b orthogonal to a on the same sphere
    std::vector<double> g(64);
    rng.fill_normal(g);
    double dot = 0.0, aa = 0.0;
    for (size_t i = 0; i < g.size(); ++i) {
        dot += g[i] * a.values[i];
        aa += a.values[i] * a.values[i];
    }
    for (size_t i = 0; i < g.size(); ++i) g[i] -= dot / aa * a.values[i];
    const auto b = spherify(g);

    CHECK(lerp_latents(a, b, 0.0).values == a.values);
    CHECK(lerp_latents(a, b, 1.0).values == b.values);

    // closed-form oracle on the 2-D subspace: mid = (a+b)/2 normalized lies at
    // 45 degrees from both endpoints
    const auto mid = lerp_latents(a, b, 0.5);
    CHECK(std::abs(angle_between_deg(mid.values, a.values) - 45.0) < 1e-6);
    CHECK(std::abs(angle_between_deg(mid.values, b.values) - 45.0) < 1e-6);
}

TEST_CASE("antipodal midpoint is an error") {
    Rng rng(111);
    const auto a = sample_sphere_uniform(32, rng);
    SphereVector b = a;
    for (auto& x : b.values) x = -x;
    CHECK_THROWS_AS(lerp_latents(a, b, 0.5), DegenerateLatent);
}

TEST_CASE("bilerp with identical corners returns that corner") {
    Rng rng(112);
    const auto c = sample_sphere_uniform(48, rng);
    const auto out = bilerp_latents(c, c, c, c, 0.3, 0.7);
    for (size_t i = 0; i < c.values.size(); ++i)
        CHECK(out.values[i] == doctest::Approx(c.values[i]).epsilon(1e-9));
}

TEST_CASE("project_to_3d basics") {
    Rng rng(113);
    const auto v = sample_sphere_uniform(128, rng);
    Rng p1(7), p2(7);
    const auto one = project_to_3d({v}, p1);
    CHECK(one.size() == 1);
    CHECK(std::abs(std::sqrt(one[0][0] * one[0][0] + one[0][1] * one[0][1] + one[0][2] * one[0][2]) -
                   1.0) < 1e-6);
    const auto again = project_to_3d({v}, p2);
    CHECK(one[0] == again[0]);
}

TEST_CASE("projected uniform cloud covers all octants") {
    const int64_t L = 2048;
    const int n = 5000;
    Rng rng(114);
    std::vector<SphereVector> latents(n);
    for (auto& l : latents) l = sample_sphere_uniform(L, rng);
    Rng prj(115);
    const auto pts = project_to_3d(latents, prj);
    std::array<int, 8> counts{};
    for (const auto& p : pts) {
        const int o = (p[0] > 0 ? 1 : 0) | (p[1] > 0 ? 2 : 0) | (p[2] > 0 ? 4 : 0);
        ++counts[static_cast<size_t>(o)];
    }
    for (const int c : counts) CHECK(c > 0);
}

TEST_CASE("wasserstein of a shifted sample equals the shift") {
    Rng rng(116);
    std::vector<double> a(512);
    for (auto& x : a) x = rng.normal();
    std::vector<double> b(a);
    const double c = 0.37;
    for (auto& x : b) x += c;
    CHECK(std::abs(wasserstein2_1d(a, b) - c) < 1e-9);
}

TEST_CASE("swd separates uniform clouds from a point mass") {
    const int64_t L = 256;
    const int n = 2048;
    Rng rng(117);
    std::vector<SphereVector> uniform(n), point(n);
    for (auto& l : uniform) l = sample_sphere_uniform(L, rng);
    const auto p = sample_sphere_uniform(L, rng);
    for (auto& l : point) l = p;

    Rng r1(8), r2(8);
    const double d_uniform = sliced_wasserstein_to_uniform(uniform, 64, r1);
    const double d_point = sliced_wasserstein_to_uniform(point, 64, r2);
    CHECK(d_point > 10.0 * d_uniform);
}

TEST_CASE("swd of a set against itself is zero") {
    Rng rng(118);
    std::vector<SphereVector> set(64);
    for (auto& l : set) l = sample_sphere_uniform(32, rng);
    Rng prj(9);
    CHECK(sliced_wasserstein(set, set, 16, prj) == 0.0);
}

TEST_CASE("noise policy validation") {
    NoisePolicy p = cifar_policy();
    CHECK_NOTHROW(p.validate());
    CHECK(p.sigma_max() == doctest::Approx(std::tan(80.0 * 3.14159265358979 / 180.0)));

    p.mix_angle_range_deg = {{70.0, 85.0}};  // overlaps base range
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = cifar_policy();
    p.mix_probability = 1.5;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = cifar_policy();
    p.base_angle_hi_deg = 95.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_SUITE_END();
