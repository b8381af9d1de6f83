#pragma once

// Spherical-latent math: spherification, noise injection, angle/NSR
// conversions, uniform sampling, interpolation, projections and the sliced
// Wasserstein uniformity measure. Everything here is pure given an explicit
// RNG and computed in double; the differentiable counterparts used inside
// the training graph live in autodiff.hpp.

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "sphere/errors.hpp"
#include "sphere/rng.hpp"

namespace sphere {

inline constexpr double kDegenerateNorm = 1e-12;

struct LatentShape {
    int64_t h = 0;
    int64_t w = 0;
    int64_t d = 0;

    int64_t len() const { return h * w * d; }
    bool operator==(const LatentShape&) const = default;
};

// A point on the radius-sqrt(L) sphere, flattened from latent_shape.
struct SphereVector {
    std::vector<double> values;
    LatentShape latent_shape;

    int64_t len() const { return static_cast<int64_t>(values.size()); }
};

enum class JitterMode { SigmaUniform, AngleUniform };

// Training-noise magnitude policy. In angle mode sigma_max derives from the
// top of the base angle range (sigma = tan(alpha)); the mix band only
// augments training draws and does not move sigma_max.
struct NoisePolicy {
    JitterMode mode = JitterMode::AngleUniform;
    double base_angle_lo_deg = 0.0;
    double base_angle_hi_deg = 80.0;
    std::optional<std::pair<double, double>> mix_angle_range_deg = std::pair<double, double>{80.0, 85.0};
    double mix_probability = 0.1;
    double sigma_max_direct = 0.0;  // used in SigmaUniform mode

    void validate() const;
    double sigma_max() const;
};

struct NoiseDraw {
    std::vector<double> direction;  // e
    double sigma = 0.0;
    double sigma_sub = 0.0;  // s * sigma with s in [0, 0.5]
};

// RMS-normalize the flattened latent onto the radius-sqrt(L) sphere.
SphereVector spherify(const std::vector<double>& z, LatentShape shape = {});
SphereVector spherify(const SphereVector& z);

// e ~ N(0, I)^L (optionally truncated per coordinate), then spherify.
SphereVector sample_sphere_uniform(int64_t len, Rng& rng,
                                   std::optional<double> truncation = std::nullopt,
                                   LatentShape shape = {});

// f(v + sigma * e); sigma == 0 returns v bitwise-unchanged.
SphereVector noisy_spherify(const SphereVector& v, const std::vector<double>& e, double sigma);

NoiseDraw draw_noise(const NoisePolicy& policy, int64_t len, Rng& rng);

// Deterministic kernels behind draw_noise, exposed for forced-value tests.
double sigma_from_r(const NoisePolicy& policy, double r);
double sigma_sub_from_s(double sigma, double s);

// sigma = tan(alpha); the NSR eta equals sigma. alpha in degrees, [0, 90).
double angle_to_sigma(double alpha_deg);
double sigma_to_angle(double sigma);

// Angle between two vectors, in degrees.
double angle_between_deg(const std::vector<double>& a, const std::vector<double>& b);

// Linear mix then one spherification (not a geodesic).
SphereVector lerp_latents(const SphereVector& a, const SphereVector& b, double t);

// Two linear lerps (u selects between the 00/01 and 10/11 edges via v) and a
// single final spherification.
SphereVector bilerp_latents(const SphereVector& c00, const SphereVector& c01,
                            const SphereVector& c10, const SphereVector& c11, double u, double v);

// One fixed random Gaussian 3xL matrix applied to all inputs; each projected
// vector normalized to unit length.
std::vector<std::array<double, 3>> project_to_3d(const std::vector<SphereVector>& latents, Rng& rng);

// Exact 2-Wasserstein distance between equal-size 1-D samples (sorted-sample
// coupling); the per-projection kernel of the sliced distance.
double wasserstein2_1d(std::vector<double> a, std::vector<double> b);

// Mean over orthogonalized random 1-D projections of the exact sorted-sample
// 2-Wasserstein distance between two equal-size sets.
double sliced_wasserstein(const std::vector<SphereVector>& a, const std::vector<SphereVector>& b,
                          int n_projections, Rng& rng);

// Reference set is a fresh uniform-sphere sample of equal size.
double sliced_wasserstein_to_uniform(const std::vector<SphereVector>& latents, int n_projections,
                                     Rng& rng);

}  // namespace sphere
