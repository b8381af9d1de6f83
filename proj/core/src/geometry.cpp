#include "sphere/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace sphere {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

double norm_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (const double x : v) acc += x * x;
    return std::sqrt(acc);
}

}  // namespace

void NoisePolicy::validate() const {
    if (mode == JitterMode::AngleUniform) {
        if (!(0.0 <= base_angle_lo_deg && base_angle_lo_deg < base_angle_hi_deg &&
              base_angle_hi_deg < 90.0))
            throw ConfigError("NoisePolicy: base angle range must satisfy 0 <= lo < hi < 90");
        if (mix_angle_range_deg) {
            const auto [mlo, mhi] = *mix_angle_range_deg;
            if (!(base_angle_hi_deg <= mlo && mlo < mhi && mhi < 90.0))
                throw ConfigError("NoisePolicy: mix range must satisfy base_hi <= lo < hi < 90");
        }
    } else {
        if (!(sigma_max_direct > 0.0)) throw ConfigError("NoisePolicy: sigma_max must be > 0");
    }
    if (!(mix_probability >= 0.0 && mix_probability <= 1.0))
        throw ConfigError("NoisePolicy: mix_probability must be in [0,1]");
}

double NoisePolicy::sigma_max() const {
    return mode == JitterMode::AngleUniform ? angle_to_sigma(base_angle_hi_deg) : sigma_max_direct;
}

SphereVector spherify(const std::vector<double>& z, LatentShape shape) {
    if (z.empty()) throw ConfigError("spherify: empty input");
    const double nrm = norm_of(z);
    if (nrm < kDegenerateNorm)
        throw DegenerateLatent("spherify: input norm " + std::to_string(nrm) + " below 1e-12");
    const auto len = static_cast<double>(z.size());
    const double s = std::sqrt(len) / nrm;
    SphereVector out;
    out.values.resize(z.size());
    for (size_t i = 0; i < z.size(); ++i) out.values[i] = z[i] * s;
    out.latent_shape = shape.len() == static_cast<int64_t>(z.size()) ? shape
                                                                     : LatentShape{1, 1, static_cast<int64_t>(z.size())};
    return out;
}

SphereVector spherify(const SphereVector& z) { return spherify(z.values, z.latent_shape); }

SphereVector sample_sphere_uniform(int64_t len, Rng& rng, std::optional<double> truncation,
                                   LatentShape shape) {
    if (len < 1) throw ConfigError("sample_sphere_uniform: L must be >= 1");
    std::vector<double> e(static_cast<size_t>(len));
    for (;;) {
        if (truncation) {
            for (auto& x : e) x = rng.truncated_normal(*truncation);
        } else {
            for (auto& x : e) x = rng.normal();
        }
        if (norm_of(e) >= kDegenerateNorm) break;  // measure-zero resample
    }
    return spherify(e, shape);
}

SphereVector noisy_spherify(const SphereVector& v, const std::vector<double>& e, double sigma) {
    if (e.size() != v.values.size()) throw ConfigError("noisy_spherify: noise length mismatch");
    if (sigma < 0.0) throw ConfigError("noisy_spherify: sigma must be >= 0");
    if (sigma == 0.0) return v;  // bitwise-stable path
    std::vector<double> p(v.values);
    for (size_t i = 0; i < p.size(); ++i) p[i] += sigma * e[i];
    return spherify(p, v.latent_shape);
}

double sigma_from_r(const NoisePolicy& policy, double r) {
    return r * policy.sigma_max();
}

double sigma_sub_from_s(double sigma, double s) { return s * sigma; }

NoiseDraw draw_noise(const NoisePolicy& policy, int64_t len, Rng& rng) {
    NoiseDraw out;
    out.direction.resize(static_cast<size_t>(len));
    for (auto& x : out.direction) x = rng.normal();
    if (policy.mode == JitterMode::SigmaUniform) {
        out.sigma = sigma_from_r(policy, rng.uniform());
    } else {
        double lo = policy.base_angle_lo_deg, hi = policy.base_angle_hi_deg;
        if (policy.mix_angle_range_deg && rng.uniform() < policy.mix_probability)
            std::tie(lo, hi) = *policy.mix_angle_range_deg;
        out.sigma = angle_to_sigma(rng.uniform(lo, hi));
    }
    out.sigma_sub = sigma_sub_from_s(out.sigma, rng.uniform(0.0, 0.5));
    return out;
}

double angle_to_sigma(double alpha_deg) {
    if (!(alpha_deg >= 0.0 && alpha_deg < 90.0))
        throw InvalidAngle("angle_to_sigma: alpha must be in [0, 90) degrees, got " +
                           std::to_string(alpha_deg));
    return std::tan(alpha_deg * kDegToRad);
}

double sigma_to_angle(double sigma) {
    if (sigma < 0.0) throw InvalidAngle("sigma_to_angle: sigma must be >= 0");
    return std::atan(sigma) / kDegToRad;
}

double angle_between_deg(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ConfigError("angle_between_deg: length mismatch");
    double dot = 0.0;
    for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    const double na = norm_of(a), nb = norm_of(b);
    if (na < kDegenerateNorm || nb < kDegenerateNorm)
        throw DegenerateLatent("angle_between_deg: zero vector");
    const double c = std::clamp(dot / (na * nb), -1.0, 1.0);
    return std::acos(c) / kDegToRad;
}

SphereVector lerp_latents(const SphereVector& a, const SphereVector& b, double t) {
    if (a.len() != b.len()) throw ConfigError("lerp_latents: length mismatch");
    if (t == 0.0) return a;
    if (t == 1.0) return b;
    std::vector<double> m(a.values.size());
    for (size_t i = 0; i < m.size(); ++i) m[i] = (1.0 - t) * a.values[i] + t * b.values[i];
    return spherify(m, a.latent_shape);  // antipodal midpoint -> DegenerateLatent
}

SphereVector bilerp_latents(const SphereVector& c00, const SphereVector& c01,
                            const SphereVector& c10, const SphereVector& c11, double u, double v) {
    const int64_t len = c00.len();
    if (c01.len() != len || c10.len() != len || c11.len() != len)
        throw ConfigError("bilerp_latents: length mismatch");
    std::vector<double> m(c00.values.size());
    const double w00 = (1.0 - u) * (1.0 - v), w01 = (1.0 - u) * v;
    const double w10 = u * (1.0 - v), w11 = u * v;
    for (size_t i = 0; i < m.size(); ++i)
        m[i] = w00 * c00.values[i] + w01 * c01.values[i] + w10 * c10.values[i] + w11 * c11.values[i];
    return spherify(m, c00.latent_shape);
}

std::vector<std::array<double, 3>> project_to_3d(const std::vector<SphereVector>& latents, Rng& rng) {
    if (latents.empty()) throw ConfigError("project_to_3d: empty input");
    const size_t len = latents.front().values.size();
    for (const auto& l : latents)
        if (l.values.size() != len) throw ConfigError("project_to_3d: mixed lengths");
    // One Gaussian 3xL matrix shared by all inputs.
    std::vector<double> proj(3 * len);
    for (auto& x : proj) x = rng.normal();
    std::vector<std::array<double, 3>> out(latents.size());
    for (size_t n = 0; n < latents.size(); ++n) {
        std::array<double, 3> p{0.0, 0.0, 0.0};
        const auto& v = latents[n].values;
        for (int r = 0; r < 3; ++r) {
            const double* row = proj.data() + static_cast<size_t>(r) * len;
            double acc = 0.0;
            for (size_t i = 0; i < len; ++i) acc += row[i] * v[i];
            p[static_cast<size_t>(r)] = acc;
        }
        const double nrm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        if (nrm >= kDegenerateNorm)
            for (auto& x : p) x /= nrm;
        out[n] = p;
    }
    return out;
}

namespace {

// Orthonormalized Gaussian directions, Gram-Schmidt per block of at most
// min(L, block) vectors.
std::vector<std::vector<double>> orthogonal_directions(int n, size_t len, Rng& rng) {
    std::vector<std::vector<double>> dirs;
    dirs.reserve(static_cast<size_t>(n));
    const size_t block = std::min<size_t>(len, static_cast<size_t>(n));
    while (dirs.size() < static_cast<size_t>(n)) {
        std::vector<std::vector<double>> basis;
        while (basis.size() < block && dirs.size() + basis.size() < static_cast<size_t>(n)) {
            std::vector<double> v(len);
            for (auto& x : v) x = rng.normal();
            for (const auto& u : basis) {
                double dot = 0.0;
                for (size_t i = 0; i < len; ++i) dot += u[i] * v[i];
                for (size_t i = 0; i < len; ++i) v[i] -= dot * u[i];
            }
            const double nrm = norm_of(v);
            if (nrm < 1e-9) continue;  // rank-deficient draw, retry
            for (auto& x : v) x /= nrm;
            basis.push_back(std::move(v));
        }
        for (auto& b : basis) dirs.push_back(std::move(b));
    }
    return dirs;
}

}  // namespace

double wasserstein2_1d(std::vector<double> a, std::vector<double> b) {
    if (a.size() != b.size() || a.empty())
        throw ConfigError("wasserstein2_1d: need equal nonempty samples");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

double sliced_wasserstein(const std::vector<SphereVector>& a, const std::vector<SphereVector>& b,
                          int n_projections, Rng& rng) {
    if (a.size() < 2 || a.size() != b.size())
        throw ConfigError("sliced_wasserstein: need >= 2 latents and equal sizes");
    if (n_projections < 1) throw ConfigError("sliced_wasserstein: n_projections must be >= 1");
    const size_t len = a.front().values.size();
    const auto dirs = orthogonal_directions(n_projections, len, rng);
    std::vector<double> pa(a.size()), pb(b.size());
    double acc = 0.0;
    for (const auto& dir : dirs) {
        for (size_t i = 0; i < a.size(); ++i) {
            double da = 0.0, db = 0.0;
            for (size_t j = 0; j < len; ++j) {
                da += dir[j] * a[i].values[j];
                db += dir[j] * b[i].values[j];
            }
            pa[i] = da;
            pb[i] = db;
        }
        acc += wasserstein2_1d(pa, pb);
    }
    return acc / static_cast<double>(dirs.size());
}

double sliced_wasserstein_to_uniform(const std::vector<SphereVector>& latents, int n_projections,
                                     Rng& rng) {
    if (latents.size() < 2) throw ConfigError("sliced_wasserstein_to_uniform: need >= 2 latents");
    const int64_t len = latents.front().len();
    std::vector<SphereVector> ref(latents.size());
    for (auto& r : ref) r = sample_sphere_uniform(len, rng);
    return sliced_wasserstein(latents, ref, n_projections, rng);
}

}  // namespace sphere
