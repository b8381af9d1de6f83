#include "sphere/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "sphere/autodiff.hpp"

namespace sphere {

namespace ag = sphere::ag;

FeatureStats compute_feature_stats(const Eigen::MatrixXd& features) {
    const int64_t n = features.rows();
    if (n < 2) throw ConfigError("compute_feature_stats: need at least 2 samples");
    FeatureStats out;
    out.count = n;
    out.mean = features.colwise().mean();
    const Eigen::MatrixXd centered = features.rowwise() - out.mean.transpose();
    out.cov = centered.transpose() * centered / static_cast<double>(n - 1);
    out.cov = 0.5 * (out.cov + out.cov.transpose().eval());
    return out;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(0.0);
    return eig.eigenvectors() * vals.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_feature_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mean.size() != b.mean.size())
        throw ConfigError("frechet_feature_distance: feature dimension mismatch");
    const double mean_term = (a.mean - b.mean).squaredNorm();
    // tr((Sa Sb)^{1/2}) computed in the symmetric form tr((Sb^{1/2} Sa Sb^{1/2})^{1/2})
    const Eigen::MatrixXd sqrt_b = psd_sqrt(b.cov);
    const Eigen::MatrixXd inner = psd_sqrt(sqrt_b * a.cov * sqrt_b);
    const double trace_term = a.cov.trace() + b.cov.trace() - 2.0 * inner.trace();
    return mean_term + trace_term;
}

Eigen::MatrixXd pooled_features(const FeatureExtractor<float>& fx, const TensorData<float>& images) {
    ag::NoGradGuard ng;
    auto input = ag::Var<float>::leaf(images.shape, images.v);
    const auto stages = fx.stages(input);
    const int64_t n = images.shape[0];
    int64_t dims = 0;
    for (const auto& s : stages) dims += s.shape().back();
    Eigen::MatrixXd out(n, dims);
    int64_t col = 0;
    for (const auto& s : stages) {
        const int64_t c = s.shape().back();
        const int64_t hw = s.numel() / (n * c);
        for (int64_t b = 0; b < n; ++b) {
            for (int64_t k = 0; k < c; ++k) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i)
                    acc += static_cast<double>(s.val()[static_cast<size_t>((b * hw + i) * c + k)]);
                out(b, col + k) = acc / static_cast<double>(hw);
            }
        }
        col += c;
    }
    return out;
}

GenerationEvalReport eval_generation(const Model<float>& model, const SamplerPlan& plan,
                                     const NoisePolicy& policy, const FeatureExtractor<float>& fx,
                                     const Dataset& reference, int64_t n_samples) {
    if (n_samples < 2) throw ConfigError("eval_generation: need at least 2 samples");
    GenerationEvalReport report;
    report.n_samples = n_samples;

    const int64_t h = model.config().image_size, c = model.config().channels;
    TensorData<float> generated(Shape{n_samples, h, h, c});
    std::vector<int> gen_labels(static_cast<size_t>(n_samples), -1);

    if (model.config().conditional()) {
        // balanced distribution: equal samples per class, remainder round-robin
        const int64_t k = model.config().n_classes;
        int64_t done = 0;
        for (int64_t cls = 0; cls < k && done < n_samples; ++cls) {
            const int64_t take = n_samples / k + (cls < n_samples % k ? 1 : 0);
            if (take == 0) continue;
            SamplerPlan p = plan;
            p.seed = Rng(plan.seed).fork("eval-class", static_cast<uint64_t>(cls)).next_u64();
            const auto gen = generate(model, take, static_cast<int>(cls), p, policy);
            std::copy(gen.images.v.begin(), gen.images.v.end(),
                      generated.v.begin() + done * h * h * c);
            std::fill_n(gen_labels.begin() + done, take, static_cast<int>(cls));
            done += take;
        }
    } else {
        const auto gen = generate(model, n_samples, std::nullopt, plan, policy);
        generated.v = gen.images.v;
    }

    const Eigen::MatrixXd gen_features = pooled_features(fx, generated);
    const Eigen::MatrixXd ref_features = pooled_features(fx, reference.gather([&] {
        std::vector<int64_t> all(static_cast<size_t>(reference.n()));
        std::iota(all.begin(), all.end(), 0);
        return all;
    }()));
    const auto gen_stats = compute_feature_stats(gen_features);
    const auto ref_stats = compute_feature_stats(ref_features);
    report.distance = frechet_feature_distance(gen_stats, ref_stats);

    // pure-noise baseline: uniform pixels in [-1, 1]
    Rng noise_rng(plan.seed ^ 0x9e3779b97f4a7c15ULL);
    TensorData<float> noise(generated.shape);
    for (auto& x : noise.v) x = static_cast<float>(noise_rng.uniform(-1.0, 1.0));
    report.noise_baseline =
        frechet_feature_distance(compute_feature_stats(pooled_features(fx, noise)), ref_stats);

    if (model.config().conditional()) {
        for (int cls = 0; cls < model.config().n_classes; ++cls) {
            std::vector<int64_t> gen_rows, ref_rows;
            for (int64_t i = 0; i < n_samples; ++i)
                if (gen_labels[static_cast<size_t>(i)] == cls) gen_rows.push_back(i);
            for (int64_t i = 0; i < reference.n(); ++i)
                if (reference.labels[static_cast<size_t>(i)] == cls) ref_rows.push_back(i);
            if (gen_rows.size() < 2 || ref_rows.size() < 2) continue;
            Eigen::MatrixXd g(gen_rows.size(), gen_features.cols());
            for (size_t r = 0; r < gen_rows.size(); ++r) g.row(static_cast<int64_t>(r)) = gen_features.row(gen_rows[r]);
            Eigen::MatrixXd rf(ref_rows.size(), ref_features.cols());
            for (size_t r = 0; r < ref_rows.size(); ++r) rf.row(static_cast<int64_t>(r)) = ref_features.row(ref_rows[r]);
            report.per_class[cls] =
                frechet_feature_distance(compute_feature_stats(g), compute_feature_stats(rf));
        }
    }
    return report;
}

std::vector<SphereVector> encode_dataset(const Model<float>& model, const Dataset& data,
                                         int64_t batch) {
    ag::NoGradGuard ng;
    const int64_t L = model.config().latent_len();
    std::vector<SphereVector> out;
    out.reserve(static_cast<size_t>(data.n()));
    for (int64_t start = 0; start < data.n(); start += batch) {
        const int64_t take = std::min<int64_t>(batch, data.n() - start);
        std::vector<int64_t> idx(static_cast<size_t>(take));
        std::iota(idx.begin(), idx.end(), start);
        auto images = data.gather(idx);
        auto z = model.encode(ag::Var<float>::leaf(images.shape, images.v), {});
        for (int64_t b = 0; b < take; ++b) {
            std::vector<double> flat(static_cast<size_t>(L));
            for (int64_t i = 0; i < L; ++i)
                flat[static_cast<size_t>(i)] =
                    static_cast<double>(z.val()[static_cast<size_t>(b * L + i)]);
            out.push_back(spherify(flat, model.config().latent_shape()));
        }
    }
    return out;
}

UniformityReport conditional_uniformity(const Model<float>& model, const Dataset& data,
                                        int n_projections, uint64_t seed) {
    UniformityReport report;
    const auto latents = encode_dataset(model, data);
    Rng master(seed);

    std::map<int, std::vector<SphereVector>> by_class;
    for (int64_t i = 0; i < data.n(); ++i)
        by_class[data.labels[static_cast<size_t>(i)]].push_back(latents[static_cast<size_t>(i)]);

    for (const auto& [cls, set] : by_class) {
        if (set.size() < 2) {
            std::cerr << "warning: class " << cls << " has fewer than 2 samples; skipped\n";
            continue;
        }
        Rng rng = master.fork("swd-class", static_cast<uint64_t>(cls));
        report.per_class_swd[cls] = sliced_wasserstein_to_uniform(set, n_projections, rng);
    }
    Rng pooled_rng = master.fork("swd-pooled");
    report.pooled_swd = latents.size() >= 2
                            ? sliced_wasserstein_to_uniform(latents, n_projections, pooled_rng)
                            : 0.0;

    Rng proj_rng = master.fork("project3d");
    report.coords = project_to_3d(latents, proj_rng);
    report.coord_labels = data.labels;
    return report;
}

TensorData<float> interpolation_grid(const Model<float>& model, const TensorData<float>& corners,
                                     const std::vector<int>& corner_classes, int grid_n,
                                     const SamplerPlan& plan, const NoisePolicy& policy) {
    if (corners.shape != Shape{4, model.config().latent_len()})
        throw ConfigError("interpolation_grid: corners must be [4, L]");
    if (!corner_classes.empty() && corner_classes.size() != 4)
        throw ConfigError("interpolation_grid: need 0 or 4 corner classes");
    if (grid_n < 2) throw ConfigError("interpolation_grid: grid_n must be >= 2");
    ag::NoGradGuard ng;

    const int64_t L = model.config().latent_len();
    const int64_t cells = static_cast<int64_t>(grid_n) * grid_n;

    // corner latents as SphereVectors
    std::vector<SphereVector> corner_latents(4);
    for (int k = 0; k < 4; ++k) {
        std::vector<double> v(static_cast<size_t>(L));
        for (int64_t i = 0; i < L; ++i)
            v[static_cast<size_t>(i)] = static_cast<double>(corners.v[static_cast<size_t>(k * L + i)]);
        corner_latents[static_cast<size_t>(k)] = spherify(v, model.config().latent_shape());
    }

    // bilinear latent mix per cell
    TensorData<float> cell_latents(Shape{cells, L});
    std::vector<double> us(static_cast<size_t>(cells)), vs(static_cast<size_t>(cells));
    for (int gy = 0; gy < grid_n; ++gy)
        for (int gx = 0; gx < grid_n; ++gx) {
            const int64_t cell = static_cast<int64_t>(gy) * grid_n + gx;
            const double u = static_cast<double>(gy) / (grid_n - 1);
            const double v = static_cast<double>(gx) / (grid_n - 1);
            us[static_cast<size_t>(cell)] = u;
            vs[static_cast<size_t>(cell)] = v;
            const auto mixed = bilerp_latents(corner_latents[0], corner_latents[1], corner_latents[2],
                                              corner_latents[3], u, v);
            for (int64_t i = 0; i < L; ++i)
                cell_latents.v[static_cast<size_t>(cell * L + i)] =
                    static_cast<float>(mixed.values[static_cast<size_t>(i)]);
        }

    // linear class-embedding interpolation per cell (both decoder and encoder
    // tables when the plan refines)
    auto mixed_cond = [&](const std::string& side) -> ag::Var<float> {
        std::vector<int> ids = corner_classes;
        if (ids.empty()) {
            if (model.config().conditional())
                ids.assign(4, model.config().null_id());
            else
                ids.assign(4, 0);
        }
        auto corner_emb = model.cond_vector(side, model.config().conditional() ? ids : std::vector<int>{},
                                            4);
        const int64_t H = corner_emb.shape()[1];
        std::vector<float> mixed(static_cast<size_t>(cells * H));
        for (int64_t cell = 0; cell < cells; ++cell) {
            const double u = us[static_cast<size_t>(cell)], v = vs[static_cast<size_t>(cell)];
            const double w[4] = {(1 - u) * (1 - v), (1 - u) * v, u * (1 - v), u * v};
            for (int64_t i = 0; i < H; ++i) {
                double acc = 0.0;
                for (int k = 0; k < 4; ++k)
                    acc += w[k] * static_cast<double>(corner_emb.val()[static_cast<size_t>(k * H + i)]);
                mixed[static_cast<size_t>(cell * H + i)] = static_cast<float>(acc);
            }
        }
        return ag::Var<float>::leaf({cells, H}, std::move(mixed));
    };

    const auto cond_dec = mixed_cond("dec");
    auto x = model.decode_cond(ag::Var<float>::leaf(cell_latents.shape, cell_latents.v), cond_dec);

    if (plan.steps > 1) {
        const auto cond_enc = mixed_cond("enc");
        const double sigma_max = policy.sigma_max();
        Rng master(plan.seed);
        Rng prior = master.fork("grid-noise");
        TensorData<float> e1 = [&] {
            TensorData<float> e(Shape{cells, L});
            for (auto& xv : e.v) xv = static_cast<float>(prior.normal());
            return e;
        }();
        for (int64_t t = 2; t <= plan.steps; ++t) {
            const double r = plan.r_override ? *plan.r_override : decay_r(t, plan.steps, plan.gamma);
            TensorData<float> e = e1;
            if (!plan.share_noise) {
                Rng step_rng = master.fork("grid-step", static_cast<uint64_t>(t));
                for (auto& xv : e.v) xv = static_cast<float>(step_rng.normal());
            }
            auto z = model.encode_cond(x, cond_enc);
            auto zf = ag::reshape(z, {cells, L});
            std::vector<float> sig(static_cast<size_t>(cells), static_cast<float>(r * sigma_max));
            auto v = ag::spherify_rows(ag::add_scaled_noise_rows(zf, e, sig));
            x = model.decode_cond(v, cond_dec);
        }
    }
    return TensorData<float>(x.shape(), x.val());
}

double rms_pixel_distance(const float* a, const float* b, int64_t n) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(n));
}

std::vector<MemorizationEntry> memorization_check(const TensorData<float>& generated,
                                                  const Dataset& training) {
    if (generated.shape.size() != 4) throw ConfigError("memorization_check: generated must be [N,H,W,C]");
    if (training.n() < 1) throw ConfigError("memorization_check: empty training set");
    const int64_t n = generated.shape[0];
    const int64_t h = generated.shape[1], w = generated.shape[2], c = generated.shape[3];
    const int64_t per = h * w * c;
    if (per != training.sample_size())
        throw ConfigMismatch("memorization_check: image sizes differ");

    std::vector<MemorizationEntry> out(static_cast<size_t>(n));
    std::vector<float> flipped(static_cast<size_t>(per));
    for (int64_t g = 0; g < n; ++g) {
        const float* img = generated.v.data() + g * per;
        MemorizationEntry best;
        best.distance = std::numeric_limits<double>::infinity();
        for (int64_t t = 0; t < training.n(); ++t) {
            const float* train = training.sample(t);
            const double d_id = rms_pixel_distance(img, train, per);
            if (d_id < best.distance) best = {t, d_id, false};
            // horizontal flip branch
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x)
                    for (int64_t k = 0; k < c; ++k)
                        flipped[static_cast<size_t>((y * w + x) * c + k)] =
                            train[(y * w + (w - 1 - x)) * c + k];
            const double d_fl = rms_pixel_distance(img, flipped.data(), per);
            if (d_fl < best.distance) best = {t, d_fl, true};
        }
        out[static_cast<size_t>(g)] = best;
    }
    return out;
}

}  // namespace sphere
