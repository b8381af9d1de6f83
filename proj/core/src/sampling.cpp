#include "sphere/sampling.hpp"

#include <cmath>

#include "sphere/autodiff.hpp"
#include "sphere/rng.hpp"

namespace sphere {

namespace ag = sphere::ag;

const char* to_string(CfgPosition p) {
    switch (p) {
        case CfgPosition::None: return "none";
        case CfgPosition::Enc: return "enc";
        case CfgPosition::Dec: return "dec";
        case CfgPosition::Combo: return "combo";
    }
    return "none";
}

CfgPosition cfg_position_from_string(const std::string& s) {
    if (s == "none") return CfgPosition::None;
    if (s == "enc") return CfgPosition::Enc;
    if (s == "dec") return CfgPosition::Dec;
    if (s == "combo") return CfgPosition::Combo;
    throw ConfigError("unknown cfg position: " + s + " (expected none|enc|dec|combo)");
}

double decay_r(int64_t t, int64_t steps, double gamma) {
    if (steps < 2) throw ConfigError("decay_r: schedule needs T >= 2");
    if (t < 2 || t > steps) throw ConfigError("decay_r: t must be in [2, T]");
    if (gamma == 0.0) return 1.0;  // fixed schedule
    const double base = 1.0 - static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    return std::pow(base, gamma);
}

namespace {

void check_finite(const std::vector<float>& v, const char* what) {
    for (const float x : v)
        if (!std::isfinite(x)) throw NonFiniteSample(std::string("non-finite values in ") + what);
}

std::vector<int> ids_for(const Model<float>& model, std::optional<int> class_id, int64_t n) {
    if (!class_id) return {};
    if (!model.config().conditional())
        throw InvalidClass("class id given to an unconditional model");
    if (*class_id < 0 || *class_id >= model.config().n_classes)
        throw InvalidClass("class id " + std::to_string(*class_id) + " out of range");
    return std::vector<int>(static_cast<size_t>(n), *class_id);
}

TensorData<float> fill_noise(int64_t n, int64_t len, Rng& rng, std::optional<double> truncation) {
    TensorData<float> e(Shape{n, len});
    if (truncation) {
        for (auto& x : e.v) x = static_cast<float>(rng.truncated_normal(*truncation));
    } else {
        for (auto& x : e.v) x = static_cast<float>(rng.normal());
    }
    return e;
}

ag::Var<float> leaf(const TensorData<float>& t) { return ag::Var<float>::leaf(t.shape, t.v); }

// Shared refinement kernel: encode (optional enc-CFG), add sigma * e, project
// back onto the sphere, decode (optional dec-CFG). Returns the new image data.
struct RefinementStep {
    const Model<float>& model;
    const std::vector<int>& ids;
    bool enc_cfg = false;
    bool dec_cfg = false;
    double scale = 1.0;  // per-position guidance scale
    GenerationResult* acc = nullptr;

    TensorData<float> run(const TensorData<float>& x, const TensorData<float>& e, double sigma) {
        ag::NoGradGuard ng;
        const int64_t n = x.shape[0];
        const int64_t L = model.config().latent_len();
        auto z = model.encode(leaf(x), ids);
        ++acc->encoder_passes;
        ++acc->nfe;  // the step's primary model iteration
        std::vector<float> z_flat = ag::reshape(z, {n, L}).val();
        if (enc_cfg) {
            auto z_un = model.encode(leaf(x), {});
            ++acc->encoder_passes;
            ++acc->nfe;
            z_flat = apply_cfg(z_flat, ag::reshape(z_un, {n, L}).val(), scale);
        }
        auto vz = ag::Var<float>::leaf({n, L}, std::move(z_flat));
        std::vector<float> sigmas(static_cast<size_t>(n), static_cast<float>(sigma));
        auto v = ag::spherify_rows(ag::add_scaled_noise_rows(vz, e, sigmas));
        auto x_out = model.decode(v, ids);
        ++acc->decoder_passes;
        std::vector<float> pixels = x_out.val();
        if (dec_cfg) {
            auto x_un = model.decode(v, {});
            ++acc->decoder_passes;
            ++acc->nfe;
            pixels = apply_cfg(pixels, x_un.val(), scale);
        }
        check_finite(pixels, "decoder output");
        return TensorData<float>(x_out.shape(), std::move(pixels));
    }
};

}  // namespace

GenerationResult generate(const Model<float>& model, int64_t n, std::optional<int> class_id,
                          const SamplerPlan& plan, const NoisePolicy& policy) {
    plan.validate();
    policy.validate();
    if (n < 1) throw ConfigError("generate: n must be >= 1");
    ag::NoGradGuard ng;

    const int64_t L = model.config().latent_len();
    const double sigma_max = policy.sigma_max();
    const std::vector<int> ids = ids_for(model, class_id, n);
    const double scale = plan.per_position_scale();

    GenerationResult out;
    out.per_position_scale = scale;

    Rng master(plan.seed);
    Rng prior_rng = master.fork("prior");
    TensorData<float> e1 = fill_noise(n, L, prior_rng, plan.truncation);

    // step 1: decode a uniform random sphere point
    auto v = ag::spherify_rows(leaf(e1));
    auto x_var = model.decode(v, ids);
    ++out.decoder_passes;
    ++out.nfe;
    std::vector<float> pixels = x_var.val();
    if (plan.dec_cfg()) {
        auto x_un = model.decode(v, {});
        ++out.decoder_passes;
        ++out.nfe;
        pixels = apply_cfg(pixels, x_un.val(), scale);
    }
    check_finite(pixels, "decoder output");
    TensorData<float> x(x_var.shape(), std::move(pixels));

    RefinementStep refine{model, ids, plan.enc_cfg(), plan.dec_cfg(), scale, &out};
    for (int64_t t = 2; t <= plan.steps; ++t) {
        const double r = plan.r_override ? *plan.r_override : decay_r(t, plan.steps, plan.gamma);
        const double sigma = r * sigma_max;
        TensorData<float> e = e1;
        if (!plan.share_noise) {
            Rng step_rng = master.fork("step-noise", static_cast<uint64_t>(t));
            e = fill_noise(n, L, step_rng, std::nullopt);
        }
        if (plan.record_noise) out.refinement_noise.push_back(e);
        x = refine.run(x, e, sigma);
    }
    out.images = std::move(x);
    return out;
}

TensorData<float> reconstruct(const Model<float>& model, const TensorData<float>& images) {
    ag::NoGradGuard ng;
    const int64_t n = images.shape[0];
    const int64_t L = model.config().latent_len();
    auto z = model.encode(leaf(images), {});
    auto v = ag::spherify_rows(ag::reshape(z, {n, L}));
    auto x = model.decode(v, {});
    check_finite(x.val(), "reconstruction");
    return TensorData<float>(x.shape(), x.val());
}

GenerationResult manipulate(const Model<float>& model, const TensorData<float>& images,
                            const EditPlan& plan, const NoisePolicy& policy) {
    plan.validate();
    policy.validate();
    if (plan.target_class >= 0 && !model.config().conditional())
        throw InvalidClass("manipulate: conditional model required for a target class");
    ag::NoGradGuard ng;

    const int64_t n = images.shape[0];
    const int64_t L = model.config().latent_len();
    const double sigma_max = policy.sigma_max();
    const std::vector<int> ids =
        plan.target_class >= 0 ? std::vector<int>(static_cast<size_t>(n), plan.target_class)
                               : std::vector<int>{};

    GenerationResult out;
    TensorData<float> x = images;
    Rng master(plan.seed);
    RefinementStep refine{model, ids, false, false, 1.0, &out};
    // The seeded image plays the role of generation step 1; refinement i maps
    // onto schedule index t = i + 1 with T = steps + 1.
    for (int64_t i = 1; i <= plan.steps; ++i) {
        const double r = plan.r * decay_r(i + 1, plan.steps + 1, plan.gamma);
        Rng step_rng = master.fork("edit-noise", static_cast<uint64_t>(i));
        TensorData<float> e = fill_noise(n, L, step_rng, std::nullopt);
        x = refine.run(x, e, r * sigma_max);
    }
    out.images = std::move(x);
    return out;
}

TensorData<float> stitch(const TensorData<float>& a, const TensorData<float>& b,
                         const StitchSpec& spec) {
    if (a.shape != b.shape || a.shape.size() != 3)
        throw ConfigError("stitch: images must share an [H,W,C] shape");
    if (spec.fraction <= 0.0 || spec.fraction >= 1.0)
        throw ConfigError("stitch: fraction must be in (0,1)");
    const int64_t h = a.shape[0], w = a.shape[1], c = a.shape[2];
    TensorData<float> out = b;
    if (spec.axis == StitchSpec::Axis::Vertical) {
        const int64_t split = std::max<int64_t>(1, static_cast<int64_t>(spec.fraction * static_cast<double>(w)));
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < split; ++x)
                for (int64_t k = 0; k < c; ++k)
                    out.v[static_cast<size_t>((y * w + x) * c + k)] =
                        a.v[static_cast<size_t>((y * w + x) * c + k)];
    } else {
        const int64_t split = std::max<int64_t>(1, static_cast<int64_t>(spec.fraction * static_cast<double>(h)));
        std::copy_n(a.v.data(), split * w * c, out.v.data());
    }
    return out;
}

GenerationResult crossover(const TensorData<float>& a, const TensorData<float>& b,
                           const StitchSpec& spec, const Model<float>& model, const EditPlan& plan,
                           const NoisePolicy& policy) {
    plan.validate();
    TensorData<float> composite = stitch(a, b, spec);
    TensorData<float> batch(Shape{1, composite.shape[0], composite.shape[1], composite.shape[2]},
                            composite.v);
    if (plan.steps == 0) {
        GenerationResult out;
        out.images = std::move(batch);
        return out;
    }
    // the composite enters the encoder directly; the refinement loop matches
    // manipulate with the crossover schedule
    EditPlan inner = plan;
    inner.mode = EditPlan::Mode::Crossover;
    return manipulate(model, batch, inner, policy);
}

}  // namespace sphere
