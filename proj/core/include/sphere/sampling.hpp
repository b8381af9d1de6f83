#pragma once

// One-step and few-step generation: decode a random sphere point, then
// iterate encode -> noisy spherify -> decode. Classifier-free guidance can
// mix encoder outputs (latent space), decoder outputs (pixel space), or both
// ("combo", sqrt(s) per position). The editing procedures reuse the same
// refinement loop seeded from a real image.

#include <cstdint>
#include <optional>
#include <vector>

#include "sphere/errors.hpp"
#include "sphere/geometry.hpp"
#include "sphere/network.hpp"
#include "sphere/tensor.hpp"

namespace sphere {

enum class CfgPosition { None, Enc, Dec, Combo };

const char* to_string(CfgPosition p);
CfgPosition cfg_position_from_string(const std::string& s);

struct SamplerPlan {
    int64_t steps = 1;  // T
    double gamma = 0.0;
    bool share_noise = true;
    double cfg_scale = 1.0;
    CfgPosition cfg_position = CfgPosition::None;
    std::optional<double> truncation;
    std::optional<double> r_override;
    bool record_noise = false;  // keep per-step noise for instrumented tests
    uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw ConfigError("SamplerPlan: steps must be >= 1");
        if (gamma < 0.0) throw ConfigError("SamplerPlan: gamma must be >= 0");
        if (cfg_scale < 0.0) throw ConfigError("SamplerPlan: cfg_scale must be >= 0");
        if (truncation && *truncation <= 0.0)
            throw ConfigError("SamplerPlan: truncation must be > 0");
    }

    bool enc_cfg() const { return cfg_position == CfgPosition::Enc || cfg_position == CfgPosition::Combo; }
    bool dec_cfg() const { return cfg_position == CfgPosition::Dec || cfg_position == CfgPosition::Combo; }
    // combo applies guidance twice, so each position uses sqrt(s)
    double per_position_scale() const {
        return cfg_position == CfgPosition::Combo ? std::sqrt(cfg_scale) : cfg_scale;
    }
    // NFE: one per step plus one per executed guidance pass (the paper counts
    // a step as a single model iteration; CFG adds dual passes).
    int64_t declared_nfe() const {
        return steps + (enc_cfg() ? steps - 1 : 0) + (dec_cfg() ? steps : 0);
    }
};

struct EditPlan {
    enum class Mode { Manipulate, Crossover };

    Mode mode = Mode::Manipulate;
    int target_class = -1;  // < 0 means null conditioning
    int64_t steps = 4;
    double r = 1.0;
    double gamma = 0.0;
    uint64_t seed = 0;

    static EditPlan manipulate_defaults(int target_class) {
        EditPlan p;
        p.mode = Mode::Manipulate;
        p.target_class = target_class;
        p.steps = 4;
        p.r = 1.0;
        p.gamma = 0.0;
        return p;
    }

    static EditPlan crossover_defaults() {
        EditPlan p;
        p.mode = Mode::Crossover;
        p.steps = 10;
        p.r = 0.25;
        p.gamma = 1.0;
        return p;
    }

    void validate() const {
        if (steps < 0) throw ConfigError("EditPlan: steps must be >= 0");
        if (mode == Mode::Crossover && steps > 10)
            throw ConfigError("EditPlan: crossover uses at most 10 steps");
        if (r < 0.0 || gamma < 0.0) throw ConfigError("EditPlan: r and gamma must be >= 0");
    }
};

struct StitchSpec {
    enum class Axis { Vertical, Horizontal };  // Vertical = left|right split
    Axis axis = Axis::Vertical;
    double fraction = 0.5;  // portion taken from image a
};

// Noise-strength schedule of the refinement loop, for step index t in [2, T]:
// r = (1 - (t-1)/(T-1))^gamma; gamma = 0 is the fixed schedule (r = 1).
double decay_r(int64_t t, int64_t steps, double gamma);

// uncond + s * (cond - uncond); s == 1 returns cond bit-exactly.
template <typename T>
std::vector<T> apply_cfg(const std::vector<T>& cond, const std::vector<T>& uncond, double s) {
    if (cond.size() != uncond.size()) throw ConfigError("apply_cfg: shape mismatch");
    if (s == 1.0) return cond;
    std::vector<T> out(cond.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(static_cast<double>(uncond[i]) +
                                s * (static_cast<double>(cond[i]) - static_cast<double>(uncond[i])));
    return out;
}

struct GenerationResult {
    TensorData<float> images;  // [n, H, W, C]
    int64_t nfe = 0;
    int64_t encoder_passes = 0;  // raw network pass counters
    int64_t decoder_passes = 0;
    double per_position_scale = 1.0;
    std::vector<TensorData<float>> refinement_noise;  // filled when plan.record_noise
};

// Algorithm-1 generation of n samples under one class id (nullopt = null
// embedding for conditional models, the global embedding otherwise).
GenerationResult generate(const Model<float>& model, int64_t n, std::optional<int> class_id,
                          const SamplerPlan& plan, const NoisePolicy& policy);

// D(spherify(E(x, null)), null): no noise, null conditioning.
TensorData<float> reconstruct(const Model<float>& model, const TensorData<float>& images);

// Refinement loop seeded from real images, conditioning on plan.target_class,
// no CFG.
GenerationResult manipulate(const Model<float>& model, const TensorData<float>& images,
                            const EditPlan& plan, const NoisePolicy& policy);

// Hard pixel stitch of two images, no feathering.
TensorData<float> stitch(const TensorData<float>& a, const TensorData<float>& b,
                         const StitchSpec& spec);

// Stitch then refine; steps = 0 returns the raw composite.
GenerationResult crossover(const TensorData<float>& a, const TensorData<float>& b,
                           const StitchSpec& spec, const Model<float>& model, const EditPlan& plan,
                           const NoisePolicy& policy);

}  // namespace sphere
