#pragma once

// Desk-scale diagnostics: Fréchet feature distance under the frozen seeded
// extractor (the functional form of FID with a documented stand-in feature
// network, not comparable to pretrained-Inception numbers), per-class
// uniformity via the sliced Wasserstein distance, latent 3-D projection
// export, interpolation grids, and an exact nearest-neighbor memorization
// check.

#include <Eigen/Dense>

#include <array>
#include <map>
#include <optional>
#include <vector>

#include "sphere/data.hpp"
#include "sphere/geometry.hpp"
#include "sphere/losses.hpp"
#include "sphere/network.hpp"
#include "sphere/sampling.hpp"
#include "sphere/tensor.hpp"

namespace sphere {

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  // symmetric PSD (symmetrized on construction)
    int64_t count = 0;
};

// rows = samples, cols = feature dims; unbiased covariance.
FeatureStats compute_feature_stats(const Eigen::MatrixXd& features);

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}); matrix square roots via
// symmetric eigendecomposition with negative eigenvalues clamped at zero.
double frechet_feature_distance(const FeatureStats& a, const FeatureStats& b);

// Stage-wise global-average-pooled features (16+32+64 = 112 dims) of a batch.
Eigen::MatrixXd pooled_features(const FeatureExtractor<float>& fx, const TensorData<float>& images);

struct GenerationEvalReport {
    double distance = 0.0;            // generated vs reference
    double noise_baseline = 0.0;      // uniform-noise images vs reference
    std::map<int, double> per_class;  // conditional models only
    int64_t n_samples = 0;
};

// Generates n_samples (class-balanced when conditional), compares pooled
// features against the reference set, and reports a pure-noise baseline.
GenerationEvalReport eval_generation(const Model<float>& model, const SamplerPlan& plan,
                                     const NoisePolicy& policy, const FeatureExtractor<float>& fx,
                                     const Dataset& reference, int64_t n_samples);

struct UniformityReport {
    std::map<int, double> per_class_swd;
    double pooled_swd = 0.0;
    std::vector<std::array<double, 3>> coords;  // unit 3-vectors, one per sample
    std::vector<int> coord_labels;
};

// Encoder latents per class -> SWD against a fresh uniform sample, plus 3-D
// projections for plotting. Classes with fewer than 2 samples are skipped
// with a warning.
UniformityReport conditional_uniformity(const Model<float>& model, const Dataset& data,
                                        int n_projections, uint64_t seed);

// Encode the whole dataset to spherified latents (batched helper).
std::vector<SphereVector> encode_dataset(const Model<float>& model, const Dataset& data,
                                         int64_t batch = 64);

// Bilinear latent interpolation with linear class-embedding interpolation,
// decoded per grid cell with the given plan (CFG ignored). corners: [4, L]
// latents ordered c00, c01, c10, c11; corner_classes empty for null/global
// conditioning. Returns [grid_n * grid_n, H, W, C] in row-major grid order.
TensorData<float> interpolation_grid(const Model<float>& model, const TensorData<float>& corners,
                                     const std::vector<int>& corner_classes, int grid_n,
                                     const SamplerPlan& plan, const NoisePolicy& policy);

struct MemorizationEntry {
    int64_t train_index = -1;
    double distance = 0.0;  // RMS pixel distance of the best match
    bool flipped = false;   // matched against the horizontal flip
};

// Exact nearest neighbor over {identity, horizontal flip} of every training
// image.
std::vector<MemorizationEntry> memorization_check(const TensorData<float>& generated,
                                                  const Dataset& training);

// RMS pixel distance between two images of identical shape.
double rms_pixel_distance(const float* a, const float* b, int64_t n);

}  // namespace sphere
