#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sphere/rng.hpp"
#include "sphere/tensor.hpp"

namespace sphere {

struct DatasetSpec {
    enum class Source { Synthetic, Folder };

    Source source = Source::Synthetic;
    int64_t image_size = 24;
    int64_t channels = 3;
    std::vector<std::string> classes = {"circle", "square", "triangle"};
    int64_t n_per_class = 128;
    double flip_prob = 0.5;
    bool center_crop = true;
    std::filesystem::path folder;

    void validate() const;
};

// In-memory labeled image set; pixels are [N, H, W, C] in [-1, 1].
struct Dataset {
    DatasetSpec spec;
    std::vector<float> pixels;
    std::vector<int> labels;

    int64_t n() const { return static_cast<int64_t>(labels.size()); }
    int64_t sample_size() const { return spec.image_size * spec.image_size * spec.channels; }
    const float* sample(int64_t i) const { return pixels.data() + i * sample_size(); }

    TensorData<float> image(int64_t i) const;
    TensorData<float> gather(const std::vector<int64_t>& indices) const;  // [B,H,W,C]
};

// Deterministic-under-seed renderer of filled shapes (shape and base hue per
// class, randomized position/scale/tint per sample).
Dataset synth_generate(const DatasetSpec& spec, uint64_t seed);

// Directory layout class_name/*.png; unreadable files are skipped with a
// warning on stderr, an empty result is an error.
Dataset load_folder(const std::filesystem::path& path, const DatasetSpec& spec);

// Horizontal mirror with probability flip_prob; the only augmentation.
void augment_in_place(float* image, int64_t h, int64_t w, int64_t c, double flip_prob, Rng& rng);
TensorData<float> augment(const TensorData<float>& image, Rng& rng, const DatasetSpec& spec);

// Write the dataset back out in the folder layout (class_name/NNNN.png).
void export_folder(const Dataset& data, const std::filesystem::path& path);

}  // namespace sphere
