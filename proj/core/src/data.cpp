#include "sphere/data.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include "sphere/errors.hpp"
#include "sphere/image_io.hpp"

namespace sphere {

void DatasetSpec::validate() const {
    if (image_size <= 0) throw ConfigError("DatasetSpec: image_size must be positive");
    if (channels != 3) throw ConfigError("DatasetSpec: only 3-channel images are supported");
    if (classes.empty()) throw ConfigError("DatasetSpec: need at least one class");
    if (source == Source::Synthetic && n_per_class < 1)
        throw ConfigError("DatasetSpec: n_per_class must be >= 1");
    if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("DatasetSpec: flip_prob in [0,1]");
}

TensorData<float> Dataset::image(int64_t i) const {
    TensorData<float> out(Shape{spec.image_size, spec.image_size, spec.channels});
    std::copy_n(sample(i), sample_size(), out.v.data());
    return out;
}

TensorData<float> Dataset::gather(const std::vector<int64_t>& indices) const {
    TensorData<float> out(Shape{static_cast<int64_t>(indices.size()), spec.image_size,
                                spec.image_size, spec.channels});
    for (size_t b = 0; b < indices.size(); ++b)
        std::copy_n(sample(indices[b]), sample_size(),
                    out.v.data() + static_cast<int64_t>(b) * sample_size());
    return out;
}

namespace {

enum class ShapeKind { Circle, Square, Triangle };

// Subpixel coverage of the class shape at pixel (x, y); 3x3 supersampling.
double coverage(ShapeKind kind, double cx, double cy, double r, int64_t x, int64_t y) {
    int inside = 0;
    for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
            const double px = static_cast<double>(x) + (sx + 0.5) / 3.0;
            const double py = static_cast<double>(y) + (sy + 0.5) / 3.0;
            const double dx = px - cx, dy = py - cy;
            bool in = false;
            switch (kind) {
                case ShapeKind::Circle:
                    in = dx * dx + dy * dy <= r * r;
                    break;
                case ShapeKind::Square:
                    in = std::max(std::abs(dx), std::abs(dy)) <= r * 0.886;  // equal-area side
                    break;
                case ShapeKind::Triangle: {
                    // upward triangle inscribed in radius ~1.2r
                    const double ty = dy + 0.45 * r;
                    in = ty >= -1.2 * r && ty <= 0.9 * r &&
                         std::abs(dx) <= (ty + 1.2 * r) * 0.62;
                    break;
                }
            }
            inside += in ? 1 : 0;
        }
    return inside / 9.0;
}

}  // namespace

Dataset synth_generate(const DatasetSpec& spec, uint64_t seed) {
    spec.validate();
    Dataset out;
    out.spec = spec;
    const int64_t size = spec.image_size;
    const int64_t n_classes = static_cast<int64_t>(spec.classes.size());
    out.pixels.reserve(static_cast<size_t>(n_classes * spec.n_per_class * size * size * 3));
    Rng master(seed);

    for (int64_t c = 0; c < n_classes; ++c) {
        const auto kind = static_cast<ShapeKind>(c % 3);
        // fixed base hue per class keeps classes separable beyond shape alone
        const double hue_phase = 2.0 * 3.14159265358979 * static_cast<double>(c) /
                                 static_cast<double>(n_classes);
        for (int64_t i = 0; i < spec.n_per_class; ++i) {
            Rng rng = master.fork("synth", static_cast<uint64_t>(c) * 1000003ULL +
                                               static_cast<uint64_t>(i));
            const double cx = rng.uniform(0.32, 0.68) * static_cast<double>(size);
            const double cy = rng.uniform(0.32, 0.68) * static_cast<double>(size);
            const double r = rng.uniform(0.20, 0.34) * static_cast<double>(size);
            double fg[3], bg[3];
            for (int k = 0; k < 3; ++k) {
                const double base = 0.55 + 0.40 * std::cos(hue_phase + 2.1 * k);
                fg[k] = std::clamp(base + rng.uniform(-0.15, 0.15), 0.05, 1.0);
                bg[k] = rng.uniform(0.02, 0.14);
            }
            for (int64_t y = 0; y < size; ++y)
                for (int64_t x = 0; x < size; ++x) {
                    const double cov = coverage(kind, cx, cy, r, x, y);
                    for (int k = 0; k < 3; ++k) {
                        const double v01 = bg[k] + (fg[k] - bg[k]) * cov;
                        out.pixels.push_back(static_cast<float>(v01 * 2.0 - 1.0));
                    }
                }
            out.labels.push_back(static_cast<int>(c));
        }
    }
    return out;
}

Dataset load_folder(const std::filesystem::path& path, const DatasetSpec& spec) {
    spec.validate();
    if (!std::filesystem::is_directory(path)) throw IoError("dataset folder not found: " + path.string());
    Dataset out;
    out.spec = spec;
    out.spec.source = DatasetSpec::Source::Folder;
    out.spec.folder = path;

    std::vector<std::string> class_dirs;
    for (const auto& entry : std::filesystem::directory_iterator(path))
        if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw IoError("no class subdirectories in " + path.string());
    out.spec.classes = class_dirs;

    for (size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(path / class_dirs[c]))
            if (entry.is_regular_file() && entry.path().extension() == ".png")
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& file : files) {
            TensorData<float> img;
            try {
                img = read_png(file);
            } catch (const IoError& e) {
                std::cerr << "warning: skipping unreadable image " << file << " (" << e.what()
                          << ")\n";
                continue;
            }
            if (spec.center_crop) img = center_crop_square(img);
            img = resize_bilinear(img, spec.image_size, spec.image_size);
            out.pixels.insert(out.pixels.end(), img.v.begin(), img.v.end());
            out.labels.push_back(static_cast<int>(c));
        }
    }
    if (out.labels.empty()) throw IoError("dataset folder contains no readable images: " + path.string());
    return out;
}

void augment_in_place(float* image, int64_t h, int64_t w, int64_t c, double flip_prob, Rng& rng) {
    if (rng.uniform() >= flip_prob) return;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w / 2; ++x)
            for (int64_t k = 0; k < c; ++k)
                std::swap(image[(y * w + x) * c + k], image[(y * w + (w - 1 - x)) * c + k]);
}

TensorData<float> augment(const TensorData<float>& image, Rng& rng, const DatasetSpec& spec) {
    TensorData<float> out = image;
    augment_in_place(out.v.data(), out.shape[0], out.shape[1], out.shape[2], spec.flip_prob, rng);
    return out;
}

void export_folder(const Dataset& data, const std::filesystem::path& path) {
    for (const auto& cls : data.spec.classes)
        std::filesystem::create_directories(path / cls);
    std::vector<int> counters(data.spec.classes.size(), 0);
    for (int64_t i = 0; i < data.n(); ++i) {
        const int c = data.labels[static_cast<size_t>(i)];
        char name[16];
        std::snprintf(name, sizeof(name), "%04d.png", counters[static_cast<size_t>(c)]++);
        write_png(path / data.spec.classes[static_cast<size_t>(c)] / name, data.image(i));
    }
}

}  // namespace sphere
