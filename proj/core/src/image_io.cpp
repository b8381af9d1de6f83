#include "sphere/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "sphere/errors.hpp"

namespace sphere {

namespace {

uint8_t to_byte(float v) {
    const float clamped = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(clamped * 255.0f));
}

float to_signed_unit(uint8_t b) { return static_cast<float>(b) / 255.0f * 2.0f - 1.0f; }

}  // namespace

TensorData<float> read_png(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot read PNG " + path.string() + ": " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<uint8_t> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
    }
    const int64_t h = image.height, w = image.width;
    TensorData<float> out(Shape{h, w, 3});
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = to_signed_unit(buffer[i]);
    return out;
}

void write_png(const std::filesystem::path& path, const TensorData<float>& img) {
    if (img.shape.size() != 3 || (img.shape[2] != 1 && img.shape[2] != 3))
        throw IoError("write_png: image must be [H,W,1] or [H,W,3]");
    const int64_t h = img.shape[0], w = img.shape[1], c = img.shape[2];
    std::vector<uint8_t> buffer(static_cast<size_t>(h * w * 3));
    for (int64_t i = 0; i < h * w; ++i) {
        if (c == 3) {
            for (int64_t k = 0; k < 3; ++k)
                buffer[static_cast<size_t>(i * 3 + k)] = to_byte(img.v[static_cast<size_t>(i * 3 + k)]);
        } else {
            const uint8_t g = to_byte(img.v[static_cast<size_t>(i)]);
            buffer[static_cast<size_t>(i * 3)] = g;
            buffer[static_cast<size_t>(i * 3 + 1)] = g;
            buffer[static_cast<size_t>(i * 3 + 2)] = g;
        }
    }
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

void write_png_grid(const std::filesystem::path& path, const TensorData<float>& batch, int cols) {
    if (batch.shape.size() != 4) throw IoError("write_png_grid: batch must be [N,H,W,C]");
    const int64_t n = batch.shape[0], h = batch.shape[1], w = batch.shape[2], c = batch.shape[3];
    if (cols < 1) cols = 1;
    const int64_t rows = (n + cols - 1) / cols;
    TensorData<float> canvas(Shape{rows * h, static_cast<int64_t>(cols) * w, c});
    std::fill(canvas.v.begin(), canvas.v.end(), -1.0f);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t gy = i / cols, gx = i % cols;
        for (int64_t y = 0; y < h; ++y) {
            const float* src = batch.v.data() + ((i * h + y) * w) * c;
            float* dst = canvas.v.data() + (((gy * h + y) * cols * w) + gx * w) * c;
            std::copy_n(src, w * c, dst);
        }
    }
    write_png(path, canvas);
}

TensorData<float> resize_bilinear(const TensorData<float>& image, int64_t out_h, int64_t out_w) {
    const int64_t h = image.shape[0], w = image.shape[1], c = image.shape[2];
    if (h == out_h && w == out_w) return image;
    TensorData<float> out(Shape{out_h, out_w, c});
    for (int64_t y = 0; y < out_h; ++y) {
        const double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(h) /
                              static_cast<double>(out_h) -
                          0.5;
        const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sy)), 0, h - 1);
        const int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
        const double fy = std::clamp(sy - static_cast<double>(y0), 0.0, 1.0);
        for (int64_t x = 0; x < out_w; ++x) {
            const double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(w) /
                                  static_cast<double>(out_w) -
                              0.5;
            const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sx)), 0, w - 1);
            const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
            const double fx = std::clamp(sx - static_cast<double>(x0), 0.0, 1.0);
            for (int64_t k = 0; k < c; ++k) {
                auto at = [&](int64_t yy, int64_t xx) {
                    return static_cast<double>(image.v[static_cast<size_t>((yy * w + xx) * c + k)]);
                };
                const double top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                const double bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.v[static_cast<size_t>((y * out_w + x) * c + k)] =
                    static_cast<float>(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    return out;
}

TensorData<float> center_crop_square(const TensorData<float>& image) {
    const int64_t h = image.shape[0], w = image.shape[1], c = image.shape[2];
    if (h == w) return image;
    const int64_t side = std::min(h, w);
    const int64_t oy = (h - side) / 2, ox = (w - side) / 2;
    TensorData<float> out(Shape{side, side, c});
    for (int64_t y = 0; y < side; ++y)
        std::copy_n(image.v.data() + ((y + oy) * w + ox) * c, side * c,
                    out.v.data() + y * side * c);
    return out;
}

}  // namespace sphere
