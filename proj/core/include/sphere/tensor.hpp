#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

namespace sphere {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (const int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Dense row-major value tensor. The autodiff graph wraps this; plain data
// (positional tables, datasets, noise draws) uses it directly.
template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> v;

    TensorData() = default;
    explicit TensorData(Shape s) : shape(std::move(s)), v(static_cast<size_t>(sphere::numel(shape)), T(0)) {}
    TensorData(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        assert(static_cast<int64_t>(v.size()) == sphere::numel(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    template <typename U>
    TensorData<U> cast() const {
        TensorData<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

}  // namespace sphere
