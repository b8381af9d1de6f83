#pragma once

// Reverse-mode autodiff over dense row-major tensors. The op set is exactly
// what the encoder/decoder stack, the losses, and the spherification path
// need; every backward is covered by finite-difference tests.
//
// Templated on the scalar type: training runs in float, gradient checks run
// the same code in double. Reductions (norms, means, row sums) accumulate in
// double regardless of T.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sphere/errors.hpp"
#include "sphere/tensor.hpp"

namespace sphere::ag {

using sphere::numel;
using sphere::Shape;

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

struct GradMode {
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;  // sized lazily during backward
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(val.size()); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), T(0));
    }
};

template <typename T>
class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Var leaf(Shape shape, std::vector<T> data, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->val = std::move(data);
        n->requires_grad = requires_grad;
        if (static_cast<int64_t>(n->val.size()) != sphere::numel(n->shape))
            throw std::invalid_argument("Var::leaf: data size does not match shape " + shape_str(n->shape));
        return Var(std::move(n));
    }

    static Var scalar(T value) { return leaf({1}, {value}); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t numel() const { return n_->numel(); }
    const std::vector<T>& val() const { return n_->val; }
    std::vector<T>& val_mut() { return n_->val; }
    const std::vector<T>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }
    void zero_grad() { n_->grad.assign(n_->val.size(), T(0)); }
    T item() const {
        if (n_->val.size() != 1) throw std::logic_error("Var::item on non-scalar");
        return n_->val[0];
    }

    std::shared_ptr<Node<T>> node() const { return n_; }
    Node<T>* raw() const { return n_.get(); }

  private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
Var<T> make_op(Shape shape, std::vector<T> val, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    bool rg = false;
    if (GradMode::enabled()) {
        for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Var<T>(std::move(n));
}

inline void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
double row_sq_norm(const T* p, int64_t n) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(p[i]) * static_cast<double>(p[i]);
    return acc;
}

template <typename T>
double row_dot(const T* a, const T* b, int64_t n) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape() == b.shape(), "add: shape mismatch");
    std::vector<T> out(a.val());
    const auto& bv = b.val();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape() == b.shape(), "sub: shape mismatch");
    std::vector<T> out(a.val());
    const auto& bv = b.val();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape() == b.shape(), "mul: shape mismatch");
    std::vector<T> out(a.val());
    const auto& bv = b.val();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.val[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.val[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    std::vector<T> out(a.val());
    for (auto& x : out) x *= c;
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [c](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * c;
    });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
    return Var<T>::leaf(a.shape(), a.val(), false);
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> gelu(const Var<T>& a) {
    std::vector<T> out(a.val().size());
    const auto& x = a.val();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < out.size(); ++i) {
        const double xi = static_cast<double>(x[i]);
        out[i] = static_cast<T>(0.5 * xi * (1.0 + std::erf(xi * inv_sqrt2)));
    }
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double xi = static_cast<double>(p.val[i]);
            const double cdf = 0.5 * (1.0 + std::erf(xi * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * xi * xi);
            p.grad[i] += self.grad[i] * static_cast<T>(cdf + xi * pdf);
        }
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    std::vector<T> out(a.val().size());
    const auto& x = a.val();
    for (size_t i = 0; i < out.size(); ++i) {
        const double xi = static_cast<double>(x[i]);
        out[i] = static_cast<T>(xi / (1.0 + std::exp(-xi)));
    }
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double xi = static_cast<double>(p.val[i]);
            const double s = 1.0 / (1.0 + std::exp(-xi));
            p.grad[i] += self.grad[i] * static_cast<T>(s * (1.0 + xi * (1.0 - s)));
        }
    });
}

template <typename T>
Var<T> tanh_act(const Var<T>& a) {
    std::vector<T> out(a.val().size());
    const auto& x = a.val();
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(std::tanh(static_cast<double>(x[i])));
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const T y = self.val[i];
            p.grad[i] += self.grad[i] * (T(1) - y * y);
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    detail::check(numel(shape) == a.numel(), "reshape: element count mismatch");
    std::vector<T> out(a.val());
    return detail::make_op<T>(std::move(shape), std::move(out), {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// out[i] = in[perm_index(i)] mapping for permute(axes).
inline std::vector<int64_t> permute_index_map(const Shape& in_shape, const std::vector<int>& axes) {
    const auto in_strides = row_major_strides(in_shape);
    Shape out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[static_cast<size_t>(axes[i])];
    const auto out_strides = row_major_strides(out_shape);
    const int64_t n = numel(in_shape);
    std::vector<int64_t> map(static_cast<size_t>(n));
    const size_t nd = axes.size();
    for (int64_t o = 0; o < n; ++o) {
        // decode o into out coordinates, accumulate input offset
        int64_t rem = o;
        int64_t src = 0;
        for (size_t d = 0; d < nd; ++d) {
            const int64_t c = rem / out_strides[d];
            rem -= c * out_strides[d];
            src += c * in_strides[static_cast<size_t>(axes[d])];
        }
        map[static_cast<size_t>(o)] = src;
    }
    return map;
}

}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<int>& axes) {
    detail::check(axes.size() == a.shape().size(), "permute: rank mismatch");
    Shape out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.shape()[static_cast<size_t>(axes[i])];
    const auto map = detail::permute_index_map(a.shape(), axes);
    std::vector<T> out(a.val().size());
    const auto& x = a.val();
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[static_cast<size_t>(map[i])];
    return detail::make_op<T>(std::move(out_shape), std::move(out), {a}, [map](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[static_cast<size_t>(map[i])] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape().size() == 2 && b.shape().size() == 2, "matmul: need 2-D");
    const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    detail::check(b.shape()[0] == k, "matmul: inner dim mismatch");
    std::vector<T> out(static_cast<size_t>(m * n));
    {
        CMapM<T> A(a.val().data(), m, k), B(b.val().data(), k, n);
        MapM<T> C(out.data(), m, n);
        C.noalias() = A * B;
    }
    return detail::make_op<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        CMapM<T> G(self.grad.data(), m, n);
        if (pa.requires_grad) {
            pa.ensure_grad();
            CMapM<T> B(pb.val.data(), k, n);
            MapM<T> GA(pa.grad.data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            CMapM<T> A(pa.val.data(), m, k);
            MapM<T> GB(pb.grad.data(), k, n);
            GB.noalias() += A.transpose() * G;
        }
    });
}

// x: [..., in] flattened to rows; W: [in, out]; b: [out] (optional, pass undefined Var to skip).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    detail::check(w.shape().size() == 2, "linear: W must be 2-D");
    const int64_t in = w.shape()[0], out_dim = w.shape()[1];
    detail::check(x.shape().back() == in, "linear: input feature dim mismatch");
    const int64_t rows = x.numel() / in;
    const bool has_bias = b.defined();
    if (has_bias) detail::check(b.shape().size() == 1 && b.shape()[0] == out_dim, "linear: bias shape");

    std::vector<T> out(static_cast<size_t>(rows * out_dim));
    {
        CMapM<T> X(x.val().data(), rows, in), W(w.val().data(), in, out_dim);
        MapM<T> Y(out.data(), rows, out_dim);
        Y.noalias() = X * W;
        if (has_bias) {
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(b.val().data(), out_dim);
            Y.rowwise() += bias;
        }
    }
    Shape out_shape(x.shape());
    out_shape.back() = out_dim;

    std::vector<Var<T>> parents = {x, w};
    if (has_bias) parents.push_back(b);
    return detail::make_op<T>(std::move(out_shape), std::move(out), std::move(parents),
                              [rows, in, out_dim, has_bias](Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pw = *self.parents[1];
                                  CMapM<T> G(self.grad.data(), rows, out_dim);
                                  if (px.requires_grad) {
                                      px.ensure_grad();
                                      CMapM<T> W(pw.val.data(), in, out_dim);
                                      MapM<T> GX(px.grad.data(), rows, in);
                                      GX.noalias() += G * W.transpose();
                                  }
                                  if (pw.requires_grad) {
                                      pw.ensure_grad();
                                      CMapM<T> X(px.val.data(), rows, in);
                                      MapM<T> GW(pw.grad.data(), in, out_dim);
                                      GW.noalias() += X.transpose() * G;
                                  }
                                  if (has_bias) {
                                      auto& pb = *self.parents[2];
                                      if (pb.requires_grad) {
                                          pb.ensure_grad();
                                          for (int64_t r = 0; r < rows; ++r)
                                              for (int64_t c = 0; c < out_dim; ++c)
                                                  pb.grad[static_cast<size_t>(c)] +=
                                                      self.grad[static_cast<size_t>(r * out_dim + c)];
                                      }
                                  }
                              });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
    return linear(x, w, Var<T>());
}

// Batched matmul: a [B, m, k] x b [B, k, n] -> [B, m, n].
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape().size() == 3 && b.shape().size() == 3, "bmm: need 3-D");
    const int64_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    detail::check(b.shape()[0] == B && b.shape()[1] == k, "bmm: shape mismatch");
    std::vector<T> out(static_cast<size_t>(B * m * n));
    for (int64_t i = 0; i < B; ++i) {
        CMapM<T> A(a.val().data() + i * m * k, m, k), Bm(b.val().data() + i * k * n, k, n);
        MapM<T> C(out.data() + i * m * n, m, n);
        C.noalias() = A * Bm;
    }
    return detail::make_op<T>({B, m, n}, std::move(out), {a, b}, [B, m, k, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (int64_t i = 0; i < B; ++i) {
            CMapM<T> G(self.grad.data() + i * m * n, m, n);
            if (pa.requires_grad) {
                pa.ensure_grad();
                CMapM<T> Bm(pb.val.data() + i * k * n, k, n);
                MapM<T> GA(pa.grad.data() + i * m * k, m, k);
                GA.noalias() += G * Bm.transpose();
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                CMapM<T> A(pa.val.data() + i * m * k, m, k);
                MapM<T> GB(pb.grad.data() + i * k * n, k, n);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
    const size_t nd = a.shape().size();
    detail::check(nd >= 2, "transpose_last2: rank < 2");
    std::vector<int> axes(nd);
    for (size_t i = 0; i < nd; ++i) axes[i] = static_cast<int>(i);
    std::swap(axes[nd - 1], axes[nd - 2]);
    return permute(a, axes);
}

// ---------------------------------------------------------------------------
// normalizations and softmax (all over the last dim)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_lastdim(const Var<T>& a) {
    const int64_t d = a.shape().back();
    const int64_t rows = a.numel() / d;
    std::vector<T> out(a.val().size());
    const auto& x = a.val();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        T* yr = out.data() + r * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t i = 0; i < d; ++i) mx = std::max(mx, static_cast<double>(xr[i]));
        double sum = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            const double e = std::exp(static_cast<double>(xr[i]) - mx);
            yr[i] = static_cast<T>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int64_t i = 0; i < d; ++i) yr[i] = static_cast<T>(static_cast<double>(yr[i]) * inv);
    }
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [rows, d](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = self.val.data() + r * d;
            const T* g = self.grad.data() + r * d;
            T* px = p.grad.data() + r * d;
            const double dot = detail::row_dot(y, g, d);
            for (int64_t i = 0; i < d; ++i)
                px[i] += static_cast<T>(static_cast<double>(y[i]) * (static_cast<double>(g[i]) - dot));
        }
    });
}

// LayerNorm without learnable affine (DiT-style blocks modulate externally).
template <typename T>
Var<T> layernorm_lastdim(const Var<T>& a, double eps = 1e-6) {
    const int64_t d = a.shape().back();
    const int64_t rows = a.numel() / d;
    std::vector<T> out(a.val().size());
    std::vector<double> inv_std(static_cast<size_t>(rows)), mean(static_cast<size_t>(rows));
    const auto& x = a.val();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        double mu = 0.0;
        for (int64_t i = 0; i < d; ++i) mu += static_cast<double>(xr[i]);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            const double c = static_cast<double>(xr[i]) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[static_cast<size_t>(r)] = mu;
        inv_std[static_cast<size_t>(r)] = is;
        T* yr = out.data() + r * d;
        for (int64_t i = 0; i < d; ++i) yr[i] = static_cast<T>((static_cast<double>(xr[i]) - mu) * is);
    }
    return detail::make_op<T>(a.shape(), std::move(out), {a},
                              [rows, d, inv_std = std::move(inv_std)](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t r = 0; r < rows; ++r) {
                                      const T* y = self.val.data() + r * d;
                                      const T* g = self.grad.data() + r * d;
                                      T* px = p.grad.data() + r * d;
                                      const double is = inv_std[static_cast<size_t>(r)];
                                      double gsum = 0.0, gysum = 0.0;
                                      for (int64_t i = 0; i < d; ++i) {
                                          gsum += static_cast<double>(g[i]);
                                          gysum += static_cast<double>(g[i]) * static_cast<double>(y[i]);
                                      }
                                      const double inv_d = 1.0 / static_cast<double>(d);
                                      for (int64_t i = 0; i < d; ++i) {
                                          const double gi = static_cast<double>(g[i]);
                                          const double yi = static_cast<double>(y[i]);
                                          px[i] += static_cast<T>(is * (gi - inv_d * gsum - yi * inv_d * gysum));
                                      }
                                  }
                              });
}

// RMSNorm without gain; pair with mul_lastdim for the learned gain.
template <typename T>
Var<T> rmsnorm_lastdim(const Var<T>& a, double eps = 1e-6) {
    const int64_t d = a.shape().back();
    const int64_t rows = a.numel() / d;
    std::vector<T> out(a.val().size());
    std::vector<double> inv_rms(static_cast<size_t>(rows));
    const auto& x = a.val();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        const double ms = detail::row_sq_norm(xr, d) / static_cast<double>(d);
        const double ir = 1.0 / std::sqrt(ms + eps);
        inv_rms[static_cast<size_t>(r)] = ir;
        T* yr = out.data() + r * d;
        for (int64_t i = 0; i < d; ++i) yr[i] = static_cast<T>(static_cast<double>(xr[i]) * ir);
    }
    return detail::make_op<T>(a.shape(), std::move(out), {a},
                              [rows, d, inv_rms = std::move(inv_rms)](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t r = 0; r < rows; ++r) {
                                      const T* xr = p.val.data() + r * d;
                                      const T* g = self.grad.data() + r * d;
                                      T* px = p.grad.data() + r * d;
                                      const double ir = inv_rms[static_cast<size_t>(r)];
                                      // y = x * ir, ir = (mean(x^2)+eps)^{-1/2}
                                      const double gx = detail::row_dot(g, xr, d);
                                      const double coef = gx * ir * ir * ir / static_cast<double>(d);
                                      for (int64_t i = 0; i < d; ++i)
                                          px[i] += static_cast<T>(static_cast<double>(g[i]) * ir -
                                                                  coef * static_cast<double>(xr[i]));
                                  }
                              });
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

// x [..., H] * g [H]
template <typename T>
Var<T> mul_lastdim(const Var<T>& x, const Var<T>& g) {
    const int64_t d = x.shape().back();
    detail::check(g.shape().size() == 1 && g.shape()[0] == d, "mul_lastdim: gain shape");
    const int64_t rows = x.numel() / d;
    std::vector<T> out(x.val().size());
    const auto& xv = x.val();
    const auto& gv = g.val();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i)
            out[static_cast<size_t>(r * d + i)] =
                xv[static_cast<size_t>(r * d + i)] * gv[static_cast<size_t>(i)];
    return detail::make_op<T>(x.shape(), std::move(out), {x, g}, [rows, d](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < d; ++i)
                    px.grad[static_cast<size_t>(r * d + i)] +=
                        self.grad[static_cast<size_t>(r * d + i)] * pg.val[static_cast<size_t>(i)];
        }
        if (pg.requires_grad) {
            pg.ensure_grad();
            for (int64_t i = 0; i < d; ++i) {
                double acc = 0.0;
                for (int64_t r = 0; r < rows; ++r)
                    acc += static_cast<double>(self.grad[static_cast<size_t>(r * d + i)]) *
                           static_cast<double>(px.val[static_cast<size_t>(r * d + i)]);
                pg.grad[static_cast<size_t>(i)] += static_cast<T>(acc);
            }
        }
    });
}

// AdaLN modulation: x [B, Tk, H], scale/shift [B, H] -> x*(1+scale)+shift per sample.
template <typename T>
Var<T> modulate_rows(const Var<T>& x, const Var<T>& shift, const Var<T>& scl) {
    detail::check(x.shape().size() == 3, "modulate_rows: x must be [B,T,H]");
    const int64_t B = x.shape()[0], Tk = x.shape()[1], H = x.shape()[2];
    detail::check(shift.shape() == Shape({B, H}) && scl.shape() == Shape({B, H}),
                  "modulate_rows: condition shape");
    std::vector<T> out(x.val().size());
    const auto& xv = x.val();
    const auto& sh = shift.val();
    const auto& sc = scl.val();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < Tk; ++t)
            for (int64_t i = 0; i < H; ++i) {
                const size_t xi = static_cast<size_t>((b * Tk + t) * H + i);
                const size_t ci = static_cast<size_t>(b * H + i);
                out[xi] = xv[xi] * (T(1) + sc[ci]) + sh[ci];
            }
    return detail::make_op<T>(x.shape(), std::move(out), {x, shift, scl}, [B, Tk, H](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& psh = *self.parents[1];
        auto& psc = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (psh.requires_grad) psh.ensure_grad();
        if (psc.requires_grad) psc.ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < H; ++i) {
                const size_t ci = static_cast<size_t>(b * H + i);
                double gsh = 0.0, gsc = 0.0;
                for (int64_t t = 0; t < Tk; ++t) {
                    const size_t xi = static_cast<size_t>((b * Tk + t) * H + i);
                    const double g = static_cast<double>(self.grad[xi]);
                    if (px.requires_grad)
                        px.grad[xi] += static_cast<T>(g * (1.0 + static_cast<double>(psc.val[ci])));
                    gsh += g;
                    gsc += g * static_cast<double>(px.val[xi]);
                }
                if (psh.requires_grad) psh.grad[ci] += static_cast<T>(gsh);
                if (psc.requires_grad) psc.grad[ci] += static_cast<T>(gsc);
            }
    });
}

// Gated residual branch: x [B, Tk, H] * gate [B, H].
template <typename T>
Var<T> gate_rows(const Var<T>& x, const Var<T>& gate) {
    detail::check(x.shape().size() == 3, "gate_rows: x must be [B,T,H]");
    const int64_t B = x.shape()[0], Tk = x.shape()[1], H = x.shape()[2];
    detail::check(gate.shape() == Shape({B, H}), "gate_rows: gate shape");
    std::vector<T> out(x.val().size());
    const auto& xv = x.val();
    const auto& gv = gate.val();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < Tk; ++t)
            for (int64_t i = 0; i < H; ++i) {
                const size_t xi = static_cast<size_t>((b * Tk + t) * H + i);
                out[xi] = xv[xi] * gv[static_cast<size_t>(b * H + i)];
            }
    return detail::make_op<T>(x.shape(), std::move(out), {x, gate}, [B, Tk, H](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < H; ++i) {
                const size_t ci = static_cast<size_t>(b * H + i);
                double gg = 0.0;
                for (int64_t t = 0; t < Tk; ++t) {
                    const size_t xi = static_cast<size_t>((b * Tk + t) * H + i);
                    if (px.requires_grad)
                        px.grad[xi] += self.grad[xi] * pg.val[ci];
                    gg += static_cast<double>(self.grad[xi]) * static_cast<double>(px.val[xi]);
                }
                if (pg.requires_grad) pg.grad[ci] += static_cast<T>(gg);
            }
    });
}

// Split the last dim into k equal chunks.
template <typename T>
std::vector<Var<T>> chunk_lastdim(const Var<T>& x, int k) {
    const int64_t d = x.shape().back();
    detail::check(d % k == 0, "chunk_lastdim: dim not divisible");
    const int64_t part = d / k;
    const int64_t rows = x.numel() / d;
    std::vector<Var<T>> outs;
    outs.reserve(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c) {
        std::vector<T> out(static_cast<size_t>(rows * part));
        const auto& xv = x.val();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < part; ++i)
                out[static_cast<size_t>(r * part + i)] = xv[static_cast<size_t>(r * d + c * part + i)];
        Shape shp(x.shape());
        shp.back() = part;
        const int64_t off = static_cast<int64_t>(c) * part;
        outs.push_back(detail::make_op<T>(std::move(shp), std::move(out), {x},
                                          [rows, d, part, off](Node<T>& self) {
                                              auto& p = *self.parents[0];
                                              if (!p.requires_grad) return;
                                              p.ensure_grad();
                                              for (int64_t r = 0; r < rows; ++r)
                                                  for (int64_t i = 0; i < part; ++i)
                                                      p.grad[static_cast<size_t>(r * d + off + i)] +=
                                                          self.grad[static_cast<size_t>(r * part + i)];
                                          }));
    }
    return outs;
}

// Embedding row gather: table [V, H], ids per batch -> [B, H].
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
    detail::check(table.shape().size() == 2, "embedding: table must be 2-D");
    const int64_t V = table.shape()[0], H = table.shape()[1];
    for (const int id : ids)
        detail::check(id >= 0 && id < V, "embedding: id out of range");
    const int64_t B = static_cast<int64_t>(ids.size());
    std::vector<T> out(static_cast<size_t>(B * H));
    for (int64_t b = 0; b < B; ++b)
        std::copy_n(table.val().data() + static_cast<int64_t>(ids[static_cast<size_t>(b)]) * H, H,
                    out.data() + b * H);
    return detail::make_op<T>({B, H}, std::move(out), {table}, [ids, H](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t b = 0; b < ids.size(); ++b) {
            const T* g = self.grad.data() + static_cast<int64_t>(b) * H;
            T* dst = p.grad.data() + static_cast<int64_t>(ids[b]) * H;
            for (int64_t i = 0; i < H; ++i) dst[i] += g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// rotary position encoding
// ---------------------------------------------------------------------------

// x: [B, heads, Tk, hd]; cos/sin: [Tk, hd/2] tables (constants, not trained).
// Adjacent pairs (2i, 2i+1) are rotated; a pure rotation, so norms are kept.
template <typename T>
Var<T> rope_apply(const Var<T>& x, std::shared_ptr<TensorData<T>> cos_t,
                  std::shared_ptr<TensorData<T>> sin_t) {
    detail::check(x.shape().size() == 4, "rope_apply: x must be [B,heads,T,hd]");
    const int64_t B = x.shape()[0], Hh = x.shape()[1], Tk = x.shape()[2], hd = x.shape()[3];
    detail::check(hd % 2 == 0, "rope_apply: head dim must be even");
    const int64_t pairs = hd / 2;
    detail::check(cos_t->shape == Shape({Tk, pairs}) && sin_t->shape == Shape({Tk, pairs}),
                  "rope_apply: table shape");
    std::vector<T> out(x.val().size());
    const auto& xv = x.val();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < Hh; ++h)
            for (int64_t t = 0; t < Tk; ++t) {
                const size_t base = static_cast<size_t>(((b * Hh + h) * Tk + t) * hd);
                const T* ct = cos_t->v.data() + t * pairs;
                const T* st = sin_t->v.data() + t * pairs;
                for (int64_t i = 0; i < pairs; ++i) {
                    const T x0 = xv[base + 2 * i], x1 = xv[base + 2 * i + 1];
                    out[base + 2 * i] = x0 * ct[i] - x1 * st[i];
                    out[base + 2 * i + 1] = x0 * st[i] + x1 * ct[i];
                }
            }
    return detail::make_op<T>(x.shape(), std::move(out), {x},
                              [B, Hh, Tk, hd, pairs, cos_t, sin_t](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t b = 0; b < B; ++b)
                                      for (int64_t h = 0; h < Hh; ++h)
                                          for (int64_t t = 0; t < Tk; ++t) {
                                              const size_t base =
                                                  static_cast<size_t>(((b * Hh + h) * Tk + t) * hd);
                                              const T* ct = cos_t->v.data() + t * pairs;
                                              const T* st = sin_t->v.data() + t * pairs;
                                              // inverse rotation
                                              for (int64_t i = 0; i < pairs; ++i) {
                                                  const T g0 = self.grad[base + 2 * i];
                                                  const T g1 = self.grad[base + 2 * i + 1];
                                                  p.grad[base + 2 * i] += g0 * ct[i] + g1 * st[i];
                                                  p.grad[base + 2 * i + 1] += -g0 * st[i] + g1 * ct[i];
                                              }
                                          }
                              });
}

// ---------------------------------------------------------------------------
// convolution (NHWC, HWIO weights) for the frozen feature pyramid
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d_nhwc(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    detail::check(x.shape().size() == 4, "conv2d: x must be [B,H,W,C]");
    detail::check(w.shape().size() == 4, "conv2d: w must be [kh,kw,Cin,Cout]");
    const int64_t B = x.shape()[0], Hi = x.shape()[1], Wi = x.shape()[2], Ci = x.shape()[3];
    const int64_t kh = w.shape()[0], kw = w.shape()[1], Co = w.shape()[3];
    detail::check(w.shape()[2] == Ci, "conv2d: channel mismatch");
    const int64_t Ho = (Hi + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (Wi + 2 * pad - kw) / stride + 1;
    detail::check(Ho >= 1 && Wo >= 1, "conv2d: empty output");
    const int64_t patch = kh * kw * Ci;

    // Captures by value: the backward closure outlives this call frame.
    auto im2col = [=](const T* img, T* cols) {
        // cols: [Ho*Wo, patch]
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                T* row = cols + (oy * Wo + ox) * patch;
                int64_t idx = 0;
                for (int64_t ky = 0; ky < kh; ++ky) {
                    const int64_t iy = oy * stride - pad + ky;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const int64_t ix = ox * stride - pad + kx;
                        if (iy >= 0 && iy < Hi && ix >= 0 && ix < Wi) {
                            const T* src = img + (iy * Wi + ix) * Ci;
                            for (int64_t c = 0; c < Ci; ++c) row[idx++] = src[c];
                        } else {
                            for (int64_t c = 0; c < Ci; ++c) row[idx++] = T(0);
                        }
                    }
                }
            }
    };

    std::vector<T> out(static_cast<size_t>(B * Ho * Wo * Co));
    std::vector<T> cols(static_cast<size_t>(Ho * Wo * patch));
    for (int64_t n = 0; n < B; ++n) {
        im2col(x.val().data() + n * Hi * Wi * Ci, cols.data());
        CMapM<T> C(cols.data(), Ho * Wo, patch), W(w.val().data(), patch, Co);
        MapM<T> Y(out.data() + n * Ho * Wo * Co, Ho * Wo, Co);
        Y.noalias() = C * W;
        if (b.defined()) {
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(b.val().data(), Co);
            Y.rowwise() += bias;
        }
    }
    std::vector<Var<T>> parents = {x, w};
    const bool has_bias = b.defined();
    if (has_bias) parents.push_back(b);
    return detail::make_op<T>(
        {B, Ho, Wo, Co}, std::move(out), std::move(parents),
        [=](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            std::vector<T> cols(static_cast<size_t>(Ho * Wo * patch));
            std::vector<T> gcols(static_cast<size_t>(Ho * Wo * patch));
            for (int64_t n = 0; n < B; ++n) {
                CMapM<T> G(self.grad.data() + n * Ho * Wo * Co, Ho * Wo, Co);
                if (pw.requires_grad || px.requires_grad) im2col(px.val.data() + n * Hi * Wi * Ci, cols.data());
                if (pw.requires_grad) {
                    pw.ensure_grad();
                    CMapM<T> C(cols.data(), Ho * Wo, patch);
                    MapM<T> GW(pw.grad.data(), patch, Co);
                    GW.noalias() += C.transpose() * G;
                }
                if (px.requires_grad) {
                    px.ensure_grad();
                    CMapM<T> W(pw.val.data(), patch, Co);
                    MapM<T> GC(gcols.data(), Ho * Wo, patch);
                    GC.noalias() = G * W.transpose();
                    // col2im scatter
                    T* gx = px.grad.data() + n * Hi * Wi * Ci;
                    for (int64_t oy = 0; oy < Ho; ++oy)
                        for (int64_t ox = 0; ox < Wo; ++ox) {
                            const T* row = gcols.data() + (oy * Wo + ox) * patch;
                            int64_t idx = 0;
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                const int64_t iy = oy * stride - pad + ky;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t ix = ox * stride - pad + kx;
                                    if (iy >= 0 && iy < Hi && ix >= 0 && ix < Wi) {
                                        T* dst = gx + (iy * Wi + ix) * Ci;
                                        for (int64_t c = 0; c < Ci; ++c) dst[c] += row[idx++];
                                    } else {
                                        idx += Ci;
                                    }
                                }
                            }
                        }
                }
            }
            if (has_bias) {
                auto& pb = *self.parents[2];
                if (pb.requires_grad) {
                    pb.ensure_grad();
                    const int64_t rows = B * Ho * Wo;
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < Co; ++c)
                            pb.grad[static_cast<size_t>(c)] += self.grad[static_cast<size_t>(r * Co + c)];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// sphere ops (rows are flattened per-sample latents)
// ---------------------------------------------------------------------------

inline constexpr double kDegenerateNorm = 1e-12;

// Rows rescaled to Euclidean norm sqrt(L).
template <typename T>
Var<T> spherify_rows(const Var<T>& x) {
    detail::check(x.shape().size() == 2, "spherify_rows: x must be [B,L]");
    const int64_t B = x.shape()[0], L = x.shape()[1];
    const double target = std::sqrt(static_cast<double>(L));
    std::vector<T> out(x.val().size());
    std::vector<double> inv_norm(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        const T* xr = x.val().data() + b * L;
        const double nrm = std::sqrt(detail::row_sq_norm(xr, L));
        if (nrm < kDegenerateNorm)
            throw DegenerateLatent("spherify: input norm below 1e-12");
        const double s = target / nrm;
        inv_norm[static_cast<size_t>(b)] = 1.0 / nrm;
        T* yr = out.data() + b * L;
        for (int64_t i = 0; i < L; ++i) yr[i] = static_cast<T>(static_cast<double>(xr[i]) * s);
    }
    return detail::make_op<T>(x.shape(), std::move(out), {x},
                              [B, L, target, inv_norm = std::move(inv_norm)](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t b = 0; b < B; ++b) {
                                      const T* xr = p.val.data() + b * L;
                                      const T* g = self.grad.data() + b * L;
                                      T* px = p.grad.data() + b * L;
                                      const double in = inv_norm[static_cast<size_t>(b)];
                                      const double s = target * in;
                                      const double xg = detail::row_dot(xr, g, L);
                                      const double coef = s * xg * in * in;
                                      for (int64_t i = 0; i < L; ++i)
                                          px[i] += static_cast<T>(s * static_cast<double>(g[i]) -
                                                                  coef * static_cast<double>(xr[i]));
                                  }
                              });
}

// x + sigma_b * e_b with constant noise; sigma == 0 rows pass through exactly.
template <typename T>
Var<T> add_scaled_noise_rows(const Var<T>& x, const TensorData<T>& e, const std::vector<T>& sigma) {
    detail::check(x.shape().size() == 2, "add_scaled_noise_rows: x must be [B,L]");
    const int64_t B = x.shape()[0], L = x.shape()[1];
    detail::check(e.shape == x.shape(), "add_scaled_noise_rows: noise shape");
    detail::check(static_cast<int64_t>(sigma.size()) == B, "add_scaled_noise_rows: sigma size");
    std::vector<T> out(x.val());
    for (int64_t b = 0; b < B; ++b) {
        const T s = sigma[static_cast<size_t>(b)];
        if (s == T(0)) continue;
        T* yr = out.data() + b * L;
        const T* er = e.v.data() + b * L;
        for (int64_t i = 0; i < L; ++i) yr[i] += s * er[i];
    }
    return detail::make_op<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

// Per-row rescale by min(1, limit / ||x||): identity inside the ball.
template <typename T>
Var<T> norm_bound_rows(const Var<T>& x, double limit) {
    detail::check(x.shape().size() == 2, "norm_bound_rows: x must be [B,L]");
    const int64_t B = x.shape()[0], L = x.shape()[1];
    std::vector<T> out(x.val());
    std::vector<double> inv_norm(static_cast<size_t>(B), 0.0);  // 0 marks pass-through rows
    for (int64_t b = 0; b < B; ++b) {
        T* xr = out.data() + b * L;
        const double nrm = std::sqrt(detail::row_sq_norm(xr, L));
        if (nrm > limit) {
            const double s = limit / nrm;
            inv_norm[static_cast<size_t>(b)] = 1.0 / nrm;
            for (int64_t i = 0; i < L; ++i) xr[i] = static_cast<T>(static_cast<double>(xr[i]) * s);
        }
    }
    return detail::make_op<T>(x.shape(), std::move(out), {x},
                              [B, L, limit, inv_norm = std::move(inv_norm)](Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int64_t b = 0; b < B; ++b) {
                                      const T* g = self.grad.data() + b * L;
                                      T* px = p.grad.data() + b * L;
                                      const double in = inv_norm[static_cast<size_t>(b)];
                                      if (in == 0.0) {
                                          for (int64_t i = 0; i < L; ++i) px[i] += g[i];
                                          continue;
                                      }
                                      const T* xr = p.val.data() + b * L;
                                      const double s = limit * in;
                                      const double xg = detail::row_dot(xr, g, L);
                                      const double coef = s * xg * in * in;
                                      for (int64_t i = 0; i < L; ++i)
                                          px[i] += static_cast<T>(s * static_cast<double>(g[i]) -
                                                                  coef * static_cast<double>(xr[i]));
                                  }
                              });
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    double acc = 0.0;
    for (const T v : a.val()) acc += static_cast<double>(v);
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    return detail::make_op<T>({1}, {static_cast<T>(acc * inv_n)}, {a}, [inv_n](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = static_cast<T>(static_cast<double>(self.grad[0]) * inv_n);
        for (auto& pg : p.grad) pg += g;
    });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    double acc = 0.0;
    for (const T v : a.val()) acc += static_cast<double>(v);
    return detail::make_op<T>({1}, {static_cast<T>(acc)}, {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0];
        for (auto& pg : p.grad) pg += g;
    });
}

// Mean over elements of the smooth-L1 (Huber-style) penalty:
// 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise.
template <typename T>
Var<T> smooth_l1_mean(const Var<T>& a, const Var<T>& b, double beta = 1.0) {
    detail::check(a.shape() == b.shape(), "smooth_l1_mean: shape mismatch");
    const auto& av = a.val();
    const auto& bv = b.val();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        const double ad = std::abs(d);
        acc += (ad < beta) ? 0.5 * d * d / beta : ad - 0.5 * beta;
    }
    const double inv_n = 1.0 / static_cast<double>(av.size());
    return detail::make_op<T>({1}, {static_cast<T>(acc * inv_n)}, {a, b}, [beta, inv_n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        const double g = static_cast<double>(self.grad[0]) * inv_n;
        for (size_t i = 0; i < pa.val.size(); ++i) {
            const double d = static_cast<double>(pa.val[i]) - static_cast<double>(pb.val[i]);
            const double dd = (std::abs(d) < beta) ? d / beta : (d > 0 ? 1.0 : -1.0);
            if (pa.requires_grad) pa.grad[i] += static_cast<T>(g * dd);
            if (pb.requires_grad) pb.grad[i] -= static_cast<T>(g * dd);
        }
    });
}

template <typename T>
Var<T> mse_mean(const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape() == b.shape(), "mse_mean: shape mismatch");
    const auto& av = a.val();
    const auto& bv = b.val();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += d * d;
    }
    const double inv_n = 1.0 / static_cast<double>(av.size());
    return detail::make_op<T>({1}, {static_cast<T>(acc * inv_n)}, {a, b}, [inv_n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        const double g = 2.0 * static_cast<double>(self.grad[0]) * inv_n;
        for (size_t i = 0; i < pa.val.size(); ++i) {
            const double d = static_cast<double>(pa.val[i]) - static_cast<double>(pb.val[i]);
            if (pa.requires_grad) pa.grad[i] += static_cast<T>(g * d);
            if (pb.requires_grad) pb.grad[i] -= static_cast<T>(g * d);
        }
    });
}

// mean over rows of (1 - cos(a_row, b_row)).
template <typename T>
Var<T> cosine_distance_rows_mean(const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape() == b.shape() && a.shape().size() == 2, "cosine_distance: need matching [B,L]");
    const int64_t B = a.shape()[0], L = a.shape()[1];
    std::vector<double> na(static_cast<size_t>(B)), nb(static_cast<size_t>(B)), dots(static_cast<size_t>(B));
    double acc = 0.0;
    for (int64_t r = 0; r < B; ++r) {
        const T* ar = a.val().data() + r * L;
        const T* br = b.val().data() + r * L;
        const double an = std::sqrt(detail::row_sq_norm(ar, L));
        const double bn = std::sqrt(detail::row_sq_norm(br, L));
        if (an < kDegenerateNorm || bn < kDegenerateNorm)
            throw DegenerateLatent("cosine distance: zero vector");
        const double d = detail::row_dot(ar, br, L);
        na[static_cast<size_t>(r)] = an;
        nb[static_cast<size_t>(r)] = bn;
        dots[static_cast<size_t>(r)] = d;
        acc += 1.0 - d / (an * bn);
    }
    const double inv_b = 1.0 / static_cast<double>(B);
    return detail::make_op<T>(
        {1}, {static_cast<T>(acc * inv_b)}, {a, b},
        [B, L, inv_b, na = std::move(na), nb = std::move(nb), dots = std::move(dots)](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) pa.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            const double g = static_cast<double>(self.grad[0]) * inv_b;
            for (int64_t r = 0; r < B; ++r) {
                const T* ar = pa.val.data() + r * L;
                const T* br = pb.val.data() + r * L;
                const double an = na[static_cast<size_t>(r)], bn = nb[static_cast<size_t>(r)];
                const double d = dots[static_cast<size_t>(r)];
                // d(1 - cos)/da = -(b/(an*bn) - d*a/(an^3*bn))
                if (pa.requires_grad) {
                    T* pg = pa.grad.data() + r * L;
                    const double c1 = 1.0 / (an * bn), c2 = d / (an * an * an * bn);
                    for (int64_t i = 0; i < L; ++i)
                        pg[i] -= static_cast<T>(g * (c1 * static_cast<double>(br[i]) -
                                                     c2 * static_cast<double>(ar[i])));
                }
                if (pb.requires_grad) {
                    T* pg = pb.grad.data() + r * L;
                    const double c1 = 1.0 / (an * bn), c2 = d / (bn * bn * bn * an);
                    for (int64_t i = 0; i < L; ++i)
                        pg[i] -= static_cast<T>(g * (c1 * static_cast<double>(ar[i]) -
                                                     c2 * static_cast<double>(br[i])));
                }
            }
        });
}

// ---------------------------------------------------------------------------
// backward driver
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Var<T>& root) {
    if (!root.requires_grad())
        throw std::logic_error("backward: root does not require grad");
    if (root.numel() != 1) throw std::logic_error("backward: root must be scalar");

    // Iterative post-order DFS over grad-requiring nodes.
    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.raw(), 0);
    visited.insert(root.raw());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            Node<T>* next = node->parents[child].get();
            ++child;
            if (next->requires_grad && !visited.count(next)) {
                visited.insert(next);
                stack.emplace_back(next, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    root.raw()->ensure_grad();
    root.raw()->grad[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

}  // namespace sphere::ag
