#pragma once

// Dense rank-4 (n, c, h, w) tensor and the kernels the flow layers consume:
// 1x1 channel mixing, 5x5 binomial blur, nearest/bilinear resizing, 3x3
// convolution, the 2-D DFT and reductions. Every linear kernel comes with its
// adjoint so gradients can be pushed back through it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pyramidflow/errors.hpp"

namespace pyramidflow {

struct Shape4 {
    std::size_t n = 0, c = 0, h = 0, w = 0;

    constexpr std::size_t size() const { return n * c * h * w; }
    constexpr std::size_t plane() const { return h * w; }
    friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

template <typename T>
class Tensor4 {
public:
    using value_type = T;

    Tensor4() = default;

    explicit Tensor4(Shape4 shape, T value = T(0)) : shape_(shape) {
        validate(shape_);
        data_.assign(shape_.size(), value);
    }

    Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        validate(shape_);
        if (data_.size() != shape_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_.str());
        }
    }

    static Tensor4 zeros(Shape4 shape) { return Tensor4(shape, T(0)); }

    const Shape4& shape() const { return shape_; }
    std::size_t n() const { return shape_.n; }
    std::size_t c() const { return shape_.c; }
    std::size_t h() const { return shape_.h; }
    std::size_t w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    const std::vector<T>& storage() const { return data_; }

    std::size_t index(std::size_t n, std::size_t c, std::size_t i, std::size_t j) const {
        return ((n * shape_.c + c) * shape_.h + i) * shape_.w + j;
    }
    T& operator()(std::size_t n, std::size_t c, std::size_t i, std::size_t j) {
        return data_[index(n, c, i, j)];
    }
    T operator()(std::size_t n, std::size_t c, std::size_t i, std::size_t j) const {
        return data_[index(n, c, i, j)];
    }
    T& operator[](std::size_t k) { return data_[k]; }
    T operator[](std::size_t k) const { return data_[k]; }

    T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
    const T* plane(std::size_t n, std::size_t c) const {
        return data_.data() + (n * shape_.c + c) * shape_.plane();
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    Tensor4& operator+=(const Tensor4& other) {
        require_same(other, "+=");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other.data_[k];
        return *this;
    }
    Tensor4& operator-=(const Tensor4& other) {
        require_same(other, "-=");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= other.data_[k];
        return *this;
    }
    Tensor4& operator*=(T scale) {
        for (auto& v : data_) v *= scale;
        return *this;
    }

    template <typename U>
    Tensor4<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor4<U>(shape_, std::move(out));
    }

    std::size_t bytes() const { return data_.size() * sizeof(T); }

private:
    static void validate(const Shape4& s) {
        if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
            throw ShapeError("tensor dimensions must all be >= 1, got " + s.str());
        }
    }
    void require_same(const Tensor4& other, const char* what) const {
        if (shape_ != other.shape_) {
            throw ShapeError(std::string("shape mismatch in ") + what + ": " + shape_.str() + " vs " +
                             other.shape_.str());
        }
    }

    Shape4 shape_{};
    std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor4<T>& a, const Tensor4<T>& b, const std::string& what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(what + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    }
}

template <typename T>
Tensor4<T> operator+(Tensor4<T> a, const Tensor4<T>& b) {
    a += b;
    return a;
}

template <typename T>
Tensor4<T> operator-(Tensor4<T> a, const Tensor4<T>& b) {
    a -= b;
    return a;
}

template <typename T>
Tensor4<T> operator*(Tensor4<T> a, T scale) {
    a *= scale;
    return a;
}

template <typename T>
Tensor4<T> hadamard(const Tensor4<T>& a, const Tensor4<T>& b) {
    require_same_shape(a, b, "hadamard");
    Tensor4<T> out(a.shape());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] * b[k];
    return out;
}

template <typename T>
double max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        m = std::max(m, std::abs(static_cast<double>(a[k]) - static_cast<double>(b[k])));
    }
    return m;
}

template <typename T>
double max_abs(const Tensor4<T>& a) {
    double m = 0.0;
    for (T v : a.values()) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
}

template <typename T>
double sum_all(const Tensor4<T>& a) {
    double s = 0.0;
    for (T v : a.values()) s += static_cast<double>(v);
    return s;
}

template <typename T>
bool all_finite(const Tensor4<T>& a) {
    return std::all_of(a.values().begin(), a.values().end(), [](T v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Channel / batch plumbing

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
        throw ShapeError("concat_channels: incompatible " + a.shape().str() + " and " + b.shape().str());
    }
    Tensor4<T> out({a.n(), a.c() + b.c(), a.h(), a.w()});
    const std::size_t p = a.shape().plane();
    for (std::size_t n = 0; n < a.n(); ++n) {
        std::copy_n(a.plane(n, 0), a.c() * p, out.plane(n, 0));
        std::copy_n(b.plane(n, 0), b.c() * p, out.plane(n, a.c()));
    }
    return out;
}

template <typename T>
Tensor4<T> slice_channels(const Tensor4<T>& x, std::size_t begin, std::size_t count) {
    if (count == 0 || begin + count > x.c()) {
        throw ShapeError("slice_channels: range out of bounds for " + x.shape().str());
    }
    Tensor4<T> out({x.n(), count, x.h(), x.w()});
    const std::size_t p = x.shape().plane();
    for (std::size_t n = 0; n < x.n(); ++n) std::copy_n(x.plane(n, begin), count * p, out.plane(n, 0));
    return out;
}

template <typename T>
Tensor4<T> slice_batch(const Tensor4<T>& x, std::size_t begin, std::size_t count) {
    if (count == 0 || begin + count > x.n()) {
        throw ShapeError("slice_batch: range out of bounds for " + x.shape().str());
    }
    Tensor4<T> out({count, x.c(), x.h(), x.w()});
    std::copy_n(x.plane(begin, 0), out.size(), out.data());
    return out;
}

template <typename T>
Tensor4<T> concat_batch(const std::vector<Tensor4<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_batch: no inputs");
    Shape4 s = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.c() != s.c || p.h() != s.h || p.w() != s.w) {
            throw ShapeError("concat_batch: incompatible " + s.str() + " and " + p.shape().str());
        }
        total += p.n();
    }
    Tensor4<T> out({total, s.c, s.h, s.w});
    T* dst = out.data();
    for (const auto& p : parts) dst = std::copy_n(p.data(), p.size(), dst);
    return out;
}

// ---------------------------------------------------------------------------
// 1x1 channel mixing. Matrices are carried as (1, 1, rows, cols) tensors.

template <typename T>
bool is_matrix(const Tensor4<T>& m) {
    return m.n() == 1 && m.c() == 1;
}

template <typename T>
Tensor4<T> make_matrix(std::size_t rows, std::size_t cols, T value = T(0)) {
    return Tensor4<T>({1, 1, rows, cols}, value);
}

template <typename T>
Tensor4<T> identity_matrix(std::size_t n) {
    auto m = make_matrix<T>(n, n);
    for (std::size_t i = 0; i < n; ++i) m(0, 0, i, i) = T(1);
    return m;
}

template <typename T>
Tensor4<T> mix_channels(const Tensor4<T>& x, const Tensor4<T>& weight) {
    if (!is_matrix(weight)) throw ShapeError("mix_channels: weight must be a (1,1,c_out,c_in) matrix");
    const std::size_t c_out = weight.h(), c_in = weight.w();
    if (x.c() != c_in) {
        throw ShapeError("mix_channels: input has " + std::to_string(x.c()) + " channels, weight expects " +
                         std::to_string(c_in));
    }
    const std::size_t p = x.shape().plane();
    Tensor4<T> out({x.n(), c_out, x.h(), x.w()});
    for (std::size_t n = 0; n < x.n(); ++n) {
        for (std::size_t o = 0; o < c_out; ++o) {
            T* dst = out.plane(n, o);
            for (std::size_t k = 0; k < c_in; ++k) {
                const T wv = weight[o * c_in + k];
                const T* src = x.plane(n, k);
#pragma omp simd
                for (std::size_t q = 0; q < p; ++q) dst[q] += wv * src[q];
            }
        }
    }
    return out;
}

template <typename T>
struct MixGradients {
    Tensor4<T> input;
    Tensor4<T> weight;
};

template <typename T>
MixGradients<T> mix_channels_backward(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>& grad_out) {
    const std::size_t c_out = weight.h(), c_in = weight.w();
    if (grad_out.c() != c_out || grad_out.n() != x.n() || grad_out.h() != x.h() || grad_out.w() != x.w()) {
        throw ShapeError("mix_channels_backward: gradient shape " + grad_out.shape().str() + " incompatible");
    }
    Tensor4<T> transposed = make_matrix<T>(c_in, c_out);
    for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t k = 0; k < c_in; ++k) transposed[k * c_out + o] = weight[o * c_in + k];
    MixGradients<T> g{mix_channels(grad_out, transposed), make_matrix<T>(c_out, c_in)};
    const std::size_t p = x.shape().plane();
    for (std::size_t n = 0; n < x.n(); ++n) {
        for (std::size_t o = 0; o < c_out; ++o) {
            const T* go = grad_out.plane(n, o);
            for (std::size_t k = 0; k < c_in; ++k) {
                const T* xi = x.plane(n, k);
                T acc = 0;
#pragma omp simd reduction(+ : acc)
                for (std::size_t q = 0; q < p; ++q) acc += go[q] * xi[q];
                g.weight[o * c_in + k] += acc;
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Boundary handling: half-sample symmetric extension (d c b a | a b c d | d c b a).
// The extension is even and 2n-periodic, so a normalized symmetric kernel keeps
// both constants and the plane mean unchanged.

inline std::size_t symmetric_index(std::ptrdiff_t idx, std::size_t n) {
    const auto period = static_cast<std::ptrdiff_t>(2 * n);
    std::ptrdiff_t m = idx % period;
    if (m < 0) m += period;
    return m < static_cast<std::ptrdiff_t>(n) ? static_cast<std::size_t>(m)
                                               : static_cast<std::size_t>(period - 1 - m);
}

namespace detail {

inline constexpr std::array<double, 5> kBinomial5{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

// 1-D 5-tap pass over `count` lines of length `len`, with element stride
// `stride` along the line and `line_stride` between lines.
template <typename T>
void binomial_pass(const T* src, T* dst, std::size_t len, std::size_t count, std::size_t stride,
                   std::size_t line_stride) {
    std::vector<std::array<std::size_t, 5>> taps(len);
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t t = 0; t < 5; ++t)
            taps[i][t] = symmetric_index(static_cast<std::ptrdiff_t>(i + t) - 2, len);
    for (std::size_t line = 0; line < count; ++line) {
        const T* s = src + line * line_stride;
        T* d = dst + line * line_stride;
        for (std::size_t i = 0; i < len; ++i) {
            T acc = 0;
            for (std::size_t t = 0; t < 5; ++t) acc += static_cast<T>(kBinomial5[t]) * s[taps[i][t] * stride];
            d[i * stride] = acc;
        }
    }
}

template <typename T>
void binomial_pass_adjoint(const T* src, T* dst, std::size_t len, std::size_t count, std::size_t stride,
                           std::size_t line_stride) {
    for (std::size_t line = 0; line < count; ++line) {
        const T* s = src + line * line_stride;
        T* d = dst + line * line_stride;
        for (std::size_t i = 0; i < len; ++i) d[i * stride] = 0;
        for (std::size_t i = 0; i < len; ++i) {
            const T g = s[i * stride];
            for (std::size_t t = 0; t < 5; ++t) {
                d[symmetric_index(static_cast<std::ptrdiff_t>(i + t) - 2, len) * stride] +=
                    static_cast<T>(kBinomial5[t]) * g;
            }
        }
    }
}

}  // namespace detail

/// Depthwise 5x5 binomial blur, kernel outer([1,4,6,4,1]/16, [1,4,6,4,1]/16).
template <typename T>
Tensor4<T> gaussian_blur5(const Tensor4<T>& x) {
    Tensor4<T> tmp(x.shape()), out(x.shape());
    const std::size_t h = x.h(), w = x.w(), planes = x.n() * x.c();
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x.data() + p * h * w;
        T* mid = tmp.data() + p * h * w;
        T* dst = out.data() + p * h * w;
        detail::binomial_pass(src, mid, w, h, 1, w);
        detail::binomial_pass(mid, dst, h, w, w, 1);
    }
    return out;
}

/// Transpose of gaussian_blur5 as a linear map.
template <typename T>
Tensor4<T> gaussian_blur5_adjoint(const Tensor4<T>& g) {
    Tensor4<T> tmp(g.shape()), out(g.shape());
    const std::size_t h = g.h(), w = g.w(), planes = g.n() * g.c();
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = g.data() + p * h * w;
        T* mid = tmp.data() + p * h * w;
        T* dst = out.data() + p * h * w;
        detail::binomial_pass_adjoint(src, mid, h, w, w, 1);
        detail::binomial_pass_adjoint(mid, dst, w, h, 1, w);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resizing

template <typename T>
Tensor4<T> resize_nearest(const Tensor4<T>& x, std::size_t h_out, std::size_t w_out) {
    if (h_out == 0 || w_out == 0) throw ShapeError("resize_nearest: target dims must be >= 1");
    Tensor4<T> out({x.n(), x.c(), h_out, w_out});
    std::vector<std::size_t> col(w_out);
    for (std::size_t j = 0; j < w_out; ++j) col[j] = j * x.w() / w_out;
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
            const T* src = x.plane(n, c);
            T* dst = out.plane(n, c);
            for (std::size_t i = 0; i < h_out; ++i) {
                const T* row = src + (i * x.h() / h_out) * x.w();
                for (std::size_t j = 0; j < w_out; ++j) dst[i * w_out + j] = row[col[j]];
            }
        }
    return out;
}

template <typename T>
Tensor4<T> resize_nearest_adjoint(const Tensor4<T>& g, std::size_t h_in, std::size_t w_in) {
    Tensor4<T> out({g.n(), g.c(), h_in, w_in});
    const std::size_t h_out = g.h(), w_out = g.w();
    for (std::size_t n = 0; n < g.n(); ++n)
        for (std::size_t c = 0; c < g.c(); ++c) {
            const T* src = g.plane(n, c);
            T* dst = out.plane(n, c);
            for (std::size_t i = 0; i < h_out; ++i) {
                T* row = dst + (i * h_in / h_out) * w_in;
                for (std::size_t j = 0; j < w_out; ++j) row[j * w_in / w_out] += src[i * w_out + j];
            }
        }
    return out;
}

namespace detail {

struct LinearTaps {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

// Half-pixel-centred source coordinates (align_corners = false).
inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
    LinearTaps taps;
    taps.lo.resize(out);
    taps.hi.resize(out);
    taps.frac.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        auto lo = static_cast<std::size_t>(src);
        if (lo > in - 1) lo = in - 1;
        taps.lo[i] = lo;
        taps.hi[i] = std::min(lo + 1, in - 1);
        taps.frac[i] = src - static_cast<double>(lo);
    }
    return taps;
}

}  // namespace detail

template <typename T>
Tensor4<T> resize_bilinear(const Tensor4<T>& x, std::size_t h_out, std::size_t w_out) {
    if (h_out == 0 || w_out == 0) throw ShapeError("resize_bilinear: target dims must be >= 1");
    const auto ty = detail::linear_taps(x.h(), h_out);
    const auto tx = detail::linear_taps(x.w(), w_out);
    Tensor4<T> out({x.n(), x.c(), h_out, w_out});
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
            const T* src = x.plane(n, c);
            T* dst = out.plane(n, c);
            for (std::size_t i = 0; i < h_out; ++i) {
                const T fy = static_cast<T>(ty.frac[i]);
                const T* r0 = src + ty.lo[i] * x.w();
                const T* r1 = src + ty.hi[i] * x.w();
                for (std::size_t j = 0; j < w_out; ++j) {
                    const T fx = static_cast<T>(tx.frac[j]);
                    const T top = (1 - fx) * r0[tx.lo[j]] + fx * r0[tx.hi[j]];
                    const T bot = (1 - fx) * r1[tx.lo[j]] + fx * r1[tx.hi[j]];
                    dst[i * w_out + j] = (1 - fy) * top + fy * bot;
                }
            }
        }
    return out;
}

template <typename T>
Tensor4<T> resize_bilinear_adjoint(const Tensor4<T>& g, std::size_t h_in, std::size_t w_in) {
    const std::size_t h_out = g.h(), w_out = g.w();
    const auto ty = detail::linear_taps(h_in, h_out);
    const auto tx = detail::linear_taps(w_in, w_out);
    Tensor4<T> out({g.n(), g.c(), h_in, w_in});
    for (std::size_t n = 0; n < g.n(); ++n)
        for (std::size_t c = 0; c < g.c(); ++c) {
            const T* src = g.plane(n, c);
            T* dst = out.plane(n, c);
            for (std::size_t i = 0; i < h_out; ++i) {
                const T fy = static_cast<T>(ty.frac[i]);
                T* r0 = dst + ty.lo[i] * w_in;
                T* r1 = dst + ty.hi[i] * w_in;
                for (std::size_t j = 0; j < w_out; ++j) {
                    const T fx = static_cast<T>(tx.frac[j]);
                    const T v = src[i * w_out + j];
                    const T top = (1 - fy) * v, bot = fy * v;
                    r0[tx.lo[j]] += (1 - fx) * top;
                    r0[tx.hi[j]] += fx * top;
                    r1[tx.lo[j]] += (1 - fx) * bot;
                    r1[tx.hi[j]] += fx * bot;
                }
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, symmetric padding. weight (c_out, c_in, 3, 3),
// bias (1, c_out, 1, 1).

namespace detail {

template <typename T>
void pad_plane(const T* src, std::size_t h, std::size_t w, T* dst) {
    const std::size_t pw = w + 2;
    for (std::size_t pi = 0; pi < h + 2; ++pi) {
        const T* row = src + symmetric_index(static_cast<std::ptrdiff_t>(pi) - 1, h) * w;
        T* out = dst + pi * pw;
        out[0] = row[symmetric_index(-1, w)];
        std::copy_n(row, w, out + 1);
        out[w + 1] = row[symmetric_index(static_cast<std::ptrdiff_t>(w), w)];
    }
}

template <typename T>
void fold_padded_plane(const T* padded, std::size_t h, std::size_t w, T* dst) {
    const std::size_t pw = w + 2;
    for (std::size_t pi = 0; pi < h + 2; ++pi) {
        T* row = dst + symmetric_index(static_cast<std::ptrdiff_t>(pi) - 1, h) * w;
        const T* in = padded + pi * pw;
        for (std::size_t pj = 0; pj < pw; ++pj) {
            row[symmetric_index(static_cast<std::ptrdiff_t>(pj) - 1, w)] += in[pj];
        }
    }
}

}  // namespace detail

template <typename T>
void check_conv3x3(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>& bias) {
    if (weight.h() != 3 || weight.w() != 3 || weight.c() != x.c()) {
        throw ShapeError("conv3x3: weight " + weight.shape().str() + " incompatible with input " +
                         x.shape().str());
    }
    if (bias.n() != 1 || bias.c() != weight.n() || bias.h() != 1 || bias.w() != 1) {
        throw ShapeError("conv3x3: bias " + bias.shape().str() + " incompatible with weight");
    }
}

template <typename T>
Tensor4<T> conv3x3(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>& bias) {
    check_conv3x3(x, weight, bias);
    const std::size_t c_in = x.c(), c_out = weight.n(), h = x.h(), w = x.w();
    const std::size_t pw = w + 2, pp = (h + 2) * pw;
    Tensor4<T> out({x.n(), c_out, h, w});
    std::vector<T> padded(c_in * pp);
    for (std::size_t n = 0; n < x.n(); ++n) {
        for (std::size_t k = 0; k < c_in; ++k) detail::pad_plane(x.plane(n, k), h, w, padded.data() + k * pp);
        for (std::size_t o = 0; o < c_out; ++o) {
            T* dst = out.plane(n, o);
            std::fill_n(dst, h * w, bias[o]);
            for (std::size_t k = 0; k < c_in; ++k) {
                const T* wk = weight.data() + (o * c_in + k) * 9;
                const T* pk = padded.data() + k * pp;
                for (std::size_t ky = 0; ky < 3; ++ky)
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const T wv = wk[ky * 3 + kx];
                        for (std::size_t i = 0; i < h; ++i) {
                            const T* src = pk + (i + ky) * pw + kx;
                            T* d = dst + i * w;
#pragma omp simd
                            for (std::size_t j = 0; j < w; ++j) d[j] += wv * src[j];
                        }
                    }
            }
        }
    }
    return out;
}

template <typename T>
struct ConvGradients {
    Tensor4<T> input;
    Tensor4<T> weight;
    Tensor4<T> bias;
};

template <typename T>
ConvGradients<T> conv3x3_backward(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>& grad_out) {
    const std::size_t c_in = x.c(), c_out = weight.n(), h = x.h(), w = x.w();
    if (grad_out.shape() != Shape4{x.n(), c_out, h, w}) {
        throw ShapeError("conv3x3_backward: gradient shape " + grad_out.shape().str() + " incompatible");
    }
    const std::size_t pw = w + 2, pp = (h + 2) * pw;
    ConvGradients<T> g{Tensor4<T>(x.shape()), Tensor4<T>(weight.shape()), Tensor4<T>({1, c_out, 1, 1})};
    std::vector<T> padded(c_in * pp), grad_padded(c_in * pp);
    for (std::size_t n = 0; n < x.n(); ++n) {
        for (std::size_t k = 0; k < c_in; ++k) detail::pad_plane(x.plane(n, k), h, w, padded.data() + k * pp);
        std::fill(grad_padded.begin(), grad_padded.end(), T(0));
        for (std::size_t o = 0; o < c_out; ++o) {
            const T* go = grad_out.plane(n, o);
            T bsum = 0;
#pragma omp simd reduction(+ : bsum)
            for (std::size_t q = 0; q < h * w; ++q) bsum += go[q];
            g.bias[o] += bsum;
            for (std::size_t k = 0; k < c_in; ++k) {
                const T* wk = weight.data() + (o * c_in + k) * 9;
                T* gwk = g.weight.data() + (o * c_in + k) * 9;
                const T* pk = padded.data() + k * pp;
                T* gpk = grad_padded.data() + k * pp;
                for (std::size_t ky = 0; ky < 3; ++ky)
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const T wv = wk[ky * 3 + kx];
                        T acc = 0;
                        for (std::size_t i = 0; i < h; ++i) {
                            const T* src = pk + (i + ky) * pw + kx;
                            T* gsrc = gpk + (i + ky) * pw + kx;
                            const T* gr = go + i * w;
#pragma omp simd reduction(+ : acc)
                            for (std::size_t j = 0; j < w; ++j) {
                                acc += gr[j] * src[j];
                                gsrc[j] += wv * gr[j];
                            }
                        }
                        gwk[ky * 3 + kx] += acc;
                    }
            }
        }
        for (std::size_t k = 0; k < c_in; ++k)
            detail::fold_padded_plane(grad_padded.data() + k * pp, h, w, g.input.plane(n, k));
    }
    return g;
}

// ---------------------------------------------------------------------------
// 2-D DFT. Unnormalized; computed separably (rows then columns) by direct
// summation with tabulated twiddles.

template <typename T>
struct Complex2D {
    Tensor4<T> re;
    Tensor4<T> im;
};

namespace detail {

struct Twiddles {
    std::vector<double> cos, sin;
    explicit Twiddles(std::size_t n) : cos(n), sin(n) {
        for (std::size_t k = 0; k < n; ++k) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
            cos[k] = std::cos(a);
            sin[k] = std::sin(a);
        }
    }
};

// Transforms `count` complex lines of length `len` in place (via scratch),
// kernel exp(sign * 2*pi*i*u*k/len).
template <typename T>
void dft_lines(T* re, T* im, std::size_t len, std::size_t count, std::size_t stride, std::size_t line_stride,
               int sign, const Twiddles& tw) {
    std::vector<T> cr(len), ci(len), sr(len), si(len);
    for (std::size_t k = 0; k < len; ++k) {
        cr[k] = static_cast<T>(tw.cos[k]);
        ci[k] = static_cast<T>(sign * tw.sin[k]);
    }
    for (std::size_t line = 0; line < count; ++line) {
        T* lr = re + line * line_stride;
        T* li = im + line * line_stride;
        for (std::size_t u = 0; u < len; ++u) {
            T ar = 0, ai = 0;
            std::size_t idx = 0;
            for (std::size_t k = 0; k < len; ++k) {
                const T xr = lr[k * stride], xi = li[k * stride];
                ar += xr * cr[idx] - xi * ci[idx];
                ai += xr * ci[idx] + xi * cr[idx];
                idx += u;
                if (idx >= len) idx -= len;
            }
            sr[u] = ar;
            si[u] = ai;
        }
        for (std::size_t u = 0; u < len; ++u) {
            lr[u * stride] = sr[u];
            li[u * stride] = si[u];
        }
    }
}

}  // namespace detail

/// Complex 2-D DFT of every (n, c) plane with kernel exp(sign*2*pi*i*(ui/h + vj/w)).
/// sign = -1 is the forward transform; sign = +1 the unnormalized inverse.
template <typename T>
Complex2D<T> dft2_complex(const Tensor4<T>& re, const Tensor4<T>& im, int sign) {
    require_same_shape(re, im, "dft2_complex");
    Complex2D<T> out{re, im};
    const std::size_t h = re.h(), w = re.w();
    const detail::Twiddles tw_row(w), tw_col(h);
    for (std::size_t p = 0; p < re.n() * re.c(); ++p) {
        T* pr = out.re.data() + p * h * w;
        T* pi = out.im.data() + p * h * w;
        detail::dft_lines(pr, pi, w, h, 1, w, sign, tw_row);
        detail::dft_lines(pr, pi, h, w, w, 1, sign, tw_col);
    }
    return out;
}

template <typename T>
Complex2D<T> dft2(const Tensor4<T>& x) {
    return dft2_complex(x, Tensor4<T>(x.shape()), -1);
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { Sum, Mean, L2Norm, L1Norm };

template <typename T>
Tensor4<T> reduce(const Tensor4<T>& x, ReduceOp op, std::span<const int> dims) {
    std::array<bool, 4> reduced{};
    for (int d : dims) {
        if (d < 0 || d > 3) throw ShapeError("reduce: invalid dim index " + std::to_string(d));
        reduced[static_cast<std::size_t>(d)] = true;
    }
    const std::array<std::size_t, 4> in{x.n(), x.c(), x.h(), x.w()};
    std::array<std::size_t, 4> out_dims{};
    std::size_t count = 1;
    for (std::size_t a = 0; a < 4; ++a) {
        out_dims[a] = reduced[a] ? 1 : in[a];
        if (reduced[a]) count *= in[a];
    }
    const Shape4 os{out_dims[0], out_dims[1], out_dims[2], out_dims[3]};
    std::vector<double> acc(os.size(), 0.0);
    for (std::size_t n = 0; n < in[0]; ++n)
        for (std::size_t c = 0; c < in[1]; ++c)
            for (std::size_t i = 0; i < in[2]; ++i)
                for (std::size_t j = 0; j < in[3]; ++j) {
                    const std::size_t on = reduced[0] ? 0 : n, oc = reduced[1] ? 0 : c;
                    const std::size_t oi = reduced[2] ? 0 : i, oj = reduced[3] ? 0 : j;
                    const double v = x(n, c, i, j);
                    double& a = acc[((on * os.c + oc) * os.h + oi) * os.w + oj];
                    switch (op) {
                        case ReduceOp::Sum:
                        case ReduceOp::Mean: a += v; break;
                        case ReduceOp::L2Norm: a += v * v; break;
                        case ReduceOp::L1Norm: a += std::abs(v); break;
                    }
                }
    Tensor4<T> out(os);
    for (std::size_t k = 0; k < acc.size(); ++k) {
        double v = acc[k];
        if (op == ReduceOp::Mean) v /= static_cast<double>(count);
        if (op == ReduceOp::L2Norm) v = std::sqrt(v);
        out[k] = static_cast<T>(v);
    }
    return out;
}

template <typename T>
Tensor4<T> reduce(const Tensor4<T>& x, ReduceOp op, std::initializer_list<int> dims) {
    return reduce(x, op, std::span<const int>(dims.begin(), dims.size()));
}

}  // namespace pyramidflow
