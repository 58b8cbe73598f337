#pragma once

// Invertible Laplacian-style pyramid. decompose() stores band-pass levels
// x_d = D^d(x) - U(D^{d+1}(x)) for d < L-1 and the low-pass residual
// D^{L-1}(x) as the last level, so compose() = sum_d U^d(x_d) telescopes back
// to x exactly.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "pyramidflow/tensor.hpp"

namespace pyramidflow {

template <typename T>
class PyramidStack {
public:
    PyramidStack() = default;
    explicit PyramidStack(std::vector<Tensor4<T>> levels) : levels_(std::move(levels)) { validate(); }

    std::size_t size() const { return levels_.size(); }
    bool empty() const { return levels_.empty(); }
    Tensor4<T>& operator[](std::size_t d) { return levels_[d]; }
    const Tensor4<T>& operator[](std::size_t d) const { return levels_[d]; }
    std::vector<Tensor4<T>>& levels() { return levels_; }
    const std::vector<Tensor4<T>>& levels() const { return levels_; }

    auto begin() { return levels_.begin(); }
    auto end() { return levels_.end(); }
    auto begin() const { return levels_.begin(); }
    auto end() const { return levels_.end(); }

    std::size_t bytes() const {
        std::size_t b = 0;
        for (const auto& l : levels_) b += l.bytes();
        return b;
    }

    /// Checks the dyadic shape contract: shared (n, c), level d+1 is exactly half of level d.
    void validate() const {
        for (std::size_t d = 1; d < levels_.size(); ++d) {
            const auto& a = levels_[d - 1].shape();
            const auto& b = levels_[d].shape();
            if (a.n != b.n || a.c != b.c || a.h != 2 * b.h || a.w != 2 * b.w) {
                throw ShapeError("pyramid level " + std::to_string(d) + " shape " + b.str() +
                                 " inconsistent with level " + std::to_string(d - 1) + " shape " + a.str());
            }
        }
    }

    PyramidStack& operator+=(const PyramidStack& o) {
        require_compatible(o);
        for (std::size_t d = 0; d < levels_.size(); ++d) levels_[d] += o.levels_[d];
        return *this;
    }
    PyramidStack& operator-=(const PyramidStack& o) {
        require_compatible(o);
        for (std::size_t d = 0; d < levels_.size(); ++d) levels_[d] -= o.levels_[d];
        return *this;
    }
    PyramidStack& operator*=(T s) {
        for (auto& l : levels_) l *= s;
        return *this;
    }

    void require_compatible(const PyramidStack& o) const {
        if (o.size() != size()) throw ShapeError("pyramid level counts differ");
        for (std::size_t d = 0; d < size(); ++d) require_same_shape(levels_[d], o.levels_[d], "pyramid level");
    }

private:
    std::vector<Tensor4<T>> levels_;
};

template <typename T>
PyramidStack<T> operator+(PyramidStack<T> a, const PyramidStack<T>& b) {
    a += b;
    return a;
}

template <typename T>
PyramidStack<T> operator-(PyramidStack<T> a, const PyramidStack<T>& b) {
    a -= b;
    return a;
}

template <typename T>
PyramidStack<T> zeros_like(const PyramidStack<T>& s) {
    std::vector<Tensor4<T>> levels;
    levels.reserve(s.size());
    for (const auto& l : s) levels.emplace_back(l.shape());
    return PyramidStack<T>(std::move(levels));
}

template <typename T>
double max_abs_diff(const PyramidStack<T>& a, const PyramidStack<T>& b) {
    a.require_compatible(b);
    double m = 0;
    for (std::size_t d = 0; d < a.size(); ++d) m = std::max(m, max_abs_diff(a[d], b[d]));
    return m;
}

template <typename T>
PyramidStack<T> slice_batch(const PyramidStack<T>& s, std::size_t begin, std::size_t count) {
    std::vector<Tensor4<T>> levels;
    for (const auto& l : s) levels.push_back(slice_batch(l, begin, count));
    return PyramidStack<T>(std::move(levels));
}

template <typename T>
PyramidStack<T> concat_batch(const std::vector<PyramidStack<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_batch: no stacks");
    std::vector<Tensor4<T>> levels;
    for (std::size_t d = 0; d < parts.front().size(); ++d) {
        std::vector<Tensor4<T>> slice;
        for (const auto& p : parts) slice.push_back(p[d]);
        levels.push_back(concat_batch(slice));
    }
    return PyramidStack<T>(std::move(levels));
}

/// Shape of level d for an (h, w) base.
inline Shape4 level_shape(Shape4 base, std::size_t d) {
    return {base.n, base.c, base.h >> d, base.w >> d};
}

// ---------------------------------------------------------------------------
// Operators D and U with their adjoints.

template <typename T>
Tensor4<T> downsample(const Tensor4<T>& x) {
    if (x.h() % 2 != 0 || x.w() % 2 != 0) {
        throw ShapeError("downsample: spatial dims must be even, got " + x.shape().str());
    }
    return resize_nearest(gaussian_blur5(x), x.h() / 2, x.w() / 2);
}

template <typename T>
Tensor4<T> upsample(const Tensor4<T>& x) {
    return gaussian_blur5(resize_nearest(x, 2 * x.h(), 2 * x.w()));
}

template <typename T>
Tensor4<T> downsample_adjoint(const Tensor4<T>& g) {
    return gaussian_blur5_adjoint(resize_nearest_adjoint(g, 2 * g.h(), 2 * g.w()));
}

template <typename T>
Tensor4<T> upsample_adjoint(const Tensor4<T>& g) {
    return resize_nearest_adjoint(gaussian_blur5_adjoint(g), g.h() / 2, g.w() / 2);
}

inline void check_divisible(const Shape4& s, std::size_t levels) {
    if (levels == 0) throw ShapeError("pyramid level count must be >= 1");
    const std::size_t f = std::size_t{1} << (levels - 1);
    if (s.h % f != 0 || s.w % f != 0) {
        throw ShapeError("spatial dims " + s.str() + " not divisible by 2^(L-1) = " + std::to_string(f));
    }
}

template <typename T>
PyramidStack<T> decompose(const Tensor4<T>& x, std::size_t levels) {
    check_divisible(x.shape(), levels);
    std::vector<Tensor4<T>> out;
    out.reserve(levels);
    Tensor4<T> current = x;
    for (std::size_t d = 0; d + 1 < levels; ++d) {
        Tensor4<T> coarser = downsample(current);
        current -= upsample(coarser);
        out.push_back(std::move(current));
        current = std::move(coarser);
    }
    out.push_back(std::move(current));
    return PyramidStack<T>(std::move(out));
}

template <typename T>
Tensor4<T> compose(const PyramidStack<T>& stack) {
    if (stack.empty()) throw ShapeError("compose: empty stack");
    stack.validate();
    Tensor4<T> acc = stack[stack.size() - 1];
    for (std::size_t d = stack.size() - 1; d-- > 0;) {
        acc = upsample(acc);
        acc += stack[d];
    }
    return acc;
}

/// Transpose of decompose: maps per-level gradients back to the input.
template <typename T>
Tensor4<T> decompose_adjoint(const PyramidStack<T>& grads) {
    if (grads.empty()) throw ShapeError("decompose_adjoint: empty stack");
    grads.validate();
    // level_d = a_d - U(a_{d+1}), a_{d+1} = D(a_d), base = a_{L-1}.
    Tensor4<T> acc = grads[grads.size() - 1];
    for (std::size_t d = grads.size() - 1; d-- > 0;) {
        acc -= upsample_adjoint(grads[d]);
        acc = downsample_adjoint(acc);
        acc += grads[d];
    }
    return acc;
}

/// Transpose of compose: a gradient at full resolution spread onto every level.
template <typename T>
PyramidStack<T> compose_adjoint(const Tensor4<T>& g, std::size_t levels) {
    check_divisible(g.shape(), levels);
    std::vector<Tensor4<T>> out;
    out.reserve(levels);
    out.push_back(g);
    for (std::size_t d = 1; d < levels; ++d) out.push_back(upsample_adjoint(out.back()));
    return PyramidStack<T>(std::move(out));
}

}  // namespace pyramidflow
