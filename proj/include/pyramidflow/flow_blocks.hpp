#pragma once

// Invertible building blocks: volume normalization, the clamped affine
// parameter network, the PLU-parameterized invertible 1x1 convolution and the
// dual pyramid coupling block that ties them together.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pyramidflow/gradients.hpp"
#include "pyramidflow/pyramid.hpp"
#include "pyramidflow/tensor.hpp"

namespace pyramidflow {

enum class VnAxis { Channel, Spatial, None };
enum class Mode { Train, Eval };

inline constexpr double kAtanScale = 0.636;  // ~2/pi
inline constexpr double kDefaultClamp = 2.0;
inline constexpr double kVnMomentum = 0.1;

inline const char* to_string(VnAxis axis) {
    switch (axis) {
        case VnAxis::Channel: return "channel";
        case VnAxis::Spatial: return "spatial";
        case VnAxis::None: return "none";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Volume normalization

/// Zero-mean normalization along channels (CVN) or spatial positions (SVN).
/// Train mode subtracts the per-sample mean and folds the batch-averaged mean
/// into the running estimate; Eval mode subtracts the running estimate.
template <typename T>
class VolumeNorm {
public:
    VolumeNorm() = default;

    VolumeNorm(VnAxis axis, Shape4 feature_shape, T momentum = static_cast<T>(kVnMomentum))
        : axis_(axis), momentum_(momentum) {
        if (axis_ != VnAxis::None) running_mean_ = Tensor4<T>(stat_shape(axis_, feature_shape));
    }

    static Shape4 stat_shape(VnAxis axis, Shape4 feature) {
        return axis == VnAxis::Channel ? Shape4{1, 1, feature.h, feature.w} : Shape4{1, feature.c, 1, 1};
    }

    VnAxis axis() const { return axis_; }
    T momentum() const { return momentum_; }
    Tensor4<T>& running_mean() { return running_mean_; }
    const Tensor4<T>& running_mean() const { return running_mean_; }

    /// Normalized output without touching the running mean. In Train mode the
    /// batch-averaged statistic is written to `batch_mean` when requested.
    Tensor4<T> apply(const Tensor4<T>& x, Mode mode, Tensor4<T>* batch_mean = nullptr) const {
        if (axis_ == VnAxis::None) return x;
        check_compatible(x);
        if (mode == Mode::Eval) return subtract_broadcast(x, running_mean_);
        Tensor4<T> mean = reduce(x, ReduceOp::Mean, axis_dims());
        if (batch_mean) *batch_mean = reduce(mean, ReduceOp::Mean, {0});
        return subtract_broadcast(x, mean);
    }

    void update_running(const Tensor4<T>& batch_mean) {
        require_same_shape(running_mean_, batch_mean, "volume norm running update");
        for (std::size_t k = 0; k < running_mean_.size(); ++k) {
            running_mean_[k] = (1 - momentum_) * running_mean_[k] + momentum_ * batch_mean[k];
        }
    }

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode, bool update_running_mean = true) {
        const bool update = update_running_mean && mode == Mode::Train && axis_ != VnAxis::None;
        Tensor4<T> batch_mean;
        Tensor4<T> y = apply(x, mode, update ? &batch_mean : nullptr);
        if (update) update_running(batch_mean);
        return y;
    }

    /// Gradient of forward(); the train-mode map is an orthogonal projection.
    Tensor4<T> backward(const Tensor4<T>& grad, Mode mode) const {
        if (axis_ == VnAxis::None || mode == Mode::Eval) return grad;
        return subtract_broadcast(grad, reduce(grad, ReduceOp::Mean, axis_dims()));
    }

private:
    std::span<const int> axis_dims() const {
        static constexpr int channel[] = {1};
        static constexpr int spatial[] = {2, 3};
        if (axis_ == VnAxis::Channel) return channel;
        return spatial;
    }

    void check_compatible(const Tensor4<T>& x) const {
        const Shape4 want = stat_shape(axis_, x.shape());
        if (running_mean_.shape() != want) {
            throw ShapeError(std::string("volume norm (") + to_string(axis_) + "): input " + x.shape().str() +
                             " incompatible with running mean " + running_mean_.shape().str());
        }
    }

    // x - m where m has unit extent along the reduced axes (batch may be 1 or n).
    static Tensor4<T> subtract_broadcast(const Tensor4<T>& x, const Tensor4<T>& m) {
        Tensor4<T> y(x.shape());
        const auto& ms = m.shape();
        for (std::size_t n = 0; n < x.n(); ++n)
            for (std::size_t c = 0; c < x.c(); ++c)
                for (std::size_t i = 0; i < x.h(); ++i)
                    for (std::size_t j = 0; j < x.w(); ++j) {
                        const T mv = m(ms.n == 1 ? 0 : n, ms.c == 1 ? 0 : c, ms.h == 1 ? 0 : i, ms.w == 1 ? 0 : j);
                        y(n, c, i, j) = x(n, c, i, j) - mv;
                    }
        return y;
    }

    VnAxis axis_ = VnAxis::None;
    T momentum_ = static_cast<T>(kVnMomentum);
    Tensor4<T> running_mean_;
};

// ---------------------------------------------------------------------------
// Affine coupling primitives

template <typename T>
Tensor4<T> affine_forward(const Tensor4<T>& x1, const Tensor4<T>& s, const Tensor4<T>& t) {
    require_same_shape(x1, s, "affine_forward");
    require_same_shape(x1, t, "affine_forward");
    Tensor4<T> y(x1.shape());
    for (std::size_t k = 0; k < y.size(); ++k) {
        if (!std::isfinite(s[k])) throw NumericError("affine_forward: non-finite scale");
        y[k] = std::exp(s[k]) * x1[k] + t[k];
    }
    return y;
}

template <typename T>
Tensor4<T> affine_inverse(const Tensor4<T>& y1, const Tensor4<T>& s, const Tensor4<T>& t) {
    require_same_shape(y1, s, "affine_inverse");
    require_same_shape(y1, t, "affine_inverse");
    Tensor4<T> x(y1.shape());
    for (std::size_t k = 0; k < x.size(); ++k) {
        if (!std::isfinite(s[k])) throw NumericError("affine_inverse: non-finite scale");
        x[k] = std::exp(-s[k]) * (y1[k] - t[k]);
    }
    return x;
}

template <typename T>
double affine_logdet(const Tensor4<T>& s) {
    return sum_all(s);
}

/// clamp * 0.636 * atan(x / clamp): smooth bound |s| < clamp * 0.636 * pi / 2.
template <typename T>
T soft_clamp(T x, T clamp) {
    return clamp * static_cast<T>(kAtanScale) * std::atan(x / clamp);
}

template <typename T>
T soft_clamp_derivative(T x, T clamp) {
    const T r = x / clamp;
    return static_cast<T>(kAtanScale) / (1 + r * r);
}

// ---------------------------------------------------------------------------
// Affine parameter network: conv3x3 -> ReLU -> conv3x3 (zero-initialized),
// split into (s0, t), s = VN(soft_clamp(s0)).

template <typename T>
struct AffineParams {
    Tensor4<T> s;
    Tensor4<T> t;
};

template <typename T>
struct ParamNetCache {
    Tensor4<T> cond;
    Tensor4<T> hidden;  // pre-activation
    Tensor4<T> raw_s;   // s0 before clamping
};

template <typename T>
class AffineParamNet {
public:
    AffineParamNet() = default;

    /// conv1 weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); conv2 starts at zero.
    AffineParamNet(std::size_t cond_channels, std::size_t out_channels, VolumeNorm<T> vn, std::mt19937_64& rng,
                   T clamp = static_cast<T>(kDefaultClamp))
        : out_channels_(out_channels), clamp_(clamp), vn_(std::move(vn)) {
        const std::size_t hidden = 2 * out_channels;
        conv1_w_ = Tensor4<T>({hidden, cond_channels, 3, 3});
        conv1_b_ = Tensor4<T>({1, hidden, 1, 1});
        conv2_w_ = Tensor4<T>({2 * out_channels, hidden, 3, 3});
        conv2_b_ = Tensor4<T>({1, 2 * out_channels, 1, 1});
        const double bound = 1.0 / std::sqrt(static_cast<double>(cond_channels * 9));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : conv1_w_.values()) v = static_cast<T>(u(rng));
        for (auto& v : conv1_b_.values()) v = static_cast<T>(u(rng));
    }

    std::size_t out_channels() const { return out_channels_; }
    T clamp() const { return clamp_; }
    VolumeNorm<T>& vn() { return vn_; }
    const VolumeNorm<T>& vn() const { return vn_; }

    Tensor4<T>& conv1_w() { return conv1_w_; }
    Tensor4<T>& conv1_b() { return conv1_b_; }
    Tensor4<T>& conv2_w() { return conv2_w_; }
    Tensor4<T>& conv2_b() { return conv2_b_; }
    const Tensor4<T>& conv1_w() const { return conv1_w_; }
    const Tensor4<T>& conv1_b() const { return conv1_b_; }
    const Tensor4<T>& conv2_w() const { return conv2_w_; }
    const Tensor4<T>& conv2_b() const { return conv2_b_; }

    /// Computes (s, t) without updating running statistics.
    AffineParams<T> compute(const Tensor4<T>& cond, Mode mode, ParamNetCache<T>* cache = nullptr,
                            Tensor4<T>* batch_mean = nullptr) const {
        Tensor4<T> hidden = conv3x3(cond, conv1_w_, conv1_b_);
        Tensor4<T> out = conv3x3(relu(hidden), conv2_w_, conv2_b_);
        Tensor4<T> raw = slice_channels(out, 0, out_channels_);
        AffineParams<T> p{Tensor4<T>(raw.shape()), slice_channels(out, out_channels_, out_channels_)};
        for (std::size_t k = 0; k < raw.size(); ++k) p.s[k] = soft_clamp(raw[k], clamp_);
        p.s = vn_.apply(p.s, mode, batch_mean);
        if (cache) {
            cache->cond = cond;
            cache->hidden = std::move(hidden);
            cache->raw_s = std::move(raw);
        }
        return p;
    }

    AffineParams<T> forward(const Tensor4<T>& cond, Mode mode, bool update_running,
                            ParamNetCache<T>* cache = nullptr) {
        const bool update = update_running && mode == Mode::Train && vn_.axis() != VnAxis::None;
        Tensor4<T> batch_mean;
        auto p = compute(cond, mode, cache, update ? &batch_mean : nullptr);
        if (update) vn_.update_running(batch_mean);
        return p;
    }

    /// Accumulates parameter gradients into `grads` and returns d loss / d cond.
    Tensor4<T> backward(const ParamNetCache<T>& cache, const Tensor4<T>& grad_s, const Tensor4<T>& grad_t,
                        Mode mode, GradientSet<T>& grads, const std::string& prefix) const {
        Tensor4<T> g_raw = vn_.backward(grad_s, mode);
        for (std::size_t k = 0; k < g_raw.size(); ++k) g_raw[k] *= soft_clamp_derivative(cache.raw_s[k], clamp_);
        Tensor4<T> g_out = concat_channels(g_raw, grad_t);
        Tensor4<T> act = relu(cache.hidden);
        auto g2 = conv3x3_backward(act, conv2_w_, g_out);
        for (std::size_t k = 0; k < g2.input.size(); ++k) {
            if (cache.hidden[k] <= 0) g2.input[k] = 0;
        }
        auto g1 = conv3x3_backward(cache.cond, conv1_w_, g2.input);
        grads.accumulate(prefix + "conv1.w", g1.weight);
        grads.accumulate(prefix + "conv1.b", g1.bias);
        grads.accumulate(prefix + "conv2.w", g2.weight);
        grads.accumulate(prefix + "conv2.b", g2.bias);
        return std::move(g1.input);
    }

private:
    static Tensor4<T> relu(const Tensor4<T>& x) {
        Tensor4<T> y(x.shape());
        for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] > 0 ? x[k] : T(0);
        return y;
    }

    std::size_t out_channels_ = 0;
    T clamp_ = static_cast<T>(kDefaultClamp);
    VolumeNorm<T> vn_;
    Tensor4<T> conv1_w_, conv1_b_, conv2_w_, conv2_b_;
};

// ---------------------------------------------------------------------------
// Invertible 1x1 convolution, A = P * L * (U + diag(exp(s~))).
// L is stored as a full matrix whose strictly-lower part is the parameter
// (unit diagonal implied); likewise only the strictly-upper part of U counts.

template <typename T>
class InvConv1x1 {
public:
    InvConv1x1() = default;

    InvConv1x1(std::vector<std::size_t> perm, Tensor4<T> lower, Tensor4<T> upper, Tensor4<T> log_scale,
               bool volume_normalized)
        : perm_(std::move(perm)),
          lower_(std::move(lower)),
          upper_(std::move(upper)),
          log_scale_(std::move(log_scale)),
          volume_normalized_(volume_normalized) {
        const std::size_t c = perm_.size();
        if (c == 0 || lower_.shape() != Shape4{1, 1, c, c} || upper_.shape() != Shape4{1, 1, c, c} ||
            log_scale_.shape() != Shape4{1, c, 1, 1}) {
            throw ShapeError("InvConv1x1: inconsistent factor shapes");
        }
        std::vector<bool> seen(c, false);
        for (auto p : perm_) {
            if (p >= c || seen[p]) throw ShapeError("InvConv1x1: permutation is not a bijection");
            seen[p] = true;
        }
    }

    static InvConv1x1 identity(std::size_t c, bool volume_normalized = true) {
        std::vector<std::size_t> perm(c);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        return InvConv1x1(std::move(perm), make_matrix<T>(c, c), make_matrix<T>(c, c), Tensor4<T>({1, c, 1, 1}),
                          volume_normalized);
    }

    /// Random orthogonal matrix factored as P L U; column signs are flipped so
    /// that diag(U) > 0 and s = log diag(U) is real.
    static InvConv1x1 random_orthogonal(std::size_t c, std::mt19937_64& rng, bool volume_normalized = true) {
        std::normal_distribution<double> nd(0.0, 1.0);
        Eigen::MatrixXd g(c, c);
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j) g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = nd(rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
        Eigen::MatrixXd q = qr.householderQ();
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(q);
        const Eigen::MatrixXd packed = lu.matrixLU();
        for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(c); ++j) {
            if (packed(j, j) < 0) q.col(j) *= -1.0;
        }
        lu.compute(q);
        const Eigen::MatrixXd f = lu.matrixLU();
        // Eigen: Pe * Q = L U with Pe e_i = e_{indices(i)}, so row i of Q is row indices(i) of L U.
        const auto& indices = lu.permutationP().indices();
        std::vector<std::size_t> perm(c);
        for (std::size_t r = 0; r < c; ++r) perm[r] = static_cast<std::size_t>(indices(static_cast<Eigen::Index>(r)));
        auto lower = make_matrix<T>(c, c), upper = make_matrix<T>(c, c);
        Tensor4<T> s({1, c, 1, 1});
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const double v = f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                if (j < i) lower[i * c + j] = static_cast<T>(v);
                if (j > i) upper[i * c + j] = static_cast<T>(v);
                if (i == j) s[i] = static_cast<T>(std::log(v));
            }
        return InvConv1x1(std::move(perm), std::move(lower), std::move(upper), std::move(s), volume_normalized);
    }

    std::size_t channels() const { return perm_.size(); }
    bool volume_normalized() const { return volume_normalized_; }
    const std::vector<std::size_t>& permutation() const { return perm_; }
    Tensor4<T>& lower() { return lower_; }
    Tensor4<T>& upper() { return upper_; }
    Tensor4<T>& log_scale() { return log_scale_; }
    const Tensor4<T>& lower() const { return lower_; }
    const Tensor4<T>& upper() const { return upper_; }
    const Tensor4<T>& log_scale() const { return log_scale_; }

    /// P as a 0/1 matrix with (P v)_i = v_{perm[i]}.
    Tensor4<T> permutation_matrix() const {
        const std::size_t c = channels();
        auto p = make_matrix<T>(c, c);
        for (std::size_t i = 0; i < c; ++i) p[i * c + perm_[i]] = T(1);
        return p;
    }

    void set_permutation_matrix(const Tensor4<T>& p) {
        const std::size_t c = channels();
        if (p.shape() != Shape4{1, 1, c, c}) throw ShapeError("InvConv1x1: permutation matrix shape");
        std::vector<std::size_t> perm(c);
        std::vector<bool> seen(c, false);
        for (std::size_t i = 0; i < c; ++i) {
            std::size_t ones = 0;
            for (std::size_t j = 0; j < c; ++j) {
                const T v = p[i * c + j];
                if (v == T(1)) {
                    perm[i] = j;
                    ++ones;
                } else if (v != T(0)) {
                    ones = 2;
                }
            }
            if (ones != 1 || seen[perm[i]]) throw FormatError("InvConv1x1: not a permutation matrix");
            seen[perm[i]] = true;
        }
        perm_ = std::move(perm);
    }

    /// s~ = s - mean(s) when volume normalized, otherwise s.
    std::vector<double> effective_log_scale() const {
        std::vector<double> s(log_scale_.values().begin(), log_scale_.values().end());
        if (volume_normalized_) {
            const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
            for (auto& v : s) v -= mean;
        }
        return s;
    }

    Tensor4<T> weight() const {
        const std::size_t c = channels();
        const auto s = effective_log_scale();
        std::vector<double> b(c * c, 0.0);  // L * M
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                double acc = 0;
                for (std::size_t k = 0; k <= std::min(i, j); ++k) acc += lower_at(i, k) * upper_at(k, j, s);
                b[i * c + j] = acc;
            }
        auto a = make_matrix<T>(c, c);
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j) a[i * c + j] = static_cast<T>(b[perm_[i] * c + j]);
        return a;
    }

    Tensor4<T> forward(const Tensor4<T>& y) const { return mix_channels(y, weight()); }

    /// Solves P L M y = z by permutation and two triangular sweeps.
    Tensor4<T> inverse(const Tensor4<T>& z) const {
        const std::size_t c = channels();
        if (z.c() != c) throw ShapeError("InvConv1x1::inverse: channel mismatch");
        const auto s = effective_log_scale();
        const std::size_t p = z.shape().plane();
        Tensor4<T> v(z.shape());
        for (std::size_t n = 0; n < z.n(); ++n) {
            for (std::size_t i = 0; i < c; ++i) std::copy_n(z.plane(n, i), p, v.plane(n, perm_[i]));
            for (std::size_t i = 1; i < c; ++i) {
                T* vi = v.plane(n, i);
                for (std::size_t j = 0; j < i; ++j) {
                    const T l = lower_[i * c + j];
                    const T* vj = v.plane(n, j);
#pragma omp simd
                    for (std::size_t q = 0; q < p; ++q) vi[q] -= l * vj[q];
                }
            }
            for (std::size_t i = c; i-- > 0;) {
                T* vi = v.plane(n, i);
                for (std::size_t j = i + 1; j < c; ++j) {
                    const T u = upper_[i * c + j];
                    const T* yj = v.plane(n, j);
#pragma omp simd
                    for (std::size_t q = 0; q < p; ++q) vi[q] -= u * yj[q];
                }
                const T inv_diag = static_cast<T>(std::exp(-s[i]));
                for (std::size_t q = 0; q < p; ++q) vi[q] *= inv_diag;
            }
        }
        return v;
    }

    /// log|det| of the per-pixel map over an h x w plane (one sample).
    double logdet(std::size_t h, std::size_t w) const {
        const auto s = effective_log_scale();
        return std::accumulate(s.begin(), s.end(), 0.0) * static_cast<double>(h * w);
    }

    /// Returns d loss / d y and accumulates factor gradients.
    Tensor4<T> backward(const Tensor4<T>& y, const Tensor4<T>& grad_z, GradientSet<T>& grads,
                        const std::string& prefix) const {
        const std::size_t c = channels();
        const auto s = effective_log_scale();
        auto g = mix_channels_backward(y, weight(), grad_z);
        // A = P B, B = L M.
        std::vector<double> gb(c * c);
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[perm_[i] * c + j] = g.weight[i * c + j];
        auto g_lower = make_matrix<T>(c, c), g_upper = make_matrix<T>(c, c);
        Tensor4<T> g_s({1, c, 1, 1});
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                if (j < i) {  // dL = gB M^T
                    double acc = 0;
                    for (std::size_t k = j; k < c; ++k) acc += gb[i * c + k] * upper_at(j, k, s);
                    g_lower[i * c + j] = static_cast<T>(acc);
                } else {  // dM = L^T gB
                    double acc = 0;
                    for (std::size_t k = i; k < c; ++k) acc += lower_at(k, i) * gb[k * c + j];
                    if (j > i) g_upper[i * c + j] = static_cast<T>(acc);
                    else g_s[i] = static_cast<T>(acc * std::exp(s[i]));
                }
            }
        if (volume_normalized_) {
            const double mean = sum_all(g_s) / static_cast<double>(c);
            for (auto& v : g_s.values()) v = static_cast<T>(v - mean);
        }
        grads.accumulate(prefix + "invconv.L", g_lower);
        grads.accumulate(prefix + "invconv.U", g_upper);
        grads.accumulate(prefix + "invconv.s", g_s);
        return std::move(g.input);
    }

private:
    double lower_at(std::size_t i, std::size_t j) const {
        if (i == j) return 1.0;
        return j < i ? static_cast<double>(lower_[i * channels() + j]) : 0.0;
    }
    double upper_at(std::size_t i, std::size_t j, const std::vector<double>& s) const {
        if (i == j) return std::exp(s[i]);
        return j > i ? static_cast<double>(upper_[i * channels() + j]) : 0.0;
    }

    std::vector<std::size_t> perm_;
    Tensor4<T> lower_, upper_, log_scale_;
    bool volume_normalized_ = true;
};

// ---------------------------------------------------------------------------
// Dual coupling block

template <typename T>
struct CouplingCache {
    ParamNetCache<T> net;
    Tensor4<T> s, t;
    Tensor4<T> x1;  // transformed level, block input
    Tensor4<T> y1;  // after the affine step, input to the 1x1 convolution

    std::size_t bytes() const {
        return net.cond.bytes() + net.hidden.bytes() + net.raw_s.bytes() + s.bytes() + t.bytes() + x1.bytes() +
               y1.bytes();
    }
};

struct CouplingLayout {
    std::size_t level = 0;        // transformed level d
    std::size_t level_count = 1;  // L
    std::size_t channels = 1;     // C
    std::size_t height = 1;       // spatial dims of level d
    std::size_t width = 1;
    VnAxis vn_axis = VnAxis::Channel;
    bool allow_unconditional = false;  // needed when L == 1
};

/// Transforms level d affinely, conditioned on the bilinearly resized
/// neighbours d-1 and d+1, then mixes channels with an invertible 1x1
/// convolution. Neighbour levels pass through untouched.
template <typename T>
class DualCouplingBlock {
public:
    using cache_type = CouplingCache<T>;

    DualCouplingBlock() = default;

    DualCouplingBlock(CouplingLayout layout, InvConv1x1<T> invconv, std::mt19937_64& rng, std::string name = "")
        : layout_(layout), invconv_(std::move(invconv)), name_(std::move(name)) {
        if (layout_.level >= layout_.level_count) throw ConfigError("coupling level index out of range");
        if (invconv_.channels() != layout_.channels) throw ConfigError("invconv channel count mismatch");
        const std::size_t cond = layout_.channels * (has_finer() + has_coarser());
        if (cond == 0) {
            if (!layout_.allow_unconditional) {
                throw ConfigError("coupling block at level " + std::to_string(layout_.level) +
                                  " has no neighbours and unconditional mode is off");
            }
        } else {
            VolumeNorm<T> vn(layout_.vn_axis, {1, layout_.channels, layout_.height, layout_.width});
            net_.emplace(cond, layout_.channels, std::move(vn), rng);
        }
    }

    const CouplingLayout& layout() const { return layout_; }
    const std::string& name() const { return name_; }
    bool conditional() const { return net_.has_value(); }
    bool has_finer() const { return layout_.level > 0; }
    bool has_coarser() const { return layout_.level + 1 < layout_.level_count; }

    AffineParamNet<T>& param_net() { return *net_; }
    const AffineParamNet<T>& param_net() const { return *net_; }
    InvConv1x1<T>& invconv() { return invconv_; }
    const InvConv1x1<T>& invconv() const { return invconv_; }

    /// Trainable tensors, in checkpoint order.
    template <typename F>
    void for_each_parameter(F&& f) {
        if (net_) {
            f(name_ + "conv1.w", net_->conv1_w());
            f(name_ + "conv1.b", net_->conv1_b());
            f(name_ + "conv2.w", net_->conv2_w());
            f(name_ + "conv2.b", net_->conv2_b());
        }
        f(name_ + "invconv.L", invconv_.lower());
        f(name_ + "invconv.U", invconv_.upper());
        f(name_ + "invconv.s", invconv_.log_scale());
    }

    /// In-place forward on the stack; returns the block's log-determinant
    /// summed over the batch.
    double forward(PyramidStack<T>& stack, Mode mode, CouplingCache<T>* cache = nullptr,
                   bool update_running = true) {
        Tensor4<T>& x1 = level_of(stack);
        CouplingCache<T> local;
        CouplingCache<T>& c = cache ? *cache : local;
        double logdet = 0;
        if (net_) {
            auto p = net_->forward(conditioning(stack), mode, update_running, &c.net);
            c.y1 = affine_forward(x1, p.s, p.t);
            logdet += affine_logdet(p.s);
            c.s = std::move(p.s);
            c.t = std::move(p.t);
        } else {
            c.y1 = x1;
        }
        c.x1 = std::move(x1);
        x1 = invconv_.forward(c.y1);
        logdet += static_cast<double>(x1.n()) * invconv_.logdet(x1.h(), x1.w());
        return logdet;
    }

    /// In-place inverse. Running means are never touched; in Train mode the
    /// per-sample statistics are recomputed from the (unchanged) neighbours.
    void inverse(PyramidStack<T>& stack, Mode mode, CouplingCache<T>* cache = nullptr) const {
        Tensor4<T>& z1 = level_of(stack);
        CouplingCache<T> local;
        CouplingCache<T>& c = cache ? *cache : local;
        c.y1 = invconv_.inverse(z1);
        if (net_) {
            auto p = net_->compute(conditioning(stack), mode, &c.net);
            z1 = affine_inverse(c.y1, p.s, p.t);
            c.s = std::move(p.s);
            c.t = std::move(p.t);
        } else {
            z1 = c.y1;
        }
        if (cache) c.x1 = z1;
    }

    /// `grad` holds d loss / d output on entry and d loss / d input on exit.
    void backward(const CouplingCache<T>& cache, PyramidStack<T>& grad, Mode mode, GradientSet<T>& grads) const {
        Tensor4<T>& g1 = level_of(grad);
        Tensor4<T> g_y1 = invconv_.backward(cache.y1, g1, grads, name_);
        if (!net_) {
            g1 = std::move(g_y1);
            return;
        }
        Tensor4<T> g_s(g_y1.shape());
        Tensor4<T> g_x1(g_y1.shape());
        for (std::size_t k = 0; k < g_y1.size(); ++k) {
            const T e = std::exp(cache.s[k]);
            g_x1[k] = e * g_y1[k];
            g_s[k] = g_y1[k] * e * cache.x1[k];
        }
        Tensor4<T> g_cond = net_->backward(cache.net, g_s, g_y1, mode, grads, name_);
        g1 = std::move(g_x1);
        std::size_t offset = 0;
        const std::size_t c = layout_.channels;
        const std::size_t d = layout_.level;
        if (has_finer()) {
            auto& target = grad[d - 1];
            target += resize_bilinear_adjoint(slice_channels(g_cond, offset, c), target.h(), target.w());
            offset += c;
        }
        if (has_coarser()) {
            auto& target = grad[d + 1];
            target += resize_bilinear_adjoint(slice_channels(g_cond, offset, c), target.h(), target.w());
        }
    }

private:
    Tensor4<T>& level_of(PyramidStack<T>& stack) const {
        check_stack(stack);
        return stack[layout_.level];
    }

    void check_stack(const PyramidStack<T>& stack) const {
        if (stack.size() != layout_.level_count) {
            throw ShapeError("coupling block expects " + std::to_string(layout_.level_count) + " levels, got " +
                             std::to_string(stack.size()));
        }
        const auto& s = stack[layout_.level].shape();
        if (s.c != layout_.channels || s.h != layout_.height || s.w != layout_.width) {
            throw ShapeError("coupling block level " + std::to_string(layout_.level) + " expects (" +
                             std::to_string(layout_.channels) + "," + std::to_string(layout_.height) + "," +
                             std::to_string(layout_.width) + "), got " + s.str());
        }
    }

    Tensor4<T> conditioning(const PyramidStack<T>& stack) const {
        const std::size_t d = layout_.level, h = layout_.height, w = layout_.width;
        std::optional<Tensor4<T>> cond;
        if (has_finer()) cond = resize_bilinear(stack[d - 1], h, w);
        if (has_coarser()) {
            auto coarse = resize_bilinear(stack[d + 1], h, w);
            cond = cond ? concat_channels(*cond, coarse) : std::move(coarse);
        }
        return std::move(*cond);
    }

    CouplingLayout layout_;
    std::optional<AffineParamNet<T>> net_;
    InvConv1x1<T> invconv_;
    std::string name_;
};

}  // namespace pyramidflow
