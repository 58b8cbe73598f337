#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "pyramidflow/gradients.hpp"
#include "pyramidflow/model.hpp"
#include "pyramidflow/pyramid.hpp"
#include "pyramidflow/reversible.hpp"
#include "pyramidflow/tensor.hpp"

namespace pyramidflow {

enum class LossKind { Fourier, Spatial };

template <typename T>
struct LossResult {
    double value = 0;
    PyramidStack<T> grad_a;  // d loss / d z_a; d loss / d z_b is its negation
};

/// Mean complex magnitude of the DFT of compose(z_a - z_b), averaged over
/// (n, c, u, v). With `want_grad` the gradient w.r.t. z_a is returned.
template <typename T>
LossResult<T> fourier_loss(const PyramidStack<T>& z_a, const PyramidStack<T>& z_b, bool want_grad = false) {
    z_a.require_compatible(z_b);
    const Tensor4<T> delta = compose(z_a - z_b);
    const auto spectrum = dft2(delta);
    const std::size_t count = delta.size();
    double total = 0;
    Tensor4<T> phase_re(delta.shape()), phase_im(delta.shape());
    for (std::size_t k = 0; k < count; ++k) {
        const double re = spectrum.re[k], im = spectrum.im[k];
        const double mag = std::hypot(re, im);
        total += mag;
        if (mag > 0) {
            // conj(X)/|X| so that a forward DFT of it gives sum_k X_k/|X_k| e^{+i theta}.
            phase_re[k] = static_cast<T>(re / mag);
            phase_im[k] = static_cast<T>(-im / mag);
        }
    }
    LossResult<T> r;
    r.value = total / static_cast<double>(count);
    if (want_grad) {
        const auto back = dft2_complex(phase_re, phase_im, -1);
        Tensor4<T> g = back.re;
        g *= static_cast<T>(1.0 / static_cast<double>(count));
        r.grad_a = compose_adjoint(g, z_a.size());
    }
    return r;
}

/// Ablation variant: mean squared composed difference.
template <typename T>
LossResult<T> spatial_loss(const PyramidStack<T>& z_a, const PyramidStack<T>& z_b, bool want_grad = false) {
    z_a.require_compatible(z_b);
    const Tensor4<T> delta = compose(z_a - z_b);
    double total = 0;
    for (T v : delta.values()) total += static_cast<double>(v) * static_cast<double>(v);
    LossResult<T> r;
    r.value = total / static_cast<double>(delta.size());
    if (want_grad) {
        Tensor4<T> g = delta;
        g *= static_cast<T>(2.0 / static_cast<double>(delta.size()));
        r.grad_a = compose_adjoint(g, z_a.size());
    }
    return r;
}

template <typename T>
LossResult<T> pair_loss(LossKind kind, const PyramidStack<T>& z_a, const PyramidStack<T>& z_b, bool want_grad) {
    return kind == LossKind::Fourier ? fourier_loss(z_a, z_b, want_grad) : spatial_loss(z_a, z_b, want_grad);
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double lr = 2e-4;
    double eps = 1e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.5;
    double beta2 = 0.9;
    double grad_clip = 1.0;
};

/// Rescales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(GradientSet<T>& grads, double max_norm) {
    const double norm = grads.global_norm();
    if (norm > max_norm && norm > 0) grads.scale(static_cast<T>(max_norm / norm));
    return norm;
}

/// Adam with decoupled, multiplicative weight decay applied before the update.
template <typename T>
class AdamOptimizer {
public:
    struct Moments {
        Tensor4<T> m, v;
    };

    explicit AdamOptimizer(AdamConfig config = {}) : config_(config) {}

    const AdamConfig& config() const { return config_; }
    std::size_t step_count() const { return step_; }
    void set_step_count(std::size_t s) { step_ = s; }
    std::map<std::string, Moments>& moments() { return moments_; }
    const std::map<std::string, Moments>& moments() const { return moments_; }

    template <typename Model>
    void step(Model& model, const GradientSet<T>& grads) {
        ++step_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
        const double decay = 1.0 - config_.lr * config_.weight_decay;
        model.for_each_parameter([&](const std::string& name, Tensor4<T>& param) {
            if (!grads.contains(name)) return;
            const Tensor4<T>& g = grads.at(name);
            require_same_shape(param, g, "adam step " + name);
            auto it = moments_.find(name);
            if (it == moments_.end()) {
                it = moments_.emplace(name, Moments{Tensor4<T>(param.shape()), Tensor4<T>(param.shape())}).first;
            }
            Tensor4<T>& m = it->second.m;
            Tensor4<T>& v = it->second.v;
            for (std::size_t k = 0; k < param.size(); ++k) {
                const double gk = g[k];
                const double mk = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
                const double vk = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
                m[k] = static_cast<T>(mk);
                v[k] = static_cast<T>(vk);
                const double update = config_.lr * (mk / bc1) / (std::sqrt(vk / bc2) + config_.eps);
                param[k] = static_cast<T>(static_cast<double>(param[k]) * decay - update);
            }
        });
    }

private:
    AdamConfig config_;
    std::size_t step_ = 0;
    std::map<std::string, Moments> moments_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    LossKind loss = LossKind::Fourier;
    BackwardMode backward = BackwardMode::Reversible;
    double loss_scale = 1.0;
};

template <typename T>
struct PairGradients {
    double loss = 0;
    double logdet = 0;
    GradientSet<T> grads;
    MemoryReport memory;
};

/// Forward both images as one batch of two, evaluate the pair loss and
/// backpropagate through the flow, the pyramid and the lift W.
template <typename T>
PairGradients<T> pair_gradients(PyramidFlowModel<T>& model, const Tensor4<T>& image_a, const Tensor4<T>& image_b,
                                const TrainOptions& options = {}) {
    require_same_shape(image_a, image_b, "training pair");
    if (image_a.n() != 1) throw ShapeError("training pair images must have batch size 1");
    const Tensor4<T> batch = concat_batch(std::vector<Tensor4<T>>{image_a, image_b});
    const Tensor4<T> feature = model.lift_image(batch);
    BlockTape<T> tape(model.block_pointers(), options.backward, Mode::Train);
    const PyramidStack<T> z = tape.forward(decompose(feature, model.config().levels));

    PairGradients<T> out;
    out.logdet = tape.logdet();
    const auto z_a = slice_batch(z, 0, 1), z_b = slice_batch(z, 1, 1);
    auto loss = pair_loss(options.loss, z_a, z_b, true);
    out.loss = loss.value * options.loss_scale;
    if (!std::isfinite(out.loss)) {
        throw NumericError("non-finite training loss (" + std::to_string(out.loss) + "); step aborted");
    }
    loss.grad_a *= static_cast<T>(options.loss_scale);
    PyramidStack<T> grad_b = zeros_like(loss.grad_a);
    grad_b -= loss.grad_a;
    out.grads = tape.backward(concat_batch(std::vector<PyramidStack<T>>{loss.grad_a, grad_b}));
    out.memory = tape.peak_memory_report();
    const Tensor4<T> g_feature = decompose_adjoint(tape.input_grad());
    out.grads.accumulate("W", mix_channels_backward(batch, model.lift(), g_feature).weight);
    return out;
}

struct StepResult {
    double loss = 0;
    double grad_norm = 0;          // before clipping
    double clipped_grad_norm = 0;  // after clipping
};

template <typename T>
StepResult train_step(PyramidFlowModel<T>& model, const Tensor4<T>& image_a, const Tensor4<T>& image_b,
                      AdamOptimizer<T>& optimizer, const TrainOptions& options = {}) {
    auto pg = pair_gradients(model, image_a, image_b, options);
    for (const auto& [name, g] : pg.grads) {
        if (!all_finite(g)) throw NumericError("non-finite gradient for " + name + "; step aborted");
    }
    StepResult r;
    r.loss = pg.loss;
    r.grad_norm = clip_grad_norm(pg.grads, optimizer.config().grad_clip);
    r.clipped_grad_norm = pg.grads.global_norm();
    optimizer.step(model, pg.grads);
    return r;
}

// ---------------------------------------------------------------------------
// Templates and anomaly scoring

template <typename T>
struct LatentTemplate {
    PyramidStack<T> means;
    std::size_t sample_count = 0;
};

/// Streaming per-level mean of Eval-mode latents over defect-free images.
template <typename T>
class TemplateAccumulator {
public:
    void add(const PyramidStack<T>& z) {
        for (std::size_t b = 0; b < z[0].n(); ++b) {
            const auto sample = slice_batch(z, b, 1);
            ++count_;
            if (count_ == 1) {
                means_ = sample;
                continue;
            }
            const T inv = static_cast<T>(1.0 / static_cast<double>(count_));
            for (std::size_t d = 0; d < means_.size(); ++d) {
                auto& m = means_[d];
                const auto& x = sample[d];
                for (std::size_t k = 0; k < m.size(); ++k) m[k] += (x[k] - m[k]) * inv;
            }
        }
    }

    LatentTemplate<T> result() const {
        if (count_ == 0) throw ConfigError("cannot fit a latent template on an empty dataset");
        return {means_, count_};
    }

private:
    PyramidStack<T> means_;
    std::size_t count_ = 0;
};

template <typename T>
LatentTemplate<T> fit_templates(PyramidFlowModel<T>& model, const std::vector<Tensor4<T>>& images) {
    TemplateAccumulator<T> acc;
    for (const auto& img : images) acc.add(model.forward(img, Mode::Eval));
    return acc.result();
}

/// Per-pixel channel norm of z_d - template_d at every level, composed to full
/// resolution. Returns (n, 1, H, W).
template <typename T>
Tensor4<T> anomaly_from_latents(const PyramidStack<T>& z, const PyramidStack<T>& means) {
    if (z.size() != means.size()) throw ShapeError("anomaly map: level count mismatch");
    std::vector<Tensor4<T>> sigma;
    for (std::size_t d = 0; d < z.size(); ++d) {
        const auto& zl = z[d];
        const auto& ml = means[d];
        if (ml.n() != 1 || ml.c() != zl.c() || ml.h() != zl.h() || ml.w() != zl.w()) {
            throw ShapeError("anomaly map: template level " + std::to_string(d) + " shape " + ml.shape().str() +
                             " incompatible with latent " + zl.shape().str());
        }
        Tensor4<T> s({zl.n(), 1, zl.h(), zl.w()});
        const std::size_t p = zl.shape().plane();
        for (std::size_t n = 0; n < zl.n(); ++n) {
            T* dst = s.plane(n, 0);
            for (std::size_t c = 0; c < zl.c(); ++c) {
                const T* a = zl.plane(n, c);
                const T* b = ml.plane(0, c);
                for (std::size_t q = 0; q < p; ++q) {
                    const T diff = a[q] - b[q];
                    dst[q] += diff * diff;
                }
            }
            for (std::size_t q = 0; q < p; ++q) dst[q] = std::sqrt(dst[q]);
        }
        sigma.push_back(std::move(s));
    }
    Tensor4<T> map = compose(PyramidStack<T>(std::move(sigma)));
    for (auto& v : map.values()) v = std::max(v, T(0));  // blur of non-negative planes; clamps -0 rounding
    return map;
}

template <typename T>
Tensor4<T> anomaly_map(PyramidFlowModel<T>& model, const LatentTemplate<T>& tmpl, const Tensor4<T>& image) {
    return anomaly_from_latents(model.forward(image, Mode::Eval), tmpl.means);
}

}  // namespace pyramidflow
