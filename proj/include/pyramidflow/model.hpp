#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pyramidflow/flow_blocks.hpp"
#include "pyramidflow/pyramid.hpp"
#include "pyramidflow/reversible.hpp"
#include "pyramidflow/tensor.hpp"

namespace pyramidflow {

struct ModelConfig {
    std::size_t levels = 4;       // L
    std::size_t depth = 2;        // D
    std::size_t channels = 16;    // C
    std::size_t in_channels = 3;  // image channels
    std::size_t height = 256;
    std::size_t width = 256;
    VnAxis vn_axis = VnAxis::Channel;
    std::uint64_t seed = 0;

    void validate() const {
        if (levels < 1) throw ConfigError("L must be >= 1");
        if (depth < 1) throw ConfigError("D must be >= 1");
        if (in_channels < 1) throw ConfigError("c_in must be >= 1");
        if (channels < in_channels) {
            throw ConfigError("C (" + std::to_string(channels) + ") must be >= c_in (" + std::to_string(in_channels) +
                              ")");
        }
        if (height == 0 || width == 0) throw ConfigError("image size must be positive");
        const std::size_t f = std::size_t{1} << (levels - 1);
        if (height % f != 0 || width % f != 0) {
            throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                              " not divisible by 2^(L-1) = " + std::to_string(f));
        }
    }
};

/// Returns a rows x cols matrix with orthonormal columns (rows >= cols).
template <typename T>
Tensor4<T> semi_orthogonal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::MatrixXd g(rows, cols);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = nd(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
    const Eigen::MatrixXd r = qr.matrixQR();
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
        if (r(j, j) < 0) q.col(j) *= -1.0;
    }
    auto m = make_matrix<T>(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            m[i * cols + j] = static_cast<T>(q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    return m;
}

/// Image -> 1x1 lift W -> pyramid decomposition -> D x L grid of dual coupling
/// blocks. Blocks run depth-major: for each depth step, levels 0..L-1.
template <typename T>
class PyramidFlowModel {
public:
    using Block = DualCouplingBlock<T>;

    PyramidFlowModel() = default;

    static PyramidFlowModel build(const ModelConfig& config) {
        config.validate();
        PyramidFlowModel m;
        m.config_ = config;
        std::mt19937_64 rng(config.seed);
        m.lift_ = semi_orthogonal<T>(config.channels, config.in_channels, rng);
        const bool vn = config.vn_axis != VnAxis::None;
        for (std::size_t i = 0; i < config.depth; ++i) {
            for (std::size_t d = 0; d < config.levels; ++d) {
                CouplingLayout layout{d,
                                      config.levels,
                                      config.channels,
                                      config.height >> d,
                                      config.width >> d,
                                      config.vn_axis,
                                      config.levels == 1};
                auto invconv = InvConv1x1<T>::random_orthogonal(config.channels, rng, vn);
                m.blocks_.emplace_back(layout, std::move(invconv), rng, block_prefix(i, d));
            }
        }
        return m;
    }

    static std::string block_prefix(std::size_t depth, std::size_t level) {
        return "depth" + std::to_string(depth) + ".level" + std::to_string(level) + ".";
    }

    const ModelConfig& config() const { return config_; }
    Tensor4<T>& lift() { return lift_; }
    const Tensor4<T>& lift() const { return lift_; }
    std::vector<Block>& blocks() { return blocks_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    Block& block(std::size_t depth, std::size_t level) { return blocks_[depth * config_.levels + level]; }

    std::vector<Block*> block_pointers() {
        std::vector<Block*> out;
        for (auto& b : blocks_) out.push_back(&b);
        return out;
    }

    /// Trainable parameters in checkpoint order: W, then each block.
    template <typename F>
    void for_each_parameter(F&& f) {
        f(std::string("W"), lift_);
        for (auto& b : blocks_) b.for_each_parameter(f);
    }

    /// Non-trainable running means. Frozen permutations are stored separately
    /// because they are index vectors, not tensors.
    template <typename F>
    void for_each_buffer(F&& f) {
        for (auto& b : blocks_) {
            if (b.conditional() && b.param_net().vn().axis() != VnAxis::None) {
                f(b.name() + "vn.running_mean", b.param_net().vn().running_mean());
            }
        }
    }

    /// Replaces every invconv with the identity factorization (tests, ablations).
    void reset_invconvs_to_identity() {
        for (auto& b : blocks_) {
            b.invconv() = InvConv1x1<T>::identity(config_.channels, config_.vn_axis != VnAxis::None);
        }
    }

    void check_image(const Tensor4<T>& image) const {
        if (image.c() != config_.in_channels || image.h() != config_.height || image.w() != config_.width) {
            throw ShapeError("model expects images (n," + std::to_string(config_.in_channels) + "," +
                             std::to_string(config_.height) + "," + std::to_string(config_.width) + "), got " +
                             image.shape().str());
        }
    }

    void check_latents(const PyramidStack<T>& z) const {
        if (z.size() != config_.levels) throw ShapeError("latent level count mismatch");
        for (std::size_t d = 0; d < z.size(); ++d) {
            const auto& s = z[d].shape();
            if (s.c != config_.channels || s.h != (config_.height >> d) || s.w != (config_.width >> d)) {
                throw ShapeError("latent level " + std::to_string(d) + " has shape " + s.str());
            }
        }
    }

    Tensor4<T> lift_image(const Tensor4<T>& image) const {
        check_image(image);
        return mix_channels(image, lift_);
    }

    /// Latent pyramid {z_d}. Train mode updates running means.
    PyramidStack<T> forward(const Tensor4<T>& image, Mode mode = Mode::Eval, double* logdet = nullptr) {
        PyramidStack<T> stack = decompose(lift_image(image), config_.levels);
        double total = 0;
        for (auto& b : blocks_) total += b.forward(stack, mode, nullptr, mode == Mode::Train);
        if (logdet) *logdet = total;
        return stack;
    }

    /// Pre-flow feature x = W I recovered from latents.
    Tensor4<T> inverse(const PyramidStack<T>& latents, Mode mode = Mode::Eval) const {
        check_latents(latents);
        PyramidStack<T> stack = latents;
        for (std::size_t k = blocks_.size(); k-- > 0;) blocks_[k].inverse(stack, mode);
        return compose(stack);
    }

    /// Least-squares solution of W I = x per pixel via the normal equations.
    Tensor4<T> solve_lift(const Tensor4<T>& feature) const {
        const std::size_t c = config_.channels, k = config_.in_channels;
        if (feature.c() != c) throw ShapeError("solve_lift: feature channel mismatch");
        Eigen::MatrixXd w(c, k);
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < k; ++j)
                w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = lift_[i * k + j];
        const Eigen::MatrixXd gram = w.transpose() * w;
        const Eigen::VectorXd ev =
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly).eigenvalues();
        const double rcond = ev.maxCoeff() > 0 ? ev.minCoeff() / ev.maxCoeff() : 0.0;
        if (!(rcond > 1e-12)) {
            throw NumericError("solve_lift: lift matrix is rank deficient (rcond " + std::to_string(rcond) + ")");
        }
        const Eigen::MatrixXd pinv = gram.ldlt().solve(w.transpose());
        auto m = make_matrix<T>(k, c);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < c; ++j)
                m[i * c + j] = static_cast<T>(pinv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        return mix_channels(feature, m);
    }

    /// Image-space prototype of the latent template.
    Tensor4<T> image_template(const PyramidStack<T>& latent_means) const {
        return solve_lift(inverse(latent_means, Mode::Eval));
    }

private:
    ModelConfig config_;
    Tensor4<T> lift_;
    std::vector<Block> blocks_;
};

}  // namespace pyramidflow
