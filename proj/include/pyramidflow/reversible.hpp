#pragma once

// Reverse-mode differentiation over a chain of invertible blocks.
//
// Standard mode keeps every block's activation cache from the forward sweep.
// Reversible mode keeps only the final output; during the backward sweep each
// block's input is rebuilt from its output with the block inverse, which also
// yields the local activations needed for the parameter gradients. Retained
// activation sets are counted so the two strategies can be compared.

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <string>
#include <vector>

#include "pyramidflow/flow_blocks.hpp"
#include "pyramidflow/gradients.hpp"
#include "pyramidflow/pyramid.hpp"

namespace pyramidflow {

enum class BackwardMode { Standard, Reversible };

inline const char* to_string(BackwardMode m) {
    return m == BackwardMode::Standard ? "standard" : "reversible";
}

template <typename B, typename T>
concept FlowBlock = requires(B& block, const B& cblock, PyramidStack<T>& stack, typename B::cache_type* cache,
                             const typename B::cache_type& ccache, GradientSet<T>& grads, Mode mode) {
    { block.forward(stack, mode, cache, true) } -> std::convertible_to<double>;
    cblock.inverse(stack, mode, cache);
    cblock.backward(ccache, stack, mode, grads);
    { ccache.bytes() } -> std::convertible_to<std::size_t>;
};

struct MemoryReport {
    BackwardMode mode = BackwardMode::Standard;
    std::size_t block_count = 0;
    std::size_t peak_buffers = 0;
    std::size_t bytes = 0;
};

/// High-water accounting of simultaneously retained activation sets.
class ActivationLedger {
public:
    void retain(std::size_t bytes) {
        ++live_;
        live_bytes_ += bytes;
        peak_buffers_ = std::max(peak_buffers_, live_);
        peak_bytes_ = std::max(peak_bytes_, live_bytes_);
    }
    void release(std::size_t bytes) {
        --live_;
        live_bytes_ -= bytes;
    }
    void reset() { *this = ActivationLedger{}; }

    std::size_t live() const { return live_; }
    std::size_t peak_buffers() const { return peak_buffers_; }
    std::size_t peak_bytes() const { return peak_bytes_; }

private:
    std::size_t live_ = 0, live_bytes_ = 0, peak_buffers_ = 0, peak_bytes_ = 0;
};

template <typename T, typename Block = DualCouplingBlock<T>>
    requires FlowBlock<Block, T>
class BlockTape {
public:
    using Cache = typename Block::cache_type;

    BlockTape(std::vector<Block*> blocks, BackwardMode mode, Mode vn_mode = Mode::Train)
        : blocks_(std::move(blocks)), mode_(mode), vn_mode_(vn_mode) {}

    BackwardMode mode() const { return mode_; }
    std::size_t block_count() const { return blocks_.size(); }
    double logdet() const { return logdet_; }

    PyramidStack<T> forward(const PyramidStack<T>& x) {
        ledger_.reset();
        caches_.clear();
        logdet_ = 0;
        output_ = x;
        ledger_.retain(output_.bytes());
        const bool keep = mode_ == BackwardMode::Standard;
        if (keep) caches_.resize(blocks_.size());
        for (std::size_t k = 0; k < blocks_.size(); ++k) {
            logdet_ += blocks_[k]->forward(output_, vn_mode_, keep ? &caches_[k] : nullptr, true);
            if (keep) ledger_.retain(caches_[k].bytes());
        }
        forward_done_ = true;
        return output_;
    }

    /// Gradients of the scalar loss whose output-gradient is `loss_grad`.
    GradientSet<T> backward(const PyramidStack<T>& loss_grad) {
        if (!forward_done_) throw StateError("BlockTape::backward called before forward");
        output_.require_compatible(loss_grad);
        GradientSet<T> grads;
        PyramidStack<T> grad = loss_grad;
        ledger_.retain(grad.bytes());
        if (mode_ == BackwardMode::Standard) {
            for (std::size_t k = blocks_.size(); k-- > 0;) {
                blocks_[k]->backward(caches_[k], grad, vn_mode_, grads);
                ledger_.release(caches_[k].bytes());
                caches_[k] = Cache{};
            }
            caches_.clear();
        } else {
            PyramidStack<T>& current = output_;
            for (std::size_t k = blocks_.size(); k-- > 0;) {
                Cache cache;
                blocks_[k]->inverse(current, vn_mode_, &cache);
                ledger_.retain(cache.bytes());
                blocks_[k]->backward(cache, grad, vn_mode_, grads);
                ledger_.release(cache.bytes());
            }
        }
        ledger_.release(output_.bytes());
        output_ = PyramidStack<T>{};
        input_grad_ = std::move(grad);
        ledger_.release(input_grad_.bytes());
        forward_done_ = false;
        return grads;
    }

    /// d loss / d tape input from the last backward().
    const PyramidStack<T>& input_grad() const { return input_grad_; }

    MemoryReport peak_memory_report() const {
        return {mode_, blocks_.size(), ledger_.peak_buffers(), ledger_.peak_bytes()};
    }

private:
    std::vector<Block*> blocks_;
    BackwardMode mode_;
    Mode vn_mode_;
    std::vector<Cache> caches_;
    PyramidStack<T> output_;
    PyramidStack<T> input_grad_;
    ActivationLedger ledger_;
    double logdet_ = 0;
    bool forward_done_ = false;
};

}  // namespace pyramidflow
