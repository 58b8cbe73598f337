#pragma once

#include <cmath>
#include <map>
#include <string>

#include "pyramidflow/tensor.hpp"

namespace pyramidflow {

/// Parameter name -> gradient. Entries accumulate, so a parameter touched by
/// several samples or blocks sums its contributions.
template <typename T>
class GradientSet {
public:
    void accumulate(const std::string& name, const Tensor4<T>& grad) {
        auto it = grads_.find(name);
        if (it == grads_.end()) {
            grads_.emplace(name, grad);
        } else {
            it->second += grad;
        }
    }

    bool contains(const std::string& name) const { return grads_.count(name) != 0; }
    const Tensor4<T>& at(const std::string& name) const { return grads_.at(name); }
    Tensor4<T>& at(const std::string& name) { return grads_.at(name); }
    std::size_t size() const { return grads_.size(); }

    auto begin() { return grads_.begin(); }
    auto end() { return grads_.end(); }
    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

    double global_norm() const {
        double s = 0;
        for (const auto& [name, g] : grads_)
            for (T v : g.values()) s += static_cast<double>(v) * static_cast<double>(v);
        return std::sqrt(s);
    }

    void scale(T factor) {
        for (auto& [name, g] : grads_) g *= factor;
    }

private:
    std::map<std::string, Tensor4<T>> grads_;
};

}  // namespace pyramidflow
