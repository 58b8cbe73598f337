#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "pyramidflow/flow_blocks.hpp"
#include "pyramidflow/gradients.hpp"
#include "pyramidflow/model.hpp"
#include "pyramidflow/pyramid.hpp"

namespace support {

using namespace pyramidflow;

inline PyramidStack<double> random_stack(std::size_t levels, Shape4 base, std::mt19937_64& rng) {
    std::vector<Tensor4<double>> out;
    for (std::size_t d = 0; d < levels; ++d) {
        out.push_back(oracle::random_tensor({base.n, base.c, base.h >> d, base.w >> d}, rng));
    }
    return PyramidStack<double>(std::move(out));
}

/// Uniform(-scale, scale) for every trainable tensor of a block.
template <typename T>
void randomize(DualCouplingBlock<T>& b, std::mt19937_64& rng, double scale = 0.3) {
    std::uniform_real_distribution<double> u(-scale, scale);
    b.for_each_parameter([&](const std::string&, Tensor4<T>& t) {
        for (auto& v : t.values()) v = static_cast<T>(u(rng));
    });
}

template <typename T>
void randomize_running(DualCouplingBlock<T>& b, std::mt19937_64& rng, double scale = 0.2) {
    if (!b.conditional() || b.param_net().vn().axis() == VnAxis::None) return;
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& v : b.param_net().vn().running_mean().values()) v = static_cast<T>(u(rng));
}

/// Randomizes every coupling/invconv parameter (W is left orthonormal).
template <typename T>
void randomize(PyramidFlowModel<T>& m, std::mt19937_64& rng, double scale = 0.3) {
    for (auto& b : m.blocks()) {
        randomize(b, rng, scale);
        randomize_running(b, rng);
    }
}

inline std::vector<double> flatten(const PyramidStack<double>& s) {
    std::vector<double> v;
    for (const auto& l : s) v.insert(v.end(), l.values().begin(), l.values().end());
    return v;
}

inline double inner(const PyramidStack<double>& a, const PyramidStack<double>& b) {
    double s = 0;
    for (std::size_t d = 0; d < a.size(); ++d)
        for (std::size_t k = 0; k < a[d].size(); ++k) s += a[d][k] * b[d][k];
    return s;
}

/// max |a - f| / max |f| over one tensor (f is the finite-difference reference).
inline double relative_error(const Tensor4<double>& a, const Tensor4<double>& f) {
    const double scale = max_abs(f);
    return scale > 0 ? max_abs_diff(a, f) / scale : max_abs(a);
}

/// Central-difference gradient of `loss` w.r.t. every element of `param`.
inline Tensor4<double> fd_gradient(Tensor4<double>& param, const std::function<double()>& loss, double step = 1e-5) {
    Tensor4<double> g(param.shape());
    for (std::size_t k = 0; k < param.size(); ++k) {
        const double keep = param[k];
        param[k] = keep + step;
        const double lp = loss();
        param[k] = keep - step;
        const double lm = loss();
        param[k] = keep;
        g[k] = (lp - lm) / (2 * step);
    }
    return g;
}

}  // namespace support
