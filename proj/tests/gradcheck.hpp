#pragma once

// Finite-difference oracle shared by the test suites. Independent of the
// reverse pass it checks: it only ever evaluates forward values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab::testing {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double scale = std::max({norm(a), norm(b), 1e-300});
    return norm(d) / scale;
}

// Central differences of f with respect to every entry of inputs[which].
inline std::vector<double> numeric_gradient(const ScalarFn& f, std::vector<Tensor> inputs, std::size_t which,
                                            double step = 1e-6) {
    NoGradGuard guard;
    auto values = inputs[which].mutable_data();
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + step;
        const double up = f(inputs).item();
        values[i] = saved - step;
        const double down = f(inputs).item();
        values[i] = saved;
        out[i] = (up - down) / (2.0 * step);
    }
    return out;
}

// Largest relative error between reverse-mode and central-difference
// gradients over all inputs that require a gradient.
inline double max_gradient_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double step = 1e-6) {
    for (auto t : inputs) t.zero_grad();
    f(inputs).backward();
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        const auto analytic = inputs[i].grad();
        const auto numeric = numeric_gradient(f, inputs, i, step);
        worst = std::max(worst, relative_error(analytic, numeric));
    }
    return worst;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
    std::vector<double> data(shape_numel(shape));
    for (double& x : data) x = lo + (hi - lo) * rng.uniform();
    return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

inline std::size_t random_extent(Rng& rng, std::size_t max_extent = 8) { return 1 + rng.below(max_extent); }

}  // namespace moelab::testing
