#pragma once

#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Trainable tensor with N(0, stddev^2) entries.
inline Tensor normal_parameter(Shape shape, double stddev, Rng& rng) {
    std::vector<double> data(shape_numel(shape));
    for (double& x : data) x = stddev * rng.normal();
    return Tensor::from(std::move(shape), std::move(data), true);
}

inline Tensor constant_parameter(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

}  // namespace moelab
