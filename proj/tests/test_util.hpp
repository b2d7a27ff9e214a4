#pragma once

#include "quantlab/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace quantlab::testing {

inline std::vector<double> random_values(std::size_t n, double lo, double hi, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline std::vector<std::vector<double>> analytic_grads(const ScalarFn& f, const std::vector<Shape>& shapes,
                                                       const std::vector<std::vector<double>>& values) {
    std::vector<Tensor> inputs;
    for (std::size_t i = 0; i < shapes.size(); ++i) inputs.push_back(Tensor::from(shapes[i], values[i], true));
    backward(f(inputs));
    std::vector<std::vector<double>> out;
    for (const auto& t : inputs) {
        if (t.has_grad()) {
            out.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            out.emplace_back(t.size(), 0.0);
        }
    }
    return out;
}

/// Central differences with step h, relative tolerance `rel` against
/// max(|analytic|, |numeric|, floor).
inline void expect_gradients_match(const ScalarFn& f, const std::vector<Shape>& shapes,
                                   const std::vector<std::vector<double>>& values, double h = 1e-5,
                                   double rel = 1e-4, double floor = 1e-6) {
    const auto grads = analytic_grads(f, shapes, values);
    auto eval = [&](const std::vector<std::vector<double>>& v) {
        std::vector<Tensor> inputs;
        for (std::size_t i = 0; i < shapes.size(); ++i) inputs.push_back(Tensor::from(shapes[i], v[i]));
        return f(inputs).item();
    };
    auto v = values;
    for (std::size_t i = 0; i < v.size(); ++i) {
        for (std::size_t j = 0; j < v[i].size(); ++j) {
            const double x = v[i][j];
            v[i][j] = x + h;
            const double up = eval(v);
            v[i][j] = x - h;
            const double down = eval(v);
            v[i][j] = x;
            const double fd = (up - down) / (2.0 * h);
            const double scale = std::max({std::abs(fd), std::abs(grads[i][j]), floor});
            EXPECT_LE(std::abs(fd - grads[i][j]), rel * scale)
                << "input " << i << " entry " << j << ": analytic " << grads[i][j] << " vs numeric " << fd;
        }
    }
}

} // namespace quantlab::testing
