#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "efdit/tensor.hpp"

namespace efdit::testing {

// Compares the tape gradient of loss = sum(w . f(inputs)) against central
// finite differences, per element: |ga - gn| <= tol * max(1, |gn|).
inline void gradcheck(std::vector<Tensor> inputs,
                      const std::function<Tensor(const std::vector<Tensor>&)>& fn, Rng& rng,
                      double h = 1e-5, double tol = 1e-6) {
    const Tensor probe_out = fn(inputs);
    Tensor w = Tensor::uniform(probe_out.shape, -1.0, 1.0, rng);

    auto weighted = [&](const std::vector<Tensor>& in) {
        const Tensor out = fn(in);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.data.size(); ++i) acc += out.data[i] * w.data[i];
        return acc;
    };

    GradTape tape;
    std::vector<Tensor> tracked;
    tracked.reserve(inputs.size());
    for (const Tensor& t : inputs) tracked.push_back(tape.watch(t));
    Tensor out = fn(tracked);
    Tensor loss = reduce_all(Reduce::sum, mul(out, w));
    tape.backward(loss);

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor ga = tape.grad(tracked[k]);
        for (std::size_t j = 0; j < inputs[k].data.size(); ++j) {
            std::vector<Tensor> plus = inputs;
            std::vector<Tensor> minus = inputs;
            plus[k].data[j] += h;
            minus[k].data[j] -= h;
            const double gn = (weighted(plus) - weighted(minus)) / (2.0 * h);
            const double err = std::abs(ga.data[j] - gn);
            if (err > tol * std::max(1.0, std::abs(gn))) {
                CAPTURE(k);
                CAPTURE(j);
                CAPTURE(ga.data[j]);
                CAPTURE(gn);
                REQUIRE(err <= tol * std::max(1.0, std::abs(gn)));
            }
        }
    }
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace efdit::testing
