#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "sml/errors.hpp"
#include "sml/params.hpp"

namespace sml {

// Evaluates the loss at the store's current trainable values; when grad is
// non-null it is filled with dL/dtheta in flattened trainable order.
template <typename T>
using LossGradFn = std::function<T(ParameterStore<T>& params, std::vector<T>* grad)>;

template <typename T>
T default_hvp_eps(const std::vector<T>& theta) {
    T m = T(0);
    for (T t : theta) m = std::max(m, std::abs(t));
    return static_cast<T>(1e-4) * (T(1) + m);
}

// Hv by central finite differences of first-order gradients:
// (grad(theta + eps v) - grad(theta - eps v)) / (2 eps).
// theta is restored bit-exactly before returning.
template <typename T>
std::vector<T> hvp_estimate(ParameterStore<T>& params, const LossGradFn<T>& loss_grad,
                            const std::vector<T>& v, T eps = T(0)) {
    std::vector<T> theta = params.flatten_trainable();
    if (v.size() != theta.size())
        throw ArgumentError("hvp: direction length " + std::to_string(v.size()) +
                            " does not match trainable parameter count " + std::to_string(theta.size()));
    if (eps <= T(0)) eps = default_hvp_eps(theta);

    std::vector<T> shifted(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) shifted[i] = theta[i] + eps * v[i];
    params.assign_trainable(shifted);
    std::vector<T> gp;
    loss_grad(params, &gp);

    for (std::size_t i = 0; i < theta.size(); ++i) shifted[i] = theta[i] - eps * v[i];
    params.assign_trainable(shifted);
    std::vector<T> gm;
    loss_grad(params, &gm);

    params.assign_trainable(theta);

    if (gp.size() != theta.size() || gm.size() != theta.size())
        throw ArgumentError("hvp: loss_grad returned wrong gradient length");
    std::vector<T> out(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        out[i] = (gp[i] - gm[i]) / (T(2) * eps);
        if (!std::isfinite(static_cast<double>(out[i])))
            throw NumericError("hvp: non-finite gradient component in parameter " +
                               params.trainable_name_at(i));
    }
    return out;
}

}  // namespace sml
