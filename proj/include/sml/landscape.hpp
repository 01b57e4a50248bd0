#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "sml/errors.hpp"
#include "sml/hsi.hpp"
#include "sml/model.hpp"
#include "sml/parallel.hpp"
#include "sml/params.hpp"
#include "sml/rng.hpp"
#include "sml/train.hpp"

namespace sml {

// Two random directions with the trained weights' filter-wise norms, stored
// flat in trainable registry order.
template <typename T>
struct DirectionPair {
    std::vector<T> nu_x;
    std::vector<T> nu_y;
    std::uint64_t seed = 0;
};

namespace detail {

// Normalize dir filter-by-filter against reference: for tensors of rank >= 2
// a filter is one slice along the leading axis; rank-0/1 tensors are a single
// filter. Zero reference filters zero the direction.
template <typename T>
void filter_normalize(std::vector<T>& dir, const ParameterStore<T>& params) {
    std::size_t off = 0;
    for (const auto& e : params.entries()) {
        if (!e.trainable) continue;
        std::size_t sz = e.value.size();
        std::size_t filters = (e.value.rank() >= 2) ? e.value.shape()[0] : 1;
        std::size_t stride = sz / filters;
        for (std::size_t m = 0; m < filters; ++m) {
            T ref2 = T(0), d2 = T(0);
            for (std::size_t i = 0; i < stride; ++i) {
                T r = e.value[m * stride + i];
                T d = dir[off + m * stride + i];
                ref2 += r * r;
                d2 += d * d;
            }
            T scale = (ref2 > T(0) && d2 > T(0)) ? std::sqrt(ref2) / std::sqrt(d2) : T(0);
            for (std::size_t i = 0; i < stride; ++i) dir[off + m * stride + i] *= scale;
        }
        off += sz;
    }
}

}  // namespace detail

template <typename T>
DirectionPair<T> make_directions(const ParameterStore<T>& theta_star, std::uint64_t seed) {
    std::size_t n = theta_star.trainable_scalar_count();
    Rng rng(seed);
    DirectionPair<T> pair;
    pair.seed = seed;
    pair.nu_x.resize(n);
    pair.nu_y.resize(n);
    for (auto& v : pair.nu_x) v = static_cast<T>(rng.normal());
    for (auto& v : pair.nu_y) v = static_cast<T>(rng.normal());
    detail::filter_normalize(pair.nu_x, theta_star);
    detail::filter_normalize(pair.nu_y, theta_star);
    return pair;
}

struct LandscapeGrid {
    std::size_t n = 0;
    std::vector<double> w_values;               // linspace(-1, 1, n)
    std::vector<std::vector<double>> values;    // [ix][iy], aligned and cap-saturated
    std::vector<std::pair<std::size_t, std::size_t>> overflow_cells;  // non-finite cells
    double cap = 100.0;
};

// Loss at a flat trainable vector; must be safe to call from parallel workers
// when produced by a fresh factory() call per cell.
template <typename T>
using LossEvaluator = std::function<T(const std::vector<T>&)>;
template <typename T>
using EvaluatorFactory = std::function<LossEvaluator<T>()>;

// Aligned disturbance grid: V(wx,wy) = loss(theta* + wx nu_x + wy nu_y) - V0.
template <typename T>
LandscapeGrid landscape_grid(const std::vector<T>& theta_star, const DirectionPair<T>& pair,
                             std::size_t n, const EvaluatorFactory<T>& factory, double cap = 100.0) {
    if (n < 2) throw ArgumentError("landscape: grid needs at least 2 points per axis");
    if (pair.nu_x.size() != theta_star.size() || pair.nu_y.size() != theta_star.size())
        throw ArgumentError("landscape: direction length does not match parameter count");
    LandscapeGrid grid;
    grid.n = n;
    grid.cap = cap;
    grid.w_values.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        grid.w_values[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
    grid.values.assign(n, std::vector<double>(n, 0.0));

    double v0 = static_cast<double>(factory()(theta_star));
    // per-cell flag slots; not vector<bool>, whose packed bits are unsafe to
    // write from parallel workers
    std::vector<std::vector<char>> bad(n, std::vector<char>(n, 0));
    parallel_for(n * n, [&](std::size_t cell) {
        std::size_t i = cell / n, j = cell % n;
        LossEvaluator<T> eval = factory();
        std::vector<T> theta(theta_star.size());
        T wx = static_cast<T>(grid.w_values[i]);
        T wy = static_cast<T>(grid.w_values[j]);
        for (std::size_t k = 0; k < theta.size(); ++k)
            theta[k] = theta_star[k] + wx * pair.nu_x[k] + wy * pair.nu_y[k];
        double v;
        if (wx == T(0) && wy == T(0)) {
            v = 0.0;  // alignment: the undisturbed cell reads exactly zero
        } else {
            v = static_cast<double>(eval(theta)) - v0;
        }
        if (!std::isfinite(v)) {
            bad[i][j] = 1;
            v = cap;
        } else if (v > cap) {
            v = cap;
        }
        grid.values[i][j] = v;
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (bad[i][j]) grid.overflow_cells.emplace_back(i, j);
    return grid;
}

// Full-dataset objective matching training: label-smoothing CE plus the
// weight-decay term 0.5*wd*|theta|^2, batch norm frozen in eval mode.
// Each factory() call clones the model so workers never share state.
template <typename T>
EvaluatorFactory<T> model_loss_factory(const SpectralNet<T>& model, const PatchSet& data,
                                       double alpha, double weight_decay,
                                       std::size_t batch = 256) {
    if (data.records.empty()) throw ArgumentError("landscape: empty evaluation set");
    return [&model, &data, alpha, weight_decay, batch]() -> LossEvaluator<T> {
        auto net = std::make_shared<SpectralNet<T>>(model);
        net->set_training(false);
        return [net, &data, alpha, weight_decay, batch](const std::vector<T>& theta) -> T {
            net->params().assign_trainable(theta);
            double total = 0;
            for (std::size_t lo = 0; lo < data.records.size(); lo += batch) {
                std::size_t hi = std::min(data.records.size(), lo + batch);
                std::vector<std::size_t> which(hi - lo);
                for (std::size_t k = lo; k < hi; ++k) which[k - lo] = k;
                Tensor<T> x = gather_batch(data, which).template cast<T>();
                std::vector<std::size_t> labels(hi - lo);
                for (std::size_t k = lo; k < hi; ++k) labels[k - lo] = data.records[k].label - 1;
                Tape<T> tape;
                tape.set_grad_enabled(false);
                Var<T> logits = net->forward(tape, x);
                Var<T> loss = label_smoothing_ce(logits, labels, static_cast<T>(alpha));
                total += static_cast<double>(loss.value()[0]) * static_cast<double>(hi - lo);
            }
            total /= static_cast<double>(data.records.size());
            double l2 = 0;
            for (T t : theta) l2 += static_cast<double>(t) * static_cast<double>(t);
            return static_cast<T>(total + 0.5 * weight_decay * l2);
        };
    };
}

inline void write_grid_csv(const std::string& path, const LandscapeGrid& grid) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path);
    os.precision(10);
    os << "";
    for (std::size_t j = 0; j < grid.n; ++j) os << "," << grid.w_values[j];
    os << "\n";
    for (std::size_t i = 0; i < grid.n; ++i) {
        os << grid.w_values[i];
        for (std::size_t j = 0; j < grid.n; ++j) os << "," << grid.values[i][j];
        os << "\n";
    }
    if (!os) throw DataError("write failed: " + path);
}

// ---- Hessian top eigenvalue ----

template <typename T>
using HvpFn = std::function<std::vector<T>(const std::vector<T>&)>;

template <typename T>
struct EigenResult {
    T lambda_max = T(0);
    std::size_t iterations = 0;
    bool converged = false;
};

namespace detail {

template <typename T>
T vec_norm(const std::vector<T>& v) {
    T s = T(0);
    for (T x : v) s += x * x;
    return std::sqrt(s);
}

template <typename T>
T vec_dot(const std::vector<T>& a, const std::vector<T>& b) {
    T s = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

// Algebraically largest Hessian eigenvalue by two-phase power iteration.
// Phase 1 estimates the dominant magnitude lambda_abs via |Hv| (immune to
// +/-lambda oscillation); phase 2 iterates the shifted operator
// H + (lambda_abs + delta) I, whose spectrum is strictly positive, and
// reports lambda_max = mu - shift.
template <typename T>
EigenResult<T> top_hessian_eigenvalue(const HvpFn<T>& hvp, std::size_t dim, Rng& rng,
                                      T tol = static_cast<T>(1e-3), std::size_t max_iters = 100) {
    if (dim == 0) throw ArgumentError("eigenvalue: zero-dimensional problem");
    if (tol <= T(0)) throw ArgumentError("eigenvalue: tol must be positive");
    EigenResult<T> res;

    std::vector<T> v(dim);
    for (auto& x : v) x = static_cast<T>(rng.normal());
    T nv = detail::vec_norm(v);
    for (auto& x : v) x /= nv;

    T lambda_abs = T(0);
    T prev = std::numeric_limits<T>::infinity();
    for (std::size_t it = 0; it < max_iters; ++it) {
        std::vector<T> w = hvp(v);
        ++res.iterations;
        T nw = detail::vec_norm(w);
        lambda_abs = nw;
        if (nw == T(0)) break;  // H annihilates v; magnitude 0 along this path
        for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / nw;
        if (std::abs(lambda_abs - prev) < tol * (T(1) + std::abs(lambda_abs))) break;
        prev = lambda_abs;
    }

    T shift = lambda_abs + std::max(tol, static_cast<T>(0.01) * (T(1) + lambda_abs));
    for (auto& x : v) x = static_cast<T>(rng.normal());
    nv = detail::vec_norm(v);
    for (auto& x : v) x /= nv;
    T mu = T(0);
    prev = std::numeric_limits<T>::infinity();
    for (std::size_t it = 0; it < max_iters; ++it) {
        std::vector<T> w = hvp(v);
        ++res.iterations;
        for (std::size_t i = 0; i < dim; ++i) w[i] += shift * v[i];
        mu = detail::vec_dot(v, w);  // Rayleigh quotient of the shifted operator
        T nw = detail::vec_norm(w);
        if (nw == T(0)) {
            mu = T(0);
            res.converged = true;
            break;
        }
        for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / nw;
        if (std::abs(mu - prev) < tol * (T(1) + std::abs(mu))) {
            res.converged = true;
            break;
        }
        prev = mu;
    }
    res.lambda_max = mu - shift;
    return res;
}

}  // namespace sml
