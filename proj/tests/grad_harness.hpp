#pragma once

// Finite-difference gradient harness shared by the autograd unit tests and
// the acceptance run: scalarize an op's output with fixed random weights and
// compare tape gradients against oracle central differences.

#include <cstdint>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "sml/ops.hpp"
#include "sml/rng.hpp"
#include "sml/tape.hpp"
#include "sml/tensor.hpp"

namespace gradcheck {

struct OpUnderTest {
    std::vector<sml::Shape> input_shapes;
    std::function<sml::Var<double>(sml::Tape<double>&, const std::vector<sml::Var<double>>&)> op;
    // optional transform keeping sampled values in the op's comfortable range
    std::function<double(double)> squash = [](double v) { return v; };
};

inline double run_grad_check(const OpUnderTest& t, std::uint64_t seed) {
    using namespace sml;
    Rng rng(seed);
    std::vector<std::size_t> sizes;
    std::size_t total = 0;
    for (const auto& s : t.input_shapes) {
        sizes.push_back(shape_numel(s));
        total += sizes.back();
    }
    std::vector<double> x0(total);
    for (auto& v : x0) v = t.squash(rng.uniform() * 2.0 - 1.0);

    auto make_leaves = [&](Tape<double>& tape, const std::vector<double>& x, bool needs_grad) {
        std::vector<Var<double>> leaves;
        std::size_t off = 0;
        for (std::size_t i = 0; i < t.input_shapes.size(); ++i) {
            std::vector<double> chunk(x.begin() + off, x.begin() + off + sizes[i]);
            leaves.push_back(tape.leaf(Tensor<double>(t.input_shapes[i], std::move(chunk)), needs_grad));
            off += sizes[i];
        }
        return leaves;
    };

    // probe once for the output size, then fix the scalarization weights
    std::vector<double> w;
    {
        Tape<double> tape;
        tape.set_grad_enabled(false);
        auto out = t.op(tape, make_leaves(tape, x0, false));
        w.resize(out.size());
        for (auto& v : w) v = rng.uniform() * 2.0 - 1.0;
    }

    auto scalar_at = [&](const std::vector<double>& x) {
        Tape<double> tape;
        tape.set_grad_enabled(false);
        auto out = t.op(tape, make_leaves(tape, x, false));
        double s = 0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * out.value()[i];
        return s;
    };

    Tape<double> tape;
    auto leaves = make_leaves(tape, x0, true);
    auto out = t.op(tape, leaves);
    auto s = ops::sum_all(ops::mul(out, tape.constant(Tensor<double>(out.shape(), w))));
    tape.backward(s);
    std::vector<double> analytic;
    for (auto& l : leaves) {
        auto g = l.grad();
        analytic.insert(analytic.end(), g.vec().begin(), g.vec().end());
    }
    std::vector<double> fd = oracle::fd_gradient(scalar_at, x0);
    return oracle::max_rel_err(analytic, fd);
}

}  // namespace gradcheck
