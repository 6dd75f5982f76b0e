#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dger/autodiff.hpp"
#include "dger/common.hpp"
#include "dger/tensor.hpp"

namespace dger {

// ===========================================================================
// Central-difference verification of tape gradients.
//
// Both checkers return the max over coordinates of
//   |analytic - numeric| / max(1, |analytic|).
// The function under test must be a pure, deterministic map from its inputs
// to a scalar loss; this is enforced by evaluating the baseline twice and
// requiring bitwise-equal results.
// ===========================================================================

inline double grad_check(const std::function<Var(Tape&, Var)>& build, const Tensor& at,
                         double step = 1e-4) {
    auto eval = [&](const Tensor& x) {
        Tape t;
        t.set_grad_enabled(false);
        Var y = build(t, t.leaf(x));
        return y.item();
    };

    Tape tape;
    Var x = tape.leaf(at, /*requires_grad=*/true);
    Var y = build(tape, x);
    const double base = y.item();
    if (base != eval(at))
        fail("grad-check: function under test is not deterministic (two evaluations differ)");
    tape.backward(y);
    const Tensor g = tape.grad(x);

    Tensor probe = at;
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        const double fp = eval(probe);
        probe[i] = orig - step;
        const double fm = eval(probe);
        probe[i] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double rel = std::fabs(g[i] - numeric) / std::max(1.0, std::fabs(g[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

// Same check against a set of named parameters the builder reads through
// Tape::param. Parameter gradients are zeroed before the analytic pass.
inline double grad_check_params(const std::function<Var(Tape&)>& build,
                                const std::vector<Parameter*>& params, double step = 1e-4) {
    auto eval = [&]() {
        Tape t;
        t.set_grad_enabled(false);
        return build(t).item();
    };

    for (Parameter* p : params) p->zero_grad();
    Tape tape;
    Var y = build(tape);
    const double base = y.item();
    if (base != eval())
        fail("grad-check: function under test is not deterministic (two evaluations differ)");
    tape.backward(y);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + step;
            const double fp = eval();
            p.value[i] = orig - step;
            const double fm = eval();
            p.value[i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[pi][i];
            const double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace dger
