#pragma once

#include <cmath>
#include <functional>

#include "physmv/tensor.hpp"

namespace physmv {

/// Central-difference check of reverse-mode gradients for a deterministic
/// scalar-valued function of one tensor. Returns the maximum over components
/// of |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename Real>
Real gradient_check(const std::function<Tensor<Real>(const Tensor<Real>&)>& f,
                    const Tensor<Real>& x0, Real eps) {
    if (!(eps > Real(0))) throw DomainError("gradient_check: eps must be positive");

    Tensor<Real> x = x0.clone_values();
    x.set_requires_grad(true);
    {
        Tape<Real> tape;
        Tensor<Real> y = f(x);
        if (y.numel() != 1) throw ShapeError("gradient_check: f must be scalar-valued");
        tape.backward(y);
    }
    const auto analytic = x.grad();

    Tensor<Real> probe = x0.clone_values();
    auto pv = probe.values();
    Real worst = Real(0);
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const Real saved = pv[i];
        pv[i] = saved + eps;
        const Real fp = f(probe).item();
        pv[i] = saved - eps;
        const Real fm = f(probe).item();
        pv[i] = saved;
        if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
            throw DomainError("gradient_check: non-finite evaluation near x");
        const Real numeric = (fp - fm) / (Real(2) * eps);
        const Real denom = std::max(Real(1), std::max(std::abs(analytic[i]), std::abs(numeric)));
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace physmv
