#pragma once

// Central finite-difference verification of backward rules. The checker is
// deliberately independent of the tape internals: it only perturbs input
// values and re-runs the forward closure.

#include <functional>
#include <iomanip>
#include <sstream>

#include "uniadapter/tensor.hpp"

namespace uniadapter {

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 1e-6;
    bool pass = true;

    std::string line() const {
        std::ostringstream os;
        os << (pass ? "[ok]   " : "[FAIL] ") << std::left << std::setw(36) << name << " max rel err "
           << std::scientific << std::setprecision(3) << max_rel_err;
        return os.str();
    }
};

// |a - f| / max(1, |a|, |f|): relative where gradients are large, absolute
// near zero so elements with tiny true gradients do not dominate.
inline double grad_rel_err(double analytic, double fd) {
    double denom = std::max({1.0, std::abs(analytic), std::abs(fd)});
    return std::abs(analytic - fd) / denom;
}

// fn must map the given leaf inputs to a scalar loss and be pure in them.
template <typename R>
GradCheckReport grad_check(const std::string& name,
                           const std::function<Tensor<R>(const std::vector<Tensor<R>>&)>& fn,
                           std::vector<Tensor<R>> inputs, double step = 1e-4, double tolerance = 1e-6) {
    GradCheckReport report;
    report.name = name;
    report.tolerance = tolerance;

    for (auto& in : inputs) in.set_requires_grad(true);

    Tape<R> tape;
    {
        AutogradScope<R> scope(tape);
        Tensor<R> loss = fn(inputs);
        tape.backward(loss);
    }
    std::vector<std::vector<R>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs)
        analytic.push_back(in.has_grad() ? in.grad() : std::vector<R>(in.numel(), R(0)));

    auto eval = [&]() -> double {
        Tensor<R> loss = fn(inputs);  // no active tape: pure forward
        return static_cast<double>(loss.item());
    };

    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto& vals = inputs[t].data();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const R saved = vals[i];
            vals[i] = saved + static_cast<R>(step);
            const double up = eval();
            vals[i] = saved - static_cast<R>(step);
            const double down = eval();
            vals[i] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double err = grad_rel_err(static_cast<double>(analytic[t][i]), fd);
            report.max_rel_err = std::max(report.max_rel_err, err);
        }
    }
    report.pass = report.max_rel_err < tolerance;
    return report;
}

}  // namespace uniadapter
