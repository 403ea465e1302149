#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ugt/errors.hpp"
#include "ugt/tensor.hpp"

namespace ugt {

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t num_coords = 0;
    std::size_t worst_tensor = 0;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool passed = true;
};

struct GradCheckOptions {
    double step = 1e-4;
    double tolerance = 1e-4;
    // Denominator floor: |a - n| / max(|a|, |n|, floor). Keeps exactly-zero
    // gradients from turning round-off into huge relative errors.
    double floor = 1e-6;
};

/// Compares backward() against central differences for every coordinate of
/// every tensor in `params`. `f` rebuilds the scalar from the current values.
template <class F>
GradCheckReport grad_check(F&& f, std::vector<Tensor> params, const GradCheckOptions& opt = {}) {
    if (opt.step < 1e-6 || opt.step > 1e-3) {
        throw ContractError("grad_check: step must lie in [1e-6, 1e-3]");
    }
    for (auto& p : params) p.zero_grad();
    Tensor out = f();
    if (out.numel() != 1) {
        throw ContractError("grad_check: function must be scalar-valued, got shape " + shape_str(out.shape()));
    }
    backward(out);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        std::vector<double> g(p.numel(), 0.0);
        for (std::size_t i = 0; i < p.numel(); ++i) g[i] = p.grad_at(i);
        analytic.push_back(std::move(g));
    }

    GradCheckReport report;
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto values = params[t].mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + opt.step;
            const double up = f().item();
            values[i] = saved - opt.step;
            const double down = f().item();
            values[i] = saved;

            const double numeric = (up - down) / (2.0 * opt.step);
            const double a = analytic[t][i];
            const double abs_err = std::abs(a - numeric);
            const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), opt.floor});
            ++report.num_coords;
            report.max_abs_error = std::max(report.max_abs_error, abs_err);
            if (rel_err > report.max_rel_error) {
                report.max_rel_error = rel_err;
                report.worst_tensor = t;
                report.worst_coord = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < opt.tolerance;
    return report;
}

/// Single-input form: `f` maps x to a scalar.
template <class F>
GradCheckReport grad_check(F&& f, Tensor x, double step, double tolerance) {
    GradCheckOptions opt;
    opt.step = step;
    opt.tolerance = tolerance;
    return grad_check([&] { return f(x); }, std::vector<Tensor>{x}, opt);
}

}  // namespace ugt
