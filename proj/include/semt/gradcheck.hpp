// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "semt/optim.hpp"

namespace semt {

struct GradcheckEntry {
    std::string name;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed() const { return max_rel_error < tolerance; }
};

/// |a - n| / max(1, |a|, |n|)
inline double gradcheck_rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Compares the analytic gradient of a scalar function against central
/// finite differences for every coordinate of every parameter.
///
/// `f` must rebuild its graph from the current parameter values on every
/// call and return a single-element tensor.
inline GradcheckReport finite_diff_gradcheck(const std::function<Tensor()>& f,
                                             std::vector<Parameter> params, double h = 1e-5,
                                             double tol = 1e-5) {
    auto eval = [&] {
        NoGradGuard guard;
        const double v = f().item();
        if (!std::isfinite(v)) throw NumericError("gradcheck: function value is not finite");
        return v;
    };

    for (auto& p : params) p.tensor.zero_grad();
    {
        Tensor out = f();
        if (!std::isfinite(out.item())) throw NumericError("gradcheck: function value is not finite");
        out.backward();
    }

    GradcheckReport report;
    report.tolerance = tol;
    for (auto& p : params) {
        GradcheckEntry entry{p.name, p.tensor.numel(), 0.0};
        std::vector<double> analytic(p.tensor.numel(), 0.0);
        if (p.tensor.has_grad()) {
            auto g = p.tensor.grad();
            analytic.assign(g.begin(), g.end());
        }
        auto w = p.tensor.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            w[i] = orig + h;
            const double plus = eval();
            w[i] = orig - h;
            const double minus = eval();
            w[i] = orig;
            const double numeric = (plus - minus) / (2.0 * h);
            entry.max_rel_error = std::max(entry.max_rel_error, gradcheck_rel_error(analytic[i], numeric));
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

inline GradcheckReport finite_diff_gradcheck(const std::function<Tensor()>& f,
                                             const ParameterRegistry& registry, double h = 1e-5,
                                             double tol = 1e-5) {
    return finite_diff_gradcheck(f, std::vector<Parameter>(registry.begin(), registry.end()), h, tol);
}

} // namespace semt
