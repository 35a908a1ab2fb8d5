#pragma once

// Central-difference gradient verification. The function under test is
// re-evaluated with perturbed leaf entries and compared against the tape
// gradient; the error metric per coordinate is
//     |analytic - numeric| / max(1, |analytic|, |numeric|).
// Run it on a TensorT<double> instantiation for tight tolerances; float
// forwards limit what central differences can resolve.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cect/tensor.hpp"

namespace cect {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords_checked = 0;
};

// f() must rebuild its graph from the given leaves on every call and return a
// scalar. max_coords_per_tensor == 0 checks every coordinate; otherwise a
// random subset per leaf is sampled from rng.
template <typename S, typename F>
GradCheckReport grad_check(F&& f, std::vector<std::pair<std::string, TensorT<S>>> leaves,
                           double eps = 1e-5, std::size_t max_coords_per_tensor = 0,
                           Rng* rng = nullptr) {
    if (eps < 1e-5 || eps > 1e-2)
        throw ContractError("grad_check: eps must lie in [1e-5, 1e-2], got " + std::to_string(eps));
    if (leaves.empty()) throw ContractError("grad_check: no leaves given");

    for (auto& [name, t] : leaves) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    TensorT<S> y = f();
    if (y.size() != 1)
        throw ContractError("grad_check: function output must be scalar, got shape " +
                            shape_str(y.shape()));
    backward(y);

    GradCheckReport report;
    for (auto& [name, t] : leaves) {
        std::vector<S> analytic(static_cast<std::size_t>(t.size()), S(0));
        if (t.has_grad()) analytic = t.grad();

        std::vector<std::int64_t> coords;
        if (max_coords_per_tensor == 0 || static_cast<std::size_t>(t.size()) <= max_coords_per_tensor) {
            coords.resize(static_cast<std::size_t>(t.size()));
            for (std::int64_t i = 0; i < t.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            if (!rng) throw ContractError("grad_check: sampled coordinates need an rng");
            for (std::size_t k = 0; k < max_coords_per_tensor; ++k)
                coords.push_back(static_cast<std::int64_t>(rng->uniform_int(static_cast<std::uint64_t>(t.size()))));
        }

        for (std::int64_t i : coords) {
            const S saved = t.data()[i];
            double fp, fm;
            {
                autograd::NoGradGuard ng;
                t.data()[i] = saved + static_cast<S>(eps);
                fp = static_cast<double>(f().item());
                t.data()[i] = saved - static_cast<S>(eps);
                fm = static_cast<double>(f().item());
                t.data()[i] = saved;
            }
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            const double rel = std::abs(a - numeric) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_tensor = name;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

} // namespace cect
