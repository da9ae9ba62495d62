#pragma once

#include <functional>
#include <span>

#include "filora/params.hpp"
#include "filora/tensor.hpp"

namespace filora {

struct FiniteDiffOptions {
    double epsilon = 1e-5;
    /// Number of randomly sampled coordinates; 0 checks every coordinate.
    std::size_t max_probes = 0;
    std::uint64_t seed = 0;
    /// Relative error denominator is max(|analytic|, |numeric|, rel_floor).
    /// The floor keeps near-zero gradient components, whose central
    /// differences are pure f64 cancellation noise, from dominating the
    /// report; it sits well below any gradient magnitude that matters here.
    double rel_floor = 1e-6;
};

struct FiniteDiffReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t probes = 0;
};

/// Central-difference gradient verification: compares analytic gradients
/// against (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) on sampled coordinates
/// and returns the worst relative error. loss_fn must re-evaluate the loss
/// from the current parameter values; analytic_grads must return one tensor
/// per parameter, in order, with matching shapes.
FiniteDiffReport finite_difference_check(std::span<const NamedParam> params,
                                         const std::function<double()>& loss_fn,
                                         const std::function<std::vector<Tensor>()>& analytic_grads,
                                         const FiniteDiffOptions& opt = {});

}  // namespace filora
