#include "filora/grad_check.hpp"

#include <cmath>

#include "filora/rng.hpp"

namespace filora {

std::size_t total_param_count(const std::vector<NamedParam>& params) {
    std::size_t n = 0;
    for (const NamedParam& p : params) n += p.tensor->size();
    return n;
}

FiniteDiffReport finite_difference_check(std::span<const NamedParam> params,
                                         const std::function<double()>& loss_fn,
                                         const std::function<std::vector<Tensor>()>& analytic_grads,
                                         const FiniteDiffOptions& opt) {
    if (opt.epsilon <= 0.0) throw ContractError("finite_difference_check: epsilon must be positive");
    std::vector<Tensor> grads = analytic_grads();
    if (grads.size() != params.size()) {
        throw ContractError("finite_difference_check: gradient count does not match parameter count");
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!grads[p].same_shape(*params[p].tensor)) {
            throw ShapeError("finite_difference_check: gradient shape " + shape_str(grads[p].shape()) +
                             " does not match parameter " + params[p].name + " " +
                             shape_str(params[p].tensor->shape()));
        }
    }

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    std::size_t total = 0;
    for (const NamedParam& p : params) total += p.tensor->size();
    if (opt.max_probes == 0 || opt.max_probes >= total) {
        coords.reserve(total);
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t i = 0; i < params[p].tensor->size(); ++i) coords.emplace_back(p, i);
    } else {
        Rng rng(mix_seed(opt.seed, "fd-probes"));
        coords.reserve(opt.max_probes);
        for (std::size_t k = 0; k < opt.max_probes; ++k) {
            std::size_t flat = rng.index(total);
            for (std::size_t p = 0; p < params.size(); ++p) {
                std::size_t n = params[p].tensor->size();
                if (flat < n) {
                    coords.emplace_back(p, flat);
                    break;
                }
                flat -= n;
            }
        }
    }

    FiniteDiffReport report;
    report.probes = coords.size();
    for (auto [p, i] : coords) {
        Tensor& t = *params[p].tensor;
        const double saved = t[i];
        t[i] = saved + opt.epsilon;
        const double fp = loss_fn();
        t[i] = saved - opt.epsilon;
        const double fm = loss_fn();
        t[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_difference_check: non-finite loss at probe of " + params[p].name);
        }
        const double numeric = (fp - fm) / (2.0 * opt.epsilon);
        const double analytic = grads[p][i];
        const double denom = std::max({std::fabs(analytic), std::fabs(numeric), opt.rel_floor});
        const double rel = std::fabs(analytic - numeric) / denom;
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_param = params[p].name;
            report.worst_index = i;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    return report;
}

}  // namespace filora
