#include "megan/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>

namespace megan {

GradReport grad_check(const CheckableOp& op, const std::vector<Tensor>& inputs,
                      double h, double tol) {
    if (h <= 0.0) throw ValueError("grad_check: step must be positive");
    GradReport report;
    report.op_name = op.name;

    std::vector<Tensor> analytic = op.grad_sum(inputs);
    if (analytic.size() != inputs.size())
        throw ShapeError("grad_check: " + op.name + " returned " +
                         std::to_string(analytic.size()) + " gradients for " +
                         std::to_string(inputs.size()) + " inputs");

    std::vector<Tensor> work = inputs;
    for (size_t i = 0; i < inputs.size(); ++i) {
        require_same_shape(analytic[i], inputs[i], "grad_check gradient");
        double worst = 0.0;
        for (size_t k = 0; k < work[i].size(); ++k) {
            const double saved = work[i][k];
            work[i][k] = saved + h;
            const double fp = sum(op.forward(work));
            work[i][k] = saved - h;
            const double fm = sum(op.forward(work));
            work[i][k] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i][k];
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                report.op_name += " (non-finite gradient at " +
                                  (op.input_names.empty() ? std::to_string(i) : op.input_names[i]) +
                                  "[" + std::to_string(k) + "])";
                report.max_rel_error = std::numeric_limits<double>::infinity();
                report.passed = false;
                return report;
            }
            const double rel = std::fabs(a - numeric) /
                               std::max(1e-8, std::fabs(a) + std::fabs(numeric));
            if (rel > tol && std::getenv("MEGAN_GRADCHECK_DEBUG"))
                std::fprintf(stderr, "grad_check %s: %s[%zu] analytic %.6e numeric %.6e rel %.3e\n",
                             op.name.c_str(),
                             i < op.input_names.size() ? op.input_names[i].c_str() : "?", k,
                             a, numeric, rel);
            worst = std::max(worst, rel);
        }
        std::string nm = i < op.input_names.size() ? op.input_names[i] : "input" + std::to_string(i);
        report.per_input_errors.emplace_back(nm, worst);
        report.max_rel_error = std::max(report.max_rel_error, worst);
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

const RegisteredCheck* find_check(const std::string& name) {
    for (const RegisteredCheck& c : registered_checks())
        if (c.name == name) return &c;
    return nullptr;
}

}  // namespace megan
