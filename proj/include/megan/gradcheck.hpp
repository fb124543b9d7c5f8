#ifndef MEGAN_GRADCHECK_HPP
#define MEGAN_GRADCHECK_HPP

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "megan/tensor.hpp"

namespace megan {

/// Result of one finite-difference run against an analytic backward.
struct GradReport {
    std::string op_name;
    double max_rel_error = 0.0;
    std::vector<std::pair<std::string, double>> per_input_errors;
    bool passed = false;
};

/// A differentiable operation packaged for checking. `forward` maps the
/// input list (data inputs and parameters alike) to a tensor; the checker
/// reduces it by summation. `grad_sum` returns the analytic gradient of
/// sum(forward(inputs)) with respect to every input, in order.
struct CheckableOp {
    std::string name;
    std::vector<std::string> input_names;
    std::function<Tensor(const std::vector<Tensor>&)> forward;
    std::function<std::vector<Tensor>(const std::vector<Tensor>&)> grad_sum;
};

/// Central differences (f(x+h)-f(x-h))/(2h) on every element of every input;
/// rel_error = |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
GradReport grad_check(const CheckableOp& op, const std::vector<Tensor>& inputs,
                      double h, double tol);

// Registered suite covering every differentiable operation in the library.
// Each entry builds its own random small-shape inputs from the seed.
struct RegisteredCheck {
    std::string name;
    std::function<GradReport(uint64_t seed, double h, double tol)> run;
};

const std::vector<RegisteredCheck>& registered_checks();
const RegisteredCheck* find_check(const std::string& name);

}  // namespace megan

#endif
