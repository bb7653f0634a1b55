#pragma once

#include <functional>
#include <string>

#include "sarfuse/tensor.hpp"

namespace sarfuse {

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    int checked_coords = 0;
    std::string failure;  // set when non-finite values were encountered

    explicit operator bool() const { return pass; }
};

// f(x, grad_out) evaluates a scalar function of x; when grad_out != nullptr it
// must also fill grad_out with the reverse-mode gradient d f / d x.
using ScalarFn = std::function<double(const Tensor&, Tensor* grad_out)>;

// Central-difference check of the reverse-mode gradient on a seeded random
// coordinate subset (at least min_coords, or all coordinates if fewer).
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-3,
                           double tol = 2e-2, int min_coords = 64, uint64_t seed = 0);

} // namespace sarfuse
