#include "sarfuse/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sarfuse/rng.hpp"

namespace sarfuse {

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double eps,
                           double tol, int min_coords, uint64_t seed) {
    GradCheckReport report;

    Tensor grad(x.shape());
    const double base = f(x, &grad);
    if (!std::isfinite(base)) {
        report.failure = "non-finite function value at base point";
        return report;
    }
    if (!grad.all_finite()) {
        for (int64_t i = 0; i < grad.numel(); ++i)
            if (!std::isfinite(grad[i])) {
                report.failure = "non-finite gradient at coordinate " + std::to_string(i);
                return report;
            }
    }

    std::vector<int64_t> coords(size_t(x.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (int64_t(coords.size()) > min_coords) {
        Rng rng(derive_seed(seed, 0x67726463));
        rng.shuffle(coords);
        coords.resize(size_t(min_coords));
        std::sort(coords.begin(), coords.end());
    }

    // Central differences in float32 carry rounding noise of order
    // ulp(|f|)/(2*eps); coordinates whose gradient sits below that floor
    // cannot be validated at a relative tolerance, so the denominator gets
    // an absolute slack at the noise scale.
    const double noise_floor = 64.0 * 1.19e-7 * std::max(1.0, std::abs(base)) / (2.0 * eps);

    Tensor probe = x;
    double max_rel = 0.0;
    for (int64_t i : coords) {
        const float orig = probe[i];
        probe[i] = float(double(orig) + eps);
        const double hi = f(probe, nullptr);
        probe[i] = float(double(orig) - eps);
        const double lo = f(probe, nullptr);
        probe[i] = orig;
        if (!std::isfinite(hi) || !std::isfinite(lo)) {
            report.failure = "non-finite function value while perturbing coordinate " + std::to_string(i);
            return report;
        }
        const double fd = (hi - lo) / (2.0 * eps);
        const double an = double(grad[i]);
        const double rel = std::abs(an - fd) / (std::max(std::abs(an), std::abs(fd)) + noise_floor);
        max_rel = std::max(max_rel, rel);
    }

    report.checked_coords = int(coords.size());
    report.max_rel_err = max_rel;
    report.pass = max_rel <= tol;
    return report;
}

} // namespace sarfuse
