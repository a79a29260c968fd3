#pragma once

#include "dnp/tinylm.hpp"

#include <functional>

namespace dnp::attribution {

// ---------------------------------------------------------------------------
// Integrated gradients over the feed-forward hidden activations at the final
// prompt position, all layers jointly. Baseline is the zero activation
// vector; the target function F is the log-probability of a chosen token.
// ---------------------------------------------------------------------------

struct AttributionMap {
    std::vector<std::vector<double>> layers;  // signed, one vector of length d_ff per layer
    int target_token = -1;
    int steps = 0;
    std::string baseline = "zero";
};

// right-point Riemann path integral: attr_i = (a_i - a0_i) * mean_s grad_i at
// a0 + (s/S)(a - a0). grad_fn returns dF/da at the given point. Exposed so
// the linear-oracle property can exercise the integrator in isolation.
std::vector<double> ig_path_integral(
    const std::function<std::vector<double>(const std::vector<double> &)> & grad_fn,
    std::span<const double> a, std::span<const double> a0, int steps);

// IG against the model: clamps every layer's final-position hidden vector to
// the interpolated point and takes dF/d(clamped hidden) by reverse mode
// through the layers above
AttributionMap integrated_gradients(const tinylm::Weights & w, std::span<const int> prompt,
                                    int target_token, int steps);

// F(a) for a given full clamp assignment (used by the completeness check):
// log-prob of target at the final position with all layers clamped
double clamped_target_logprob(const tinylm::Weights & w, std::span<const int> prompt,
                              int target_token,
                              const std::vector<std::vector<double>> & clamp);

// per layer: |attr| / max|attr| when the max exceeds eps_floor, else zeros
std::vector<std::vector<double>> normalize_attr(const AttributionMap & attr,
                                                double eps_floor = 1e-12);

}  // namespace dnp::attribution
