#include "dnp/attribution.hpp"

#include <algorithm>
#include <cmath>

namespace dnp::attribution {

std::vector<double> ig_path_integral(
    const std::function<std::vector<double>(const std::vector<double> &)> & grad_fn,
    std::span<const double> a, std::span<const double> a0, int steps) {
    require(steps >= 1, errc::input, "ig: steps must be >= 1");
    require(a.size() == a0.size(), errc::input, "ig: baseline shape mismatch");
    const size_t n = a.size();
    std::vector<double> acc(n, 0.0), point(n);
    for (int s = 1; s <= steps; ++s) {
        const double alpha = double(s) / steps;
        for (size_t i = 0; i < n; ++i) {
            point[i] = a0[i] + alpha * (a[i] - a0[i]);
        }
        const auto g = grad_fn(point);
        require(g.size() == n, errc::input, "ig: grad_fn shape mismatch");
        for (size_t i = 0; i < n; ++i) {
            acc[i] += g[i];
        }
    }
    std::vector<double> attr(n);
    for (size_t i = 0; i < n; ++i) {
        attr[i] = (a[i] - a0[i]) * acc[i] / steps;
    }
    return attr;
}

namespace {

// dF/d(clamped hidden) for F = log p(target | final position), all layers
// clamped to the given vectors
std::vector<std::vector<double>> clamp_grads_at(const tinylm::Weights & w,
                                                std::span<const int> prompt, int target_token,
                                                const std::vector<std::vector<double>> & clamp) {
    auto fwd = tinylm::forward_full(prompt, w, nullptr, &clamp, true);
    const int last = int(prompt.size()) - 1;
    const int V = w.cfg.vocab_size;
    Mat dlogits(int(prompt.size()), V);
    std::vector<double> p(fwd.logits.row(last), fwd.logits.row(last) + V);
    softmax_inplace(p);
    for (int c = 0; c < V; ++c) {
        dlogits(last, c) = -p[c];
    }
    dlogits(last, target_token) += 1.0;
    std::vector<std::vector<double>> grads;
    tinylm::backward_full(fwd, prompt, w, dlogits, nullptr, &grads);
    return grads;
}

}  // namespace

double clamped_target_logprob(const tinylm::Weights & w, std::span<const int> prompt,
                              int target_token,
                              const std::vector<std::vector<double>> & clamp) {
    auto fwd = tinylm::forward_full(prompt, w, nullptr, &clamp);
    const int last = int(prompt.size()) - 1;
    return log_softmax_at({fwd.logits.row(last), size_t(w.cfg.vocab_size)}, target_token);
}

AttributionMap integrated_gradients(const tinylm::Weights & w, std::span<const int> prompt,
                                    int target_token, int steps) {
    require(steps >= 1, errc::input, "ig: steps must be >= 1");
    require(target_token >= 0 && target_token < w.cfg.vocab_size, errc::input,
            "ig: target token out of range");
    const auto & cfg = w.cfg;

    // actual activations a (unperturbed forward), baseline a' = 0
    auto base = tinylm::forward_full(prompt, w);
    const auto & a = base.trace.ffn_hidden;

    AttributionMap out;
    out.target_token = target_token;
    out.steps = steps;
    out.layers.assign(cfg.n_layers, std::vector<double>(cfg.d_ff, 0.0));

    std::vector<std::vector<double>> point(cfg.n_layers, std::vector<double>(cfg.d_ff));
    for (int s = 1; s <= steps; ++s) {
        const double alpha = double(s) / steps;
        for (int l = 0; l < cfg.n_layers; ++l) {
            for (int i = 0; i < cfg.d_ff; ++i) {
                point[l][i] = alpha * a[l][i];
            }
        }
        const auto g = clamp_grads_at(w, prompt, target_token, point);
        for (int l = 0; l < cfg.n_layers; ++l) {
            for (int i = 0; i < cfg.d_ff; ++i) {
                require(std::isfinite(g[l][i]), errc::numeric,
                        "ig: non-finite gradient at layer " + std::to_string(l));
                out.layers[l][i] += g[l][i];
            }
        }
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int i = 0; i < cfg.d_ff; ++i) {
            out.layers[l][i] = a[l][i] * out.layers[l][i] / steps;
        }
    }
    return out;
}

std::vector<std::vector<double>> normalize_attr(const AttributionMap & attr, double eps_floor) {
    std::vector<std::vector<double>> out(attr.layers.size());
    for (size_t l = 0; l < attr.layers.size(); ++l) {
        const auto & v = attr.layers[l];
        double mx = 0.0;
        for (double x : v) {
            mx = std::max(mx, std::abs(x));
        }
        out[l].assign(v.size(), 0.0);
        if (mx > eps_floor) {
            for (size_t i = 0; i < v.size(); ++i) {
                out[l][i] = std::abs(v[i]) / mx;
            }
        }
    }
    return out;
}

}  // namespace dnp::attribution
