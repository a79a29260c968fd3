#include "dnp/adamask.hpp"

#include <algorithm>
#include <cmath>

namespace dnp::adamask {

int CategorySpec::sites_in(int k) const {
    int n = 0;
    for (const auto & b : categories[k]) {
        n += b.end - b.begin;
    }
    return n;
}

void CategorySpec::validate(int n_layers, int d_ff) const {
    require(n_h() >= 2, errc::config, "categories: need N_H >= 2");
    for (const auto & cat : categories) {
        require(!cat.empty(), errc::config, "categories: empty category");
        for (const auto & b : cat) {
            require(b.layer >= 0 && b.layer < n_layers, errc::config,
                    "categories: block layer out of range");
            require(b.begin >= 0 && b.begin < b.end && b.end <= d_ff, errc::config,
                    "categories: block neuron range invalid");
        }
    }
}

CategorySpec CategorySpec::layer_halves(int n_layers, int d_ff) {
    CategorySpec spec;
    const int half = d_ff / 2;
    for (int l = 0; l < n_layers; ++l) {
        spec.categories.push_back({CategoryBlock{l, 0, half}});
        spec.categories.push_back({CategoryBlock{l, half, d_ff}});
    }
    return spec;
}

void MaskConfig::validate() const {
    require(tau_gate > 0.0, errc::config, "mask: tau_gate must be positive");
    require(eps_th > 0.0 && eps_th < 1.0, errc::config, "mask: eps_th must lie in (0,1)");
    require(lambda_sparse >= 0.0 && lambda_l0 >= 0.0, errc::config,
            "mask: penalty weights must be nonnegative");
    require(lr > 0.0, errc::config, "mask: learning rate must be positive");
    require(baseline_decay >= 0.0 && baseline_decay < 1.0, errc::config,
            "mask: baseline decay must lie in [0,1)");
}

MaskParams MaskParams::init(const CategorySpec & spec, const MaskConfig & cfg) {
    cfg.validate();
    MaskParams p;
    p.spec = spec;
    p.cfg = cfg;
    p.theta.resize(spec.n_h());
    for (int k = 0; k < spec.n_h(); ++k) {
        for (const auto & b : spec.categories[k]) {
            p.theta[k].emplace_back(size_t(b.end - b.begin), 0.0);
        }
    }
    return p;
}

std::vector<double> mask_strength(std::span<const double> theta, double tau_gate) {
    require(tau_gate > 0.0, errc::input, "mask_strength: tau_gate must be positive");
    std::vector<double> m(theta.size());
    for (size_t i = 0; i < theta.size(); ++i) {
        m[i] = sigmoid(theta[i] / tau_gate);
    }
    return m;
}

std::vector<std::vector<double>> category_strengths(const MaskParams & p, int k) {
    require(k >= 0 && k < p.spec.n_h(), errc::input, "category index out of range");
    std::vector<std::vector<double>> out;
    for (const auto & th : p.theta[k]) {
        out.push_back(mask_strength(th, p.cfg.tau_gate));
    }
    return out;
}

std::vector<double> operational_mask(std::span<const double> m,
                                     std::span<const double> attr_norm) {
    require(m.size() == attr_norm.size(), errc::input, "operational_mask: shape mismatch");
    std::vector<double> out(m.size());
    for (size_t i = 0; i < m.size(); ++i) {
        out[i] = m[i] * attr_norm[i];
    }
    return out;
}

GateSample sample_gates(const MaskParams & p, int k, Rng & rng) {
    require(k >= 0 && k < p.spec.n_h(), errc::input, "sample_gates: category out of range");
    GateSample s;
    for (const auto & th : p.theta[k]) {
        const auto m = mask_strength(th, p.cfg.tau_gate);
        std::vector<uint8_t> b(m.size());
        for (size_t i = 0; i < m.size(); ++i) {
            b[i] = rng.uniform() < m[i] ? 1 : 0;
            s.logp += b[i] ? std::log(m[i]) : std::log(1.0 - m[i]);
        }
        s.gates.push_back(std::move(b));
    }
    return s;
}

MaskLossBreakdown mask_loss(double r_total_ep, const MaskParams & p) {
    MaskLossBreakdown b;
    b.neg_reward = -r_total_ep;
    const double th_shift = logit(p.cfg.eps_th);
    for (const auto & cat : p.theta) {
        for (const auto & th : cat) {
            for (double t : th) {
                b.l1_raw += sigmoid(t / p.cfg.tau_gate);
                b.l0_raw += sigmoid(t / p.cfg.tau_gate - th_shift);
            }
        }
    }
    b.l1 = p.cfg.lambda_sparse * b.l1_raw;
    b.l0 = p.cfg.lambda_l0 * b.l0_raw;
    b.total = b.neg_reward + b.l1 + b.l0;
    return b;
}

void update_mask(MaskParams & p, const std::vector<GateRecord> & records, double r_total_ep) {
    require(!records.empty(), errc::input, "update_mask: no gate records");
    const double adv = r_total_ep - p.reward_baseline;
    const double tau = p.cfg.tau_gate;
    const double th_shift = logit(p.cfg.eps_th);

    // accumulate the REINFORCE term per touched θ entry
    std::vector<std::vector<std::vector<double>>> grad(p.theta.size());
    std::vector<bool> touched(p.theta.size(), false);
    for (const auto & rec : records) {
        require(rec.category >= 0 && rec.category < p.spec.n_h(), errc::input,
                "update_mask: record category out of range");
        auto & g = grad[rec.category];
        auto & th_cat = p.theta[rec.category];
        require(rec.gates.size() == th_cat.size(), errc::input,
                "update_mask: gate record block count mismatch");
        if (g.empty()) {
            g.resize(th_cat.size());
            for (size_t blk = 0; blk < th_cat.size(); ++blk) {
                g[blk].assign(th_cat[blk].size(), 0.0);
            }
        }
        touched[rec.category] = true;
        for (size_t blk = 0; blk < th_cat.size(); ++blk) {
            require(rec.gates[blk].size() == th_cat[blk].size(), errc::input,
                    "update_mask: gate record shape mismatch");
            for (size_t i = 0; i < th_cat[blk].size(); ++i) {
                const double m = sigmoid(th_cat[blk][i] / tau);
                // d log p(b|M) / dθ = (b − M)/τ
                g[blk][i] += -adv * (double(rec.gates[blk][i]) - m) / tau;
            }
        }
    }
    // penalty gradients once per touched category, then the step
    for (size_t k = 0; k < p.theta.size(); ++k) {
        if (!touched[k]) {
            continue;
        }
        for (size_t blk = 0; blk < p.theta[k].size(); ++blk) {
            for (size_t i = 0; i < p.theta[k][blk].size(); ++i) {
                double & th = p.theta[k][blk][i];
                const double m = sigmoid(th / tau);
                const double u = sigmoid(th / tau - th_shift);
                const double pen = p.cfg.lambda_sparse * m * (1.0 - m) / tau +
                                   p.cfg.lambda_l0 * u * (1.0 - u) / tau;
                th -= p.cfg.lr * (grad[k][blk][i] + pen);
            }
        }
    }
    p.reward_baseline =
        p.cfg.baseline_decay * p.reward_baseline + (1.0 - p.cfg.baseline_decay) * r_total_ep;
}

std::vector<std::vector<double>> scatter_dense(
    const CategorySpec & spec, int k, const std::vector<std::vector<double>> & per_block,
    int n_layers, int d_ff) {
    require(k >= 0 && k < spec.n_h(), errc::input, "scatter_dense: category out of range");
    require(per_block.size() == spec.categories[k].size(), errc::input,
            "scatter_dense: block count mismatch");
    std::vector<std::vector<double>> dense(n_layers, std::vector<double>(d_ff, 0.0));
    for (size_t blk = 0; blk < per_block.size(); ++blk) {
        const auto & b = spec.categories[k][blk];
        require(int(per_block[blk].size()) == b.end - b.begin, errc::input,
                "scatter_dense: block length mismatch");
        for (int i = b.begin; i < b.end; ++i) {
            dense[b.layer][i] = std::max(dense[b.layer][i], per_block[blk][i - b.begin]);
        }
    }
    return dense;
}

double l1_norm(const MaskParams & p) {
    double acc = 0.0;
    for (const auto & cat : p.theta) {
        for (const auto & th : cat) {
            for (double t : th) {
                acc += sigmoid(t / p.cfg.tau_gate);
            }
        }
    }
    return acc;
}

}  // namespace dnp::adamask
