#pragma once

#include "dnp/common.hpp"

#include <cstdint>
#include <vector>

namespace dnp::adamask {

// ---------------------------------------------------------------------------
// Learnable sparse mask over neuron categories. Each category is a list of
// (layer, neuron-range) blocks; every block carries its own θ vector. The
// gate sigmoid(θ/τ) gives a per-neuron selection strength in (0,1); the
// operational mask modulates that strength with the input's normalized
// attribution. Training samples Bernoulli gates and follows a REINFORCE
// estimator of the negative-reward term plus differentiable L1/L0 penalties.
// ---------------------------------------------------------------------------

struct CategoryBlock {
    int layer = 0;
    int begin = 0;  // neuron range [begin, end)
    int end = 0;
};

struct CategorySpec {
    std::vector<std::vector<CategoryBlock>> categories;

    int n_h() const { return int(categories.size()); }
    int sites_in(int k) const;
    void validate(int n_layers, int d_ff) const;

    // default layout: two contiguous half-blocks per layer (4 categories on
    // the 2-layer default model)
    static CategorySpec layer_halves(int n_layers, int d_ff);
};

struct MaskConfig {
    double tau_gate = 1.0;
    double eps_th = 0.5;
    double lambda_sparse = 1e-3;
    double lambda_l0 = 1e-3;
    double lr = 0.05;
    double baseline_decay = 0.9;  // EMA decay of the reward baseline

    void validate() const;
};

struct MaskParams {
    CategorySpec spec;
    MaskConfig cfg;
    std::vector<std::vector<std::vector<double>>> theta;  // [category][block][site]
    double reward_baseline = 0.0;

    static MaskParams init(const CategorySpec & spec, const MaskConfig & cfg);
};

// elementwise sigmoid(theta / tau_gate), strictly in (0,1)
std::vector<double> mask_strength(std::span<const double> theta, double tau_gate);

// strengths of every block of category k
std::vector<std::vector<double>> category_strengths(const MaskParams & p, int k);

// M_op = M * attr_norm elementwise; attr_norm must already be in [0,1]
std::vector<double> operational_mask(std::span<const double> m,
                                     std::span<const double> attr_norm);

struct GateSample {
    std::vector<std::vector<uint8_t>> gates;  // [block][site], Bernoulli(M)
    double logp = 0.0;                        // sum of log p(b_i | M_i)
};
GateSample sample_gates(const MaskParams & p, int k, Rng & rng);

struct MaskLossBreakdown {
    double neg_reward = 0.0;  // -R_total_ep
    double l1 = 0.0;          // lambda_sparse * sum of all strengths
    double l0 = 0.0;          // lambda_l0 * differentiable L0 surrogate
    double total = 0.0;
    double l1_raw = 0.0;      // sum of strengths before weighting
    double l0_raw = 0.0;      // surrogate count before weighting
};
MaskLossBreakdown mask_loss(double r_total_ep, const MaskParams & p);

// one episode's gate samples for the category it acted on
struct GateRecord {
    int category = -1;
    std::vector<std::vector<uint8_t>> gates;
};

// single REINFORCE step against the EMA reward baseline; only θ of
// categories appearing in the records moves, then the baseline is updated
void update_mask(MaskParams & p, const std::vector<GateRecord> & records, double r_total_ep);

// scatter per-block site values of category k onto a dense [n_layers][d_ff]
// map (zero elsewhere); overlapping blocks take the maximum
std::vector<std::vector<double>> scatter_dense(
    const CategorySpec & spec, int k, const std::vector<std::vector<double>> & per_block,
    int n_layers, int d_ff);

// sum of all gate strengths across every category and block
double l1_norm(const MaskParams & p);

}  // namespace dnp::adamask
