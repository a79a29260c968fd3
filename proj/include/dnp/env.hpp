#pragma once

#include "dnp/adamask.hpp"
#include "dnp/attribution.hpp"
#include "dnp/judge.hpp"
#include "dnp/taskgen.hpp"
#include "dnp/tinylm.hpp"

#include <functional>
#include <map>
#include <set>

namespace dnp::env {

using judge::ScoresTriple;

// ---------------------------------------------------------------------------
// Dynamic neuron perturbation environment. Each episode targets one bad
// case; each step is an independent trial from the pristine baseline: build
// an intervention from the chosen (category, type, magnitude) and the
// operational mask, regenerate, score, reward. A planted synthetic backend
// with an analytically known optimum shares the interface.
// ---------------------------------------------------------------------------

struct RewardWeights {
    double w_h = 1.0;
    double w_r = 0.3;
    double w_f = 0.3;
    double beta_exp = 0.05;

    void validate() const;
};

struct EpisodeConfig {
    int t_max = 8;
    double early_stop_h = 0.0;
    std::vector<double> magnitudes = {0.25, 0.5, 1.0, 2.0};

    int n_m() const { return int(magnitudes.size()); }
    void validate() const;
};

struct HierAction {
    int category = 0;  // a_H in [0, N_H)
    int type = 0;      // 0 noise, 1 zero, 2 scale
    int mag = 0;       // index into the magnitude table
};

struct EnvState {
    std::vector<double> v;  // concat(emb, baseline triple, best triple, steps_norm)
};

EnvState make_state(std::span<const double> emb, const ScoresTriple & baseline,
                    const ScoresTriple & best, double steps_norm);

// Eq. 3: R = w_h*(h_b - h_c) + w_r*(r_c - r_b) + w_f*(f_c - f_b) + R_exp,
// with the bonus granted iff (a_H, type) is new this episode and the current
// attempt failed to beat the best hallucination score so far
struct RewardResult {
    double r = 0.0;
    double r_exp = 0.0;
    bool bonus = false;
};
RewardResult compute_reward(const ScoresTriple & baseline, const ScoresTriple & current,
                            const ScoresTriple & best,
                            const std::set<std::pair<int, int>> & history, int a_h, int a_type,
                            const RewardWeights & w);

// builds the Intervention for category k: strengths = m_op restricted to the
// category's sites, sigma from the baseline trace
tinylm::Intervention apply_perturbation(const tinylm::ActivationTrace & trace,
                                        const adamask::CategorySpec & spec, int k, int type,
                                        double magnitude,
                                        const std::vector<std::vector<double>> & m_op,
                                        uint64_t rng_seed);

// per-layer [0,1] strengths for the step, given the chosen category and the
// episode's normalized attribution (dense layout, zero off-category)
using MaskFn = std::function<std::vector<std::vector<double>>(
    int category, const std::vector<std::vector<double>> & attr_norm)>;

struct StepInfo {
    ScoresTriple scores;        // current attempt
    ScoresTriple best_pre;      // best before this step (bonus reference)
    std::vector<int> output;    // generated tokens after the prompt
    double r_exp = 0.0;
    bool bonus = false;
    int t = 0;                  // step index within the episode (0-based)
    int case_id = -1;
};

struct StepOut {
    EnvState state;
    double r = 0.0;
    bool done = false;
    StepInfo info;
};

class EnvBase {
  public:
    virtual ~EnvBase() = default;
    virtual EnvState reset(uint64_t episode_seed, int episode_index) = 0;
    virtual StepOut step(const HierAction & a) = 0;
    virtual bool done() const = 0;
    virtual int state_dim() const = 0;
    virtual int n_categories() const = 0;
    virtual int n_magnitudes() const = 0;
    virtual const ScoresTriple & baseline_scores() const = 0;
};

class PerturbEnv final : public EnvBase {
  public:
    PerturbEnv(const tinylm::Weights & w, std::vector<taskgen::BadCase> cases,
               const judge::JudgeConfig & jc, adamask::CategorySpec spec,
               const RewardWeights & rw, const EpisodeConfig & ec, int ig_steps, MaskFn mask_fn);

    EnvState reset(uint64_t episode_seed, int episode_index) override;
    StepOut step(const HierAction & a) override;
    bool done() const override { return done_; }
    int state_dim() const override { return w_.cfg.d_model + 7; }
    int n_categories() const override { return spec_.n_h(); }
    int n_magnitudes() const override { return ec_.n_m(); }
    const ScoresTriple & baseline_scores() const override { return baseline_; }

    // episode caches, exposed for inspection and the harness sweep
    const tinylm::ActivationTrace & baseline_trace() const { return trace_; }
    const std::vector<std::vector<double>> & attr_norm() const { return attr_norm_; }
    const taskgen::BadCase & current_case() const;
    int max_generate() const { return max_generate_; }

  private:
    struct CaseCache {
        ScoresTriple baseline;
        std::vector<int> baseline_output;
        tinylm::ActivationTrace trace;
        std::vector<std::vector<double>> attr_norm;
        std::vector<double> emb;
    };
    const CaseCache & cache_for(int case_index);

    const tinylm::Weights & w_;
    std::vector<taskgen::BadCase> cases_;
    judge::JudgeConfig jc_;
    adamask::CategorySpec spec_;
    RewardWeights rw_;
    EpisodeConfig ec_;
    int ig_steps_;
    MaskFn mask_fn_;
    int max_generate_ = 2;  // answer token + end marker

    std::map<int, CaseCache> cache_;

    // episode state
    int case_index_ = -1;
    uint64_t episode_seed_ = 0;
    int t_ = 0;
    bool done_ = true;
    ScoresTriple baseline_, best_;
    tinylm::ActivationTrace trace_;
    std::vector<std::vector<double>> attr_norm_;
    std::vector<double> emb_;
    std::set<std::pair<int, int>> history_;
};

// synthetic backend: reward depends only on the action, peaking at a planted
// (category, type, magnitude); scores are synthesized so Eq. 3 still holds
class PlantedEnv final : public EnvBase {
  public:
    PlantedEnv(uint64_t instance_seed, int n_h, const RewardWeights & rw,
               const EpisodeConfig & ec, int emb_dim = 16);

    EnvState reset(uint64_t episode_seed, int episode_index) override;
    StepOut step(const HierAction & a) override;
    bool done() const override { return done_; }
    int state_dim() const override { return emb_dim_ + 7; }
    int n_categories() const override { return n_h_; }
    int n_magnitudes() const override { return ec_.n_m(); }
    const ScoresTriple & baseline_scores() const override { return baseline_; }

    // planted truth, for verification
    int target_category() const { return k_star_; }
    int target_type() const { return t_star_; }
    int target_mag() const { return m_star_; }
    // action-dependent base reward (no bonus): f(mag) = 2^-|mag - m*| on a
    // category/type hit, else 0
    double analytic_reward(int category, int type, int mag) const;

  private:
    int n_h_;
    RewardWeights rw_;
    EpisodeConfig ec_;
    int emb_dim_;
    int k_star_ = 0, t_star_ = 0, m_star_ = 0;
    std::vector<double> emb_;

    int t_ = 0;
    bool done_ = true;
    ScoresTriple baseline_, best_;
    std::set<std::pair<int, int>> history_;
};

}  // namespace dnp::env
