#include "dnp/env.hpp"

#include <algorithm>
#include <cmath>

namespace dnp::env {

void RewardWeights::validate() const {
    require(w_h >= 0.0 && w_r >= 0.0 && w_f >= 0.0, errc::config,
            "reward: weights must be nonnegative");
    require(w_h + w_r + w_f > 0.0, errc::config, "reward: weights must not all be zero");
    require(beta_exp >= 0.0, errc::config, "reward: exploration bonus must be nonnegative");
}

void EpisodeConfig::validate() const {
    require(t_max >= 1, errc::config, "episode: t_max must be >= 1");
    require(!magnitudes.empty(), errc::config, "episode: magnitude table empty");
    for (size_t i = 0; i < magnitudes.size(); ++i) {
        require(magnitudes[i] > 0.0, errc::config, "episode: magnitudes must be positive");
        require(i == 0 || magnitudes[i] > magnitudes[i - 1], errc::config,
                "episode: magnitudes must be strictly increasing");
    }
}

EnvState make_state(std::span<const double> emb, const ScoresTriple & baseline,
                    const ScoresTriple & best, double steps_norm) {
    EnvState s;
    s.v.assign(emb.begin(), emb.end());
    s.v.insert(s.v.end(), {baseline.h, baseline.r, baseline.f, best.h, best.r, best.f,
                           steps_norm});
    return s;
}

RewardResult compute_reward(const ScoresTriple & baseline, const ScoresTriple & current,
                            const ScoresTriple & best,
                            const std::set<std::pair<int, int>> & history, int a_h, int a_type,
                            const RewardWeights & w) {
    for (const auto * s : {&baseline, &current, &best}) {
        require(s->h >= 0.0 && s->h <= 1.0 && s->r >= 0.0 && s->r <= 1.0 && s->f >= 0.0 &&
                    s->f <= 1.0,
                errc::input, "reward: scores must lie in [0,1]");
    }
    RewardResult out;
    const bool novel = history.find({a_h, a_type}) == history.end();
    out.bonus = novel && current.h >= best.h;
    out.r_exp = out.bonus ? w.beta_exp : 0.0;
    const double dh = baseline.h - current.h;
    const double dr = current.r - baseline.r;
    const double df = current.f - baseline.f;
    out.r = w.w_h * dh + w.w_r * dr + w.w_f * df + out.r_exp;
    return out;
}

tinylm::Intervention apply_perturbation(const tinylm::ActivationTrace & trace,
                                        const adamask::CategorySpec & spec, int k, int type,
                                        double magnitude,
                                        const std::vector<std::vector<double>> & m_op,
                                        uint64_t rng_seed) {
    require(k >= 0 && k < spec.n_h(), errc::input, "apply_perturbation: category out of range");
    require(type >= 0 && type <= 2, errc::input, "apply_perturbation: unknown perturbation type");
    require(magnitude > 0.0, errc::input, "apply_perturbation: magnitude must be positive");
    const int n_layers = int(trace.ffn_hidden.size());
    require(int(m_op.size()) == n_layers, errc::input, "apply_perturbation: m_op layer mismatch");

    tinylm::Intervention iv;
    iv.type = tinylm::PerturbType(type);
    iv.magnitude = magnitude;
    iv.rng_seed = rng_seed;
    iv.sigma = trace.sigma;
    iv.strength.assign(n_layers, {});
    for (const auto & b : spec.categories[k]) {
        auto & layer = iv.strength[b.layer];
        if (layer.empty()) {
            layer.assign(trace.ffn_hidden[b.layer].size(), 0.0);
        }
        for (int i = b.begin; i < b.end; ++i) {
            layer[i] = std::clamp(m_op[b.layer][i], 0.0, 1.0);
        }
    }
    return iv;
}

// ---------------------------------------------------------------------------
// PerturbEnv
// ---------------------------------------------------------------------------

PerturbEnv::PerturbEnv(const tinylm::Weights & w, std::vector<taskgen::BadCase> cases,
                       const judge::JudgeConfig & jc, adamask::CategorySpec spec,
                       const RewardWeights & rw, const EpisodeConfig & ec, int ig_steps,
                       MaskFn mask_fn)
    : w_(w),
      cases_(std::move(cases)),
      jc_(jc),
      spec_(std::move(spec)),
      rw_(rw),
      ec_(ec),
      ig_steps_(ig_steps),
      mask_fn_(std::move(mask_fn)) {
    require(!cases_.empty(), errc::config, "env: empty case list");
    require(ig_steps_ >= 1, errc::config, "env: ig_steps must be >= 1");
    rw_.validate();
    ec_.validate();
    jc_.validate();
    spec_.validate(w_.cfg.n_layers, w_.cfg.d_ff);
    require(bool(mask_fn_), errc::config, "env: mask function not set");
}

const taskgen::BadCase & PerturbEnv::current_case() const {
    require(case_index_ >= 0, errc::state, "env: no active episode");
    return cases_[case_index_];
}

const PerturbEnv::CaseCache & PerturbEnv::cache_for(int case_index) {
    auto it = cache_.find(case_index);
    if (it != cache_.end()) {
        return it->second;
    }
    const auto & c = cases_[case_index];
    CaseCache cc;
    cc.baseline_output = tinylm::generate_greedy(c.prompt, max_generate_, w_, nullptr,
                                                 taskgen::VocabLayout::eos);
    require(!cc.baseline_output.empty(), errc::state, "env: model generated nothing");
    cc.baseline = judge::judge_output(c, cc.baseline_output, w_, jc_);
    cc.trace = tinylm::forward(c.prompt, w_).trace;
    // attribution target: the model's own (wrong) baseline prediction
    auto attr = attribution::integrated_gradients(w_, c.prompt, cc.baseline_output[0], ig_steps_);
    cc.attr_norm = attribution::normalize_attr(attr);
    cc.emb = tinylm::embed_input(c.prompt, w_);
    return cache_.emplace(case_index, std::move(cc)).first->second;
}

EnvState PerturbEnv::reset(uint64_t episode_seed, int episode_index) {
    case_index_ = episode_index % int(cases_.size());
    const auto & cc = cache_for(case_index_);
    episode_seed_ = episode_seed;
    t_ = 0;
    done_ = false;
    baseline_ = cc.baseline;
    best_ = cc.baseline;
    trace_ = cc.trace;
    attr_norm_ = cc.attr_norm;
    emb_ = cc.emb;
    history_.clear();
    return make_state(emb_, baseline_, best_, 0.0);
}

StepOut PerturbEnv::step(const HierAction & a) {
    require(!done_, errc::state, "env: step on a finished episode");
    require(a.category >= 0 && a.category < spec_.n_h(), errc::input, "env: category out of range");
    require(a.type >= 0 && a.type <= 2, errc::input, "env: type out of range");
    require(a.mag >= 0 && a.mag < ec_.n_m(), errc::input, "env: magnitude index out of range");
    const auto & c = cases_[case_index_];

    const uint64_t step_seed = hash_combine(episode_seed_, uint64_t(t_));
    const auto m_op = mask_fn_(a.category, attr_norm_);
    const auto iv = apply_perturbation(trace_, spec_, a.category, a.type,
                                       ec_.magnitudes[a.mag], m_op, step_seed);

    StepOut out;
    out.info.output = tinylm::generate_greedy(c.prompt, max_generate_, w_, &iv,
                                              taskgen::VocabLayout::eos);
    require(!out.info.output.empty(), errc::state, "env: perturbed model generated nothing");
    out.info.scores = judge::judge_output(c, out.info.output, w_, jc_);
    out.info.best_pre = best_;
    out.info.t = t_;
    out.info.case_id = c.id;

    const auto rr = compute_reward(baseline_, out.info.scores, best_, history_, a.category,
                                   a.type, rw_);
    out.r = rr.r;
    out.info.r_exp = rr.r_exp;
    out.info.bonus = rr.bonus;

    history_.insert({a.category, a.type});
    best_.h = std::min(best_.h, out.info.scores.h);
    best_.r = std::max(best_.r, out.info.scores.r);
    best_.f = std::max(best_.f, out.info.scores.f);

    t_ += 1;
    done_ = t_ >= ec_.t_max || out.info.scores.h <= ec_.early_stop_h;
    out.done = done_;
    out.state = make_state(emb_, baseline_, best_, double(t_) / ec_.t_max);
    return out;
}

// ---------------------------------------------------------------------------
// PlantedEnv
// ---------------------------------------------------------------------------

PlantedEnv::PlantedEnv(uint64_t instance_seed, int n_h, const RewardWeights & rw,
                       const EpisodeConfig & ec, int emb_dim)
    : n_h_(n_h), rw_(rw), ec_(ec), emb_dim_(emb_dim) {
    require(n_h_ >= 2, errc::config, "planted: need at least 2 categories");
    require(emb_dim_ >= 1, errc::config, "planted: emb_dim must be >= 1");
    rw_.validate();
    ec_.validate();
    // the synthesized hallucination score 1 - f/w_h must stay in [0,1]
    require(rw_.w_h >= 1.0, errc::config, "planted: requires w_h >= 1");
    Rng rng(hash_combine(instance_seed, 0x91a7ed));
    k_star_ = rng.uniform_int(n_h_);
    t_star_ = rng.uniform_int(3);
    m_star_ = rng.uniform_int(ec_.n_m());
    emb_.resize(emb_dim_);
    for (auto & v : emb_) {
        v = rng.normal();
    }
    baseline_ = ScoresTriple{1.0, 1.0, 1.0};
}

double PlantedEnv::analytic_reward(int category, int type, int mag) const {
    if (category != k_star_ || type != t_star_) {
        return 0.0;
    }
    return std::pow(2.0, -std::abs(mag - m_star_));
}

EnvState PlantedEnv::reset(uint64_t, int) {
    t_ = 0;
    done_ = false;
    best_ = baseline_;
    history_.clear();
    return make_state(emb_, baseline_, best_, 0.0);
}

StepOut PlantedEnv::step(const HierAction & a) {
    require(!done_, errc::state, "planted: step on a finished episode");
    require(a.category >= 0 && a.category < n_h_, errc::input, "planted: category out of range");
    require(a.type >= 0 && a.type <= 2, errc::input, "planted: type out of range");
    require(a.mag >= 0 && a.mag < ec_.n_m(), errc::input, "planted: magnitude out of range");

    StepOut out;
    const double base = analytic_reward(a.category, a.type, a.mag);
    out.info.scores = ScoresTriple{1.0 - base / rw_.w_h, 1.0, 1.0};
    out.info.best_pre = best_;
    out.info.t = t_;

    const auto rr = compute_reward(baseline_, out.info.scores, best_, history_, a.category,
                                   a.type, rw_);
    out.r = rr.r;
    out.info.r_exp = rr.r_exp;
    out.info.bonus = rr.bonus;

    history_.insert({a.category, a.type});
    best_.h = std::min(best_.h, out.info.scores.h);

    t_ += 1;
    done_ = t_ >= ec_.t_max || out.info.scores.h <= ec_.early_stop_h;
    out.done = done_;
    out.state = make_state(emb_, baseline_, best_, double(t_) / ec_.t_max);
    return out;
}

}  // namespace dnp::env
