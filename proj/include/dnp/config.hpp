#pragma once

#include "dnp/adamask.hpp"
#include "dnp/common.hpp"
#include "dnp/env.hpp"
#include "dnp/hppo.hpp"
#include "dnp/taskgen.hpp"
#include "dnp/tinylm.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dnp::config {

// ---------------------------------------------------------------------------
// One flat experiment description. Everything a run touches is seeded from
// here; no wall-clock anywhere. The on-disk form is line-oriented
// `section.key = value` text (see parse_config_text); unknown keys are hard
// errors so typos cannot silently fall back to defaults.
// ---------------------------------------------------------------------------

struct RunConfig {
    // seeds: per-stage seeds of 0 mean "derive from the global seed"
    uint64_t seed = 1;
    uint64_t seed_stage1 = 0;
    uint64_t seed_stage2 = 0;
    uint64_t seed_eval = 0;
    std::string out_dir = "out";
    std::string mode = "tinylm";  // tinylm | planted

    tinylm::ModelConfig model;
    tinylm::TrainConfig train;
    taskgen::WorldConfig world;
    env::RewardWeights reward;
    env::EpisodeConfig episode;
    hppo::PPOConfig ppo;
    adamask::MaskConfig mask;

    int categories_per_layer = 2;  // contiguous FFN blocks per layer
    double judge_partial_credit = 0.5;
    double judge_fluency_slope = 0.0;  // 0 -> 1/ln(vocab)
    double judge_fluency_intercept = 1.0;
    int ig_steps = 16;

    int options_per_case = 4;
    double holdout_frac = 0.25;

    int stage2_updates = 300;
    int checkpoint_every = 25;

    int eval_steps = 1;
    int ablate_seeds = 5;
    std::vector<double> baseline_grid = {-2.0, -1.0, -0.5, -0.25, 0.0,
                                         0.25, 0.5,  1.0,  2.0};
    int bench_reps = 200;
    int bench_warmup = 20;

    int planted_n_h = 4;
    int planted_emb_dim = 16;

    void validate() const;

    // derived pieces
    adamask::CategorySpec categories() const;
    uint64_t stage1_seed() const;
    uint64_t stage2_seed() const;
    uint64_t eval_seed() const;
};

// apply `key = value` lines from text onto defaults; leading field must be
// format = dnp-config-v1
RunConfig parse_config_text(const std::string & text);
RunConfig load_config(const std::string & path);

// canonical dump: every key in fixed order, 17 significant digits; parsing it
// back yields an identical config
std::string config_to_text(const RunConfig & cfg);
void save_config(const std::string & path, const RunConfig & cfg);

// FNV-1a over the canonical dump
uint64_t config_hash(const RunConfig & cfg);

}  // namespace dnp::config
