#pragma once

#include "dnp/config.hpp"
#include "dnp/env.hpp"
#include "dnp/serialize.hpp"

#include <string>
#include <vector>

namespace dnp::harness {

// ---------------------------------------------------------------------------
// Stage 1: pretrain the toy model on the corrupted world and mine the prompts
// it answers incorrectly.
// ---------------------------------------------------------------------------

struct Stage1Artifacts {
    tinylm::Weights weights;
    taskgen::FactWorld world;
    tinylm::TrainReport train_report;
    std::vector<taskgen::BadCase> pool;
    std::vector<taskgen::BadCase> train_cases;
    std::vector<taskgen::BadCase> eval_cases;
};

Stage1Artifacts run_stage1(const config::RunConfig & cfg);
void save_stage1(const std::string & dir, const config::RunConfig & cfg, Stage1Artifacts & art);
Stage1Artifacts load_stage1(const config::RunConfig & cfg, const std::string & dir);

// the judge the pipeline uses for this world (config overrides applied)
judge::JudgeConfig judge_for(const config::RunConfig & cfg, const taskgen::FactWorld & world);

// ---------------------------------------------------------------------------
// Stage 2: alternate collect_rollouts / ppo_update (both levels) /
// update_mask, with per-step metrics, periodic checkpoints, and bit-exact
// resume. A numeric failure aborts and leaves the last-good checkpoint on
// disk.
// ---------------------------------------------------------------------------

struct Stage2Options {
    bool random_mask = false;    // ablation: uniform-random strengths, attribution bypassed,
                                 // mask not trained
    bool random_action = false;  // ablation: uniform action sampling (policy never updated)
    bool resume = false;         // continue from the checkpoints already in dir
};

struct Stage2Result {
    io::AgentCheckpoint agent;
    adamask::MaskParams mask;
    int updates_done = 0;
    double last_mean_episode_reward = 0.0;
    std::string metrics_path;
};

Stage2Result run_stage2(const config::RunConfig & cfg, const std::string & dir,
                        const Stage1Artifacts * art, const Stage2Options & opts = {});

// ---------------------------------------------------------------------------
// evaluation: deterministic policy, one intervention per case (multi-step
// deployments stop early on success)
// ---------------------------------------------------------------------------

struct EvalOptions {
    int steps = 1;                 // intervention attempts per case
    bool force_zero_mask = false;  // all strengths 0: must match baseline bit-exactly
    bool random_mask = false;
    bool random_action = false;
    int top_n = -1;                // keep only the top-n operational-mask sites (-1 = all)
};

struct EvalCaseRow {
    int case_id = -1;
    int a_h = -1, a_type = -1, a_mag = -1;
    judge::ScoresTriple before, after;
    bool corrected = false;          // greedy answer equals gold after the intervention
    bool mc_correct = false;         // judge_mc under the intervention
    bool mc_correct_before = false;  // judge_mc on the unperturbed logits
};

struct EvalReport {
    int n_cases = 0;
    double correction_rate = 0.0;
    double mc_accuracy = 0.0;
    double mc_accuracy_before = 0.0;
    judge::ScoresTriple mean_before, mean_after;
    std::vector<EvalCaseRow> rows;
};

EvalReport evaluate(const config::RunConfig & cfg, const Stage1Artifacts & art,
                    const hppo::PolicyParams & policy, const adamask::MaskParams & mask,
                    const std::vector<taskgen::BadCase> & cases, const EvalOptions & opts = {});
std::string eval_report_text(const EvalReport & r);

// ---------------------------------------------------------------------------
// ablations: Full / Random mask / Random action / Random both, same splits
// and same per-episode seeds for every variant
// ---------------------------------------------------------------------------

struct AblateRow {
    std::string variant;
    std::vector<double> correction;  // per seed
    std::vector<double> mc_accuracy;
    double corr_mean = 0.0, corr_std = 0.0;
    double mc_mean = 0.0, mc_std = 0.0;
};

struct AblateReport {
    std::vector<AblateRow> rows;  // full, random_mask, random_action, random_both
};

AblateReport ablate(const config::RunConfig & cfg, const Stage1Artifacts & art);
std::string ablate_table_text(const AblateReport & r);

// ---------------------------------------------------------------------------
// static steering-vector comparator: per-layer mean FFN activation on correct
// prompts minus mean on bad prompts, added with a swept scalar coefficient
// ---------------------------------------------------------------------------

struct BaselineReport {
    std::vector<std::pair<double, double>> rows;  // (coefficient, correction rate)
    double best_coef = 0.0;
    double best_rate = 0.0;
    int n_correct_pool = 0;
    int n_bad_pool = 0;
};

BaselineReport static_vector_baseline(const config::RunConfig & cfg,
                                      const Stage1Artifacts & art);
std::string baseline_table_text(const BaselineReport & r);

// ---------------------------------------------------------------------------
// timing: agent decision vs operational-mask computation vs model generate
// ---------------------------------------------------------------------------

struct BenchPhase {
    std::string name;
    double mean_ms = 0.0;
    double p95_ms = 0.0;
};

struct BenchReport {
    BenchPhase decision, mask, forward;
    int reps = 0;
    double decision_over_forward = 0.0;  // ratio of means
    double mask_over_forward = 0.0;
};

BenchReport bench_timing(const config::RunConfig & cfg, const Stage1Artifacts & art,
                         const hppo::PolicyParams & policy, const adamask::MaskParams & mask);
std::string bench_table_text(const BenchReport & r);

// ---------------------------------------------------------------------------
// neuron-count sweep: truncate the operational mask to its top-n sites
// ---------------------------------------------------------------------------

struct SweepRow {
    int n = 0;
    double rate = 0.0;
};

struct SweepReport {
    std::vector<SweepRow> rows;
    double unrestricted_rate = 0.0;
};

SweepReport sweep_neuron_count(const config::RunConfig & cfg, const Stage1Artifacts & art,
                               const hppo::PolicyParams & policy,
                               const adamask::MaskParams & mask,
                               const std::vector<int> & counts);
std::string sweep_table_text(const SweepReport & r);

// machine-readable run manifest (config hash, seeds, format versions)
void write_manifest(const std::string & path, const config::RunConfig & cfg);

}  // namespace dnp::harness
