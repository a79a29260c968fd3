#include "dnp/harness.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace dnp;

namespace {

void write_text(const std::string & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(bool(out), errc::io, "cannot write: " + path);
    out << text;
}

harness::Stage1Artifacts load_artifacts(const config::RunConfig & cfg) {
    require(fs::exists(cfg.out_dir + "/weights.bin"), errc::io,
            "no stage-1 artifacts in " + cfg.out_dir + " (run `dnp stage1` first)");
    return harness::load_stage1(cfg, cfg.out_dir);
}

std::pair<io::AgentCheckpoint, adamask::MaskParams> load_checkpoints(
    const config::RunConfig & cfg) {
    require(fs::exists(cfg.out_dir + "/agent.bin"), errc::io,
            "no agent checkpoint in " + cfg.out_dir + " (run `dnp stage2` first)");
    return {io::load_agent(cfg.out_dir + "/agent.bin"),
            io::load_mask(cfg.out_dir + "/mask.bin")};
}

}  // namespace

int main(int argc, char ** argv) {
    CLI::App app{"dnp: dynamic neuron perturbation laboratory"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool planted = false;
    bool deterministic_eval = true;
    int eval_steps = 0;
    app.add_option("--config", config_path, "run configuration file (dnp-config-v1)");
    auto * seed_opt = app.add_option("--seed", seed, "override seeds.global");
    auto * out_opt = app.add_option("--out", out_dir, "override run.out_dir");
    app.add_flag("--planted", planted, "switch the environment backend to the planted mode");
    app.add_flag("--deterministic-eval", deterministic_eval,
                 "argmax policy actions at evaluation (always on; accepted for interface "
                 "stability)");
    auto * steps_opt =
        app.add_option("--eval-steps", eval_steps, "intervention attempts per case at eval");

    auto * cmd_stage1 = app.add_subcommand("stage1", "train the toy model and mine bad cases");
    auto * cmd_stage2 =
        app.add_subcommand("stage2", "co-train the hierarchical agent and the adaptive mask");
    bool resume = false;
    cmd_stage2->add_flag("--resume", resume, "continue from the checkpoints in the output dir");
    auto * cmd_eval = app.add_subcommand("eval", "evaluate checkpoints on a case split");
    bool zero_mask = false;
    std::string split = "eval";
    cmd_eval->add_flag("--zero-mask", zero_mask,
                       "force all mask strengths to 0 (identity intervention check)");
    cmd_eval->add_option("--split", split, "case split: eval | train | pool")
        ->check(CLI::IsMember({"eval", "train", "pool"}));
    auto * cmd_ablate = app.add_subcommand("ablate", "run the four-variant ablation grid");
    auto * cmd_baseline =
        app.add_subcommand("baseline", "static steering-vector comparator sweep");
    auto * cmd_bench = app.add_subcommand("bench", "time decision / mask / forward phases");
    auto * cmd_sweep = app.add_subcommand("sweep", "correction rate vs top-n mask sites");
    std::vector<int> counts;
    cmd_sweep->add_option("--counts", counts, "neuron counts (default: powers of two)")
        ->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        config::RunConfig cfg =
            config_path.empty() ? config::RunConfig{} : config::load_config(config_path);
        if (seed_opt->count() > 0) {
            cfg.seed = seed;
        }
        if (out_opt->count() > 0) {
            cfg.out_dir = out_dir;
        }
        if (planted) {
            cfg.mode = "planted";
        }
        if (steps_opt->count() > 0) {
            cfg.eval_steps = eval_steps;
        }
        cfg.validate();

        if (cmd_stage1->parsed()) {
            auto art = harness::run_stage1(cfg);
            harness::save_stage1(cfg.out_dir, cfg, art);
            std::cout << "stage1: loss " << art.train_report.final_loss << ", accuracy "
                      << art.train_report.final_accuracy << ", pool " << art.pool.size()
                      << " (train " << art.train_cases.size() << " / eval "
                      << art.eval_cases.size() << ") -> " << cfg.out_dir << "\n";
        } else if (cmd_stage2->parsed()) {
            harness::Stage1Artifacts art;
            const bool need_art = cfg.mode != "planted";
            if (need_art) {
                art = load_artifacts(cfg);
            }
            harness::Stage2Options so;
            so.resume = resume;
            const auto res =
                harness::run_stage2(cfg, cfg.out_dir, need_art ? &art : nullptr, so);
            std::cout << "stage2: " << res.updates_done << " updates, mean episode reward "
                      << res.last_mean_episode_reward << " -> " << res.metrics_path << "\n";
        } else if (cmd_eval->parsed()) {
            const auto art = load_artifacts(cfg);
            auto [agent, mask] = load_checkpoints(cfg);
            const auto & cases = split == "eval"    ? art.eval_cases
                                 : split == "train" ? art.train_cases
                                                    : art.pool;
            harness::EvalOptions eo;
            eo.steps = cfg.eval_steps;
            eo.force_zero_mask = zero_mask;
            const auto rep = harness::evaluate(cfg, art, agent.params, mask, cases, eo);
            write_text(cfg.out_dir + "/eval.txt", harness::eval_report_text(rep));
            std::cout << "eval(" << split << "): correction " << rep.correction_rate << ", mc "
                      << rep.mc_accuracy << " (before " << rep.mc_accuracy_before << ") over "
                      << rep.n_cases << " cases -> " << cfg.out_dir << "/eval.txt\n";
        } else if (cmd_ablate->parsed()) {
            const auto art = load_artifacts(cfg);
            const auto rep = harness::ablate(cfg, art);
            const std::string table = harness::ablate_table_text(rep);
            write_text(cfg.out_dir + "/ablate.csv", table);
            std::cout << table;
        } else if (cmd_baseline->parsed()) {
            const auto art = load_artifacts(cfg);
            const auto rep = harness::static_vector_baseline(cfg, art);
            const std::string table = harness::baseline_table_text(rep);
            write_text(cfg.out_dir + "/baseline.csv", table);
            std::cout << table;
        } else if (cmd_bench->parsed()) {
            const auto art = load_artifacts(cfg);
            auto [agent, mask] = load_checkpoints(cfg);
            const auto rep = harness::bench_timing(cfg, art, agent.params, mask);
            const std::string table = harness::bench_table_text(rep);
            write_text(cfg.out_dir + "/bench.csv", table);
            std::cout << table;
        } else if (cmd_sweep->parsed()) {
            const auto art = load_artifacts(cfg);
            auto [agent, mask] = load_checkpoints(cfg);
            if (counts.empty()) {
                const auto spec = cfg.categories();
                int min_sites = spec.sites_in(0);
                for (int k = 1; k < spec.n_h(); ++k) {
                    min_sites = std::min(min_sites, spec.sites_in(k));
                }
                for (int n = 0; n <= min_sites; n = n == 0 ? 1 : n * 2) {
                    counts.push_back(n);
                }
                if (counts.back() != min_sites) {
                    counts.push_back(min_sites);
                }
            }
            const auto rep = harness::sweep_neuron_count(cfg, art, agent.params, mask, counts);
            const std::string table = harness::sweep_table_text(rep);
            write_text(cfg.out_dir + "/sweep.csv", table);
            std::cout << table;
        }
        return 0;
    } catch (const error & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
