#include "dnp/harness.hpp"

#include "dnp/attribution.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <tuple>

namespace fs = std::filesystem;

namespace dnp::harness {

namespace {

constexpr const char * kArtifactVersion = "1.0.0";

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::string read_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    require(bool(in), errc::io, "cannot open: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const std::string & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(bool(out), errc::io, "cannot write: " + path);
    out << text;
    require(bool(out), errc::io, "write failed: " + path);
}

double mean_of(const std::vector<double> & v) {
    return v.empty() ? 0.0 : mean(v);
}

// ---------------------------------------------------------------------------
// metrics file: one step row per environment step plus one summary row per
// update. Strictly deterministic (wall-times go to the timings sidecar).
// ---------------------------------------------------------------------------

constexpr const char * kMetricsHeader =
    "row,update,episode,step,case,a_h,a_type,a_mag,score_h,score_r,score_f,reward,bonus,"
    "loss_pi_h,loss_v_h,entropy_h,loss_pi_l,loss_v_l,entropy_l,"
    "mask_neg_reward,mask_l1,mask_l0,mask_total,mask_l1_norm,episodes,mean_episode_reward";

class MetricsWriter {
  public:
    MetricsWriter(const std::string & path, bool append) {
        const bool fresh = !append || !fs::exists(path);
        os_.open(path, std::ios::binary | (fresh ? std::ios::trunc : std::ios::app));
        require(bool(os_), errc::io, "cannot open metrics file: " + path);
        if (fresh) {
            os_ << "format=dnp-metrics-v1\n" << kMetricsHeader << "\n";
        }
    }

    void step_row(int update, int episode, const env::HierAction & a, const env::StepOut & so) {
        os_ << "step," << update << ',' << episode << ',' << so.info.t << ','
            << so.info.case_id << ',' << a.category << ',' << a.type << ',' << a.mag << ','
            << fmt(so.info.scores.h) << ',' << fmt(so.info.scores.r) << ','
            << fmt(so.info.scores.f) << ',' << fmt(so.r) << ',' << (so.info.bonus ? 1 : 0)
            << ",,,,,,,,,,,,,\n";
    }

    void update_row(int update, const hppo::UpdateReport & h, const hppo::UpdateReport & l,
                    const adamask::MaskLossBreakdown & mb, double mask_l1_norm, int episodes,
                    double mean_ep_reward) {
        os_ << "update," << update << ",,,,,,,,,,,," << fmt(h.l_clip) << ',' << fmt(h.l_value)
            << ',' << fmt(h.entropy) << ',' << fmt(l.l_clip) << ',' << fmt(l.l_value) << ','
            << fmt(l.entropy) << ',' << fmt(mb.neg_reward) << ',' << fmt(mb.l1) << ','
            << fmt(mb.l0) << ',' << fmt(mb.total) << ',' << fmt(mask_l1_norm) << ','
            << episodes << ',' << fmt(mean_ep_reward) << "\n";
    }

    void flush() { os_.flush(); }

  private:
    std::ofstream os_;
};

// metrics row counting would break if an env step escaped the wrapper, so the
// whole loop talks to the environment through this shim
class RecordingEnv final : public env::EnvBase {
  public:
    RecordingEnv(env::EnvBase & inner,
                 std::function<void(int, const env::HierAction &, const env::StepOut &)> on_step)
        : inner_(inner), on_step_(std::move(on_step)) {}

    env::EnvState reset(uint64_t episode_seed, int episode_index) override {
        episode_ = episode_index;
        return inner_.reset(episode_seed, episode_index);
    }
    env::StepOut step(const env::HierAction & a) override {
        auto so = inner_.step(a);
        on_step_(episode_, a, so);
        return so;
    }
    bool done() const override { return inner_.done(); }
    int state_dim() const override { return inner_.state_dim(); }
    int n_categories() const override { return inner_.n_categories(); }
    int n_magnitudes() const override { return inner_.n_magnitudes(); }
    const judge::ScoresTriple & baseline_scores() const override {
        return inner_.baseline_scores();
    }

  private:
    env::EnvBase & inner_;
    std::function<void(int, const env::HierAction &, const env::StepOut &)> on_step_;
    int episode_ = -1;
};

std::array<uint64_t, 4> rng_words(const Rng & rng) {
    std::array<uint64_t, 4> a{};
    auto s = rng.state();
    std::copy(s.begin(), s.end(), a.begin());
    return a;
}

// strengths = per-site values of category k modulated by the normalized
// attribution, scattered onto the dense per-layer map
std::vector<std::vector<double>> modulate_category(
    const adamask::CategorySpec & spec, int k, std::vector<std::vector<double>> per_block,
    const std::vector<std::vector<double>> & attr_norm, int n_layers, int d_ff) {
    const auto & blocks = spec.categories[size_t(k)];
    for (size_t b = 0; b < blocks.size(); ++b) {
        const auto & blk = blocks[b];
        for (int i = 0; i < blk.end - blk.begin; ++i) {
            per_block[b][size_t(i)] *= attr_norm[size_t(blk.layer)][size_t(blk.begin + i)];
        }
    }
    return adamask::scatter_dense(spec, k, per_block, n_layers, d_ff);
}

void keep_top_n(std::vector<std::vector<double>> & m, int n) {
    std::vector<std::tuple<double, int, int>> entries;  // (-strength, layer, site)
    for (size_t l = 0; l < m.size(); ++l) {
        for (size_t i = 0; i < m[l].size(); ++i) {
            if (m[l][i] > 0.0) {
                entries.emplace_back(-m[l][i], int(l), int(i));
            }
        }
    }
    if (int(entries.size()) <= n) {
        return;
    }
    std::sort(entries.begin(), entries.end());
    for (size_t e = size_t(n); e < entries.size(); ++e) {
        m[size_t(std::get<1>(entries[e]))][size_t(std::get<2>(entries[e]))] = 0.0;
    }
}

}  // namespace

judge::JudgeConfig judge_for(const config::RunConfig & cfg, const taskgen::FactWorld & world) {
    judge::JudgeConfig jc = judge::JudgeConfig::for_world(world);
    jc.partial_credit = cfg.judge_partial_credit;
    jc.fluency_slope = cfg.judge_fluency_slope;
    jc.fluency_intercept = cfg.judge_fluency_intercept;
    jc.validate();
    return jc;
}

// ---------------------------------------------------------------------------
// stage 1
// ---------------------------------------------------------------------------

Stage1Artifacts run_stage1(const config::RunConfig & cfg) {
    cfg.validate();
    Stage1Artifacts art;
    art.world = taskgen::generate_fact_world(cfg.world);
    const auto corpus = taskgen::emit_corpus(art.world);
    art.weights = tinylm::train_tiny_lm(corpus, cfg.model, cfg.train, &art.train_report);
    art.pool = taskgen::make_bad_cases(art.weights, art.world, cfg.options_per_case);
    require(art.pool.size() >= 10, errc::config,
            "bad-case pool too small (" + std::to_string(art.pool.size()) +
                " < 10): raise world.corruption_rate or reduce train.steps");
    // the split is keyed off the world seed so every run over the same world
    // (including all ablation variants and policy seeds) sees the same cases
    auto parts = taskgen::split_cases(art.pool, 1.0 - cfg.holdout_frac,
                                      hash_combine(cfg.world.seed, 0x5b117u));
    art.train_cases = std::move(parts.first);
    art.eval_cases = std::move(parts.second);
    return art;
}

void save_stage1(const std::string & dir, const config::RunConfig & cfg, Stage1Artifacts & art) {
    fs::create_directories(dir);
    io::save_weights(dir + "/weights.bin", art.weights);
    write_file(dir + "/world.txt", taskgen::world_to_text(art.world));
    write_file(dir + "/cases_pool.txt", taskgen::cases_to_text(art.pool));
    write_file(dir + "/cases_train.txt", taskgen::cases_to_text(art.train_cases));
    write_file(dir + "/cases_eval.txt", taskgen::cases_to_text(art.eval_cases));
    std::ostringstream rep;
    rep << "format=dnp-train-v1\n";
    rep << "final_loss=" << fmt(art.train_report.final_loss) << "\n";
    rep << "final_accuracy=" << fmt(art.train_report.final_accuracy) << "\n";
    for (size_t i = 0; i < art.train_report.checkpoint_losses.size(); ++i) {
        rep << "checkpoint_loss," << i << ',' << fmt(art.train_report.checkpoint_losses[i])
            << "\n";
    }
    write_file(dir + "/train_report.txt", rep.str());
    config::save_config(dir + "/config.txt", cfg);
    write_manifest(dir + "/manifest.json", cfg);
}

Stage1Artifacts load_stage1(const config::RunConfig & cfg, const std::string & dir) {
    Stage1Artifacts art;
    art.weights = io::load_weights(dir + "/weights.bin");
    const auto & mc = art.weights.cfg;
    require(mc.vocab_size == cfg.model.vocab_size && mc.context_len == cfg.model.context_len &&
                mc.n_layers == cfg.model.n_layers && mc.d_model == cfg.model.d_model &&
                mc.n_heads == cfg.model.n_heads && mc.d_ff == cfg.model.d_ff,
            errc::io, "stage-1 weights disagree with the model config");
    art.world = taskgen::world_from_text(read_file(dir + "/world.txt"));
    require(art.world.cfg.n_subjects == cfg.world.n_subjects &&
                art.world.cfg.n_relations == cfg.world.n_relations &&
                art.world.cfg.n_answers == cfg.world.n_answers &&
                art.world.cfg.seed == cfg.world.seed,
            errc::io, "stage-1 world disagrees with the world config");
    art.pool = taskgen::cases_from_text(read_file(dir + "/cases_pool.txt"));
    art.train_cases = taskgen::cases_from_text(read_file(dir + "/cases_train.txt"));
    art.eval_cases = taskgen::cases_from_text(read_file(dir + "/cases_eval.txt"));
    return art;
}

// ---------------------------------------------------------------------------
// stage 2
// ---------------------------------------------------------------------------

Stage2Result run_stage2(const config::RunConfig & cfg, const std::string & dir,
                        const Stage1Artifacts * art, const Stage2Options & opts) {
    cfg.validate();
    const bool planted = cfg.mode == "planted";
    require(planted || art != nullptr, errc::config,
            "stage2 needs stage-1 artifacts in tinylm mode");
    fs::create_directories(dir);

    const std::string cfg_path = dir + "/config.txt";
    if (opts.resume) {
        require(fs::exists(cfg_path), errc::io, "resume: no config in " + dir);
        require(read_file(cfg_path) == config::config_to_text(cfg), errc::config,
                "resume: config disagrees with the checkpointed run");
    } else {
        config::save_config(cfg_path, cfg);
        write_manifest(dir + "/manifest.json", cfg);
    }

    const uint64_t s2 = cfg.stage2_seed();
    const adamask::CategorySpec spec = cfg.categories();
    const int n_layers = cfg.model.n_layers;
    const int d_ff = cfg.model.d_ff;
    const bool train_mask = !planted && !opts.random_mask;

    // independent named rng streams so variants stay comparable
    Rng collect_rng(hash_combine(s2, 0xc011ec7u));
    Rng update_rng_h(hash_combine(s2, 0x0bda7e1u));
    Rng update_rng_l(hash_combine(s2, 0x0bda7e2u));
    Rng gate_rng(hash_combine(s2, 0x6a7e5u));
    Rng maskrand_rng(hash_combine(s2, 0x3a5c4a4du));

    adamask::MaskParams mp = adamask::MaskParams::init(spec, cfg.mask);
    std::vector<adamask::GateRecord> cur_records;
    std::vector<std::pair<std::vector<adamask::GateRecord>, double>> episode_batches;

    env::MaskFn mask_fn;
    if (opts.random_mask) {
        mask_fn = [&](int k, const std::vector<std::vector<double>> &) {
            std::vector<std::vector<double>> per_block;
            for (const auto & blk : spec.categories[size_t(k)]) {
                std::vector<double> s(size_t(blk.end - blk.begin));
                for (auto & x : s) {
                    x = maskrand_rng.uniform();
                }
                per_block.push_back(std::move(s));
            }
            return adamask::scatter_dense(spec, k, per_block, n_layers, d_ff);
        };
    } else {
        mask_fn = [&](int k, const std::vector<std::vector<double>> & attr_norm) {
            auto gs = adamask::sample_gates(mp, k, gate_rng);
            std::vector<std::vector<double>> per_block;
            for (const auto & block : gs.gates) {
                std::vector<double> s(block.size());
                for (size_t i = 0; i < block.size(); ++i) {
                    s[i] = block[i] != 0 ? 1.0 : 0.0;
                }
                per_block.push_back(std::move(s));
            }
            cur_records.push_back({k, gs.gates});
            return modulate_category(spec, k, std::move(per_block), attr_norm, n_layers, d_ff);
        };
    }

    std::unique_ptr<env::EnvBase> environment;
    if (planted) {
        environment = std::make_unique<env::PlantedEnv>(s2, cfg.planted_n_h, cfg.reward,
                                                        cfg.episode, cfg.planted_emb_dim);
    } else {
        environment = std::make_unique<env::PerturbEnv>(
            art->weights, art->train_cases, judge_for(cfg, art->world), spec, cfg.reward,
            cfg.episode, cfg.ig_steps, mask_fn);
    }

    hppo::PolicyParams params = hppo::PolicyParams::init(
        environment->state_dim(), environment->n_categories(), environment->n_magnitudes(),
        cfg.ppo, s2);
    hppo::Adam opt_h, opt_l;
    int64_t update_index = 0;
    int episode_index = 0;

    if (opts.resume) {
        auto ck = io::load_agent(dir + "/agent.bin");
        require(ck.params.state_dim == params.state_dim && ck.params.n_h == params.n_h &&
                    ck.params.n_m == params.n_m,
                errc::io, "resume: agent checkpoint disagrees with the environment");
        params = std::move(ck.params);
        opt_h = std::move(ck.opt_high);
        opt_l = std::move(ck.opt_low);
        update_index = ck.update_index;
        episode_index = int(ck.episode_index);
        collect_rng.set_state(ck.rng("collect"));
        update_rng_h.set_state(ck.rng("update_h"));
        update_rng_l.set_state(ck.rng("update_l"));
        gate_rng.set_state(ck.rng("gate"));
        maskrand_rng.set_state(ck.rng("maskrand"));
        mp = io::load_mask(dir + "/mask.bin");
    }

    MetricsWriter metrics(dir + "/metrics.csv", opts.resume);
    std::ofstream timings(dir + "/timings.csv",
                          std::ios::binary | (opts.resume ? std::ios::app : std::ios::trunc));
    require(bool(timings), errc::io, "cannot open timings file");
    if (!opts.resume) {
        timings << "format=dnp-timings-v1\nupdate,collect_ms,ppo_ms,mask_ms\n";
    }

    RecordingEnv recenv(*environment,
                        [&](int episode, const env::HierAction & a, const env::StepOut & so) {
                            metrics.step_row(int(update_index), episode, a, so);
                        });

    const auto episode_seed = [&](int idx) {
        return hash_combine(s2, hash_combine(0xe915u, uint64_t(idx)));
    };
    const auto on_episode_end = [&](double ep_r) {
        episode_batches.emplace_back(std::move(cur_records), ep_r);
        cur_records.clear();
    };

    auto save_state = [&]() {
        io::AgentCheckpoint ck;
        ck.cfg = cfg.ppo;
        ck.params = params;
        ck.opt_high = opt_h;
        ck.opt_low = opt_l;
        ck.update_index = update_index;
        ck.episode_index = episode_index;
        ck.rng_states = {{"collect", rng_words(collect_rng)},
                         {"update_h", rng_words(update_rng_h)},
                         {"update_l", rng_words(update_rng_l)},
                         {"gate", rng_words(gate_rng)},
                         {"maskrand", rng_words(maskrand_rng)}};
        io::save_agent(dir + "/agent.bin", ck);
        io::save_mask(dir + "/mask.bin", mp);
        metrics.flush();
        return ck;
    };

    using clock = std::chrono::steady_clock;
    double mean_ep_reward = 0.0;
    try {
        while (update_index < cfg.stage2_updates) {
            const auto t0 = clock::now();
            auto ro = hppo::collect_rollouts(recenv, params, cfg.ppo.horizon, collect_rng,
                                             episode_seed, episode_index, on_episode_end);
            mean_ep_reward = ro.reward_sum / double(ro.episodes);
            const auto t1 = clock::now();

            hppo::UpdateReport rep_h, rep_l;
            if (!opts.random_action) {
                rep_h = hppo::ppo_update(ro.high, params, opt_h, cfg.ppo, hppo::Level::high,
                                         update_rng_h);
                rep_l = hppo::ppo_update(ro.low, params, opt_l, cfg.ppo, hppo::Level::low,
                                         update_rng_l);
            }
            const auto t2 = clock::now();

            if (train_mask) {
                for (auto & [records, ep_r] : episode_batches) {
                    adamask::update_mask(mp, records, ep_r);
                }
            }
            episode_batches.clear();
            const auto t3 = clock::now();

            const auto mb = adamask::mask_loss(mean_ep_reward, mp);
            metrics.update_row(int(update_index), rep_h, rep_l, mb, adamask::l1_norm(mp),
                               ro.episodes, mean_ep_reward);
            update_index += 1;
            if (update_index % cfg.checkpoint_every == 0 && update_index < cfg.stage2_updates) {
                save_state();
            }

            const auto ms = [](clock::time_point a, clock::time_point b) {
                return std::chrono::duration<double, std::milli>(b - a).count();
            };
            timings << (update_index - 1) << ',' << ms(t0, t1) << ',' << ms(t1, t2) << ','
                    << ms(t2, t3) << "\n";
        }
    } catch (const error & e) {
        if (e.kind() == errc::numeric) {
            // leave the last periodic checkpoint untouched and mark the abort
            write_file(dir + "/ABORTED.txt", std::string("format=dnp-abort-v1\nreason=") +
                                                 e.what() + "\nlast_update=" +
                                                 std::to_string(update_index) + "\n");
        }
        throw;
    }

    Stage2Result res;
    res.agent = save_state();
    res.mask = mp;
    res.updates_done = int(update_index);
    res.last_mean_episode_reward = mean_ep_reward;
    res.metrics_path = dir + "/metrics.csv";
    return res;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalReport evaluate(const config::RunConfig & cfg, const Stage1Artifacts & art,
                    const hppo::PolicyParams & policy, const adamask::MaskParams & mask,
                    const std::vector<taskgen::BadCase> & cases, const EvalOptions & opts) {
    require(opts.steps >= 1, errc::config, "evaluate: steps must be >= 1");
    require(!cases.empty(), errc::input, "evaluate: no cases");
    const auto & w = art.weights;
    const auto jc = judge_for(cfg, art.world);
    const adamask::CategorySpec spec = cfg.categories();
    const int n_layers = w.cfg.n_layers;
    const int d_ff = w.cfg.d_ff;
    const int eos = art.world.vocab.eos;
    const uint64_t es = cfg.eval_seed();

    EvalReport rep;
    double sum_bh = 0, sum_br = 0, sum_bf = 0, sum_ah = 0, sum_ar = 0, sum_af = 0;

    for (const auto & c : cases) {
        const auto base_out = tinylm::generate_greedy(c.prompt, 2, w, nullptr, eos);
        const auto before = judge::judge_output(c, base_out, w, jc);
        const auto fw = tinylm::forward(c.prompt, w);
        const auto emb = tinylm::embed_input(c.prompt, w);
        std::vector<std::vector<double>> attr_norm;
        if (!opts.force_zero_mask && !opts.random_mask) {
            attr_norm = attribution::normalize_attr(
                attribution::integrated_gradients(w, c.prompt, base_out[0], cfg.ig_steps));
        }

        Rng eval_rng(hash_combine(es, hash_combine(0xeba1u, uint64_t(c.id))));
        judge::ScoresTriple best = before;
        judge::ScoresTriple after = before;
        tinylm::Intervention last_iv;
        std::vector<int> last_out = base_out;
        int a_h = -1, a_type = -1, a_mag = -1;

        for (int t = 0; t < opts.steps; ++t) {
            const auto state =
                env::make_state(emb, before, best, double(t) / double(cfg.episode.t_max));
            if (opts.random_action) {
                a_h = eval_rng.uniform_int(spec.n_h());
                a_type = eval_rng.uniform_int(3);
                a_mag = eval_rng.uniform_int(cfg.episode.n_m());
            } else {
                const auto ah = hppo::act_high(state.v, policy, nullptr);
                const auto al = hppo::act_low(state.v, ah.a, policy, nullptr);
                a_h = ah.a;
                a_type = al.type;
                a_mag = al.mag;
            }

            std::vector<std::vector<double>> m_op;
            if (opts.force_zero_mask) {
                m_op.assign(size_t(n_layers), std::vector<double>(size_t(d_ff), 0.0));
            } else if (opts.random_mask) {
                std::vector<std::vector<double>> per_block;
                for (const auto & blk : spec.categories[size_t(a_h)]) {
                    std::vector<double> s(size_t(blk.end - blk.begin));
                    for (auto & x : s) {
                        x = eval_rng.uniform();
                    }
                    per_block.push_back(std::move(s));
                }
                m_op = adamask::scatter_dense(spec, a_h, per_block, n_layers, d_ff);
            } else {
                m_op = modulate_category(spec, a_h, adamask::category_strengths(mask, a_h),
                                         attr_norm, n_layers, d_ff);
            }
            if (opts.top_n >= 0) {
                keep_top_n(m_op, opts.top_n);
            }

            const auto iv = env::apply_perturbation(
                fw.trace, spec, a_h, a_type, cfg.episode.magnitudes[size_t(a_mag)], m_op,
                hash_combine(hash_combine(es, uint64_t(c.id)), 0x1000u + uint64_t(t)));
            last_out = tinylm::generate_greedy(c.prompt, 2, w, &iv, eos);
            after = judge::judge_output(c, last_out, w, jc);
            last_iv = iv;
            best.h = std::min(best.h, after.h);
            best.r = std::max(best.r, after.r);
            best.f = std::max(best.f, after.f);
            if (after.h <= cfg.episode.early_stop_h) {
                break;
            }
        }

        EvalCaseRow row;
        row.case_id = c.id;
        row.a_h = a_h;
        row.a_type = a_type;
        row.a_mag = a_mag;
        row.before = before;
        row.after = after;
        row.corrected = !last_out.empty() && last_out[0] == c.gold;
        row.mc_correct_before = judge::judge_mc(c, fw.logits).correct;
        const auto fin = tinylm::forward_with_intervention(c.prompt, w, last_iv);
        row.mc_correct = judge::judge_mc(c, fin.logits).correct;
        rep.rows.push_back(row);

        sum_bh += before.h;
        sum_br += before.r;
        sum_bf += before.f;
        sum_ah += after.h;
        sum_ar += after.r;
        sum_af += after.f;
        rep.correction_rate += row.corrected ? 1.0 : 0.0;
        rep.mc_accuracy += row.mc_correct ? 1.0 : 0.0;
        rep.mc_accuracy_before += row.mc_correct_before ? 1.0 : 0.0;
    }

    const double n = double(cases.size());
    rep.n_cases = int(cases.size());
    rep.correction_rate /= n;
    rep.mc_accuracy /= n;
    rep.mc_accuracy_before /= n;
    rep.mean_before = {sum_bh / n, sum_br / n, sum_bf / n};
    rep.mean_after = {sum_ah / n, sum_ar / n, sum_af / n};
    return rep;
}

std::string eval_report_text(const EvalReport & r) {
    std::ostringstream os;
    os << "format=dnp-eval-v1\n";
    os << "cases=" << r.n_cases << "\n";
    os << "correction_rate=" << fmt(r.correction_rate) << "\n";
    os << "mc_accuracy=" << fmt(r.mc_accuracy) << "\n";
    os << "mc_accuracy_before=" << fmt(r.mc_accuracy_before) << "\n";
    os << "mean_before=" << fmt(r.mean_before.h) << ',' << fmt(r.mean_before.r) << ','
       << fmt(r.mean_before.f) << "\n";
    os << "mean_after=" << fmt(r.mean_after.h) << ',' << fmt(r.mean_after.r) << ','
       << fmt(r.mean_after.f) << "\n";
    os << "case,a_h,a_type,a_mag,h_before,r_before,f_before,h_after,r_after,f_after,"
          "corrected,mc,mc_before\n";
    for (const auto & row : r.rows) {
        os << row.case_id << ',' << row.a_h << ',' << row.a_type << ',' << row.a_mag << ','
           << fmt(row.before.h) << ',' << fmt(row.before.r) << ',' << fmt(row.before.f) << ','
           << fmt(row.after.h) << ',' << fmt(row.after.r) << ',' << fmt(row.after.f) << ','
           << int(row.corrected) << ',' << int(row.mc_correct) << ','
           << int(row.mc_correct_before) << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

AblateReport ablate(const config::RunConfig & cfg, const Stage1Artifacts & art) {
    struct Variant {
        const char * name;
        bool random_mask;
        bool random_action;
    };
    const Variant variants[] = {{"full", false, false},
                                {"random_mask", true, false},
                                {"random_action", false, true},
                                {"random_both", true, true}};
    AblateReport rep;
    for (const auto & v : variants) {
        AblateRow row;
        row.variant = v.name;
        for (int i = 0; i < cfg.ablate_seeds; ++i) {
            config::RunConfig c2 = cfg;
            c2.seed = cfg.seed + uint64_t(i);
            c2.seed_stage1 = c2.seed_stage2 = c2.seed_eval = 0;
            const std::string dir = cfg.out_dir + "/ablate/" + v.name + "/seed" +
                                    std::to_string(i);
            Stage2Options so;
            so.random_mask = v.random_mask;
            so.random_action = v.random_action;
            const auto res = run_stage2(c2, dir, &art, so);
            EvalOptions eo;
            eo.steps = cfg.eval_steps;
            eo.random_mask = v.random_mask;
            eo.random_action = v.random_action;
            const auto er = evaluate(c2, art, res.agent.params, res.mask, art.eval_cases, eo);
            row.correction.push_back(er.correction_rate);
            row.mc_accuracy.push_back(er.mc_accuracy);
        }
        row.corr_mean = mean_of(row.correction);
        row.corr_std = stddev(row.correction);
        row.mc_mean = mean_of(row.mc_accuracy);
        row.mc_std = stddev(row.mc_accuracy);
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

std::string ablate_table_text(const AblateReport & r) {
    std::ostringstream os;
    os << "format=dnp-ablate-v1\n";
    os << "variant,seeds,correction_mean,correction_std,mc_mean,mc_std,"
          "correction_per_seed,mc_per_seed\n";
    for (const auto & row : r.rows) {
        os << row.variant << ',' << row.correction.size() << ',' << fmt(row.corr_mean) << ','
           << fmt(row.corr_std) << ',' << fmt(row.mc_mean) << ',' << fmt(row.mc_std) << ',';
        for (size_t i = 0; i < row.correction.size(); ++i) {
            os << (i != 0 ? ";" : "") << fmt(row.correction[i]);
        }
        os << ',';
        for (size_t i = 0; i < row.mc_accuracy.size(); ++i) {
            os << (i != 0 ? ";" : "") << fmt(row.mc_accuracy[i]);
        }
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// static steering-vector comparator
// ---------------------------------------------------------------------------

BaselineReport static_vector_baseline(const config::RunConfig & cfg,
                                      const Stage1Artifacts & art) {
    cfg.validate();
    const auto & w = art.weights;
    const int n_layers = w.cfg.n_layers;
    const int d_ff = w.cfg.d_ff;
    const int eos = art.world.vocab.eos;
    require(!art.pool.empty(), errc::config, "static baseline: empty bad-case pool");

    // correct prompts: greedy answer equals gold
    std::vector<std::vector<int>> correct;
    for (int s = 0; s < art.world.cfg.n_subjects; ++s) {
        for (int rel = 0; rel < art.world.cfg.n_relations; ++rel) {
            auto prompt = art.world.prompt_at(s, rel);
            const auto out = tinylm::generate_greedy(prompt, 1, w, nullptr, eos);
            if (!out.empty() && out[0] == art.world.gold_at(s, rel)) {
                correct.push_back(std::move(prompt));
            }
        }
    }
    require(!correct.empty(), errc::config,
            "static baseline: no correctly answered prompts; lower world.corruption_rate "
            "or train longer");
    Rng rng(hash_combine(cfg.world.seed, 0x57ee12u));
    for (int i = int(correct.size()) - 1; i > 0; --i) {
        std::swap(correct[size_t(i)], correct[size_t(rng.uniform_int(i + 1))]);
    }
    if (correct.size() > art.pool.size()) {
        correct.resize(art.pool.size());
    }

    auto mean_trace = [&](auto get_prompt, size_t count) {
        std::vector<std::vector<double>> m(size_t(n_layers),
                                           std::vector<double>(size_t(d_ff), 0.0));
        for (size_t i = 0; i < count; ++i) {
            const auto fw = tinylm::forward(get_prompt(i), w);
            for (int l = 0; l < n_layers; ++l) {
                for (int j = 0; j < d_ff; ++j) {
                    m[size_t(l)][size_t(j)] +=
                        fw.trace.ffn_hidden[size_t(l)][size_t(j)] / double(count);
                }
            }
        }
        return m;
    };
    const auto mean_correct = mean_trace(
        [&](size_t i) -> std::span<const int> { return correct[i]; }, correct.size());
    const auto mean_bad = mean_trace(
        [&](size_t i) -> std::span<const int> { return art.pool[i].prompt; }, art.pool.size());

    std::vector<std::vector<double>> steer(size_t(n_layers),
                                           std::vector<double>(size_t(d_ff), 0.0));
    for (int l = 0; l < n_layers; ++l) {
        for (int j = 0; j < d_ff; ++j) {
            steer[size_t(l)][size_t(j)] = mean_correct[size_t(l)][size_t(j)] -
                                          mean_bad[size_t(l)][size_t(j)];
        }
    }

    BaselineReport rep;
    rep.n_correct_pool = int(correct.size());
    rep.n_bad_pool = int(art.pool.size());
    bool first = true;
    for (double coef : cfg.baseline_grid) {
        tinylm::Intervention iv;
        iv.type = tinylm::PerturbType::add_vector;
        iv.magnitude = 1.0;
        iv.strength.assign(size_t(n_layers), std::vector<double>(size_t(d_ff), 1.0));
        iv.add = steer;
        for (auto & layer : iv.add) {
            for (auto & x : layer) {
                x *= coef;
            }
        }
        int hits = 0;
        for (const auto & c : art.eval_cases) {
            const auto out = tinylm::generate_greedy(c.prompt, 2, w, &iv, eos);
            hits += (!out.empty() && out[0] == c.gold) ? 1 : 0;
        }
        const double rate = double(hits) / double(art.eval_cases.size());
        rep.rows.emplace_back(coef, rate);
        if (first || rate > rep.best_rate) {
            rep.best_rate = rate;
            rep.best_coef = coef;
            first = false;
        }
    }
    return rep;
}

std::string baseline_table_text(const BaselineReport & r) {
    std::ostringstream os;
    os << "format=dnp-baseline-v1\n";
    os << "n_correct_pool=" << r.n_correct_pool << "\n";
    os << "n_bad_pool=" << r.n_bad_pool << "\n";
    os << "best_coef=" << fmt(r.best_coef) << "\n";
    os << "best_rate=" << fmt(r.best_rate) << "\n";
    os << "coefficient,correction_rate\n";
    for (const auto & [coef, rate] : r.rows) {
        os << fmt(coef) << ',' << fmt(rate) << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// timing
// ---------------------------------------------------------------------------

BenchReport bench_timing(const config::RunConfig & cfg, const Stage1Artifacts & art,
                         const hppo::PolicyParams & policy, const adamask::MaskParams & mask) {
    const auto & w = art.weights;
    const auto & cases = art.eval_cases.empty() ? art.pool : art.eval_cases;
    require(!cases.empty(), errc::input, "bench: no cases");
    const auto & c = cases.front();
    const auto jc = judge_for(cfg, art.world);
    const adamask::CategorySpec spec = cfg.categories();
    const int eos = art.world.vocab.eos;

    const auto base_out = tinylm::generate_greedy(c.prompt, 2, w, nullptr, eos);
    const auto before = judge::judge_output(c, base_out, w, jc);
    const auto emb = tinylm::embed_input(c.prompt, w);
    const auto state = env::make_state(emb, before, before, 0.0);
    const int target = base_out[0];

    using clock = std::chrono::steady_clock;
    volatile double sink = 0.0;
    auto time_phase = [&](auto && fn) {
        for (int i = 0; i < cfg.bench_warmup; ++i) {
            fn();
        }
        std::vector<double> ms(size_t(cfg.bench_reps));
        for (int i = 0; i < cfg.bench_reps; ++i) {
            const auto t0 = clock::now();
            fn();
            ms[size_t(i)] =
                std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        }
        const double m = mean(ms);
        std::sort(ms.begin(), ms.end());
        const size_t idx = std::min(ms.size() - 1,
                                    size_t(std::ceil(0.95 * double(ms.size()))) - 1);
        return std::pair<double, double>(m, ms[idx]);
    };

    BenchReport rep;
    rep.reps = cfg.bench_reps;

    auto [dm, dp] = time_phase([&] {
        const auto ah = hppo::act_high(state.v, policy, nullptr);
        const auto al = hppo::act_low(state.v, ah.a, policy, nullptr);
        sink = sink + ah.v + al.v;
    });
    rep.decision = {"decision", dm, dp};

    auto [mm, mpct] = time_phase([&] {
        const auto attr = attribution::integrated_gradients(w, c.prompt, target, cfg.ig_steps);
        const auto an = attribution::normalize_attr(attr);
        const auto m_op = modulate_category(spec, 0, adamask::category_strengths(mask, 0), an,
                                            w.cfg.n_layers, w.cfg.d_ff);
        sink = sink + m_op[0][0];
    });
    rep.mask = {"mask", mm, mpct};

    auto [fm, fp] = time_phase([&] {
        const auto out = tinylm::generate_greedy(c.prompt, 2, w, nullptr, eos);
        sink = sink + (out.empty() ? 0.0 : double(out[0]));
    });
    rep.forward = {"forward", fm, fp};

    rep.decision_over_forward = rep.decision.mean_ms / rep.forward.mean_ms;
    rep.mask_over_forward = rep.mask.mean_ms / rep.forward.mean_ms;
    return rep;
}

std::string bench_table_text(const BenchReport & r) {
    std::ostringstream os;
    os << "format=dnp-bench-v1\n";
    os << "reps=" << r.reps << "\n";
    os << "phase,mean_ms,p95_ms\n";
    for (const auto * p : {&r.decision, &r.mask, &r.forward}) {
        os << p->name << ',' << fmt(p->mean_ms) << ',' << fmt(p->p95_ms) << "\n";
    }
    os << "decision_over_forward=" << fmt(r.decision_over_forward) << "\n";
    os << "mask_over_forward=" << fmt(r.mask_over_forward) << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// neuron-count sweep
// ---------------------------------------------------------------------------

SweepReport sweep_neuron_count(const config::RunConfig & cfg, const Stage1Artifacts & art,
                               const hppo::PolicyParams & policy,
                               const adamask::MaskParams & mask,
                               const std::vector<int> & counts) {
    const adamask::CategorySpec spec = cfg.categories();
    int min_sites = spec.sites_in(0);
    for (int k = 1; k < spec.n_h(); ++k) {
        min_sites = std::min(min_sites, spec.sites_in(k));
    }
    SweepReport rep;
    EvalOptions eo;
    eo.steps = cfg.eval_steps;
    rep.unrestricted_rate =
        evaluate(cfg, art, policy, mask, art.eval_cases, eo).correction_rate;
    for (int n : counts) {
        require(n >= 0 && n <= min_sites, errc::config,
                "sweep: count " + std::to_string(n) + " exceeds the sites per category (" +
                    std::to_string(min_sites) + ")");
        eo.top_n = n;
        const auto er = evaluate(cfg, art, policy, mask, art.eval_cases, eo);
        rep.rows.push_back({n, er.correction_rate});
    }
    return rep;
}

std::string sweep_table_text(const SweepReport & r) {
    std::ostringstream os;
    os << "format=dnp-sweep-v1\n";
    os << "unrestricted_rate=" << fmt(r.unrestricted_rate) << "\n";
    os << "n,correction_rate\n";
    for (const auto & row : r.rows) {
        os << row.n << ',' << fmt(row.rate) << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

void write_manifest(const std::string & path, const config::RunConfig & cfg) {
    nlohmann::ordered_json j;
    j["format"] = "dnp-manifest-v1";
    j["artifact_version"] = kArtifactVersion;
    std::ostringstream hash;
    hash << "0x" << std::hex << config::config_hash(cfg);
    j["config_hash"] = hash.str();
    j["mode"] = cfg.mode;
    j["seeds"] = {{"global", cfg.seed},
                  {"stage1", cfg.stage1_seed()},
                  {"stage2", cfg.stage2_seed()},
                  {"eval", cfg.eval_seed()}};
    j["formats"] = {{"config", "dnp-config-v1"},   {"metrics", "dnp-metrics-v1"},
                    {"timings", "dnp-timings-v1"}, {"world", "dnp-world-v1"},
                    {"cases", "dnp-cases-v1"},     {"weights", "DNPLMWTS.1"},
                    {"agent", "DNPAGENT.1"},       {"mask", "DNPAMASK.1"}};
    j["compiler"] = __VERSION__;
    write_file(path, j.dump(2) + "\n");
}

}  // namespace dnp::harness
