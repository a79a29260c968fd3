#include "dnp/config.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

namespace dnp::config {

namespace {

constexpr const char * kFormatTag = "dnp-config-v1";

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::string trim(const std::string & s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) {
        return "";
    }
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

long long parse_ll(const std::string & v, const std::string & key) {
    size_t pos = 0;
    long long x = 0;
    try {
        x = std::stoll(v, &pos);
    } catch (const std::exception &) {
        fail(errc::config, "config: bad integer for " + key + ": '" + v + "'");
    }
    require(pos == v.size(), errc::config, "config: trailing junk after " + key);
    return x;
}

uint64_t parse_u64(const std::string & v, const std::string & key) {
    size_t pos = 0;
    uint64_t x = 0;
    try {
        x = std::stoull(v, &pos);
    } catch (const std::exception &) {
        fail(errc::config, "config: bad unsigned integer for " + key + ": '" + v + "'");
    }
    require(pos == v.size(), errc::config, "config: trailing junk after " + key);
    return x;
}

double parse_double(const std::string & v, const std::string & key) {
    size_t pos = 0;
    double x = 0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception &) {
        fail(errc::config, "config: bad number for " + key + ": '" + v + "'");
    }
    require(pos == v.size(), errc::config, "config: trailing junk after " + key);
    return x;
}

std::vector<double> parse_list(const std::string & v, const std::string & key) {
    std::vector<double> out;
    std::string item;
    std::istringstream is(v);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        require(!item.empty(), errc::config, "config: empty list element in " + key);
        out.push_back(parse_double(item, key));
    }
    require(!out.empty(), errc::config, "config: empty list for " + key);
    return out;
}

std::string fmt_list(const std::vector<double> & v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        s += (i != 0 ? "," : "") + fmt_double(v[i]);
    }
    return s;
}

struct Entry {
    std::string key;
    std::string unit;
    std::function<std::string(const RunConfig &)> get;
    std::function<void(RunConfig &, const std::string &)> set;
};

// accessor-lambda bindings keep getter and setter trivially in sync
template <class Acc>
void bind_int(std::vector<Entry> & e, const std::string & key, Acc acc,
              const std::string & unit = "") {
    e.push_back(
        {key, unit,
         [acc](const RunConfig & c) { return std::to_string(acc(const_cast<RunConfig &>(c))); },
         [acc, key](RunConfig & c, const std::string & v) { acc(c) = int(parse_ll(v, key)); }});
}

template <class Acc>
void bind_u64(std::vector<Entry> & e, const std::string & key, Acc acc,
              const std::string & unit = "") {
    e.push_back(
        {key, unit,
         [acc](const RunConfig & c) { return std::to_string(acc(const_cast<RunConfig &>(c))); },
         [acc, key](RunConfig & c, const std::string & v) { acc(c) = parse_u64(v, key); }});
}

template <class Acc>
void bind_double(std::vector<Entry> & e, const std::string & key, Acc acc,
                 const std::string & unit = "") {
    e.push_back(
        {key, unit,
         [acc](const RunConfig & c) { return fmt_double(acc(const_cast<RunConfig &>(c))); },
         [acc, key](RunConfig & c, const std::string & v) { acc(c) = parse_double(v, key); }});
}

template <class Acc>
void bind_str(std::vector<Entry> & e, const std::string & key, Acc acc,
              const std::string & unit = "") {
    e.push_back({key, unit,
                 [acc](const RunConfig & c) { return acc(const_cast<RunConfig &>(c)); },
                 [acc, key](RunConfig & c, const std::string & v) {
                     require(!v.empty(), errc::config, "config: empty value for " + key);
                     acc(c) = v;
                 }});
}

template <class Acc>
void bind_list(std::vector<Entry> & e, const std::string & key, Acc acc,
               const std::string & unit = "") {
    e.push_back({key, unit,
                 [acc](const RunConfig & c) { return fmt_list(acc(const_cast<RunConfig &>(c))); },
                 [acc, key](RunConfig & c, const std::string & v) { acc(c) = parse_list(v, key); }});
}

std::vector<Entry> build_entries() {
    std::vector<Entry> e;
    auto & b = e;

    bind_u64(b, "seeds.global", [](RunConfig & c) -> uint64_t & { return c.seed; });
    bind_u64(b, "seeds.stage1", [](RunConfig & c) -> uint64_t & { return c.seed_stage1; },
             "0 = derive from seeds.global");
    bind_u64(b, "seeds.stage2", [](RunConfig & c) -> uint64_t & { return c.seed_stage2; },
             "0 = derive from seeds.global");
    bind_u64(b, "seeds.eval", [](RunConfig & c) -> uint64_t & { return c.seed_eval; },
             "0 = derive from seeds.global");
    bind_str(b, "run.out_dir", [](RunConfig & c) -> std::string & { return c.out_dir; });
    bind_str(b, "run.mode", [](RunConfig & c) -> std::string & { return c.mode; },
             "tinylm | planted");

    bind_int(b, "model.vocab_size", [](RunConfig & c) -> int & { return c.model.vocab_size; },
             "tokens");
    bind_int(b, "model.context_len", [](RunConfig & c) -> int & { return c.model.context_len; },
             "tokens");
    bind_int(b, "model.n_layers", [](RunConfig & c) -> int & { return c.model.n_layers; });
    bind_int(b, "model.d_model", [](RunConfig & c) -> int & { return c.model.d_model; });
    bind_int(b, "model.n_heads", [](RunConfig & c) -> int & { return c.model.n_heads; });
    bind_int(b, "model.d_ff", [](RunConfig & c) -> int & { return c.model.d_ff; });
    bind_u64(b, "model.seed", [](RunConfig & c) -> uint64_t & { return c.model.seed; });

    bind_int(b, "train.steps", [](RunConfig & c) -> int & { return c.train.steps; },
             "optimizer steps");
    bind_int(b, "train.batch_size", [](RunConfig & c) -> int & { return c.train.batch_size; },
             "sequences");
    bind_double(b, "train.lr", [](RunConfig & c) -> double & { return c.train.lr; },
                "adam step size");
    bind_double(b, "train.beta1", [](RunConfig & c) -> double & { return c.train.beta1; });
    bind_double(b, "train.beta2", [](RunConfig & c) -> double & { return c.train.beta2; });
    bind_double(b, "train.eps", [](RunConfig & c) -> double & { return c.train.eps; });
    bind_int(b, "train.eval_every", [](RunConfig & c) -> int & { return c.train.eval_every; },
             "steps between corpus-loss checkpoints");

    bind_int(b, "world.subjects", [](RunConfig & c) -> int & { return c.world.n_subjects; });
    bind_int(b, "world.relations", [](RunConfig & c) -> int & { return c.world.n_relations; });
    bind_int(b, "world.answers", [](RunConfig & c) -> int & { return c.world.n_answers; });
    bind_double(b, "world.corruption_rate",
                [](RunConfig & c) -> double & { return c.world.corruption_rate; },
                "fraction of facts");
    bind_u64(b, "world.seed", [](RunConfig & c) -> uint64_t & { return c.world.seed; });

    bind_int(b, "categories.per_layer",
             [](RunConfig & c) -> int & { return c.categories_per_layer; },
             "contiguous FFN blocks per layer");

    bind_double(b, "reward.w_h", [](RunConfig & c) -> double & { return c.reward.w_h; });
    bind_double(b, "reward.w_r", [](RunConfig & c) -> double & { return c.reward.w_r; });
    bind_double(b, "reward.w_f", [](RunConfig & c) -> double & { return c.reward.w_f; });
    bind_double(b, "reward.beta_exp", [](RunConfig & c) -> double & { return c.reward.beta_exp; },
                "exploration bonus");

    bind_int(b, "episode.t_max", [](RunConfig & c) -> int & { return c.episode.t_max; },
             "steps");
    bind_double(b, "episode.early_stop_h",
                [](RunConfig & c) -> double & { return c.episode.early_stop_h; },
                "stop when score_h <= this");
    bind_list(b, "episode.magnitudes",
              [](RunConfig & c) -> std::vector<double> & { return c.episode.magnitudes; },
              "comma-separated, increasing");

    bind_double(b, "ppo.gamma", [](RunConfig & c) -> double & { return c.ppo.gamma; });
    bind_double(b, "ppo.lambda_gae", [](RunConfig & c) -> double & { return c.ppo.lambda_gae; });
    bind_double(b, "ppo.eps_clip", [](RunConfig & c) -> double & { return c.ppo.eps_clip; });
    bind_double(b, "ppo.c_value", [](RunConfig & c) -> double & { return c.ppo.c_value; });
    bind_double(b, "ppo.c_entropy", [](RunConfig & c) -> double & { return c.ppo.c_entropy; });
    bind_int(b, "ppo.epochs", [](RunConfig & c) -> int & { return c.ppo.epochs; });
    bind_int(b, "ppo.minibatch", [](RunConfig & c) -> int & { return c.ppo.minibatch; },
             "transitions");
    bind_double(b, "ppo.lr_high", [](RunConfig & c) -> double & { return c.ppo.lr_high; });
    bind_double(b, "ppo.lr_low", [](RunConfig & c) -> double & { return c.ppo.lr_low; });
    bind_int(b, "ppo.horizon", [](RunConfig & c) -> int & { return c.ppo.horizon; },
             "transitions per update");
    bind_int(b, "ppo.d_a", [](RunConfig & c) -> int & { return c.ppo.d_a; },
             "category-embedding width");
    bind_int(b, "ppo.hidden", [](RunConfig & c) -> int & { return c.ppo.hidden; },
             "mlp width");

    bind_double(b, "mask.tau_gate", [](RunConfig & c) -> double & { return c.mask.tau_gate; });
    bind_double(b, "mask.eps_th", [](RunConfig & c) -> double & { return c.mask.eps_th; },
                "L0 surrogate threshold");
    bind_double(b, "mask.lambda_sparse",
                [](RunConfig & c) -> double & { return c.mask.lambda_sparse; });
    bind_double(b, "mask.lambda_l0", [](RunConfig & c) -> double & { return c.mask.lambda_l0; });
    bind_double(b, "mask.lr", [](RunConfig & c) -> double & { return c.mask.lr; });
    bind_double(b, "mask.baseline_decay",
                [](RunConfig & c) -> double & { return c.mask.baseline_decay; },
                "EMA decay");

    bind_double(b, "judge.partial_credit",
                [](RunConfig & c) -> double & { return c.judge_partial_credit; });
    bind_double(b, "judge.fluency_slope",
                [](RunConfig & c) -> double & { return c.judge_fluency_slope; },
                "0 = 1/ln(vocab)");
    bind_double(b, "judge.fluency_intercept",
                [](RunConfig & c) -> double & { return c.judge_fluency_intercept; });

    bind_int(b, "attribution.steps", [](RunConfig & c) -> int & { return c.ig_steps; },
             "Riemann steps S");

    bind_int(b, "cases.options", [](RunConfig & c) -> int & { return c.options_per_case; },
             "choices per MC case");
    bind_double(b, "split.holdout_frac",
                [](RunConfig & c) -> double & { return c.holdout_frac; },
                "fraction of cases held out");

    bind_int(b, "stage2.updates", [](RunConfig & c) -> int & { return c.stage2_updates; });
    bind_int(b, "stage2.checkpoint_every",
             [](RunConfig & c) -> int & { return c.checkpoint_every; }, "updates");

    bind_int(b, "eval.steps", [](RunConfig & c) -> int & { return c.eval_steps; },
             "interventions per case at eval");
    bind_int(b, "ablate.seeds", [](RunConfig & c) -> int & { return c.ablate_seeds; });
    bind_list(b, "baseline.grid",
              [](RunConfig & c) -> std::vector<double> & { return c.baseline_grid; },
              "steering coefficients");
    bind_int(b, "bench.reps", [](RunConfig & c) -> int & { return c.bench_reps; });
    bind_int(b, "bench.warmup", [](RunConfig & c) -> int & { return c.bench_warmup; });

    bind_int(b, "planted.n_h", [](RunConfig & c) -> int & { return c.planted_n_h; },
             "categories in planted mode");
    bind_int(b, "planted.emb_dim", [](RunConfig & c) -> int & { return c.planted_emb_dim; });

    return e;
}

const std::vector<Entry> & entries() {
    static const std::vector<Entry> e = build_entries();
    return e;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    world.validate();
    reward.validate();
    episode.validate();
    ppo.validate();
    mask.validate();
    require(mode == "tinylm" || mode == "planted", errc::config,
            "run.mode must be tinylm or planted, got '" + mode + "'");
    require(train.steps >= 1 && train.batch_size >= 1 && train.lr > 0.0 && train.eval_every >= 1,
            errc::config, "train.* values out of range");
    require(categories_per_layer >= 1 && categories_per_layer <= model.d_ff, errc::config,
            "categories.per_layer must lie in [1, d_ff]");
    require(judge_partial_credit >= 0.0 && judge_partial_credit <= 1.0, errc::config,
            "judge.partial_credit must lie in [0,1]");
    require(judge_fluency_slope >= 0.0, errc::config, "judge.fluency_slope must be >= 0");
    require(ig_steps >= 1, errc::config, "attribution.steps must be >= 1");
    require(options_per_case >= 2 && options_per_case <= world.n_answers, errc::config,
            "cases.options must lie in [2, world.answers]");
    require(holdout_frac > 0.0 && holdout_frac < 1.0, errc::config,
            "split.holdout_frac must lie in (0,1)");
    require(stage2_updates >= 0, errc::config, "stage2.updates must be >= 0");
    require(checkpoint_every >= 1, errc::config, "stage2.checkpoint_every must be >= 1");
    require(eval_steps >= 1, errc::config, "eval.steps must be >= 1");
    require(ablate_seeds >= 1, errc::config, "ablate.seeds must be >= 1");
    require(!baseline_grid.empty(), errc::config, "baseline.grid must be non-empty");
    require(bench_reps >= 1 && bench_warmup >= 0, errc::config, "bench.* values out of range");
    require(planted_n_h >= 2, errc::config, "planted.n_h must be >= 2");
    require(planted_emb_dim >= 1, errc::config, "planted.emb_dim must be >= 1");
    categories().validate(model.n_layers, model.d_ff);
}

adamask::CategorySpec RunConfig::categories() const {
    adamask::CategorySpec spec;
    const int per = categories_per_layer;
    const int width = model.d_ff / per;
    require(width >= 1, errc::config, "categories.per_layer exceeds d_ff");
    for (int layer = 0; layer < model.n_layers; ++layer) {
        for (int j = 0; j < per; ++j) {
            adamask::CategoryBlock blk;
            blk.layer = layer;
            blk.begin = j * width;
            blk.end = j + 1 == per ? model.d_ff : (j + 1) * width;
            spec.categories.push_back({blk});
        }
    }
    return spec;
}

uint64_t RunConfig::stage1_seed() const {
    return seed_stage1 != 0 ? seed_stage1 : hash_combine(seed, 0x57a6e001u);
}
uint64_t RunConfig::stage2_seed() const {
    return seed_stage2 != 0 ? seed_stage2 : hash_combine(seed, 0x57a6e002u);
}
uint64_t RunConfig::eval_seed() const {
    return seed_eval != 0 ? seed_eval : hash_combine(seed, 0x57a6e003u);
}

RunConfig parse_config_text(const std::string & text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::set<std::string> seen;
    bool saw_format = false;
    int lineno = 0;
    while (std::getline(is, line)) {
        lineno += 1;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const size_t eq = line.find('=');
        require(eq != std::string::npos, errc::config,
                "config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        require(!key.empty(), errc::config,
                "config line " + std::to_string(lineno) + ": empty key");
        if (key == "format") {
            require(!saw_format, errc::config, "config: duplicate format field");
            require(seen.empty(), errc::config, "config: format must be the first field");
            require(value == kFormatTag, errc::config,
                    "config: unsupported format '" + value + "' (expected " + kFormatTag + ")");
            saw_format = true;
            continue;
        }
        require(saw_format, errc::config, "config: missing leading 'format = dnp-config-v1'");
        require(seen.insert(key).second, errc::config, "config: duplicate key " + key);
        bool matched = false;
        for (const auto & entry : entries()) {
            if (entry.key == key) {
                entry.set(cfg, value);
                matched = true;
                break;
            }
        }
        require(matched, errc::config, "config: unknown key '" + key + "' (line " +
                                           std::to_string(lineno) + ")");
    }
    require(saw_format, errc::config, "config: missing leading 'format = dnp-config-v1'");
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string & path) {
    std::ifstream in(path);
    require(bool(in), errc::io, "cannot open config: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string config_to_text(const RunConfig & cfg) {
    std::ostringstream os;
    os << "format = " << kFormatTag << "\n";
    for (const auto & entry : entries()) {
        os << entry.key << " = " << entry.get(cfg);
        if (!entry.unit.empty()) {
            os << "  # " << entry.unit;
        }
        os << "\n";
    }
    return os.str();
}

void save_config(const std::string & path, const RunConfig & cfg) {
    std::ofstream out(path, std::ios::trunc);
    require(bool(out), errc::io, "cannot write config: " + path);
    out << config_to_text(cfg);
    require(bool(out), errc::io, "config write failed: " + path);
}

uint64_t config_hash(const RunConfig & cfg) {
    const std::string text = config_to_text(cfg);
    return fnv1a(text.data(), text.size());
}

}  // namespace dnp::config
