#include "dnp/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace dnp::taskgen {

void WorldConfig::validate() const {
    require(n_subjects >= 1 && n_relations >= 1, errc::config,
            "world: need at least one subject and relation");
    require(corruption_rate >= 0.0 && corruption_rate <= 1.0, errc::config,
            "world: corruption_rate must lie in [0,1]");
    require(n_answers >= 2, errc::config,
            "world: answer vocabulary must have >= 2 tokens to build distractors");
}

size_t FactWorld::n_corrupted() const {
    size_t n = 0;
    for (int d : distract) {
        n += d >= 0 ? 1 : 0;
    }
    return n;
}

std::vector<int> FactWorld::prompt_at(int s, int r) const {
    return {vocab.subject_token(s), vocab.relation_token(r), VocabLayout::arrow};
}

FactWorld generate_fact_world(const WorldConfig & cfg) {
    cfg.validate();
    FactWorld world;
    world.cfg = cfg;
    world.vocab = VocabLayout{cfg.n_subjects, cfg.n_relations, cfg.n_answers};

    Rng rng(hash_combine(cfg.seed, 0xfac7u));
    // relation-keyed gold rule: every relation has one answer shared by all
    // subjects, so the rule is strongly learnable from the clean pairs and a
    // corrupted pair is a memorized exception layered on top of it
    std::vector<int> rel_answer(cfg.n_relations);
    for (auto & a : rel_answer) {
        a = rng.uniform_int(cfg.n_answers);
    }
    const int P = world.pairs();
    world.gold.resize(P);
    world.distract.assign(P, -1);
    for (int s = 0; s < cfg.n_subjects; ++s) {
        for (int r = 0; r < cfg.n_relations; ++r) {
            world.gold[size_t(s) * cfg.n_relations + r] =
                world.vocab.answer_token(rel_answer[r]);
        }
    }

    // pick exactly round(rate * P) pairs to corrupt, via a seeded shuffle
    const int n_bad = int(std::llround(cfg.corruption_rate * P));
    std::vector<int> order(P);
    for (int i = 0; i < P; ++i) {
        order[i] = i;
    }
    for (int i = P - 1; i > 0; --i) {
        std::swap(order[i], order[rng.uniform_int(i + 1)]);
    }
    for (int i = 0; i < n_bad; ++i) {
        const int p = order[i];
        const int gold_idx = world.gold[p] - world.vocab.answer_start();
        const int wrong = (gold_idx + 1 + rng.uniform_int(cfg.n_answers - 1)) % cfg.n_answers;
        world.distract[p] = world.vocab.answer_token(wrong);
    }
    return world;
}

FactWorld generate_fact_world(uint64_t seed, int n_subjects, int n_relations,
                              double corruption_rate, int n_answers) {
    WorldConfig cfg;
    cfg.seed = seed;
    cfg.n_subjects = n_subjects;
    cfg.n_relations = n_relations;
    cfg.corruption_rate = corruption_rate;
    cfg.n_answers = n_answers;
    return generate_fact_world(cfg);
}

std::vector<std::vector<int>> emit_corpus(const FactWorld & world) {
    std::vector<std::vector<int>> corpus;
    corpus.reserve(world.pairs());
    for (int s = 0; s < world.cfg.n_subjects; ++s) {
        for (int r = 0; r < world.cfg.n_relations; ++r) {
            auto seq = world.prompt_at(s, r);
            seq.push_back(world.label_at(s, r));
            seq.push_back(VocabLayout::eos);
            corpus.push_back(std::move(seq));
        }
    }
    return corpus;
}

std::vector<BadCase> make_bad_cases(const tinylm::Weights & w, const FactWorld & world,
                                    int k_options) {
    require(k_options >= 2 && k_options <= world.cfg.n_answers, errc::config,
            "make_bad_cases: k_options must lie in [2, n_answers]");
    std::vector<BadCase> cases;
    for (int s = 0; s < world.cfg.n_subjects; ++s) {
        for (int r = 0; r < world.cfg.n_relations; ++r) {
            const auto prompt = world.prompt_at(s, r);
            auto res = tinylm::forward(prompt, w);
            const int produced = argmax(res.logits);
            const int gold = world.gold_at(s, r);
            if (produced == gold) {
                continue;
            }
            BadCase c;
            c.id = int(cases.size());
            c.subject = s;
            c.relation = r;
            c.prompt = prompt;
            c.gold = gold;
            c.distractor = produced;
            c.options = {gold, produced};
            Rng rng(hash_combine(world.cfg.seed, 0xca5e0000u + uint64_t(s) * 1024 + uint64_t(r)));
            while (int(c.options.size()) < k_options) {
                const int cand = world.vocab.answer_token(rng.uniform_int(world.cfg.n_answers));
                if (std::find(c.options.begin(), c.options.end(), cand) == c.options.end()) {
                    c.options.push_back(cand);
                }
            }
            std::sort(c.options.begin(), c.options.end());
            cases.push_back(std::move(c));
        }
    }
    return cases;
}

std::pair<std::vector<BadCase>, std::vector<BadCase>> split_cases(
    const std::vector<BadCase> & cases, double train_fraction, uint64_t seed) {
    require(cases.size() >= 2, errc::input, "split_cases: need at least 2 cases");
    require(train_fraction > 0.0 && train_fraction < 1.0, errc::input,
            "split_cases: train_fraction must lie in (0,1)");
    std::vector<int> order(cases.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = int(i);
    }
    Rng rng(hash_combine(seed, 0x5b117u));
    for (int i = int(order.size()) - 1; i > 0; --i) {
        std::swap(order[i], order[rng.uniform_int(i + 1)]);
    }
    const int n = int(cases.size());
    const int n_train = std::clamp(int(std::llround(train_fraction * n)), 1, n - 1);
    std::pair<std::vector<BadCase>, std::vector<BadCase>> out;
    for (int i = 0; i < n; ++i) {
        (i < n_train ? out.first : out.second).push_back(cases[order[i]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// record files
// ---------------------------------------------------------------------------

namespace {

std::string join_ints(const std::vector<int> & v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i > 0) {
            s += ',';
        }
        s += std::to_string(v[i]);
    }
    return s;
}

std::vector<int> split_ints(const std::string & s) {
    std::vector<int> v;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        v.push_back(std::stoi(part));
    }
    return v;
}

// parses "key=value" tokens of one record line into a map-like list
struct Fields {
    std::vector<std::pair<std::string, std::string>> kv;

    // the first token of a record line is its tag (config / fact / case)
    static Fields parse(const std::string & line) {
        Fields f;
        std::stringstream ss(line);
        std::string tok;
        bool first = true;
        while (ss >> tok) {
            const auto eq = tok.find('=');
            if (first && eq == std::string::npos) {
                first = false;
                continue;
            }
            first = false;
            require(eq != std::string::npos, errc::io, "record field without '=': " + tok);
            f.kv.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
        }
        return f;
    }

    const std::string & get(const std::string & key) const {
        for (const auto & [k, v] : kv) {
            if (k == key) {
                return v;
            }
        }
        fail(errc::io, "record missing field: " + key);
    }
};

}  // namespace

std::string world_to_text(const FactWorld & world) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "format=dnp-world-v1\n";
    os << "config subjects=" << world.cfg.n_subjects << " relations=" << world.cfg.n_relations
       << " answers=" << world.cfg.n_answers << " corruption_rate=" << world.cfg.corruption_rate
       << " seed=" << world.cfg.seed << "\n";
    for (int s = 0; s < world.cfg.n_subjects; ++s) {
        for (int r = 0; r < world.cfg.n_relations; ++r) {
            os << "fact s=" << s << " r=" << r << " gold=" << world.gold_at(s, r)
               << " distractor=" << (world.is_corrupted(s, r) ? world.distractor_at(s, r) : -1)
               << "\n";
        }
    }
    return os.str();
}

FactWorld world_from_text(const std::string & text) {
    std::istringstream is(text);
    std::string line;
    require(std::getline(is, line) && line == "format=dnp-world-v1", errc::io,
            "world file: bad or missing format line");
    require(bool(std::getline(is, line)), errc::io, "world file: missing config line");
    auto head = Fields::parse(line);
    FactWorld world;
    world.cfg.n_subjects = std::stoi(head.get("subjects"));
    world.cfg.n_relations = std::stoi(head.get("relations"));
    world.cfg.n_answers = std::stoi(head.get("answers"));
    world.cfg.corruption_rate = std::stod(head.get("corruption_rate"));
    world.cfg.seed = std::stoull(head.get("seed"));
    world.cfg.validate();
    world.vocab = VocabLayout{world.cfg.n_subjects, world.cfg.n_relations, world.cfg.n_answers};
    const int P = world.pairs();
    world.gold.assign(P, -1);
    world.distract.assign(P, -1);
    int seen = 0;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        auto f = Fields::parse(line);
        const int s = std::stoi(f.get("s"));
        const int r = std::stoi(f.get("r"));
        require(s >= 0 && s < world.cfg.n_subjects && r >= 0 && r < world.cfg.n_relations,
                errc::io, "world file: fact index out of range");
        world.gold[size_t(s) * world.cfg.n_relations + r] = std::stoi(f.get("gold"));
        world.distract[size_t(s) * world.cfg.n_relations + r] = std::stoi(f.get("distractor"));
        ++seen;
    }
    require(seen == P, errc::io, "world file: fact count does not match config");
    return world;
}

std::string cases_to_text(const std::vector<BadCase> & cases) {
    std::ostringstream os;
    os << "format=dnp-cases-v1\n";
    for (const auto & c : cases) {
        os << "case id=" << c.id << " s=" << c.subject << " r=" << c.relation
           << " prompt=" << join_ints(c.prompt) << " gold=" << c.gold
           << " distractor=" << c.distractor << " options=" << join_ints(c.options) << "\n";
    }
    return os.str();
}

std::vector<BadCase> cases_from_text(const std::string & text) {
    std::istringstream is(text);
    std::string line;
    require(std::getline(is, line) && line == "format=dnp-cases-v1", errc::io,
            "case file: bad or missing format line");
    std::vector<BadCase> cases;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        auto f = Fields::parse(line);
        BadCase c;
        c.id = std::stoi(f.get("id"));
        c.subject = std::stoi(f.get("s"));
        c.relation = std::stoi(f.get("r"));
        c.prompt = split_ints(f.get("prompt"));
        c.gold = std::stoi(f.get("gold"));
        c.distractor = std::stoi(f.get("distractor"));
        c.options = split_ints(f.get("options"));
        cases.push_back(std::move(c));
    }
    return cases;
}

}  // namespace dnp::taskgen
