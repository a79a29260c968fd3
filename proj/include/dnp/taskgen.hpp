#pragma once

#include "dnp/tinylm.hpp"

#include <string>
#include <utility>
#include <vector>

namespace dnp::taskgen {

// ---------------------------------------------------------------------------
// Synthetic fact world. The vocabulary is carved into disjoint integer
// ranges: 0 is reserved, then the arrow and end-of-sequence markers, then
// subjects, relations and answers. Gold answers follow a compositional rule
// (subject class + per-relation offset over the answer ring) so that a model
// which generalizes can recover the gold answer of a corrupted pair even
// though that pair's training label is the distractor.
// ---------------------------------------------------------------------------

struct VocabLayout {
    int n_subjects = 0;
    int n_relations = 0;
    int n_answers = 0;

    static constexpr int arrow = 1;
    static constexpr int eos = 2;
    static constexpr int subject_start = 3;

    int relation_start() const { return subject_start + n_subjects; }
    int answer_start() const { return relation_start() + n_relations; }
    int vocab_needed() const { return answer_start() + n_answers; }

    int subject_token(int i) const { return subject_start + i; }
    int relation_token(int i) const { return relation_start() + i; }
    int answer_token(int i) const { return answer_start() + i; }
    bool is_answer(int tok) const {
        return tok >= answer_start() && tok < answer_start() + n_answers;
    }
};

struct WorldConfig {
    int n_subjects = 50;
    int n_relations = 4;
    int n_answers = 32;
    double corruption_rate = 0.3;
    uint64_t seed = 7;

    void validate() const;
};

struct FactWorld {
    WorldConfig cfg;
    VocabLayout vocab;
    std::vector<int> gold;       // n_subjects*n_relations answer tokens, row-major (s, r)
    std::vector<int> distract;   // same shape; -1 where the pair is clean

    int pairs() const { return cfg.n_subjects * cfg.n_relations; }
    int gold_at(int s, int r) const { return gold[size_t(s) * cfg.n_relations + r]; }
    bool is_corrupted(int s, int r) const {
        return distract[size_t(s) * cfg.n_relations + r] >= 0;
    }
    int distractor_at(int s, int r) const { return distract[size_t(s) * cfg.n_relations + r]; }
    // training label: distractor where corrupted, else gold
    int label_at(int s, int r) const {
        return is_corrupted(s, r) ? distractor_at(s, r) : gold_at(s, r);
    }
    size_t n_corrupted() const;
    std::vector<int> prompt_at(int s, int r) const;  // subject relation ->
};

FactWorld generate_fact_world(uint64_t seed, int n_subjects, int n_relations,
                              double corruption_rate, int n_answers = 32);
FactWorld generate_fact_world(const WorldConfig & cfg);

// one training sequence per (subject, relation): subject relation -> label eos
std::vector<std::vector<int>> emit_corpus(const FactWorld & world);

// ---------------------------------------------------------------------------
// Stage-1 bad cases: prompts the trained model answers incorrectly.
// ---------------------------------------------------------------------------

struct BadCase {
    int id = -1;             // stable index into the mined list
    int subject = -1;        // subject index (not token)
    int relation = -1;       // relation index
    std::vector<int> prompt; // subject relation ->
    int gold = -1;           // answer token
    int distractor = -1;     // token the unperturbed model actually produced
    std::vector<int> options;  // k distinct tokens, gold and distractor included
};

// mines every prompt whose unperturbed argmax differs from gold; options hold
// gold, the produced token, and k-2 further distinct wrong answers
std::vector<BadCase> make_bad_cases(const tinylm::Weights & w, const FactWorld & world,
                                    int k_options = 4);

// deterministic shuffle-split; train gets round(train_fraction * n), clamped
// so both sides are non-empty
std::pair<std::vector<BadCase>, std::vector<BadCase>> split_cases(
    const std::vector<BadCase> & cases, double train_fraction, uint64_t seed);

// ---------------------------------------------------------------------------
// line-oriented record files (one named-field record per line)
// ---------------------------------------------------------------------------

std::string world_to_text(const FactWorld & world);
FactWorld world_from_text(const std::string & text);

std::string cases_to_text(const std::vector<BadCase> & cases);
std::vector<BadCase> cases_from_text(const std::string & text);

}  // namespace dnp::taskgen
