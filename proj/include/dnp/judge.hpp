#pragma once

#include "dnp/taskgen.hpp"
#include "dnp/tinylm.hpp"

namespace dnp::judge {

// ---------------------------------------------------------------------------
// Programmatic scoring oracle. Produces the (H, R, F) triple for a model
// output: H is 0 on gold, 1 on the mined distractor, partial credit
// otherwise; R is answer-range membership; F maps the mean log-probability
// of prompt+output under the unperturbed model affinely into [0,1].
// Orientation: lower H is better, higher R and F are better.
// ---------------------------------------------------------------------------

struct ScoresTriple {
    double h = 0.0;
    double r = 0.0;
    double f = 0.0;

    bool operator==(const ScoresTriple &) const = default;
};

struct JudgeConfig {
    int answer_start = 0;   // answer-vocabulary range [answer_start, answer_start + n_answers)
    int n_answers = 0;
    double fluency_slope = 0.0;      // 0 means "use 1/ln(vocab_size)"
    double fluency_intercept = 1.0;
    double partial_credit = 0.5;     // H for answers that are neither gold nor distractor

    void validate() const;
    static JudgeConfig for_world(const taskgen::FactWorld & world);
    double slope_for(int vocab_size) const;
};

// output = generated tokens after the prompt; the first one is the answer
ScoresTriple judge_output(const taskgen::BadCase & c, std::span<const int> output,
                          const tinylm::Weights & w, const JudgeConfig & cfg);

// multiple choice: argmax over option-token logits at the answer position,
// ties broken toward the lowest token id
struct McResult {
    int chosen = -1;
    bool correct = false;
};
McResult judge_mc(const taskgen::BadCase & c, std::span<const double> logits);

}  // namespace dnp::judge
