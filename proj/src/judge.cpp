#include "dnp/judge.hpp"

#include <algorithm>

namespace dnp::judge {

void JudgeConfig::validate() const {
    require(n_answers >= 1, errc::config, "judge: empty answer range");
    require(fluency_slope >= 0.0, errc::config, "judge: fluency slope must be positive");
    require(partial_credit > 0.0 && partial_credit < 1.0, errc::config,
            "judge: partial credit must lie in (0,1)");
}

JudgeConfig JudgeConfig::for_world(const taskgen::FactWorld & world) {
    JudgeConfig cfg;
    cfg.answer_start = world.vocab.answer_start();
    cfg.n_answers = world.cfg.n_answers;
    return cfg;
}

double JudgeConfig::slope_for(int vocab_size) const {
    return fluency_slope > 0.0 ? fluency_slope : 1.0 / std::log(double(vocab_size));
}

ScoresTriple judge_output(const taskgen::BadCase & c, std::span<const int> output,
                          const tinylm::Weights & w, const JudgeConfig & cfg) {
    require(!output.empty(), errc::input, "judge: empty output");
    cfg.validate();
    const int answer = output[0];

    ScoresTriple s;
    if (answer == c.gold) {
        s.h = 0.0;
    } else if (answer == c.distractor) {
        s.h = 1.0;
    } else {
        s.h = cfg.partial_credit;
    }
    s.r = answer >= cfg.answer_start && answer < cfg.answer_start + cfg.n_answers ? 1.0 : 0.0;

    // fluency under the unperturbed model over prompt + output
    std::vector<int> seq(c.prompt.begin(), c.prompt.end());
    seq.insert(seq.end(), output.begin(), output.end());
    const double mlp = tinylm::sequence_logprob(seq, w);
    const double raw = cfg.slope_for(w.cfg.vocab_size) * mlp + cfg.fluency_intercept;
    s.f = std::clamp(raw, 0.0, 1.0);
    return s;
}

McResult judge_mc(const taskgen::BadCase & c, std::span<const double> logits) {
    require(c.options.size() >= 2, errc::input, "judge_mc: need at least 2 options");
    McResult r;
    double best = 0.0;
    for (int opt : c.options) {
        require(opt >= 0 && opt < int(logits.size()), errc::input,
                "judge_mc: option token outside logits range");
        // strict > plus ascending scan over sorted-or-not options: ties go to
        // the lowest token id
        if (r.chosen < 0 || logits[opt] > best || (logits[opt] == best && opt < r.chosen)) {
            best = logits[opt];
            r.chosen = opt;
        }
    }
    r.correct = r.chosen == c.gold;
    return r;
}

}  // namespace dnp::judge
