#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dnp/attribution.hpp"
#include "dnp/taskgen.hpp"
#include "dnp/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace dnp;
using namespace dnp::attribution;

namespace {

tinylm::ModelConfig toy_cfg() {
    tinylm::ModelConfig cfg;
    cfg.vocab_size = 24;
    cfg.context_len = 8;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.seed = 9;
    return cfg;
}

std::vector<int> random_prompt(Rng & rng, int vocab, int len) {
    std::vector<int> p(len);
    for (auto & t : p) {
        t = rng.uniform_int(vocab);
    }
    return p;
}

// completeness gap |sum attr - (F(a) - F(0))| / |F(a) - F(0)|
double completeness_err(const tinylm::Weights & w, const std::vector<int> & prompt, int target,
                        int steps) {
    auto attr = integrated_gradients(w, prompt, target, steps);
    double total = 0.0;
    for (const auto & layer : attr.layers) {
        for (double v : layer) {
            total += v;
        }
    }
    const auto a = tinylm::forward(prompt, w).trace.ffn_hidden;
    const std::vector<std::vector<double>> zeros(a.size(),
                                                 std::vector<double>(a.front().size(), 0.0));
    const double f_a = clamped_target_logprob(w, prompt, target, a);
    const double f_0 = clamped_target_logprob(w, prompt, target, zeros);
    return std::abs(total - (f_a - f_0)) / std::abs(f_a - f_0);
}

}  // namespace

TEST_CASE("linear integrand is recovered exactly for any step count") {
    // F(a) = w . a, so grad is the constant w and IG must equal w_i * (a_i - a0_i)
    const std::vector<double> w = {0.5, -2.0, 3.25, 0.0, 1e-3};
    auto grad_fn = [&](const std::vector<double> &) { return w; };
    const std::vector<double> a = {1.0, -0.5, 2.0, 4.0, -3.0};
    const std::vector<double> a0 = {0.0, 0.0, 0.0, 0.0, 0.0};

    for (int steps : {1, 3, 16, 64}) {
        auto attr = ig_path_integral(grad_fn, a, a0, steps);
        REQUIRE(attr.size() == a.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(attr[i] == doctest::Approx(w[i] * a[i]).epsilon(1e-12));
        }
    }

    // nonzero baseline
    const std::vector<double> b0 = {0.5, 1.0, -1.0, 2.0, 0.25};
    auto attr = ig_path_integral(grad_fn, a, b0, 7);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(attr[i] == doctest::Approx(w[i] * (a[i] - b0[i])).epsilon(1e-12));
    }
}

TEST_CASE("right-point Riemann rule has its exact quadrature signature") {
    // F(a) = sum a_i^2 with zero baseline: grad at alpha*a is 2*alpha*a, so the
    // right-point mean over s=1..S is a_i^2 * (S+1)/S exactly. This pins the
    // sampling points; left-point or midpoint rules would give (S-1)/S or 1.
    const std::vector<double> a = {1.5, -2.0, 0.75};
    const std::vector<double> a0 = {0.0, 0.0, 0.0};
    auto grad_fn = [](const std::vector<double> & x) {
        std::vector<double> g(x.size());
        for (size_t i = 0; i < x.size(); ++i) {
            g[i] = 2.0 * x[i];
        }
        return g;
    };
    for (int steps : {1, 2, 5, 32}) {
        auto attr = ig_path_integral(grad_fn, a, a0, steps);
        const double factor = double(steps + 1) / steps;
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(attr[i] == doctest::Approx(a[i] * a[i] * factor).epsilon(1e-12));
        }
    }
}

TEST_CASE("input equal to baseline attributes exactly zero") {
    const std::vector<double> a = {0.3, -1.2, 5.0};
    auto grad_fn = [](const std::vector<double> & x) {
        std::vector<double> g(x.size(), 1.0);
        return g;
    };
    auto attr = ig_path_integral(grad_fn, a, a, 8);
    for (double v : attr) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("path integral rejects malformed input") {
    auto grad_fn = [](const std::vector<double> & x) { return x; };
    std::vector<double> a = {1.0, 2.0};
    std::vector<double> a0 = {0.0, 0.0};
    CHECK_THROWS_AS(ig_path_integral(grad_fn, a, a0, 0), error);
    std::vector<double> short0 = {0.0};
    CHECK_THROWS_AS(ig_path_integral(grad_fn, a, short0, 4), error);
    auto bad_fn = [](const std::vector<double> &) { return std::vector<double>{1.0}; };
    CHECK_THROWS_AS(ig_path_integral(bad_fn, a, a0, 4), error);
}

TEST_CASE("model attribution matches a finite-difference path oracle") {
    auto cfg = toy_cfg();
    auto w = tinylm::init_weights(cfg);
    Rng rng(41);
    const auto prompt = random_prompt(rng, cfg.vocab_size, 4);
    const auto base = tinylm::forward(prompt, w);
    const int target =
        int(std::max_element(base.logits.begin(), base.logits.end()) - base.logits.begin());
    const int steps = 4;

    auto got = integrated_gradients(w, prompt, target, steps);
    REQUIRE(int(got.layers.size()) == cfg.n_layers);
    for (const auto & layer : got.layers) {
        REQUIRE(int(layer.size()) == cfg.d_ff);
    }
    CHECK(got.target_token == target);
    CHECK(got.steps == steps);
    CHECK(got.baseline == "zero");

    // oracle: same Riemann points, but every partial derivative taken by
    // central finite differences of the clamped log-probability
    const auto & a = base.trace.ffn_hidden;
    std::vector<std::vector<double>> acc(cfg.n_layers, std::vector<double>(cfg.d_ff, 0.0));
    const double h = 1e-5;
    for (int s = 1; s <= steps; ++s) {
        const double alpha = double(s) / steps;
        std::vector<std::vector<double>> point(a.size());
        for (size_t l = 0; l < a.size(); ++l) {
            point[l].resize(a[l].size());
            for (size_t i = 0; i < a[l].size(); ++i) {
                point[l][i] = alpha * a[l][i];
            }
        }
        for (int l = 0; l < cfg.n_layers; ++l) {
            for (int i = 0; i < cfg.d_ff; ++i) {
                auto up = point, dn = point;
                up[l][i] += h;
                dn[l][i] -= h;
                const double fu = clamped_target_logprob(w, prompt, target, up);
                const double fd = clamped_target_logprob(w, prompt, target, dn);
                acc[l][i] += (fu - fd) / (2.0 * h);
            }
        }
    }
    double worst = 0.0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int i = 0; i < cfg.d_ff; ++i) {
            const double want = a[l][i] * acc[l][i] / steps;
            worst = std::max(worst,
                             std::abs(got.layers[l][i] - want) /
                                 std::max(1.0, std::abs(want)));
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("model attribution is deterministic and validates input") {
    auto cfg = toy_cfg();
    auto w = tinylm::init_weights(cfg);
    std::vector<int> prompt = {3, 10, 1};
    auto a1 = integrated_gradients(w, prompt, 5, 8);
    auto a2 = integrated_gradients(w, prompt, 5, 8);
    for (size_t l = 0; l < a1.layers.size(); ++l) {
        for (size_t i = 0; i < a1.layers[l].size(); ++i) {
            CHECK(a1.layers[l][i] == a2.layers[l][i]);
            CHECK(std::isfinite(a1.layers[l][i]));
        }
    }
    CHECK_THROWS_AS(integrated_gradients(w, prompt, 5, 0), error);
    CHECK_THROWS_AS(integrated_gradients(w, prompt, -1, 8), error);
    CHECK_THROWS_AS(integrated_gradients(w, prompt, cfg.vocab_size, 8), error);
}

TEST_CASE("mean completeness over fact prompts is within 5 percent at 64 steps") {
    // trained model, real fact prompts, target = the model's own prediction
    auto world = taskgen::generate_fact_world(7, 10, 2, 0.3, 12);
    auto corpus = taskgen::emit_corpus(world);
    tinylm::ModelConfig mcfg;
    mcfg.vocab_size = world.vocab.vocab_needed();
    mcfg.context_len = 8;
    mcfg.n_layers = 2;
    mcfg.d_model = 32;
    mcfg.n_heads = 4;
    mcfg.d_ff = 64;
    mcfg.seed = 2;
    tinylm::TrainConfig tc;
    tc.steps = 500;
    tc.batch_size = 20;
    auto w = tinylm::train_tiny_lm(corpus, mcfg, tc, nullptr);

    double mean16 = 0.0, mean64 = 0.0;
    int n = 0;
    for (int s = 0; s < 5; ++s) {
        for (int r = 0; r < 2; ++r) {
            const auto prompt = world.prompt_at(s, r);
            const auto logits = tinylm::forward(prompt, w).logits;
            const int target =
                int(std::max_element(logits.begin(), logits.end()) - logits.begin());
            mean16 += completeness_err(w, prompt, target, 16);
            mean64 += completeness_err(w, prompt, target, 64);
            ++n;
        }
    }
    mean16 /= n;
    mean64 /= n;
    CHECK(mean64 < 0.05);
    CHECK(mean64 < mean16);
}

TEST_CASE("completeness error shrinks on average as steps grow") {
    auto cfg = toy_cfg();
    auto w = tinylm::init_weights(cfg);
    Rng rng(78);
    double mean4 = 0.0, mean16 = 0.0, mean64 = 0.0;
    for (int k = 0; k < 10; ++k) {
        const auto prompt = random_prompt(rng, cfg.vocab_size, 4);
        const auto logits = tinylm::forward(prompt, w).logits;
        const int target =
            int(std::max_element(logits.begin(), logits.end()) - logits.begin());
        mean4 += completeness_err(w, prompt, target, 4);
        mean16 += completeness_err(w, prompt, target, 16);
        mean64 += completeness_err(w, prompt, target, 64);
    }
    CHECK(mean16 <= mean4);
    CHECK(mean64 <= mean16);
}

TEST_CASE("normalization rescales per layer by the absolute maximum") {
    AttributionMap m;
    m.layers = {{-2.0, 1.0, 4.0}, {0.0, 0.0, 0.0}, {-5.0, 2.5, 0.0}};
    auto n = normalize_attr(m);
    REQUIRE(n.size() == 3);
    CHECK(n[0] == std::vector<double>{0.5, 0.25, 1.0});
    CHECK(n[1] == std::vector<double>{0.0, 0.0, 0.0});
    CHECK(n[2] == std::vector<double>{1.0, 0.5, 0.0});
}

TEST_CASE("normalization floors tiny layers to zero") {
    AttributionMap m;
    m.layers = {{1e-13, -5e-14}, {2e-11, -1e-11}};
    auto n = normalize_attr(m);
    CHECK(n[0] == std::vector<double>{0.0, 0.0});
    CHECK(n[1] == std::vector<double>{1.0, 0.5});
    // a custom floor flips the second layer to zero as well
    auto n2 = normalize_attr(m, 1e-10);
    CHECK(n2[1] == std::vector<double>{0.0, 0.0});
}

TEST_CASE("normalized output peaks at exactly one and is idempotent") {
    Rng rng(5);
    AttributionMap m;
    m.layers.assign(3, std::vector<double>(17));
    for (auto & layer : m.layers) {
        for (auto & v : layer) {
            v = rng.normal() * 3.0;
        }
    }
    auto n = normalize_attr(m);
    for (const auto & layer : n) {
        double mx = 0.0;
        for (double v : layer) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            mx = std::max(mx, v);
        }
        CHECK(mx == 1.0);
    }
    AttributionMap again;
    again.layers = n;
    auto n2 = normalize_attr(again);
    CHECK(n2 == n);
}
