#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dnp/adamask.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace dnp;
using namespace dnp::adamask;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double lgt(double p) { return std::log(p / (1.0 - p)); }

// two categories over one layer of width 8
CategorySpec tiny_spec() {
    CategorySpec s;
    s.categories = {{CategoryBlock{0, 0, 4}}, {CategoryBlock{0, 4, 8}}};
    return s;
}

}  // namespace

TEST_CASE("layer_halves covers the model in half-width blocks") {
    auto spec = CategorySpec::layer_halves(2, 128);
    REQUIRE(spec.n_h() == 4);
    CHECK_NOTHROW(spec.validate(2, 128));
    for (int k = 0; k < 4; ++k) {
        REQUIRE(spec.categories[k].size() == 1);
        const auto & b = spec.categories[k][0];
        CHECK(b.layer == k / 2);
        CHECK(b.begin == (k % 2 == 0 ? 0 : 64));
        CHECK(b.end == (k % 2 == 0 ? 64 : 128));
        CHECK(spec.sites_in(k) == 64);
    }

    CategorySpec multi;
    multi.categories = {{CategoryBlock{0, 0, 3}, CategoryBlock{1, 5, 9}},
                        {CategoryBlock{0, 3, 6}}};
    CHECK(multi.sites_in(0) == 7);
    CHECK(multi.sites_in(1) == 3);
    CHECK_NOTHROW(multi.validate(2, 16));

    // overlapping categories are allowed
    CategorySpec overlap;
    overlap.categories = {{CategoryBlock{0, 0, 6}}, {CategoryBlock{0, 4, 8}}};
    CHECK_NOTHROW(overlap.validate(1, 8));
}

TEST_CASE("category spec validation rejects malformed layouts") {
    CategorySpec one;
    one.categories = {{CategoryBlock{0, 0, 4}}};
    CHECK_THROWS_AS(one.validate(1, 8), error);

    CategorySpec empty;
    empty.categories = {{CategoryBlock{0, 0, 4}}, {}};
    CHECK_THROWS_AS(empty.validate(1, 8), error);

    CategorySpec bad_layer;
    bad_layer.categories = {{CategoryBlock{0, 0, 4}}, {CategoryBlock{1, 0, 4}}};
    CHECK_THROWS_AS(bad_layer.validate(1, 8), error);

    CategorySpec bad_range;
    bad_range.categories = {{CategoryBlock{0, 4, 4}}, {CategoryBlock{0, 0, 4}}};
    CHECK_THROWS_AS(bad_range.validate(1, 8), error);
    bad_range.categories[0] = {CategoryBlock{0, 2, 12}};
    CHECK_THROWS_AS(bad_range.validate(1, 8), error);
}

TEST_CASE("mask config validation enforces ranges") {
    MaskConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    MaskConfig bad = cfg;
    bad.tau_gate = 0.0;
    CHECK_THROWS_AS(bad.validate(), error);
    bad = cfg;
    bad.eps_th = 0.0;
    CHECK_THROWS_AS(bad.validate(), error);
    bad.eps_th = 1.0;
    CHECK_THROWS_AS(bad.validate(), error);
    bad = cfg;
    bad.lambda_sparse = -1e-9;
    CHECK_THROWS_AS(bad.validate(), error);
    bad = cfg;
    bad.lambda_l0 = -0.1;
    CHECK_THROWS_AS(bad.validate(), error);
    bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), error);
    bad = cfg;
    bad.baseline_decay = 1.0;
    CHECK_THROWS_AS(bad.validate(), error);
    bad.baseline_decay = -0.1;
    CHECK_THROWS_AS(bad.validate(), error);
}

TEST_CASE("init builds zero parameters in the spec's shape") {
    auto p = MaskParams::init(tiny_spec(), MaskConfig{});
    REQUIRE(p.theta.size() == 2);
    for (int k = 0; k < 2; ++k) {
        REQUIRE(p.theta[k].size() == 1);
        REQUIRE(p.theta[k][0].size() == 4);
        for (double t : p.theta[k][0]) {
            CHECK(t == 0.0);
        }
    }
    CHECK(p.reward_baseline == 0.0);
    // all strengths start at exactly 0.5
    CHECK(l1_norm(p) == 8 * 0.5);
}

TEST_CASE("gate strength is the temperature-scaled sigmoid") {
    std::vector<double> theta = {0.0};
    CHECK(mask_strength(theta, 1.0)[0] == 0.5);
    CHECK(mask_strength(theta, 0.1)[0] == 0.5);

    theta[0] = 1.0;
    CHECK(mask_strength(theta, 0.5)[0] == doctest::Approx(sig(2.0)).epsilon(1e-15));
    CHECK(mask_strength(theta, 0.5)[0] == doctest::Approx(0.8807970779778823).epsilon(1e-12));

    theta[0] = -50.0;
    const double lo = mask_strength(theta, 1.0)[0];
    CHECK(lo > 0.0);
    CHECK(lo < 1e-20);
    // the positive tail saturates to 1.0 at double precision around theta=37
    theta[0] = 50.0;
    CHECK(mask_strength(theta, 1.0)[0] <= 1.0);
    CHECK(mask_strength(theta, 1.0)[0] > 1.0 - 1e-15);
    theta[0] = 30.0;
    CHECK(mask_strength(theta, 1.0)[0] < 1.0);

    // monotone in theta
    std::vector<double> grid = {-3.0, -1.0, -0.25, 0.0, 0.5, 2.0, 4.0};
    auto m = mask_strength(grid, 0.7);
    for (size_t i = 1; i < m.size(); ++i) {
        CHECK(m[i] > m[i - 1]);
    }

    CHECK_THROWS_AS(mask_strength(grid, 0.0), error);
    CHECK_THROWS_AS(mask_strength(grid, -1.0), error);
}

TEST_CASE("operational mask is the elementwise product") {
    std::vector<double> m = {0.8, 0.5, 1.0, 0.0};
    std::vector<double> ones = {1.0, 1.0, 1.0, 1.0};
    std::vector<double> zeros = {0.0, 0.0, 0.0, 0.0};
    CHECK(operational_mask(m, ones) == m);
    CHECK(operational_mask(m, zeros) == zeros);
    std::vector<double> attr = {0.5, 0.2, 0.9, 0.7};
    auto op = operational_mask(m, attr);
    CHECK(op[0] == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(op[1] == doctest::Approx(0.1).epsilon(1e-15));
    for (double v : op) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    std::vector<double> short_attr = {1.0};
    CHECK_THROWS_AS(operational_mask(m, short_attr), error);
}

TEST_CASE("gate sampling is Bernoulli in distribution and seed-stable") {
    auto spec = tiny_spec();
    auto p = MaskParams::init(spec, MaskConfig{});

    // theta = 0 -> M = 0.5; empirical mean over 10,000 gates within [0.48, 0.52]
    Rng rng(123);
    long ones = 0, total = 0;
    for (int rep = 0; rep < 2500; ++rep) {
        auto s = sample_gates(p, 0, rng);
        for (const auto & blk : s.gates) {
            for (uint8_t b : blk) {
                ones += b;
                ++total;
            }
        }
    }
    REQUIRE(total == 10000);
    const double mean = double(ones) / double(total);
    CHECK(mean > 0.48);
    CHECK(mean < 0.52);

    // saturated gate is always on and carries ~zero log-probability
    auto psat = MaskParams::init(spec, MaskConfig{});
    for (auto & t : psat.theta[1][0]) {
        t = 50.0;
    }
    Rng r2(9);
    for (int rep = 0; rep < 100; ++rep) {
        auto s = sample_gates(psat, 1, r2);
        for (uint8_t b : s.gates[0]) {
            CHECK(b == 1);
        }
        CHECK(std::abs(s.logp) < 1e-18);
    }

    // fixed seed reproduces gates and logp bit-exactly
    auto pm = MaskParams::init(spec, MaskConfig{});
    pm.theta[0][0] = {-1.0, 0.3, 2.0, -0.4};
    Rng ra(77), rb(77);
    auto sa = sample_gates(pm, 0, ra);
    auto sb = sample_gates(pm, 0, rb);
    CHECK(sa.gates == sb.gates);
    CHECK(sa.logp == sb.logp);

    // logp matches the Bernoulli log-likelihood of the drawn gates
    double want = 0.0;
    auto m = mask_strength(pm.theta[0][0], pm.cfg.tau_gate);
    for (size_t i = 0; i < m.size(); ++i) {
        want += sa.gates[0][i] ? std::log(m[i]) : std::log(1.0 - m[i]);
    }
    CHECK(sa.logp == doctest::Approx(want).epsilon(1e-15));

    Rng r3(1);
    CHECK_THROWS_AS(sample_gates(pm, 2, r3), error);
    CHECK_THROWS_AS(sample_gates(pm, -1, r3), error);
}

TEST_CASE("mask loss assembles reward and penalty terms") {
    auto spec = tiny_spec();

    // zero penalties: loss is exactly the negative reward
    MaskConfig cfg;
    cfg.lambda_sparse = 0.0;
    cfg.lambda_l0 = 0.0;
    auto p = MaskParams::init(spec, cfg);
    auto b = mask_loss(1.75, p);
    CHECK(b.total == -1.75);
    CHECK(b.neg_reward == -1.75);
    CHECK(b.l1 == 0.0);
    CHECK(b.l0 == 0.0);

    // strongly negative theta: everything vanishes
    auto poff = MaskParams::init(spec, MaskConfig{});
    for (auto & cat : poff.theta) {
        for (auto & blk : cat) {
            std::fill(blk.begin(), blk.end(), -50.0);
        }
    }
    auto boff = mask_loss(0.0, poff);
    CHECK(std::abs(boff.total) < 1e-8);

    // the pinned single-entry example: theta=0, tau=1, eps=0.5, both lambdas 1
    CategorySpec single;
    single.categories = {{CategoryBlock{0, 0, 1}}, {CategoryBlock{0, 1, 2}}};
    MaskConfig c1;
    c1.lambda_sparse = 1.0;
    c1.lambda_l0 = 1.0;
    auto p1 = MaskParams::init(single, c1);
    p1.theta[1][0][0] = -50.0;  // park the other entry at ~0
    auto b1 = mask_loss(0.0, p1);
    CHECK(b1.total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(b1.l1 == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(b1.l0 == doctest::Approx(0.5).epsilon(1e-12));

    // breakdown identity and weighting
    auto p2 = MaskParams::init(spec, MaskConfig{});
    p2.theta[0][0] = {0.5, -1.0, 2.0, 0.0};
    p2.cfg.lambda_sparse = 0.3;
    p2.cfg.lambda_l0 = 0.7;
    auto b2 = mask_loss(-0.25, p2);
    CHECK(b2.total ==
          doctest::Approx(b2.neg_reward + b2.l1 + b2.l0).epsilon(1e-15));
    CHECK(b2.l1 == doctest::Approx(0.3 * b2.l1_raw).epsilon(1e-15));
    CHECK(b2.l0 == doctest::Approx(0.7 * b2.l0_raw).epsilon(1e-15));
    CHECK(b2.l1_raw == doctest::Approx(l1_norm(p2)).epsilon(1e-15));

    // penalties are monotone in each strength
    auto p3 = p2;
    p3.theta[0][0][1] += 0.5;
    auto b3 = mask_loss(-0.25, p3);
    CHECK(b3.l1 > b2.l1);
    CHECK(b3.l0 > b2.l0);
}

TEST_CASE("penalty gradients match central finite differences") {
    CategorySpec single;
    single.categories = {{CategoryBlock{0, 0, 1}}, {CategoryBlock{0, 1, 2}}};
    MaskConfig cfg;
    cfg.tau_gate = 0.7;
    cfg.eps_th = 0.3;
    cfg.lambda_sparse = 0.4;
    cfg.lambda_l0 = 0.9;

    double worst = 0.0;
    for (double th0 : {-2.0, -0.6, 0.0, 0.4, 1.3, 3.0}) {
        auto p = MaskParams::init(single, cfg);
        p.theta[0][0][0] = th0;
        p.theta[1][0][0] = -50.0;  // keep the untouched entry numerically dead

        // analytic gradient of l1 + l0 w.r.t. theta
        const double m = sig(th0 / cfg.tau_gate);
        const double u = sig(th0 / cfg.tau_gate - lgt(cfg.eps_th));
        const double analytic = cfg.lambda_sparse * m * (1.0 - m) / cfg.tau_gate +
                                cfg.lambda_l0 * u * (1.0 - u) / cfg.tau_gate;

        const double h = 1e-6;
        auto up = p, dn = p;
        up.theta[0][0][0] += h;
        dn.theta[0][0][0] -= h;
        const double fd =
            (mask_loss(0.0, up).total - mask_loss(0.0, dn).total) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic - fd) / std::max(1e-12, std::abs(fd)));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("one REINFORCE update matches the closed-form step") {
    CategorySpec single;
    single.categories = {{CategoryBlock{0, 0, 1}}, {CategoryBlock{0, 1, 2}}};
    MaskConfig cfg;
    cfg.tau_gate = 0.8;
    cfg.eps_th = 0.4;
    cfg.lambda_sparse = 0.02;
    cfg.lambda_l0 = 0.05;
    cfg.lr = 0.1;

    const double th0 = 0.6, r_ep = 1.5, baseline0 = 0.5;
    for (uint8_t gate : {uint8_t(0), uint8_t(1)}) {
        auto p = MaskParams::init(single, cfg);
        p.theta[0][0][0] = th0;
        p.reward_baseline = baseline0;
        GateRecord rec;
        rec.category = 0;
        rec.gates = {{gate}};
        update_mask(p, {rec}, r_ep);

        const double adv = r_ep - baseline0;
        const double m = sig(th0 / cfg.tau_gate);
        const double u = sig(th0 / cfg.tau_gate - lgt(cfg.eps_th));
        const double g = -adv * (double(gate) - m) / cfg.tau_gate +
                         cfg.lambda_sparse * m * (1.0 - m) / cfg.tau_gate +
                         cfg.lambda_l0 * u * (1.0 - u) / cfg.tau_gate;
        CHECK(p.theta[0][0][0] == doctest::Approx(th0 - cfg.lr * g).epsilon(1e-14));
        CHECK(p.reward_baseline ==
              doctest::Approx(0.9 * baseline0 + 0.1 * r_ep).epsilon(1e-14));
        // the untouched category must not move
        CHECK(p.theta[1][0][0] == 0.0);
    }

    // two records for the same category: REINFORCE terms add, penalties apply once
    auto p2 = MaskParams::init(single, cfg);
    p2.theta[0][0][0] = th0;
    p2.reward_baseline = baseline0;
    GateRecord on, off;
    on.category = 0;
    on.gates = {{1}};
    off.category = 0;
    off.gates = {{0}};
    update_mask(p2, {on, off}, r_ep);
    const double adv = r_ep - baseline0;
    const double m = sig(th0 / cfg.tau_gate);
    const double u = sig(th0 / cfg.tau_gate - lgt(cfg.eps_th));
    const double g2 = -adv * (1.0 - m) / cfg.tau_gate - adv * (0.0 - m) / cfg.tau_gate +
                      cfg.lambda_sparse * m * (1.0 - m) / cfg.tau_gate +
                      cfg.lambda_l0 * u * (1.0 - u) / cfg.tau_gate;
    CHECK(p2.theta[0][0][0] == doctest::Approx(th0 - cfg.lr * g2).epsilon(1e-14));
}

TEST_CASE("update_mask obeys the advantage sign and zero-advantage fixpoint") {
    auto spec = tiny_spec();
    MaskConfig cfg;
    cfg.lambda_sparse = 0.0;
    cfg.lambda_l0 = 0.0;

    // advantage zero and no penalties: bitwise fixpoint
    auto p = MaskParams::init(spec, cfg);
    p.theta[0][0] = {0.2, -0.7, 1.1, 0.0};
    p.reward_baseline = 2.0;
    auto before = p.theta;
    GateRecord rec;
    rec.category = 0;
    rec.gates = {{1, 0, 1, 1}};
    update_mask(p, {rec}, 2.0);
    CHECK(p.theta == before);

    // positive advantage with an active gate pushes theta up
    auto pu = MaskParams::init(spec, cfg);
    pu.reward_baseline = 0.0;
    update_mask(pu, {rec}, 1.0);
    CHECK(pu.theta[0][0][0] > 0.0);
    CHECK(pu.theta[0][0][2] > 0.0);
    // and an inactive gate down
    CHECK(pu.theta[0][0][1] < 0.0);

    // negative advantage flips the directions
    auto pd = MaskParams::init(spec, cfg);
    pd.reward_baseline = 1.0;
    update_mask(pd, {rec}, 0.0);
    CHECK(pd.theta[0][0][0] < 0.0);
    CHECK(pd.theta[0][0][1] > 0.0);

    // malformed records are refused
    auto pe = MaskParams::init(spec, cfg);
    CHECK_THROWS_AS(update_mask(pe, {}, 0.0), error);
    GateRecord bad;
    bad.category = 5;
    bad.gates = {{1, 0, 1, 1}};
    CHECK_THROWS_AS(update_mask(pe, {bad}, 0.0), error);
    bad.category = 0;
    bad.gates = {{1, 0}};
    CHECK_THROWS_AS(update_mask(pe, {bad}, 0.0), error);
}

TEST_CASE("the reward baseline is an EMA of episode rewards") {
    auto p = MaskParams::init(tiny_spec(), MaskConfig{});
    GateRecord rec;
    rec.category = 0;
    rec.gates = {{1, 1, 0, 0}};
    const double r = 3.0;
    for (int n = 1; n <= 10; ++n) {
        update_mask(p, {rec}, r);
        CHECK(p.reward_baseline ==
              doctest::Approx(r * (1.0 - std::pow(0.9, n))).epsilon(1e-12));
    }
}

TEST_CASE("sparsity pressure drives strengths down without reward signal") {
    // zero reward signal: advantage is identically zero, so only the
    // penalties act and every strength must fall monotonically
    for (uint64_t seed : {11u, 12u, 13u}) {
        auto spec = tiny_spec();
        MaskConfig cfg;
        cfg.lambda_sparse = 1e-2;
        auto p = MaskParams::init(spec, cfg);
        Rng rng(seed);
        double prev = l1_norm(p);
        const double init = prev;
        for (int u = 0; u < 500; ++u) {
            std::vector<GateRecord> recs;
            for (int k = 0; k < spec.n_h(); ++k) {
                auto s = sample_gates(p, k, rng);
                recs.push_back(GateRecord{k, s.gates});
            }
            update_mask(p, recs, 0.0);
            const double now = l1_norm(p);
            CHECK(now < prev);
            prev = now;
        }
        CHECK(prev < init);
    }
}

TEST_CASE("the L0 surrogate tracks the expected gate count") {
    // eps_th = 0.5 keeps the surrogate and the Bernoulli mean on the same
    // definition; agreement within +-0.05 n on n = 1000 sites
    const int n = 1000;
    CategorySpec spec;
    spec.categories = {{CategoryBlock{0, 0, n}}, {CategoryBlock{0, 0, 1}}};
    auto p = MaskParams::init(spec, MaskConfig{});
    Rng init_rng(31);
    for (auto & t : p.theta[0][0]) {
        t = 4.0 * (init_rng.uniform() - 0.5);
    }

    const double surrogate = mask_loss(0.0, p).l0_raw - sig(0.0);  // drop category 1's site

    Rng rng(55);
    double mc = 0.0;
    const int reps = 20;
    for (int rep = 0; rep < reps; ++rep) {
        auto s = sample_gates(p, 0, rng);
        long count = 0;
        for (uint8_t b : s.gates[0]) {
            count += b;
        }
        mc += double(count);
    }
    mc /= reps;
    CHECK(std::abs(surrogate - mc) <= 0.05 * n);
}

TEST_CASE("scatter_dense places blocks and resolves overlap by maximum") {
    CategorySpec spec;
    spec.categories = {{CategoryBlock{0, 2, 5}, CategoryBlock{1, 0, 2}},
                       {CategoryBlock{0, 4, 7}}};
    std::vector<std::vector<double>> vals = {{0.1, 0.2, 0.3}, {0.9, 0.8}};
    auto dense = scatter_dense(spec, 0, vals, 2, 8);
    REQUIRE(dense.size() == 2);
    REQUIRE(dense[0].size() == 8);
    CHECK(dense[0] == std::vector<double>{0.0, 0.0, 0.1, 0.2, 0.3, 0.0, 0.0, 0.0});
    CHECK(dense[1] == std::vector<double>{0.9, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0});

    // overlapping blocks within one category keep the maximum
    CategorySpec ovl;
    ovl.categories = {{CategoryBlock{0, 0, 3}, CategoryBlock{0, 1, 4}},
                      {CategoryBlock{0, 0, 1}}};
    auto d2 = scatter_dense(ovl, 0, {{0.5, 0.6, 0.7}, {0.2, 0.9, 0.1}}, 1, 4);
    CHECK(d2[0] == std::vector<double>{0.5, 0.6, 0.9, 0.1});

    CHECK_THROWS_AS(scatter_dense(spec, 2, vals, 2, 8), error);
    CHECK_THROWS_AS(scatter_dense(spec, 0, {{0.1}}, 2, 8), error);
    std::vector<std::vector<double>> wrong = {{0.1, 0.2}, {0.9, 0.8}};
    CHECK_THROWS_AS(scatter_dense(spec, 0, wrong, 2, 8), error);
}
