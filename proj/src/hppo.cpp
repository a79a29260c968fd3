#include "dnp/hppo.hpp"

#include <algorithm>
#include <cmath>

namespace dnp::hppo {

void PPOConfig::validate() const {
    require(gamma >= 0.0 && gamma <= 1.0, errc::config, "ppo: gamma must lie in [0,1]");
    require(lambda_gae >= 0.0 && lambda_gae <= 1.0, errc::config,
            "ppo: lambda_gae must lie in [0,1]");
    require(eps_clip > 0.0, errc::config, "ppo: eps_clip must be positive");
    require(c_value >= 0.0 && c_entropy >= 0.0, errc::config,
            "ppo: loss coefficients must be nonnegative");
    require(epochs >= 1 && minibatch >= 1 && horizon >= 1, errc::config,
            "ppo: epochs, minibatch and horizon must be >= 1");
    require(lr_high > 0.0 && lr_low > 0.0, errc::config, "ppo: learning rates must be positive");
    require(d_a >= 1 && hidden >= 1, errc::config, "ppo: d_a and hidden must be >= 1");
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

namespace {

// orthogonal-style init: Gram-Schmidt over the smaller dimension of a
// normal-filled matrix, scaled by gain
void orthogonal(Mat & w, double gain, Rng & rng) {
    for (auto & x : w.d) {
        x = rng.normal();
    }
    const bool by_rows = w.rows <= w.cols;
    const int k = by_rows ? w.rows : w.cols;
    const int n = by_rows ? w.cols : w.rows;
    auto at = [&](int i, int j) -> double & { return by_rows ? w(i, j) : w(j, i); };
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < i; ++j) {
            double d = 0.0;
            for (int c = 0; c < n; ++c) {
                d += at(i, c) * at(j, c);
            }
            for (int c = 0; c < n; ++c) {
                at(i, c) -= d * at(j, c);
            }
        }
        double nrm = 0.0;
        for (int c = 0; c < n; ++c) {
            nrm += at(i, c) * at(i, c);
        }
        nrm = std::sqrt(nrm);
        require(nrm > 1e-12, errc::numeric, "orthogonal init degenerated");
        // keep unit norm during the sweep so later projections stay exact;
        // the gain is applied once at the end
        for (int c = 0; c < n; ++c) {
            at(i, c) /= nrm;
        }
    }
    for (auto & x : w.d) {
        x *= gain;
    }
}

int sample_categorical(std::span<const double> probs, Rng & rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
            return int(i);
        }
    }
    return int(probs.size()) - 1;
}

void check_finite(std::span<const double> v, const char * what) {
    for (double x : v) {
        require(std::isfinite(x), errc::numeric, std::string(what) + ": non-finite value");
    }
}

}  // namespace

Mlp Mlp::init(int in, int hidden, int out, Rng & rng, bool zero_head) {
    Mlp m;
    m.w1 = Mat(hidden, in);
    m.w2 = Mat(hidden, hidden);
    m.w3 = Mat(out, hidden);
    m.b1.assign(hidden, 0.0);
    m.b2.assign(hidden, 0.0);
    m.b3.assign(out, 0.0);
    const double tanh_gain = 5.0 / 3.0;
    orthogonal(m.w1, tanh_gain, rng);
    orthogonal(m.w2, tanh_gain, rng);
    if (zero_head) {
        std::fill(m.w3.d.begin(), m.w3.d.end(), 0.0);
    } else {
        orthogonal(m.w3, 1.0, rng);
    }
    return m;
}

std::vector<double> Mlp::forward(std::span<const double> x, Cache * c) const {
    require(int(x.size()) == in_dim(), errc::input, "mlp: input dimension mismatch");
    std::vector<double> h1(w1.rows), h2(w2.rows), y(w3.rows);
    matvec(w1, x, h1);
    for (int i = 0; i < w1.rows; ++i) {
        h1[i] = std::tanh(h1[i] + b1[i]);
    }
    matvec(w2, h1, h2);
    for (int i = 0; i < w2.rows; ++i) {
        h2[i] = std::tanh(h2[i] + b2[i]);
    }
    matvec(w3, h2, y);
    for (int i = 0; i < w3.rows; ++i) {
        y[i] += b3[i];
    }
    if (c != nullptr) {
        c->x.assign(x.begin(), x.end());
        c->h1 = h1;
        c->h2 = h2;
    }
    return y;
}

void Mlp::backward(const Cache & c, std::span<const double> dy, Mlp & g,
                   std::vector<double> * dx) const {
    std::vector<double> dh2(w2.rows, 0.0), dh1(w1.rows, 0.0);
    outer_acc(g.w3, dy, c.h2);
    for (int i = 0; i < w3.rows; ++i) {
        g.b3[i] += dy[i];
    }
    matvec_t_acc(w3, dy, dh2);
    for (int i = 0; i < w2.rows; ++i) {
        dh2[i] *= 1.0 - c.h2[i] * c.h2[i];
    }
    outer_acc(g.w2, dh2, c.h1);
    for (int i = 0; i < w2.rows; ++i) {
        g.b2[i] += dh2[i];
    }
    matvec_t_acc(w2, dh2, dh1);
    for (int i = 0; i < w1.rows; ++i) {
        dh1[i] *= 1.0 - c.h1[i] * c.h1[i];
    }
    outer_acc(g.w1, dh1, c.x);
    for (int i = 0; i < w1.rows; ++i) {
        g.b1[i] += dh1[i];
    }
    if (dx != nullptr) {
        dx->assign(c.x.size(), 0.0);
        matvec_t_acc(w1, dh1, *dx);
    }
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

PolicyParams PolicyParams::init(int state_dim, int n_h, int n_m, const PPOConfig & cfg,
                                uint64_t seed) {
    cfg.validate();
    require(state_dim >= 1 && n_h >= 2 && n_m >= 1, errc::config,
            "policy: state_dim >= 1, n_h >= 2, n_m >= 1 required");
    PolicyParams p;
    p.state_dim = state_dim;
    p.n_h = n_h;
    p.n_m = n_m;
    p.d_a = cfg.d_a;
    Rng rng(hash_combine(seed, 0x9901u));
    p.actor_h = Mlp::init(state_dim, cfg.hidden, n_h, rng, true);
    p.critic_h = Mlp::init(state_dim, cfg.hidden, 1, rng, false);
    p.actor_l = Mlp::init(state_dim + cfg.d_a, cfg.hidden, 3 + n_m, rng, true);
    p.critic_l = Mlp::init(state_dim + cfg.d_a, cfg.hidden, 1, rng, false);
    p.emb = Mat(n_h, cfg.d_a);
    for (auto & x : p.emb.d) {
        x = 0.1 * rng.normal();
    }
    return p;
}

namespace {

void add_mlp_refs(std::vector<ParamRef> & refs, const std::string & prefix, Mlp & m) {
    auto mat = [&](const char * n, Mat & w) {
        refs.push_back({prefix + n, w.d.data(), w.d.size(), {w.rows, w.cols}});
    };
    auto vec = [&](const char * n, std::vector<double> & v) {
        refs.push_back({prefix + n, v.data(), v.size(), {int(v.size())}});
    };
    mat("w1", m.w1);
    vec("b1", m.b1);
    mat("w2", m.w2);
    vec("b2", m.b2);
    mat("w3", m.w3);
    vec("b3", m.b3);
}

}  // namespace

std::vector<ParamRef> PolicyParams::refs() {
    auto r = level_refs(Level::high);
    auto lo = level_refs(Level::low);
    r.insert(r.end(), lo.begin(), lo.end());
    return r;
}

std::vector<ParamRef> PolicyParams::level_refs(Level l) {
    std::vector<ParamRef> r;
    if (l == Level::high) {
        add_mlp_refs(r, "actor_h.", actor_h);
        add_mlp_refs(r, "critic_h.", critic_h);
    } else {
        add_mlp_refs(r, "actor_l.", actor_l);
        add_mlp_refs(r, "critic_l.", critic_l);
        r.push_back({"emb", emb.d.data(), emb.d.size(), {emb.rows, emb.cols}});
    }
    return r;
}

std::vector<double> PolicyParams::low_input(std::span<const double> state, int a_h) const {
    require(a_h >= 0 && a_h < n_h, errc::input, "low_input: category out of range");
    std::vector<double> in(state.begin(), state.end());
    in.insert(in.end(), emb.row(a_h), emb.row(a_h) + d_a);
    return in;
}

// ---------------------------------------------------------------------------
// acting
// ---------------------------------------------------------------------------

ActHigh act_high(std::span<const double> state, const PolicyParams & p, Rng * rng) {
    ActHigh out;
    auto logits = p.actor_h.forward(state);
    check_finite(logits, "act_high");
    out.probs = logits;
    softmax_inplace(out.probs);
    out.a = rng != nullptr ? sample_categorical(out.probs, *rng) : argmax(out.probs);
    out.logp = log_softmax_at(logits, out.a);
    out.v = p.critic_h.forward(state)[0];
    return out;
}

ActLow act_low(std::span<const double> state, int a_h, const PolicyParams & p, Rng * rng) {
    ActLow out;
    const auto in = p.low_input(state, a_h);
    auto logits = p.actor_l.forward(in);
    check_finite(logits, "act_low");
    std::span<const double> lt(logits.data(), 3);
    std::span<const double> lm(logits.data() + 3, size_t(p.n_m));
    out.probs_type.assign(lt.begin(), lt.end());
    softmax_inplace(out.probs_type);
    out.probs_mag.assign(lm.begin(), lm.end());
    softmax_inplace(out.probs_mag);
    out.type = rng != nullptr ? sample_categorical(out.probs_type, *rng) : argmax(out.probs_type);
    out.mag = rng != nullptr ? sample_categorical(out.probs_mag, *rng) : argmax(out.probs_mag);
    out.logp = log_softmax_at(lt, out.type) + log_softmax_at(lm, out.mag);
    out.v = p.critic_l.forward(in)[0];
    return out;
}

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

GaeOut compute_gae(std::span<const double> rewards, std::span<const double> values,
                   std::span<const uint8_t> dones, double gamma, double lambda) {
    const size_t T = rewards.size();
    require(values.size() == T + 1, errc::input, "gae: values must have T+1 entries");
    require(dones.size() == T, errc::input, "gae: dones must have T entries");
    GaeOut out;
    out.adv.assign(T, 0.0);
    out.ret.assign(T, 0.0);
    double acc = 0.0;
    for (size_t i = T; i-- > 0;) {
        const double live = dones[i] ? 0.0 : 1.0;
        const double delta = rewards[i] + gamma * values[i + 1] * live - values[i];
        acc = delta + gamma * lambda * live * acc;
        out.adv[i] = acc;
        out.ret[i] = acc + values[i];
    }
    return out;
}

void normalize_advantages(std::span<double> adv) {
    if (adv.empty()) {
        return;
    }
    const double mu = mean(adv);
    const double sd = stddev(adv);
    for (auto & a : adv) {
        a = (a - mu) / (sd + 1e-8);
    }
}

// ---------------------------------------------------------------------------
// rollouts
// ---------------------------------------------------------------------------

Rollouts collect_rollouts(env::EnvBase & e, const PolicyParams & p, int horizon, Rng & rng,
                          const std::function<uint64_t(int)> & episode_seed,
                          int & episode_index,
                          const std::function<void(double)> & on_episode_end) {
    require(horizon >= 1, errc::input, "collect: horizon must be >= 1");
    Rollouts out;
    while (out.transitions() < horizon) {
        env::EnvState s = e.reset(episode_seed(episode_index), episode_index);
        episode_index += 1;
        double ep_r = 0.0;
        int prev = -1;
        while (!e.done()) {
            const auto ah = act_high(s.v, p, &rng);
            const auto al = act_low(s.v, ah.a, p, &rng);
            if (prev >= 0) {
                out.high[prev].v_h_next = ah.v;
                out.high[prev].v_l_next = al.v;
            }
            auto so = e.step({ah.a, al.type, al.mag});
            Transition tr;
            tr.s = std::move(s.v);
            tr.s_next = so.state.v;
            tr.a_h = ah.a;
            tr.a_type = al.type;
            tr.a_mag = al.mag;
            tr.r = so.r;
            tr.done = so.done;
            tr.logp_h = ah.logp;
            tr.logp_l = al.logp;
            tr.v_h = ah.v;
            tr.v_l = al.v;
            out.high.push_back(std::move(tr));
            prev = int(out.high.size()) - 1;
            ep_r += so.r;
            s = std::move(so.state);
        }
        out.episodes += 1;
        out.reward_sum += ep_r;
        if (on_episode_end) {
            on_episode_end(ep_r);
        }
    }
    out.low = out.high;
    return out;
}

// ---------------------------------------------------------------------------
// updates
// ---------------------------------------------------------------------------

void Adam::step(std::vector<ParamRef> params, std::vector<ParamRef> grads, double lr) {
    size_t total = 0;
    for (const auto & r : params) {
        total += r.n;
    }
    if (m.size() != total) {
        require(m.empty(), errc::state, "adam: parameter layout changed");
        m.assign(total, 0.0);
        v.assign(total, 0.0);
    }
    t += 1;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    size_t off = 0;
    for (size_t r = 0; r < params.size(); ++r) {
        double * p = params[r].data;
        const double * g = grads[r].data;
        for (size_t i = 0; i < params[r].n; ++i) {
            m[off + i] = beta1 * m[off + i] + (1.0 - beta1) * g[i];
            v[off + i] = beta2 * v[off + i] + (1.0 - beta2) * g[i] * g[i];
            p[i] -= lr * (m[off + i] / bc1) / (std::sqrt(v[off + i] / bc2) + eps);
        }
        off += params[r].n;
    }
}

namespace {

// d(entropy-term)/dlogit_j for one softmax head, already scaled by -c_ent/N:
// dH/dlogit_j = -p_j (log p_j + H)
void entropy_backward(std::span<const double> probs, double h, double scale,
                      std::span<double> dlogits) {
    for (size_t j = 0; j < probs.size(); ++j) {
        const double lp = probs[j] > 0.0 ? std::log(probs[j]) : 0.0;
        dlogits[j] += scale * -probs[j] * (lp + h);
    }
}

// gradient coefficient of the clipped surrogate wrt the new logp
double surrogate_coef(double ratio, double adv, double eps_clip) {
    const double arm1 = ratio * adv;
    const double arm2 = std::clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * adv;
    if (arm1 <= arm2) {
        return ratio * adv;
    }
    return ratio > 1.0 - eps_clip && ratio < 1.0 + eps_clip ? ratio * adv : 0.0;
}

}  // namespace

double ppo_loss(const std::vector<Transition> & buf, std::span<const int> idx,
                std::span<const double> adv, std::span<const double> ret,
                const PolicyParams & p, const PPOConfig & cfg, Level level,
                PolicyParams * grads, UpdateReport * parts) {
    require(!idx.empty(), errc::input, "ppo_loss: empty minibatch");
    const double N = double(idx.size());
    double sum_clip = 0.0, sum_v = 0.0, sum_ent = 0.0;

    for (int i : idx) {
        const auto & tr = buf[size_t(i)];
        const double a_hat = adv[size_t(i)];
        const double target = ret[size_t(i)];

        if (level == Level::high) {
            Mlp::Cache ca, cv;
            auto logits = p.actor_h.forward(tr.s, &ca);
            const double lp_new = log_softmax_at(logits, tr.a_h);
            const double ratio = std::exp(lp_new - tr.logp_h);
            const double surr =
                std::min(ratio * a_hat,
                         std::clamp(ratio, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip) * a_hat);
            sum_clip -= surr;

            std::vector<double> probs = logits;
            softmax_inplace(probs);
            const double h = entropy(probs);
            sum_ent += h;

            const double v = p.critic_h.forward(tr.s, &cv)[0];
            sum_v += (v - target) * (v - target);

            if (grads != nullptr) {
                const double dlp = -surrogate_coef(ratio, a_hat, cfg.eps_clip) / N;
                std::vector<double> dlogits(probs.size());
                for (size_t j = 0; j < probs.size(); ++j) {
                    dlogits[j] = dlp * ((int(j) == tr.a_h ? 1.0 : 0.0) - probs[j]);
                }
                entropy_backward(probs, h, -cfg.c_entropy / N, dlogits);
                p.actor_h.backward(ca, dlogits, grads->actor_h, nullptr);

                const std::vector<double> dv = {cfg.c_value * 2.0 * (v - target) / N};
                p.critic_h.backward(cv, dv, grads->critic_h, nullptr);
            }
        } else {
            const auto in = p.low_input(tr.s, tr.a_h);
            Mlp::Cache ca, cv;
            auto logits = p.actor_l.forward(in, &ca);
            std::span<const double> lt(logits.data(), 3);
            std::span<const double> lm(logits.data() + 3, size_t(p.n_m));
            const double lp_new = log_softmax_at(lt, tr.a_type) + log_softmax_at(lm, tr.a_mag);
            const double ratio = std::exp(lp_new - tr.logp_l);
            const double surr =
                std::min(ratio * a_hat,
                         std::clamp(ratio, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip) * a_hat);
            sum_clip -= surr;

            std::vector<double> pt(lt.begin(), lt.end());
            softmax_inplace(pt);
            std::vector<double> pm(lm.begin(), lm.end());
            softmax_inplace(pm);
            const double ht = entropy(pt);
            const double hm = entropy(pm);
            sum_ent += ht + hm;

            const double v = p.critic_l.forward(in, &cv)[0];
            sum_v += (v - target) * (v - target);

            if (grads != nullptr) {
                const double dlp = -surrogate_coef(ratio, a_hat, cfg.eps_clip) / N;
                std::vector<double> dlogits(logits.size(), 0.0);
                for (int j = 0; j < 3; ++j) {
                    dlogits[j] = dlp * ((j == tr.a_type ? 1.0 : 0.0) - pt[j]);
                }
                for (int j = 0; j < p.n_m; ++j) {
                    dlogits[3 + j] = dlp * ((j == tr.a_mag ? 1.0 : 0.0) - pm[j]);
                }
                entropy_backward(pt, ht, -cfg.c_entropy / N, {dlogits.data(), 3});
                entropy_backward(pm, hm, -cfg.c_entropy / N, {dlogits.data() + 3, size_t(p.n_m)});
                std::vector<double> dx;
                p.actor_l.backward(ca, dlogits, grads->actor_l, &dx);
                for (int c = 0; c < p.d_a; ++c) {
                    grads->emb(tr.a_h, c) += dx[size_t(p.state_dim) + c];
                }
                const std::vector<double> dv = {cfg.c_value * 2.0 * (v - target) / N};
                p.critic_l.backward(cv, dv, grads->critic_l, &dx);
                for (int c = 0; c < p.d_a; ++c) {
                    grads->emb(tr.a_h, c) += dx[size_t(p.state_dim) + c];
                }
            }
        }
    }

    const double l_clip = sum_clip / N;
    const double l_value = sum_v / N;
    const double ent = sum_ent / N;
    if (parts != nullptr) {
        parts->l_clip = l_clip;
        parts->l_value = l_value;
        parts->entropy = ent;
    }
    return l_clip + cfg.c_value * l_value - cfg.c_entropy * ent;
}

UpdateReport ppo_update(std::vector<Transition> & buf, PolicyParams & p, Adam & opt,
                        const PPOConfig & cfg, Level level, Rng & rng) {
    require(!buf.empty(), errc::input, "ppo_update: empty buffer");
    const size_t T = buf.size();

    std::vector<double> rewards(T), values(T + 1);
    std::vector<uint8_t> dones(T);
    for (size_t i = 0; i < T; ++i) {
        rewards[i] = buf[i].r;
        values[i] = level == Level::high ? buf[i].v_h : buf[i].v_l;
        dones[i] = buf[i].done ? 1 : 0;
    }
    values[T] = level == Level::high ? buf[T - 1].v_h_next : buf[T - 1].v_l_next;
    auto gae = compute_gae(rewards, values, dones, cfg.gamma, cfg.lambda_gae);
    normalize_advantages(gae.adv);

    const PolicyParams snapshot = p;
    const Adam opt_snapshot = opt;
    PolicyParams grads = p;  // same shapes, zeroed per minibatch

    UpdateReport report;
    std::vector<int> order(T);
    for (size_t i = 0; i < T; ++i) {
        order[i] = int(i);
    }
    const double lr = level == Level::high ? cfg.lr_high : cfg.lr_low;
    double sum_clip = 0.0, sum_v = 0.0, sum_ent = 0.0, sum_total = 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = int(T) - 1; i > 0; --i) {
            std::swap(order[i], order[rng.uniform_int(i + 1)]);
        }
        for (size_t start = 0; start < T; start += size_t(cfg.minibatch)) {
            const size_t stop = std::min(T, start + size_t(cfg.minibatch));
            std::span<const int> idx(order.data() + start, stop - start);
            for (auto & ref : grads.refs()) {
                std::fill(ref.data, ref.data + ref.n, 0.0);
            }
            UpdateReport parts;
            const double total = ppo_loss(buf, idx, gae.adv, gae.ret, p, cfg, level, &grads,
                                          &parts);
            if (!std::isfinite(total)) {
                p = snapshot;
                opt = opt_snapshot;
                fail(errc::numeric, "ppo_update: non-finite loss, parameters restored");
            }
            opt.step(p.level_refs(level), grads.level_refs(level), lr);
            sum_clip += parts.l_clip;
            sum_v += parts.l_value;
            sum_ent += parts.entropy;
            sum_total += total;
            report.minibatches += 1;
        }
    }
    report.l_clip = sum_clip / report.minibatches;
    report.l_value = sum_v / report.minibatches;
    report.entropy = sum_ent / report.minibatches;
    report.total = sum_total / report.minibatches;
    buf.clear();
    return report;
}

}  // namespace dnp::hppo
