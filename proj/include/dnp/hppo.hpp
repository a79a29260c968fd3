#pragma once

#include "dnp/common.hpp"
#include "dnp/env.hpp"

#include <functional>
#include <vector>

namespace dnp::hppo {

// ---------------------------------------------------------------------------
// Hierarchical PPO. The high level is an actor-critic over categories; the
// low level an actor-critic over (perturbation type, magnitude index),
// conditioned on the chosen category through a learnable embedding. Both
// levels train on the same environmental reward with GAE advantages and the
// clipped surrogate objective.
// ---------------------------------------------------------------------------

struct PPOConfig {
    double gamma = 0.99;
    double lambda_gae = 0.95;
    double eps_clip = 0.2;
    double c_value = 0.5;
    double c_entropy = 0.01;
    int epochs = 4;
    int minibatch = 64;
    double lr_high = 3e-4;
    double lr_low = 3e-4;
    int horizon = 256;  // transitions per update
    int d_a = 8;        // category-embedding width
    int hidden = 64;

    void validate() const;
};

// two hidden tanh layers, linear head
struct Mlp {
    Mat w1, w2, w3;
    std::vector<double> b1, b2, b3;

    int in_dim() const { return w1.cols; }
    int out_dim() const { return w3.rows; }

    struct Cache {
        std::vector<double> x, h1, h2;
    };

    std::vector<double> forward(std::span<const double> x, Cache * c = nullptr) const;
    // accumulate parameter grads into g; optionally propagate into dx
    void backward(const Cache & c, std::span<const double> dy, Mlp & g,
                  std::vector<double> * dx) const;

    static Mlp init(int in, int hidden, int out, Rng & rng, bool zero_head);
};

enum class Level { high, low };

struct PolicyParams {
    int state_dim = 0;
    int n_h = 0;
    int n_m = 0;
    int d_a = 0;
    Mlp actor_h, critic_h;  // state -> N_H logits / scalar
    Mlp actor_l, critic_l;  // concat(state, emb[a_H]) -> (3 + N_M logits) / scalar
    Mat emb;                // N_H x d_a

    static PolicyParams init(int state_dim, int n_h, int n_m, const PPOConfig & cfg,
                             uint64_t seed);
    std::vector<ParamRef> refs();               // every tensor
    std::vector<ParamRef> level_refs(Level l);  // embedding belongs to the low level
    std::vector<double> low_input(std::span<const double> state, int a_h) const;
};

struct ActHigh {
    int a = 0;
    double logp = 0.0;
    double v = 0.0;
    std::vector<double> probs;
};
// rng == nullptr selects deterministic (argmax) mode
ActHigh act_high(std::span<const double> state, const PolicyParams & p, Rng * rng);

struct ActLow {
    int type = 0;
    int mag = 0;
    double logp = 0.0;
    double v = 0.0;
    std::vector<double> probs_type, probs_mag;
};
ActLow act_low(std::span<const double> state, int a_h, const PolicyParams & p, Rng * rng);

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

struct GaeOut {
    std::vector<double> adv;  // pre-normalization
    std::vector<double> ret;  // adv + V(s)
};
// values has T+1 entries; values[t+1] is V(s_{t+1}) with 0 supplied at
// terminal bootstraps. done gating cuts the recursion at episode ends.
GaeOut compute_gae(std::span<const double> rewards, std::span<const double> values,
                   std::span<const uint8_t> dones, double gamma, double lambda);

// per-update-batch normalization: mean 0, std 1, eps 1e-8
void normalize_advantages(std::span<double> adv);

// ---------------------------------------------------------------------------
// rollouts and updates
// ---------------------------------------------------------------------------

struct Transition {
    std::vector<double> s, s_next;
    int a_h = 0, a_type = 0, a_mag = 0;
    double r = 0.0;
    bool done = false;
    double logp_h = 0.0, logp_l = 0.0;
    double v_h = 0.0, v_l = 0.0;
    double v_h_next = 0.0, v_l_next = 0.0;  // bootstrap values, 0 at episode end
};

struct Rollouts {
    std::vector<Transition> high, low;  // identical transitions, consumed per level
    int episodes = 0;
    double reward_sum = 0.0;
    int transitions() const { return int(high.size()); }
};

// runs whole episodes until at least `horizon` transitions are collected.
// episode_seed(i) supplies the environment seed of the i-th episode overall;
// on_episode_end(total undiscounted episode reward) fires after each episode.
Rollouts collect_rollouts(env::EnvBase & e, const PolicyParams & p, int horizon, Rng & rng,
                          const std::function<uint64_t(int)> & episode_seed,
                          int & episode_index,
                          const std::function<void(double)> & on_episode_end = {});

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    int64_t t = 0;

    void step(std::vector<ParamRef> params, std::vector<ParamRef> grads, double lr);
};

struct UpdateReport {
    double l_clip = 0.0;
    double l_value = 0.0;
    double entropy = 0.0;
    double total = 0.0;
    int minibatches = 0;
};

// one level's total PPO loss over the selected samples, with optional
// analytic gradients; adv must already be normalized, ret fixed
double ppo_loss(const std::vector<Transition> & buf, std::span<const int> idx,
                std::span<const double> adv, std::span<const double> ret,
                const PolicyParams & p, const PPOConfig & cfg, Level level,
                PolicyParams * grads, UpdateReport * parts = nullptr);

// K epochs of shuffled minibatches; clears the buffer afterwards. Throws
// errc::numeric (params restored) if the loss goes non-finite.
UpdateReport ppo_update(std::vector<Transition> & buf, PolicyParams & p, Adam & opt,
                        const PPOConfig & cfg, Level level, Rng & rng);

}  // namespace dnp::hppo
