#pragma once

#include "dnp/common.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dnp::tinylm {

// ---------------------------------------------------------------------------
// A small decoder-only transformer: pre-norm blocks, causal attention, GELU
// feed-forward, learned positional embeddings, weight-tied output head.
// Everything runs in double on the CPU; forward passes expose the post-GELU
// feed-forward hidden units at the final position so they can be read,
// perturbed, or clamped from outside.
// ---------------------------------------------------------------------------

struct ModelConfig {
    int vocab_size = 256;
    int context_len = 16;
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 128;
    uint64_t seed = 1;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

struct Block {
    std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;  // d_model
    Mat wq, wk, wv, wo;                              // d_model x d_model
    Mat w1;                                          // d_ff x d_model
    std::vector<double> b1;                          // d_ff
    Mat w2;                                          // d_model x d_ff
    std::vector<double> b2;                          // d_model
};

struct Weights {
    ModelConfig cfg;
    Mat tok_emb;  // vocab x d_model, also the tied output head
    Mat pos_emb;  // context_len x d_model
    std::vector<Block> blocks;
    std::vector<double> lnf_g, lnf_b;  // d_model
};

using dnp::ParamRef;

Weights init_weights(const ModelConfig & cfg);
std::vector<ParamRef> param_refs(Weights & w);
size_t param_count(const Weights & w);
uint64_t weights_checksum(const Weights & w);

// feed-forward hidden activations (post-GELU, post-intervention when one was
// applied) at the final position, one vector of length d_ff per layer, plus
// the per-layer standard deviation of that vector
struct ActivationTrace {
    std::vector<std::vector<double>> ffn_hidden;
    std::vector<double> sigma;
};

enum class PerturbType { noise = 0, zero = 1, scale = 2, add_vector = 3 };

const char * perturb_type_name(PerturbType t);
PerturbType perturb_type_from_name(const std::string & s);

// A temporary activation edit applied at the final position of a forward
// pass. strength[l] is a dense per-neuron vector in [0,1] (empty layer =
// untouched). sigma[l] feeds the noise operator and comes from the baseline
// trace of the episode. add[l] carries the steering vector for add_vector.
// Weights are never modified.
struct Intervention {
    PerturbType type = PerturbType::zero;
    double magnitude = 1.0;
    uint64_t rng_seed = 0;
    std::vector<std::vector<double>> strength;
    std::vector<double> sigma;
    std::vector<std::vector<double>> add;

    void validate(const ModelConfig & cfg) const;
};

struct ForwardResult {
    std::vector<double> logits;  // next-token logits at the final position
    ActivationTrace trace;
};

ForwardResult forward(std::span<const int> tokens, const Weights & w);
ForwardResult forward_with_intervention(std::span<const int> tokens, const Weights & w,
                                        const Intervention & iv);

// greedy decoding; returns only the generated continuation (not the prompt).
// The intervention, when given, is re-applied at the final position of every
// decode step. Stops after max_new_tokens, the context limit, or when
// eos_token (if >= 0) is produced.
std::vector<int> generate_greedy(std::span<const int> prompt, int max_new_tokens, const Weights & w,
                                 const Intervention * iv = nullptr, int eos_token = -1);

// mean-pooled final hidden state over all prompt positions
std::vector<double> embed_input(std::span<const int> tokens, const Weights & w);

// mean per-token log-probability of tokens[1..] given the prefix
double sequence_logprob(std::span<const int> tokens, const Weights & w);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int steps = 1500;
    int batch_size = 50;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int eval_every = 100;  // full-corpus loss checkpoints
};

struct TrainReport {
    std::vector<double> checkpoint_losses;
    double final_loss = 0.0;
    double final_accuracy = 0.0;  // last-answer-token accuracy against corpus labels
};

// next-token cross-entropy training with Adam; deterministic for a fixed
// config seed. Throws errc::numeric if the loss goes non-finite.
Weights train_tiny_lm(const std::vector<std::vector<int>> & corpus, const ModelConfig & cfg,
                      const TrainConfig & tc, TrainReport * report = nullptr);

// full-corpus mean cross-entropy under the given weights
double corpus_loss(const std::vector<std::vector<int>> & corpus, const Weights & w);

// ---------------------------------------------------------------------------
// low-level forward/backward, exposed for attribution and gradient checks
// ---------------------------------------------------------------------------

struct ForwardCache;  // opaque, defined in tinylm.cpp

struct FullForward {
    Mat logits;  // seq x vocab
    ActivationTrace trace;
    std::shared_ptr<ForwardCache> cache;
};

// clamp_ffn_last, when given, overwrites the post-GELU hidden vector of every
// layer at the final position (one vector of length d_ff per layer); the
// original computation at that point is severed from the graph.
FullForward forward_full(std::span<const int> tokens, const Weights & w,
                         const Intervention * iv = nullptr,
                         const std::vector<std::vector<double>> * clamp_ffn_last = nullptr,
                         bool keep_cache = false);

// reverse-mode pass from d(loss)/d(logits). When grads != nullptr, parameter
// gradients are accumulated into it (same layout as param_refs). When the
// forward was clamped and clamp_grads != nullptr, d(loss)/d(clamped hidden)
// is stored per layer.
void backward_full(const FullForward & fwd, std::span<const int> tokens, const Weights & w,
                   const Mat & dlogits, Weights * grads,
                   std::vector<std::vector<double>> * clamp_grads = nullptr);

Weights zero_like(const Weights & w);

// mean cross-entropy over one sequence plus parameter gradients; shared by
// the trainer and the finite-difference oracle tests
double sequence_loss_and_grad(std::span<const int> tokens, const Weights & w, Weights * grads);

}  // namespace dnp::tinylm
