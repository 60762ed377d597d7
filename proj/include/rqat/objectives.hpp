#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rqat/model.hpp"
#include "rqat/taskgen.hpp"

namespace rqat::objectives {

struct OptimizerConfig {
    double peak_lr = 1e-3;
    std::size_t warmup_steps = 180;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    std::size_t global_batch = 32;
    std::size_t grad_accum = 1;
    std::size_t total_steps = 2000;

    void validate() const;
};

// Cosine decay to zero after linear warmup.
double lr_at(const OptimizerConfig& cfg, std::size_t step);

// Adam with bias correction over Param::grad (assumed already averaged over
// the batch). `step` is 1-based. Rejects non-finite gradients.
void optimizer_step(model::TinyDecoder& m, const OptimizerConfig& cfg, std::size_t step);

struct SeqBatch {
    // Full token sequences plus a response mask over *target* positions:
    // mask[i][t] = 1 when position t+1 of sequence i is a response token.
    std::vector<std::vector<std::size_t>> tokens;
    std::vector<std::vector<double>> target_mask;  // length tokens[i].size()-1
};

SeqBatch make_batch(const std::vector<taskgen::Example>& examples);

// Mean token cross-entropy over response positions only.
ad::Tensor sft_loss(const model::TinyDecoder& student, model::ForwardContext& ctx,
                    const SeqBatch& batch);

// Mean over response positions of KL(teacher || student), both distributions
// softened by `temperature` and the loss rescaled by temperature^2 so the
// gradient magnitude stays comparable across temperatures. Teacher logits
// come from a tape-free session (no gradients).
ad::Tensor kd_loss(const model::TinyDecoder& student, model::ForwardContext& ctx,
                   model::InferenceSession& teacher, const SeqBatch& batch,
                   double temperature = 1.0);

struct GrpoConfig {
    std::size_t group_size = 8;
    double clip_eps = 0.2;
    double kl_coef = 0.0;
    double std_eps = 1e-4;
    std::size_t rollout_max_len = 48;
    std::size_t batch_prompts = 8;
    double rollout_temperature = 1.0;  // full distribution, ratio = 1 on-policy
    std::uint64_t seed = 0;

    void validate() const;
};

struct RolloutGroup {
    std::vector<std::size_t> prompt;
    std::vector<std::vector<std::size_t>> responses;
    std::vector<std::vector<double>> sample_log_probs;
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<double> entropies;  // per-response mean token entropy
};

// (r_i - mean r) / (std r + std_eps); all zero when std(r) = 0.
std::vector<double> normalize_advantages(const std::vector<double>& rewards, double std_eps);

// Scores one sampled response for the prompt at `prompt_idx`.
using Verifier = std::function<double(std::size_t prompt_idx, const std::vector<std::size_t>&)>;

struct GrpoMetrics {
    double loss = 0.0;
    double reward_mean = 0.0;
    double mean_response_length = 0.0;
    double mean_token_entropy = 0.0;
};

// One GRPO update: sample G responses per prompt from the current policy,
// score them, normalize advantages per group, and apply the clipped
// surrogate (plus optional KL penalty against `reference`).
GrpoMetrics grpo_step(model::TinyDecoder& policy, const model::TinyDecoder* reference,
                      const std::vector<std::vector<std::size_t>>& prompts,
                      const GrpoConfig& cfg, const OptimizerConfig& opt, std::size_t step,
                      const Verifier& verifier, std::uint64_t rollout_seed);

// Correctness reward: 1 iff the maximal signed digit string after the final
// answer marker parses to exactly `target` (leading zeros normalized).
double verify_answer(const std::vector<std::size_t>& response_ids, long long target);

}  // namespace rqat::objectives
