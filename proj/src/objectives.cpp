#include "rqat/objectives.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <memory>
#include <numeric>

namespace rqat::objectives {

void OptimizerConfig::validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
        throw ConfigError("OptimizerConfig: betas must lie in (0,1)");
    if (warmup_steps > total_steps)
        throw ConfigError("OptimizerConfig: warmup_steps must not exceed total_steps");
    if (grad_accum == 0 || global_batch == 0)
        throw ConfigError("OptimizerConfig: batch sizes must be positive");
}

double lr_at(const OptimizerConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (step >= cfg.total_steps) return 0.0;
    double progress = static_cast<double>(step - cfg.warmup_steps) /
                      static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void optimizer_step(model::TinyDecoder& m, const OptimizerConfig& cfg, std::size_t step) {
    cfg.validate();
    if (step > cfg.total_steps) throw ConfigError("optimizer_step: step exceeds total_steps");
    const double lr = lr_at(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (auto& [name, p] : m.params()) {
        if (p.grad.empty()) continue;
        for (double g : p.grad)
            if (!std::isfinite(g))
                throw NumericError("optimizer_step: non-finite gradient in " + name);
        if (p.adam_m.size() != p.value.size()) {
            p.adam_m.assign(p.value.size(), 0.0);
            p.adam_v.assign(p.value.size(), 0.0);
        }
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = p.adam_m[i] / bc1;
            const double vhat = p.adam_v[i] / bc2;
            p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

SeqBatch make_batch(const std::vector<taskgen::Example>& examples) {
    SeqBatch b;
    for (const auto& ex : examples) {
        std::vector<std::size_t> full = ex.full_ids();
        std::size_t prompt_len = ex.prompt_ids().size();
        std::vector<double> mask(full.size() - 1, 0.0);
        for (std::size_t t = 0; t + 1 < full.size(); ++t)
            if (t + 1 >= prompt_len) mask[t] = 1.0;  // target token is response
        b.tokens.push_back(std::move(full));
        b.target_mask.push_back(std::move(mask));
    }
    return b;
}

namespace {

struct WeightedLoss {
    ad::Tensor total;  // sum over sequences of per-seq loss * count
    double count = 0.0;

    void add(const ad::Tensor& seq_loss, double seq_count) {
        ad::Tensor weighted = ad::scale(seq_loss, seq_count);
        total = total.valid() ? ad::add(total, weighted) : weighted;
        count += seq_count;
    }
    ad::Tensor mean() const {
        if (!total.valid() || count == 0.0) throw DomainError("loss: empty batch");
        return ad::scale(total, 1.0 / count);
    }
};

double mask_count(const std::vector<double>& mask) {
    double c = 0.0;
    for (double m : mask) c += (m != 0.0) ? 1.0 : 0.0;
    return c;
}

}  // namespace

ad::Tensor sft_loss(const model::TinyDecoder& student, model::ForwardContext& ctx,
                    const SeqBatch& batch) {
    if (batch.tokens.empty()) throw DomainError("sft_loss: empty batch");
    WeightedLoss acc;
    for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
        const auto& seq = batch.tokens[i];
        std::vector<std::size_t> inputs(seq.begin(), seq.end() - 1);
        std::vector<std::size_t> targets(seq.begin() + 1, seq.end());
        ad::Tensor logits = student.forward(ctx, inputs);
        double c = mask_count(batch.target_mask[i]);
        if (c == 0.0) continue;
        acc.add(ad::cross_entropy(logits, targets, batch.target_mask[i]), c);
    }
    return acc.mean();
}

ad::Tensor kd_loss(const model::TinyDecoder& student, model::ForwardContext& ctx,
                   model::InferenceSession& teacher, const SeqBatch& batch, double temperature) {
    if (batch.tokens.empty()) throw DomainError("kd_loss: empty batch");
    if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be > 0");
    const std::size_t vocab = student.config().vocab_size;
    const double inv_t = 1.0 / temperature;
    WeightedLoss acc;
    for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
        const auto& seq = batch.tokens[i];
        std::vector<std::size_t> inputs(seq.begin(), seq.end() - 1);
        std::vector<double> t_logits = teacher.full_logits(inputs);
        if (t_logits.size() != inputs.size() * vocab)
            throw ConfigError("kd_loss: teacher/student vocab mismatch");
        if (temperature != 1.0)
            for (double& v : t_logits) v *= inv_t;
        ad::Tensor teacher_leaf = ad::Tensor::leaf({inputs.size(), vocab}, std::move(t_logits));
        ad::Tensor s_logits = student.forward(ctx, inputs);
        if (temperature != 1.0) s_logits = ad::scale(s_logits, inv_t);
        double c = mask_count(batch.target_mask[i]);
        if (c == 0.0) continue;
        acc.add(ad::kl_divergence(teacher_leaf, s_logits, batch.target_mask[i]), c);
    }
    ad::Tensor loss = acc.mean();
    if (temperature != 1.0) loss = ad::scale(loss, temperature * temperature);
    return loss;
}

void GrpoConfig::validate() const {
    if (group_size < 2) throw ConfigError("GrpoConfig: group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("GrpoConfig: clip_eps in (0,1)");
    if (kl_coef < 0.0) throw ConfigError("GrpoConfig: kl_coef must be >= 0");
}

std::vector<double> normalize_advantages(const std::vector<double>& rewards, double std_eps) {
    const double n = static_cast<double>(rewards.size());
    double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    double sd = std::sqrt(var / n);
    std::vector<double> adv(rewards.size(), 0.0);
    if (sd == 0.0) return adv;  // degenerate group: zero advantage
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / (sd + std_eps);
    return adv;
}

GrpoMetrics grpo_step(model::TinyDecoder& policy, const model::TinyDecoder* reference,
                      const std::vector<std::vector<std::size_t>>& prompts,
                      const GrpoConfig& cfg, const OptimizerConfig& opt, std::size_t step,
                      const Verifier& verifier, std::uint64_t rollout_seed) {
    cfg.validate();
    if (prompts.empty()) throw DomainError("grpo_step: no prompts");

    model::InferenceSession rollout(policy);
    std::unique_ptr<model::InferenceSession> ref_session;
    if (reference && cfg.kl_coef > 0.0)
        ref_session = std::make_unique<model::InferenceSession>(*reference);

    model::SamplerConfig sampler;
    sampler.temperature = cfg.rollout_temperature;
    sampler.top_p = 1.0;
    sampler.max_new_tokens = cfg.rollout_max_len;

    std::vector<RolloutGroup> groups;
    GrpoMetrics metrics;
    double total_tokens = 0.0, total_entropy = 0.0, total_len = 0.0, total_reward = 0.0;
    std::size_t n_responses = 0;
    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
        RolloutGroup grp;
        grp.prompt = prompts[pi];
        for (std::size_t g = 0; g < cfg.group_size; ++g) {
            sampler.seed = fnv1a64(&g, sizeof(g), rollout_seed ^ (0x1234567ULL * (pi + 1)));
            model::SampleResult s =
                model::sample(rollout, grp.prompt, sampler, taskgen::Tokenizer::kEos);
            double reward = 0.0;
            try {
                reward = verifier(pi, s.ids);
            } catch (const std::exception& e) {
                throw DomainError("grpo_step: verifier failed on prompt " + std::to_string(pi) +
                                  ": " + e.what());
            }
            grp.responses.push_back(s.ids);
            grp.sample_log_probs.push_back(s.log_probs);
            grp.rewards.push_back(reward);
            double ent = 0.0;
            for (double e : s.entropies) ent += e;
            if (!s.entropies.empty()) ent /= static_cast<double>(s.entropies.size());
            grp.entropies.push_back(ent);
            total_reward += reward;
            total_len += static_cast<double>(s.ids.size());
            total_entropy += ent;
            ++n_responses;
        }
        grp.advantages = normalize_advantages(grp.rewards, cfg.std_eps);
        groups.push_back(std::move(grp));
    }

    // Surrogate loss over all response tokens.
    model::ForwardContext ctx = policy.make_context();
    ad::Tensor pg_sum, kl_sum;
    double token_count = 0.0;
    for (const auto& grp : groups) {
        for (std::size_t g = 0; g < grp.responses.size(); ++g) {
            if (grp.responses[g].empty()) continue;
            std::vector<std::size_t> seq = grp.prompt;
            seq.insert(seq.end(), grp.responses[g].begin(), grp.responses[g].end());
            std::vector<std::size_t> inputs(seq.begin(), seq.end() - 1);
            std::vector<std::size_t> targets(seq.begin() + 1, seq.end());
            const std::size_t T = inputs.size();
            const std::size_t resp_start = grp.prompt.size() - 1;  // target index of 1st response tok
            std::vector<double> mask(T, 0.0);
            for (std::size_t t = resp_start; t < T; ++t) mask[t] = 1.0;

            ad::Tensor logits = policy.forward(ctx, inputs);
            // Rollouts sample at cfg.rollout_temperature; match it here so the
            // ratio is exactly 1 on-policy.
            if (cfg.rollout_temperature != 1.0)
                logits = ad::scale(logits, 1.0 / cfg.rollout_temperature);
            ad::Tensor lp = ad::token_log_probs(logits, targets);  // [T x 1]

            std::vector<double> lp_sample(T, 0.0);
            for (std::size_t t = resp_start; t < T; ++t)
                lp_sample[t] = grp.sample_log_probs[g][t - resp_start];
            ad::Tensor lp_old = ad::Tensor::leaf({T, 1}, lp_sample);
            ad::Tensor ratio = ad::exp_elem(ad::sub(lp, lp_old));
            const double adv = grp.advantages[g];
            ad::Tensor term = ad::minimum(ad::scale(ratio, adv),
                                          ad::scale(ad::clamp(ratio, 1.0 - cfg.clip_eps,
                                                              1.0 + cfg.clip_eps), adv));
            ad::Tensor masked = ad::sum_all(ad::multiply(term, ad::Tensor::leaf({T, 1}, mask)));
            pg_sum = pg_sum.valid() ? ad::add(pg_sum, masked) : masked;
            token_count += static_cast<double>(T - resp_start);

            if (ref_session) {
                std::vector<double> ref_logits = ref_session->full_logits(inputs);
                const std::size_t V = policy.config().vocab_size;
                std::vector<double> lp_ref(T, 0.0);
                for (std::size_t t = 0; t < T; ++t) {
                    const double* row = ref_logits.data() + t * V;
                    double mx = *std::max_element(row, row + V);
                    double z = 0.0;
                    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
                    lp_ref[t] = row[targets[t]] - (mx + std::log(z));
                }
                ad::Tensor delta = ad::sub(ad::Tensor::leaf({T, 1}, lp_ref), lp);
                ad::Tensor kl_est = ad::add_scalar(ad::sub(ad::exp_elem(delta), delta), -1.0);
                ad::Tensor kl_masked =
                    ad::sum_all(ad::multiply(kl_est, ad::Tensor::leaf({T, 1}, mask)));
                kl_sum = kl_sum.valid() ? ad::add(kl_sum, kl_masked) : kl_masked;
            }
        }
    }

    if (!pg_sum.valid() || token_count == 0.0) {
        metrics.reward_mean = n_responses ? total_reward / static_cast<double>(n_responses) : 0.0;
        return metrics;  // nothing sampled; no update
    }
    ad::Tensor loss = ad::scale(pg_sum, -1.0 / token_count);
    if (kl_sum.valid()) loss = ad::add(loss, ad::scale(kl_sum, cfg.kl_coef / token_count));

    policy.zero_grads();
    ad::backward(loss);
    policy.absorb_grads(ctx);
    optimizer_step(policy, opt, step);

    metrics.loss = loss.item();
    metrics.reward_mean = total_reward / static_cast<double>(n_responses);
    metrics.mean_response_length = total_len / static_cast<double>(n_responses);
    metrics.mean_token_entropy = total_entropy / static_cast<double>(n_responses);
    (void)total_tokens;
    return metrics;
}

double verify_answer(const std::vector<std::size_t>& response_ids, long long target) {
    std::string text;
    try {
        text = taskgen::Tokenizer::detokenize(response_ids);
    } catch (const DomainError&) {
        return 0.0;
    }
    auto marker = text.rfind('#');
    if (marker == std::string::npos) return 0.0;
    std::size_t i = marker + 1;
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t start = i;
    if (i < text.size() && text[i] == '-') ++i;
    std::size_t dstart = i;
    while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
    if (i == dstart) return 0.0;
    try {
        long long parsed = std::stoll(text.substr(start, i - start));
        return parsed == target ? 1.0 : 0.0;
    } catch (const std::exception&) {
        return 0.0;
    }
}

}  // namespace rqat::objectives
