#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rqat/autodiff.hpp"
#include "rqat/packing.hpp"

namespace rqat::model {

struct ModelConfig {
    std::size_t vocab_size = 20;
    std::size_t d_model = 128;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq_len = 128;
    std::optional<ad::FakeQuantConfig> quant;  // applied to the quantizable linear set

    void validate() const;
};

struct SamplerConfig {
    double temperature = 0.6;
    double top_p = 0.95;
    std::size_t max_new_tokens = 48;
    std::uint64_t seed = 0;
};

struct Param {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;   // accumulated across micro-batches
    std::vector<double> adam_m;
    std::vector<double> adam_v;

    std::size_t numel() const { return value.size(); }
};

// Leaves for one autodiff step; weight leaves of quantizable layers are
// wrapped in fake_quant when the model config requests it.
struct ForwardContext {
    std::map<std::string, ad::Tensor> leaves;     // one per parameter
    std::map<std::string, ad::Tensor> effective;  // leaf or fake-quant(leaf)
};

class TinyDecoder {
  public:
    TinyDecoder() = default;
    explicit TinyDecoder(const ModelConfig& cfg, std::uint64_t init_seed = 0);

    const ModelConfig& config() const { return cfg_; }
    ModelConfig& mutable_config() { return cfg_; }
    std::map<std::string, Param>& params() { return params_; }
    const std::map<std::string, Param>& params() const { return params_; }

    // {q,k,v,o,mlp-up,mlp-down} x n_layers, deterministic order; embeddings,
    // position table, output head, and norm gains excluded.
    std::vector<std::string> quantizable_layers() const;
    // [out, in] shape of a quantizable layer's weight.
    std::pair<std::size_t, std::size_t> layer_shape(const std::string& name) const;

    ForwardContext make_context() const;
    // Causal decoder forward over one sequence; logits [T x vocab].
    ad::Tensor forward(ForwardContext& ctx, const std::vector<std::size_t>& tokens) const;
    // Copy autodiff leaf gradients back into Param::grad (accumulating).
    void absorb_grads(const ForwardContext& ctx);
    void zero_grads();

    void save(const std::string& path, const std::string& extra_meta = "{}") const;
    static TinyDecoder load(const std::string& path, std::string* extra_meta = nullptr);

    // Per-layer group params, used when cfg.quant->mode == Frozen.
    std::map<std::string, std::vector<quant::QuantParams>>& frozen_params() {
        return frozen_params_;
    }
    const std::map<std::string, std::vector<quant::QuantParams>>& frozen_params() const {
        return frozen_params_;
    }

  private:
    ModelConfig cfg_;
    std::map<std::string, Param> params_;
    std::map<std::string, std::vector<quant::QuantParams>> frozen_params_;
};

// Hook invoked with (layer name, input row span) for every token fed through
// a quantizable linear layer; used by calibration.
using LinearInputHook = std::function<void(const std::string&, std::span<const double>)>;

// Tape-free forward engine with a KV cache, used for sampling, evaluation,
// teacher logits, and calibration. Weights are materialized once at
// construction (fake-quantized when the model config requests it).
class InferenceSession {
  public:
    explicit InferenceSession(const TinyDecoder& m, LinearInputHook hook = nullptr);
    ~InferenceSession();  // out of line: LayerW is incomplete here
    InferenceSession(InferenceSession&&) noexcept;

    void reset();
    // Feed one token; returns logits for the next position (length vocab).
    const std::vector<double>& step(std::size_t token);
    std::size_t position() const { return pos_; }
    std::size_t max_len() const { return cfg_.max_seq_len; }

    // Full-sequence logits [T x vocab] (fresh session state).
    std::vector<double> full_logits(const std::vector<std::size_t>& tokens);

  private:
    struct LayerW;
    const ModelConfig cfg_;
    std::vector<LayerW> layers_;
    std::vector<double> embed_, posemb_, final_norm_, head_;
    LinearInputHook hook_;
    std::size_t pos_ = 0;
    std::vector<std::vector<double>> kcache_, vcache_;  // per layer, [T x d_model]
    std::vector<double> logits_;
};

struct SampleResult {
    std::vector<std::size_t> ids;        // generated tokens (EOS included when hit)
    std::vector<double> log_probs;       // under the pre-truncation distribution
    std::vector<double> entropies;       // nats, pre-truncation
};

// Nucleus sampling with the seeded generator; stops at EOS or
// max_new_tokens. Log-probs/entropy come from the temperature-scaled
// distribution before top-p truncation.
SampleResult sample(InferenceSession& session, const std::vector<std::size_t>& prompt,
                    const SamplerConfig& sampler, std::size_t eos_id);

}  // namespace rqat::model
