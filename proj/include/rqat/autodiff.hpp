#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "rqat/quant.hpp"

namespace rqat::ad {

// One graph node: forward value plus a backward closure that scatters this
// node's gradient into its parents. Graphs live for a single optimization
// step and are dropped afterwards.
struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily on first accumulation
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.size() == 2 ? shape[1] : numel(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor leaf(std::vector<std::size_t> shape, std::vector<double> data);
    static Tensor scalar(double v);

    bool valid() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    const std::vector<double>& data() const { return node_->data; }
    const std::vector<double>& grad() const { return node_->grad; }
    std::size_t numel() const { return node_->numel(); }
    double item() const;

    std::shared_ptr<Node> node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

// -- primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);           // [m x k] * [k x n]
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);              // same shape
Tensor add_rowvec(const Tensor& x, const Tensor& b);       // [r x c] + [c]
Tensor sub(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);         // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor exp_elem(const Tensor& a);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t n);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor softmax(const Tensor& a);                           // last axis (rows)
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
Tensor silu(const Tensor& a);                              // x * sigmoid(x)
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Mean cross-entropy over positions with mask != 0; targets are row-wise
// class ids for logits [T x V].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                     const std::vector<double>& mask);

// Mean over masked rows of KL(softmax(p_logits) || softmax(q_logits)).
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits,
                     const std::vector<double>& mask);

// Per-row log-prob of the target id under softmax(logits): output [T].
Tensor token_log_probs(const Tensor& logits, const std::vector<std::size_t>& targets);

// Mean of elements where mask != 0.
Tensor masked_mean(const Tensor& a, const std::vector<double>& mask);

// -- fake quantization -----------------------------------------------------

enum class FakeQuantMode { DynamicMinMax, Frozen };

struct FakeQuantConfig {
    quant::QuantSpec spec;
    FakeQuantMode mode = FakeQuantMode::DynamicMinMax;
    std::vector<quant::QuantParams> frozen_params;  // required when frozen
};

// Forward: dequantize(quantize_grouped(W)). Backward: straight-through with
// the clip mask on the pre-clip code round(W/s) + z.
Tensor fake_quant(const Tensor& w, const FakeQuantConfig& cfg);

// -- backward --------------------------------------------------------------

// Populates grad on every node reachable from `loss`; accumulates on repeat.
void backward(const Tensor& loss);

}  // namespace rqat::ad
