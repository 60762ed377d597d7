#pragma once

#include <map>
#include <string>
#include <vector>

#include "rqat/model.hpp"
#include "rqat/quant.hpp"

namespace rqat::ptq {

// Running sum of X^T X over calibration token rows.
struct HessianAccumulator {
    std::size_t dim = 0;
    std::vector<double> h;  // dim x dim, row-major, symmetric
    std::size_t n_samples = 0;

    explicit HessianAccumulator(std::size_t d = 0) : dim(d), h(d * d, 0.0) {}
    void accumulate(std::span<const double> x_batch, std::size_t tokens);
    void merge(const HessianAccumulator& other);
};

struct PtqResult {
    quant::QuantizedTensor quantized;
    std::vector<double> latent;  // rectified continuous weights for QAT init
    double proxy_loss = 0.0;
};

struct GptqOptions {
    double percdamp = 0.01;
    bool act_order = false;  // process columns by descending diag(H)
    enum class Latent { Dequantized, Compensated };
    Latent latent = Latent::Dequantized;
    // Compute group params from the raw weights (RTN grid) instead of the
    // compensated weights at group entry; used by the optimality oracle.
    bool use_rtn_params = false;
};

// Damped, token-normalized Hessian: (2/n) * sum X^T X + lambda I.
std::vector<double> effective_hessian(const HessianAccumulator& acc, double percdamp);

// trace((W - What) H (W - What)^T) / out_features.
double proxy_loss(std::span<const double> w, std::span<const double> w_hat,
                  std::span<const double> h, std::size_t out_f, std::size_t in_f);

PtqResult rtn(std::span<const double> w, std::size_t out_f, std::size_t in_f,
              const quant::QuantSpec& spec);

PtqResult gptq(std::span<const double> w, std::size_t out_f, std::size_t in_f,
               const HessianAccumulator& acc, const quant::QuantSpec& spec,
               const GptqOptions& opts = {});

// Exhaustive minimizer of the proxy loss over all code assignments, with
// group params fixed to the RTN params of W. Tiny instances only.
PtqResult brute_force(std::span<const double> w, std::size_t out_f, std::size_t in_f,
                      const HessianAccumulator& acc, const quant::QuantSpec& spec,
                      double percdamp = 0.01);

// Forward passes over `data` recording every quantizable linear layer's
// inputs into its accumulator. Runs the model at full precision.
std::map<std::string, HessianAccumulator> calibrate_model(
    const model::TinyDecoder& m, const std::vector<std::vector<std::size_t>>& data);

}  // namespace rqat::ptq
