#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rqat/common.hpp"

namespace rqat::quant {

enum class Scheme { Symmetric, Asymmetric };
enum class Granularity { PerGroupWeight, PerChannelWeight, PerTokenActivation };

struct QuantSpec {
    int bits = 3;
    std::size_t group_size = 128;  // 0 = per-channel (one group per row)
    Scheme scheme = Scheme::Symmetric;
    Granularity granularity = Granularity::PerGroupWeight;

    void validate() const;
    // Number of groups per row of `in_features` columns.
    std::size_t groups_per_row(std::size_t in_features) const;
};

struct QuantParams {
    double scale = 1.0;   // stored at float32 precision
    std::int64_t zero = 0;
    std::int64_t q_min = 0;
    std::int64_t q_max = 0;

    void validate() const;
};

struct QuantizedTensor {
    std::vector<std::size_t> shape;        // [out, in]
    std::vector<std::int64_t> codes;       // row-major, shape_numel(shape) entries
    std::vector<QuantParams> params;       // one per group, row-major group order
    QuantSpec spec;

    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }
    void validate() const;
};

// Integer range for a scheme at N bits: symmetric [-2^{N-1}, 2^{N-1}-1],
// asymmetric [0, 2^N - 1].
std::pair<std::int64_t, std::int64_t> code_range(int bits, Scheme scheme);

// Min/max-based scale and zero point for one group of values.
// Degenerate all-equal groups fall back to scale 1 with the zero point
// placed so the constant round-trips as exactly as the grid allows.
QuantParams compute_params(std::span<const double> values, const QuantSpec& spec);

std::int64_t quantize_one(double v, const QuantParams& p);
std::vector<std::int64_t> quantize(std::span<const double> values, const QuantParams& p);

double dequantize_one(std::int64_t code, const QuantParams& p);
std::vector<double> dequantize(std::span<const std::int64_t> codes, const QuantParams& p);

// Group-wise weight quantization: each row of W [out x in] is split into
// contiguous groups along the in-feature axis. Applied to raw weights this
// is exactly RTN.
QuantizedTensor quantize_grouped(std::span<const double> w,
                                 std::size_t out_features, std::size_t in_features,
                                 const QuantSpec& spec);

std::vector<double> dequantize_grouped(const QuantizedTensor& qt);

struct PerTokenResult {
    std::vector<std::int64_t> codes;    // [tokens x features]
    std::vector<QuantParams> params;    // one per token row
};

// Asymmetric per-token activation quantization (W4A4-style primitive; not
// wired into the default weight-only workflow).
PerTokenResult quantize_per_token(std::span<const double> x,
                                  std::size_t tokens, std::size_t features, int bits);

}  // namespace rqat::quant
