#include "rqat/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace rqat {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace rqat

namespace rqat::quant {

namespace {

// Round-half-to-even, independent of the FP environment.
std::int64_t round_even(double x) {
    double fl = std::floor(x);
    double diff = x - fl;
    if (diff > 0.5) return static_cast<std::int64_t>(fl) + 1;
    if (diff < 0.5) return static_cast<std::int64_t>(fl);
    return std::fmod(fl, 2.0) == 0.0 ? static_cast<std::int64_t>(fl)
                                     : static_cast<std::int64_t>(fl) + 1;
}

}  // namespace

void QuantSpec::validate() const {
    if (bits < 2 || bits > 8) throw ConfigError("QuantSpec: bits must be in [2,8]");
    if (granularity == Granularity::PerGroupWeight && group_size == 0)
        throw ConfigError("QuantSpec: per-group granularity requires group_size > 0");
}

std::size_t QuantSpec::groups_per_row(std::size_t in_features) const {
    if (group_size == 0) return 1;
    if (in_features % group_size != 0)
        throw ConfigError("QuantSpec: group_size does not divide in-feature dimension");
    return in_features / group_size;
}

void QuantParams::validate() const {
    if (!(scale > 0.0)) throw DomainError("QuantParams: scale must be positive");
    if (q_min >= q_max) throw DomainError("QuantParams: q_min must be < q_max");
}

void QuantizedTensor::validate() const {
    const std::size_t in = cols();
    const std::size_t groups = spec.group_size == 0 ? 1 : in / spec.group_size;
    if (params.size() != rows() * groups)
        throw IntegrityError("QuantizedTensor: params count does not match group count");
    if (codes.size() != shape_numel(shape))
        throw IntegrityError("QuantizedTensor: codes size does not match shape");
    const std::size_t per_group = spec.group_size == 0 ? in : spec.group_size;
    for (std::size_t g = 0; g < params.size(); ++g) {
        for (std::size_t k = 0; k < per_group; ++k) {
            std::int64_t c = codes[g * per_group + k];
            if (c < params[g].q_min || c > params[g].q_max)
                throw IntegrityError("QuantizedTensor: code out of range for its group");
        }
    }
}

std::pair<std::int64_t, std::int64_t> code_range(int bits, Scheme scheme) {
    if (scheme == Scheme::Symmetric) {
        std::int64_t half = std::int64_t{1} << (bits - 1);
        return {-half, half - 1};
    }
    return {0, (std::int64_t{1} << bits) - 1};
}

QuantParams compute_params(std::span<const double> values, const QuantSpec& spec) {
    if (values.empty()) throw DomainError("compute_params: empty input");
    spec.validate();
    auto [q_min, q_max] = code_range(spec.bits, spec.scheme);
    QuantParams p;
    p.q_min = q_min;
    p.q_max = q_max;

    double lo = values[0], hi = values[0], amax = 0.0;
    for (double v : values) {
        if (!std::isfinite(v)) throw DomainError("compute_params: non-finite input");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        amax = std::max(amax, std::abs(v));
    }

    if (spec.scheme == Scheme::Symmetric) {
        double s = amax / static_cast<double>(q_max);
        p.scale = s > 0.0 ? s : 1.0;
        p.zero = 0;
    } else {
        double s = (hi - lo) / static_cast<double>(q_max - q_min);
        p.scale = s > 0.0 ? s : 1.0;
        std::int64_t z = round_even(-lo / p.scale);
        p.zero = std::clamp(z, q_min, q_max);
    }
    // Scales are stored at float32 precision (codes stay identical under
    // 64-bit quantization arithmetic against the stored scale).
    p.scale = static_cast<double>(static_cast<float>(p.scale));
    if (p.scale <= 0.0) p.scale = 1.0;
    return p;
}

std::int64_t quantize_one(double v, const QuantParams& p) {
    if (!std::isfinite(v)) throw DomainError("quantize: non-finite input");
    std::int64_t c = round_even(v / p.scale) + p.zero;
    return std::clamp(c, p.q_min, p.q_max);
}

std::vector<std::int64_t> quantize(std::span<const double> values, const QuantParams& p) {
    p.validate();
    std::vector<std::int64_t> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = quantize_one(values[i], p);
    return out;
}

double dequantize_one(std::int64_t code, const QuantParams& p) {
    if (code < p.q_min || code > p.q_max)
        throw IntegrityError("dequantize: code out of range");
    return p.scale * static_cast<double>(code - p.zero);
}

std::vector<double> dequantize(std::span<const std::int64_t> codes, const QuantParams& p) {
    p.validate();
    std::vector<double> out(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) out[i] = dequantize_one(codes[i], p);
    return out;
}

QuantizedTensor quantize_grouped(std::span<const double> w,
                                 std::size_t out_features, std::size_t in_features,
                                 const QuantSpec& spec) {
    spec.validate();
    if (w.size() != out_features * in_features)
        throw DomainError("quantize_grouped: data size does not match shape");
    if (spec.granularity == Granularity::PerTokenActivation)
        throw ConfigError("quantize_grouped: weight granularity required");
    const std::size_t gsz = spec.group_size == 0 ? in_features : spec.group_size;
    if (in_features % gsz != 0)
        throw ConfigError("quantize_grouped: group_size does not divide in-feature dimension");

    QuantizedTensor qt;
    qt.shape = {out_features, in_features};
    qt.spec = spec;
    qt.codes.resize(w.size());
    const std::size_t groups = in_features / gsz;
    qt.params.reserve(out_features * groups);
    for (std::size_t r = 0; r < out_features; ++r) {
        for (std::size_t g = 0; g < groups; ++g) {
            std::span<const double> grp = w.subspan(r * in_features + g * gsz, gsz);
            QuantParams p = compute_params(grp, spec);
            for (std::size_t k = 0; k < gsz; ++k)
                qt.codes[r * in_features + g * gsz + k] = quantize_one(grp[k], p);
            qt.params.push_back(p);
        }
    }
    return qt;
}

std::vector<double> dequantize_grouped(const QuantizedTensor& qt) {
    const std::size_t in = qt.cols();
    const std::size_t gsz = qt.spec.group_size == 0 ? in : qt.spec.group_size;
    const std::size_t groups = in / gsz;
    std::vector<double> out(qt.codes.size());
    for (std::size_t r = 0; r < qt.rows(); ++r) {
        for (std::size_t g = 0; g < groups; ++g) {
            const QuantParams& p = qt.params[r * groups + g];
            for (std::size_t k = 0; k < gsz; ++k) {
                std::size_t i = r * in + g * gsz + k;
                out[i] = dequantize_one(qt.codes[i], p);
            }
        }
    }
    return out;
}

PerTokenResult quantize_per_token(std::span<const double> x,
                                  std::size_t tokens, std::size_t features, int bits) {
    if (bits < 2) throw ConfigError("quantize_per_token: bits must be >= 2");
    if (x.size() != tokens * features)
        throw DomainError("quantize_per_token: data size does not match shape");
    QuantSpec spec;
    spec.bits = bits;
    spec.group_size = 0;
    spec.scheme = Scheme::Asymmetric;
    spec.granularity = Granularity::PerTokenActivation;
    PerTokenResult out;
    out.codes.resize(x.size());
    out.params.reserve(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
        std::span<const double> row = x.subspan(t * features, features);
        QuantSpec row_spec = spec;
        row_spec.granularity = Granularity::PerChannelWeight;  // param math is identical
        QuantParams p = compute_params(row, row_spec);
        for (std::size_t k = 0; k < features; ++k)
            out.codes[t * features + k] = quantize_one(row[k], p);
        out.params.push_back(p);
    }
    return out;
}

}  // namespace rqat::quant
