#include "rqat/ptq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

namespace rqat::ptq {

namespace {
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapM = Eigen::Map<const MatRM>;
}  // namespace

void HessianAccumulator::accumulate(std::span<const double> x_batch, std::size_t tokens) {
    if (tokens == 0) return;
    if (x_batch.size() != tokens * dim)
        throw DomainError("HessianAccumulator: batch width does not match dim");
    CMapM X(x_batch.data(), static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(dim));
    Eigen::Map<MatRM> H(h.data(), static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    H.noalias() += X.transpose() * X;
    n_samples += tokens;
}

void HessianAccumulator::merge(const HessianAccumulator& other) {
    if (other.dim != dim) throw DomainError("HessianAccumulator: merge dim mismatch");
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += other.h[i];
    n_samples += other.n_samples;
}

std::vector<double> effective_hessian(const HessianAccumulator& acc, double percdamp) {
    if (acc.n_samples == 0) throw DomainError("effective_hessian: no calibration samples");
    const std::size_t d = acc.dim;
    std::vector<double> h(acc.h);
    const double norm = 2.0 / static_cast<double>(acc.n_samples);
    for (double& v : h) v *= norm;
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean_diag += h[i * d + i];
    mean_diag /= static_cast<double>(d);
    const double lambda = percdamp * mean_diag;
    for (std::size_t i = 0; i < d; ++i) h[i * d + i] += lambda;
    return h;
}

double proxy_loss(std::span<const double> w, std::span<const double> w_hat,
                  std::span<const double> h, std::size_t out_f, std::size_t in_f) {
    if (w.size() != out_f * in_f || w_hat.size() != w.size() || h.size() != in_f * in_f)
        throw DomainError("proxy_loss: shape mismatch");
    CMapM W(w.data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f));
    CMapM Wh(w_hat.data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f));
    CMapM H(h.data(), static_cast<Eigen::Index>(in_f), static_cast<Eigen::Index>(in_f));
    MatRM E = W - Wh;
    return (E * H).cwiseProduct(E).sum() / static_cast<double>(out_f);
}

PtqResult rtn(std::span<const double> w, std::size_t out_f, std::size_t in_f,
              const quant::QuantSpec& spec) {
    PtqResult res;
    res.quantized = quant::quantize_grouped(w, out_f, in_f, spec);
    res.latent = quant::dequantize_grouped(res.quantized);
    double fro = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        double e = w[i] - res.latent[i];
        fro += e * e;
    }
    res.proxy_loss = fro / static_cast<double>(out_f);
    return res;
}

PtqResult gptq(std::span<const double> w, std::size_t out_f, std::size_t in_f,
               const HessianAccumulator& acc, const quant::QuantSpec& spec,
               const GptqOptions& opts) {
    spec.validate();
    if (acc.dim != in_f) throw DomainError("gptq: accumulator dim does not match in-features");
    if (w.size() != out_f * in_f) throw DomainError("gptq: data size does not match shape");
    for (double v : w)
        if (!std::isfinite(v)) throw DomainError("gptq: non-finite weight");
    const std::size_t gsz = spec.group_size == 0 ? in_f : spec.group_size;
    if (in_f % gsz != 0) throw ConfigError("gptq: group_size does not divide in-features");
    const std::size_t groups = in_f / gsz;

    std::vector<double> h = effective_hessian(acc, opts.percdamp);
    Eigen::Map<const MatRM> H(h.data(), static_cast<Eigen::Index>(in_f),
                              static_cast<Eigen::Index>(in_f));

    // Inverse via Cholesky, then the upper Cholesky factor of H^{-1}.
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) {
        double min_diag = h[0];
        for (std::size_t i = 0; i < in_f; ++i) min_diag = std::min(min_diag, h[i * in_f + i]);
        throw NumericError("gptq: damped Hessian not positive definite (min diag " +
                           std::to_string(min_diag) + ")");
    }
    Eigen::MatrixXd hinv =
        llt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(in_f),
                                            static_cast<Eigen::Index>(in_f)));
    Eigen::LLT<Eigen::MatrixXd> llt_inv(hinv);
    if (llt_inv.info() != Eigen::Success)
        throw NumericError("gptq: H^{-1} Cholesky failed");
    Eigen::MatrixXd U = llt_inv.matrixL().transpose();  // H^{-1} = U^T U

    // Processing order.
    std::vector<std::size_t> order(in_f);
    std::iota(order.begin(), order.end(), 0);
    if (opts.act_order) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return h[a * in_f + a] > h[b * in_f + b];
        });
        // Permute H^{-1}'s factor consistently: recompute on the permuted Hessian.
        Eigen::MatrixXd Hp(in_f, in_f);
        for (std::size_t i = 0; i < in_f; ++i)
            for (std::size_t j = 0; j < in_f; ++j)
                Hp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                    h[order[i] * in_f + order[j]];
        Eigen::LLT<Eigen::MatrixXd> lltp(Hp);
        if (lltp.info() != Eigen::Success) throw NumericError("gptq: permuted Hessian not PD");
        Eigen::MatrixXd hinvp = lltp.solve(
            Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(in_f),
                                      static_cast<Eigen::Index>(in_f)));
        Eigen::LLT<Eigen::MatrixXd> lltip(hinvp);
        if (lltip.info() != Eigen::Success) throw NumericError("gptq: permuted H^{-1} Cholesky failed");
        U = lltip.matrixL().transpose();
    }

    // Working copy, compensated in place; column-accessed via strides.
    std::vector<double> work(w.begin(), w.end());
    std::vector<double> compensated(w.begin(), w.end());  // pre-round values at quantization time
    std::vector<std::int64_t> codes(w.size(), 0);
    std::vector<quant::QuantParams> params(out_f * groups);
    std::vector<bool> group_ready(out_f * groups, false);

    auto group_of = [gsz](std::size_t col) { return col / gsz; };

    for (std::size_t step = 0; step < in_f; ++step) {
        const std::size_t col = order[step];
        const std::size_t g = group_of(col);
        // Group params from the current (already-compensated) group columns,
        // or from the raw weights when the caller pinned the RTN grid.
        for (std::size_t r = 0; r < out_f; ++r) {
            if (group_ready[r * groups + g]) continue;
            std::vector<double> vals(gsz);
            for (std::size_t k = 0; k < gsz; ++k) {
                std::size_t c = g * gsz + k;
                vals[k] = opts.use_rtn_params ? w[r * in_f + c] : work[r * in_f + c];
            }
            params[r * groups + g] = quant::compute_params(vals, spec);
            group_ready[r * groups + g] = true;
        }
        const double d_jj = U(static_cast<Eigen::Index>(step), static_cast<Eigen::Index>(step));
        for (std::size_t r = 0; r < out_f; ++r) {
            const quant::QuantParams& p = params[r * groups + g];
            const double wv = work[r * in_f + col];
            compensated[r * in_f + col] = wv;
            std::int64_t code = quant::quantize_one(wv, p);
            codes[r * in_f + col] = code;
            const double what = quant::dequantize_one(code, p);
            const double err = (wv - what) / d_jj;
            for (std::size_t s2 = step + 1; s2 < in_f; ++s2) {
                work[r * in_f + order[s2]] -=
                    err * U(static_cast<Eigen::Index>(step), static_cast<Eigen::Index>(s2));
            }
        }
    }

    PtqResult res;
    res.quantized.shape = {out_f, in_f};
    res.quantized.codes = std::move(codes);
    res.quantized.params = std::move(params);
    res.quantized.spec = spec;
    std::vector<double> dq = quant::dequantize_grouped(res.quantized);

    // Greedy compensation is not guaranteed to beat RTN on every instance.
    // Rows are independent in the trace objective, so keep the RTN solution
    // for any row it scores strictly better on.
    {
        quant::QuantizedTensor rq = quant::quantize_grouped(w, out_f, in_f, spec);
        std::vector<double> rdq = quant::dequantize_grouped(rq);
        auto row_loss = [&](const std::vector<double>& w_hat, std::size_t r) {
            double loss = 0.0;
            for (std::size_t i = 0; i < in_f; ++i) {
                double ei = w[r * in_f + i] - w_hat[r * in_f + i];
                for (std::size_t j = 0; j < in_f; ++j)
                    loss += ei * h[i * in_f + j] * (w[r * in_f + j] - w_hat[r * in_f + j]);
            }
            return loss;
        };
        for (std::size_t r = 0; r < out_f; ++r) {
            if (row_loss(rdq, r) < row_loss(dq, r)) {
                for (std::size_t c = 0; c < in_f; ++c) {
                    res.quantized.codes[r * in_f + c] = rq.codes[r * in_f + c];
                    dq[r * in_f + c] = rdq[r * in_f + c];
                    compensated[r * in_f + c] = w[r * in_f + c];
                }
                for (std::size_t g = 0; g < groups; ++g)
                    res.quantized.params[r * groups + g] = rq.params[r * groups + g];
            }
        }
    }

    res.latent = opts.latent == GptqOptions::Latent::Compensated ? compensated : dq;
    res.proxy_loss = proxy_loss(w, dq, h, out_f, in_f);
    return res;
}

PtqResult brute_force(std::span<const double> w, std::size_t out_f, std::size_t in_f,
                      const HessianAccumulator& acc, const quant::QuantSpec& spec,
                      double percdamp) {
    spec.validate();
    const std::size_t gsz = spec.group_size == 0 ? in_f : spec.group_size;
    if (in_f % gsz != 0) throw ConfigError("brute_force: group_size does not divide in-features");
    const std::size_t groups = in_f / gsz;
    auto [q_min, q_max] = quant::code_range(spec.bits, spec.scheme);
    const std::size_t levels = static_cast<std::size_t>(q_max - q_min + 1);
    // Rows are independent in the trace objective; enumerate per row.
    double per_row = std::pow(static_cast<double>(levels), static_cast<double>(in_f));
    if (per_row * static_cast<double>(out_f) > 1e6)
        throw ConfigError("brute_force: search space exceeds 10^6 assignments");

    std::vector<double> h = effective_hessian(acc, percdamp);
    quant::QuantizedTensor grid = quant::quantize_grouped(w, out_f, in_f, spec);  // RTN params

    PtqResult res;
    res.quantized.shape = {out_f, in_f};
    res.quantized.spec = spec;
    res.quantized.params = grid.params;
    res.quantized.codes.resize(w.size());
    res.proxy_loss = 0.0;

    std::vector<std::int64_t> assign(in_f, q_min);
    for (std::size_t r = 0; r < out_f; ++r) {
        double best = std::numeric_limits<double>::infinity();
        std::vector<std::int64_t> best_codes;
        std::fill(assign.begin(), assign.end(), q_min);
        const std::size_t total = static_cast<std::size_t>(per_row);
        for (std::size_t it = 0; it < total; ++it) {
            // decode mixed-radix counter into codes
            std::size_t x = it;
            for (std::size_t c = 0; c < in_f; ++c) {
                assign[c] = q_min + static_cast<std::int64_t>(x % levels);
                x /= levels;
            }
            // objective e H e^T for this row
            std::vector<double> e(in_f);
            for (std::size_t c = 0; c < in_f; ++c) {
                const quant::QuantParams& p = grid.params[r * groups + c / gsz];
                e[c] = w[r * in_f + c] - quant::dequantize_one(
                                             std::clamp(assign[c], p.q_min, p.q_max), p);
            }
            double loss = 0.0;
            for (std::size_t i = 0; i < in_f; ++i)
                for (std::size_t j = 0; j < in_f; ++j) loss += e[i] * h[i * in_f + j] * e[j];
            if (loss < best) {
                best = loss;
                best_codes.assign(assign.begin(), assign.end());
                for (std::size_t c = 0; c < in_f; ++c) {
                    const quant::QuantParams& p = grid.params[r * groups + c / gsz];
                    best_codes[c] = std::clamp(best_codes[c], p.q_min, p.q_max);
                }
            }
        }
        res.proxy_loss += best;
        for (std::size_t c = 0; c < in_f; ++c) res.quantized.codes[r * in_f + c] = best_codes[c];
    }
    res.proxy_loss /= static_cast<double>(out_f);
    res.latent = quant::dequantize_grouped(res.quantized);
    return res;
}

std::map<std::string, HessianAccumulator> calibrate_model(
    const model::TinyDecoder& m, const std::vector<std::vector<std::size_t>>& data) {
    if (data.empty()) throw DomainError("calibrate_model: empty calibration data");
    std::map<std::string, HessianAccumulator> accs;
    for (const auto& name : m.quantizable_layers()) {
        auto [out_f, in_f] = m.layer_shape(name);
        accs.emplace(name, HessianAccumulator(in_f));
    }
    // Calibration runs the model at full precision.
    model::TinyDecoder fp = m;
    fp.mutable_config().quant.reset();
    model::InferenceSession session(fp, [&accs](const std::string& name,
                                                std::span<const double> x) {
        auto it = accs.find(name);
        if (it != accs.end()) it->second.accumulate(x, 1);
    });
    for (const auto& seq : data) {
        session.reset();
        for (std::size_t tok : seq) {
            if (session.position() >= session.max_len()) break;
            session.step(tok);
        }
    }
    return accs;
}

}  // namespace rqat::ptq
