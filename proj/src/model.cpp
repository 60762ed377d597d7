#include "rqat/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <json.hpp>

namespace rqat::model {

using nlohmann::json;

namespace {
constexpr double kNormEps = 1e-6;
constexpr double kNegInf = -1e30;

bool is_quantizable_name(const std::string& name) {
    if (name.rfind("layer", 0) != 0) return false;
    auto dot = name.find('.');
    if (dot == std::string::npos) return false;
    std::string leaf = name.substr(dot + 1);
    return leaf == "wq" || leaf == "wk" || leaf == "wv" || leaf == "wo" ||
           leaf == "w_up" || leaf == "w_down";
}
}  // namespace

void ModelConfig::validate() const {
    if (d_model % n_heads != 0) throw ConfigError("ModelConfig: n_heads must divide d_model");
    if (vocab_size == 0 || n_layers == 0 || max_seq_len == 0)
        throw ConfigError("ModelConfig: zero-sized dimension");
    if (quant) {
        const std::size_t g = quant->spec.group_size;
        if (g != 0 && (d_model % g != 0 || d_ff % g != 0))
            throw ConfigError("ModelConfig: quant group_size must divide d_model and d_ff");
    }
}

TinyDecoder::TinyDecoder(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(init_seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    auto add = [&](const std::string& name, std::vector<std::size_t> shape, double std_dev) {
        Param p;
        p.shape = std::move(shape);
        p.value.resize(shape_numel(p.shape));
        for (auto& v : p.value) v = std_dev == 0.0 ? 0.0 : std_dev * nd(rng);
        params_[name] = std::move(p);
    };
    auto add_ones = [&](const std::string& name, std::size_t n) {
        Param p;
        p.shape = {n};
        p.value.assign(n, 1.0);
        params_[name] = std::move(p);
    };

    const double w_std = 0.06;
    const double resid_std = w_std / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
    add("embed", {cfg_.vocab_size, cfg_.d_model}, 0.05);
    add("pos", {cfg_.max_seq_len, cfg_.d_model}, 0.02);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        add_ones(p + "attn_norm", cfg_.d_model);
        add(p + "wq", {cfg_.d_model, cfg_.d_model}, w_std);
        add(p + "wk", {cfg_.d_model, cfg_.d_model}, w_std);
        add(p + "wv", {cfg_.d_model, cfg_.d_model}, w_std);
        add(p + "wo", {cfg_.d_model, cfg_.d_model}, resid_std);
        add_ones(p + "mlp_norm", cfg_.d_model);
        add(p + "w_up", {cfg_.d_ff, cfg_.d_model}, w_std);
        add(p + "w_down", {cfg_.d_model, cfg_.d_ff}, resid_std);
    }
    add_ones("final_norm", cfg_.d_model);
    add("head", {cfg_.vocab_size, cfg_.d_model}, w_std);
}

std::vector<std::string> TinyDecoder::quantizable_layers() const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        for (const char* leaf : {"wq", "wk", "wv", "wo", "w_up", "w_down"})
            names.push_back(p + leaf);
    }
    return names;
}

std::pair<std::size_t, std::size_t> TinyDecoder::layer_shape(const std::string& name) const {
    const Param& p = params_.at(name);
    if (p.shape.size() != 2) throw DomainError("layer_shape: not a matrix parameter");
    return {p.shape[0], p.shape[1]};
}

ForwardContext TinyDecoder::make_context() const {
    ForwardContext ctx;
    for (const auto& [name, p] : params_) {
        ad::Tensor leaf = ad::Tensor::leaf(p.shape, p.value);
        ctx.leaves.emplace(name, leaf);
        if (cfg_.quant && is_quantizable_name(name)) {
            ad::FakeQuantConfig fq = *cfg_.quant;
            if (fq.mode == ad::FakeQuantMode::Frozen) {
                auto it = frozen_params_.find(name);
                if (it == frozen_params_.end())
                    throw ConfigError("make_context: no frozen params for " + name);
                fq.frozen_params = it->second;
            }
            ctx.effective.emplace(name, ad::fake_quant(leaf, fq));
        } else {
            ctx.effective.emplace(name, leaf);
        }
    }
    return ctx;
}

ad::Tensor TinyDecoder::forward(ForwardContext& ctx, const std::vector<std::size_t>& tokens) const {
    const std::size_t T = tokens.size();
    if (T == 0) throw DomainError("forward: empty token sequence");
    if (T > cfg_.max_seq_len) throw DomainError("forward: sequence exceeds max_seq_len");
    for (std::size_t id : tokens)
        if (id >= cfg_.vocab_size) throw DomainError("forward: token id out of range");

    std::vector<std::size_t> positions(T);
    std::iota(positions.begin(), positions.end(), 0);
    ad::Tensor x = ad::add(ad::gather_rows(ctx.effective.at("embed"), tokens),
                           ad::gather_rows(ctx.effective.at("pos"), positions));

    // causal mask: additive 0 / -inf, shared by all layers
    std::vector<double> mask_data(T * T, 0.0);
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = i + 1; j < T; ++j) mask_data[i * T + j] = kNegInf;
    ad::Tensor causal = ad::Tensor::leaf({T, T}, mask_data);

    const std::size_t dh = cfg_.d_model / cfg_.n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        ad::Tensor h = ad::rms_norm(x, ctx.effective.at(p + "attn_norm"), kNormEps);
        ad::Tensor q = ad::matmul(h, ad::transpose(ctx.effective.at(p + "wq")));
        ad::Tensor k = ad::matmul(h, ad::transpose(ctx.effective.at(p + "wk")));
        ad::Tensor v = ad::matmul(h, ad::transpose(ctx.effective.at(p + "wv")));

        std::vector<ad::Tensor> heads;
        for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
            ad::Tensor qh = ad::slice_cols(q, hd * dh, dh);
            ad::Tensor kh = ad::slice_cols(k, hd * dh, dh);
            ad::Tensor vh = ad::slice_cols(v, hd * dh, dh);
            ad::Tensor scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_dh);
            ad::Tensor attn = ad::softmax(ad::add(scores, causal));
            heads.push_back(ad::matmul(attn, vh));
        }
        ad::Tensor attn_out = ad::concat_cols(heads);
        x = ad::add(x, ad::matmul(attn_out, ad::transpose(ctx.effective.at(p + "wo"))));

        ad::Tensor h2 = ad::rms_norm(x, ctx.effective.at(p + "mlp_norm"), kNormEps);
        ad::Tensor u = ad::silu(ad::matmul(h2, ad::transpose(ctx.effective.at(p + "w_up"))));
        x = ad::add(x, ad::matmul(u, ad::transpose(ctx.effective.at(p + "w_down"))));
    }
    ad::Tensor f = ad::rms_norm(x, ctx.effective.at("final_norm"), kNormEps);
    return ad::matmul(f, ad::transpose(ctx.effective.at("head")));
}

void TinyDecoder::absorb_grads(const ForwardContext& ctx) {
    for (auto& [name, p] : params_) {
        const ad::Tensor& leaf = ctx.leaves.at(name);
        const auto& g = leaf.grad();
        if (g.empty()) continue;
        if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
    }
}

void TinyDecoder::zero_grads() {
    for (auto& [name, p] : params_) p.grad.assign(p.value.size(), 0.0);
}

void TinyDecoder::save(const std::string& path, const std::string& extra_meta) const {
    packing::TensorMap t;
    for (const auto& [name, p] : params_) {
        packing::DenseTensor d;
        d.shape = p.shape;
        d.data = p.value;
        t["param/" + name] = std::move(d);
    }
    for (const auto& [name, fp] : frozen_params_) {
        packing::DenseTensor d;
        d.shape = {fp.size(), 2};
        d.data.reserve(fp.size() * 2);
        for (const auto& qp : fp) {
            d.data.push_back(qp.scale);
            d.data.push_back(static_cast<double>(qp.zero));
        }
        t["frozen/" + name] = std::move(d);
    }
    json meta;
    meta["kind"] = "tiny-decoder";
    meta["config"] = {{"vocab_size", cfg_.vocab_size}, {"d_model", cfg_.d_model},
                      {"n_layers", cfg_.n_layers},     {"n_heads", cfg_.n_heads},
                      {"d_ff", cfg_.d_ff},             {"max_seq_len", cfg_.max_seq_len}};
    if (cfg_.quant) {
        meta["quant"] = {{"bits", cfg_.quant->spec.bits},
                         {"group_size", cfg_.quant->spec.group_size},
                         {"scheme", cfg_.quant->spec.scheme == quant::Scheme::Symmetric
                                        ? "symmetric" : "asymmetric"},
                         {"mode", cfg_.quant->mode == ad::FakeQuantMode::DynamicMinMax
                                        ? "dynamic-minmax" : "frozen"}};
    }
    meta["extra"] = json::parse(extra_meta);
    packing::save_checkpoint(path, t, meta.dump());
}

TinyDecoder TinyDecoder::load(const std::string& path, std::string* extra_meta) {
    std::string meta_text;
    packing::TensorMap t = packing::load_checkpoint(path, &meta_text);
    json meta = json::parse(meta_text);
    if (meta.value("kind", "") != "tiny-decoder")
        throw FormatError(path + ": not a tiny-decoder checkpoint");
    ModelConfig cfg;
    const json& c = meta.at("config");
    cfg.vocab_size = c.at("vocab_size").get<std::size_t>();
    cfg.d_model = c.at("d_model").get<std::size_t>();
    cfg.n_layers = c.at("n_layers").get<std::size_t>();
    cfg.n_heads = c.at("n_heads").get<std::size_t>();
    cfg.d_ff = c.at("d_ff").get<std::size_t>();
    cfg.max_seq_len = c.at("max_seq_len").get<std::size_t>();
    if (meta.contains("quant")) {
        ad::FakeQuantConfig fq;
        const json& q = meta.at("quant");
        fq.spec.bits = q.at("bits").get<int>();
        fq.spec.group_size = q.at("group_size").get<std::size_t>();
        fq.spec.scheme = q.at("scheme").get<std::string>() == "symmetric"
                             ? quant::Scheme::Symmetric : quant::Scheme::Asymmetric;
        fq.mode = q.at("mode").get<std::string>() == "frozen" ? ad::FakeQuantMode::Frozen
                                                              : ad::FakeQuantMode::DynamicMinMax;
        cfg.quant = fq;
    }
    TinyDecoder m(cfg, 0);
    for (auto& [name, p] : m.params_) {
        auto it = t.find("param/" + name);
        if (it == t.end()) throw FormatError(path + ": missing tensor param/" + name);
        const auto& dense = std::get<packing::DenseTensor>(it->second);
        if (dense.shape != p.shape) throw FormatError(path + ": shape mismatch for " + name);
        p.value = dense.data;
    }
    if (cfg.quant) {
        auto [q_min, q_max] = quant::code_range(cfg.quant->spec.bits, cfg.quant->spec.scheme);
        for (const auto& [name, value] : t) {
            if (name.rfind("frozen/", 0) != 0) continue;
            const auto& dense = std::get<packing::DenseTensor>(value);
            std::vector<quant::QuantParams> fp(dense.shape.at(0));
            for (std::size_t i = 0; i < fp.size(); ++i) {
                fp[i].scale = dense.data[i * 2];
                fp[i].zero = static_cast<std::int64_t>(dense.data[i * 2 + 1]);
                fp[i].q_min = q_min;
                fp[i].q_max = q_max;
            }
            m.frozen_params()[name.substr(7)] = std::move(fp);
        }
    }
    if (extra_meta) *extra_meta = meta.value("extra", json::object()).dump();
    return m;
}

// ---------------------------------------------------------------------------

struct InferenceSession::LayerW {
    std::vector<double> attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
};

InferenceSession::~InferenceSession() = default;
InferenceSession::InferenceSession(InferenceSession&&) noexcept = default;

namespace {

std::vector<double> materialize_weight(const TinyDecoder& m, const std::string& name) {
    const Param& p = m.params().at(name);
    const ModelConfig& cfg = m.config();
    if (!cfg.quant || !is_quantizable_name(name)) return p.value;
    // Match the fake-quant forward exactly.
    ad::FakeQuantConfig fq = *cfg.quant;
    if (fq.mode == ad::FakeQuantMode::Frozen) {
        auto it = m.frozen_params().find(name);
        if (it == m.frozen_params().end())
            throw ConfigError("materialize: no frozen params for " + name);
        fq.frozen_params = it->second;
    }
    ad::Tensor leaf = ad::Tensor::leaf(p.shape, p.value);
    return ad::fake_quant(leaf, fq).data();
}

void rmsnorm_vec(const std::vector<double>& x, const std::vector<double>& gain,
                 std::vector<double>& out) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.size()) + kNormEps);
    out.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

// y = W x for W [out x in] row-major
void matvec(const std::vector<double>& w, std::size_t out_f, std::size_t in_f,
            const std::vector<double>& x, std::vector<double>& y) {
    using CMapM = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    y.resize(out_f);
    Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(out_f)).noalias() =
        CMapM(w.data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f)) *
        Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(in_f));
}

}  // namespace

InferenceSession::InferenceSession(const TinyDecoder& m, LinearInputHook hook)
    : cfg_(m.config()), hook_(std::move(hook)) {
    embed_ = m.params().at("embed").value;
    posemb_ = m.params().at("pos").value;
    final_norm_ = m.params().at("final_norm").value;
    head_ = m.params().at("head").value;
    layers_.resize(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        layers_[l].attn_norm = m.params().at(p + "attn_norm").value;
        layers_[l].mlp_norm = m.params().at(p + "mlp_norm").value;
        layers_[l].wq = materialize_weight(m, p + "wq");
        layers_[l].wk = materialize_weight(m, p + "wk");
        layers_[l].wv = materialize_weight(m, p + "wv");
        layers_[l].wo = materialize_weight(m, p + "wo");
        layers_[l].w_up = materialize_weight(m, p + "w_up");
        layers_[l].w_down = materialize_weight(m, p + "w_down");
    }
    reset();
}

void InferenceSession::reset() {
    pos_ = 0;
    kcache_.assign(cfg_.n_layers, {});
    vcache_.assign(cfg_.n_layers, {});
}

const std::vector<double>& InferenceSession::step(std::size_t token) {
    if (token >= cfg_.vocab_size) throw DomainError("step: token id out of range");
    if (pos_ >= cfg_.max_seq_len) throw DomainError("step: sequence exceeds max_seq_len");
    const std::size_t d = cfg_.d_model;
    const std::size_t dh = d / cfg_.n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = embed_[token * d + i] + posemb_[pos_ * d + i];

    std::vector<double> h, q, k, v, attn_out(d), o, h2, u, dn;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        LayerW& lw = layers_[l];
        std::string pfx = hook_ ? "layer" + std::to_string(l) + "." : std::string();
        rmsnorm_vec(x, lw.attn_norm, h);
        if (hook_) {
            hook_(pfx + "wq", h);
            hook_(pfx + "wk", h);
            hook_(pfx + "wv", h);
        }
        matvec(lw.wq, d, d, h, q);
        matvec(lw.wk, d, d, h, k);
        matvec(lw.wv, d, d, h, v);
        kcache_[l].insert(kcache_[l].end(), k.begin(), k.end());
        vcache_[l].insert(vcache_[l].end(), v.begin(), v.end());
        const std::size_t T = pos_ + 1;
        for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
            // scores over cached positions for this head
            std::vector<double> scores(T);
            double mx = -1e300;
            for (std::size_t t = 0; t < T; ++t) {
                double s = 0.0;
                const double* kt = kcache_[l].data() + t * d + hd * dh;
                const double* qh = q.data() + hd * dh;
                for (std::size_t j = 0; j < dh; ++j) s += qh[j] * kt[j];
                scores[t] = s * inv_sqrt_dh;
                mx = std::max(mx, scores[t]);
            }
            double z = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                scores[t] = std::exp(scores[t] - mx);
                z += scores[t];
            }
            double* out = attn_out.data() + hd * dh;
            std::fill(out, out + dh, 0.0);
            for (std::size_t t = 0; t < T; ++t) {
                double a = scores[t] / z;
                const double* vt = vcache_[l].data() + t * d + hd * dh;
                for (std::size_t j = 0; j < dh; ++j) out[j] += a * vt[j];
            }
        }
        if (hook_) hook_(pfx + "wo", attn_out);
        matvec(lw.wo, d, d, attn_out, o);
        for (std::size_t i = 0; i < d; ++i) x[i] += o[i];

        rmsnorm_vec(x, lw.mlp_norm, h2);
        if (hook_) hook_(pfx + "w_up", h2);
        matvec(lw.w_up, cfg_.d_ff, d, h2, u);
        for (double& uv : u) uv = uv / (1.0 + std::exp(-uv));
        if (hook_) hook_(pfx + "w_down", u);
        matvec(lw.w_down, d, cfg_.d_ff, u, dn);
        for (std::size_t i = 0; i < d; ++i) x[i] += dn[i];
    }
    std::vector<double> f;
    rmsnorm_vec(x, final_norm_, f);
    matvec(head_, cfg_.vocab_size, d, f, logits_);
    ++pos_;
    return logits_;
}

std::vector<double> InferenceSession::full_logits(const std::vector<std::size_t>& tokens) {
    reset();
    std::vector<double> out;
    out.reserve(tokens.size() * cfg_.vocab_size);
    for (std::size_t t : tokens) {
        const auto& l = step(t);
        out.insert(out.end(), l.begin(), l.end());
    }
    return out;
}

SampleResult sample(InferenceSession& session, const std::vector<std::size_t>& prompt,
                    const SamplerConfig& sampler, std::size_t eos_id) {
    if (!(sampler.temperature > 0.0)) throw ConfigError("sample: temperature must be positive");
    if (!(sampler.top_p > 0.0 && sampler.top_p <= 1.0))
        throw ConfigError("sample: top_p must be in (0,1]");
    if (prompt.empty()) throw DomainError("sample: empty prompt");

    session.reset();
    std::mt19937_64 rng(sampler.seed);
    const std::vector<double>* logits = nullptr;
    for (std::size_t t : prompt) logits = &session.step(t);

    SampleResult res;
    for (std::size_t n = 0; n < sampler.max_new_tokens; ++n) {
        const std::size_t V = logits->size();
        // temperature-scaled log-softmax (the pre-truncation distribution)
        std::vector<double> lp(V);
        double mx = -1e300;
        for (std::size_t i = 0; i < V; ++i) {
            lp[i] = (*logits)[i] / sampler.temperature;
            mx = std::max(mx, lp[i]);
        }
        double z = 0.0;
        for (std::size_t i = 0; i < V; ++i) z += std::exp(lp[i] - mx);
        double lz = mx + std::log(z);
        double entropy = 0.0;
        std::vector<double> probs(V);
        for (std::size_t i = 0; i < V; ++i) {
            lp[i] -= lz;
            probs[i] = std::exp(lp[i]);
            if (probs[i] > 0.0) entropy -= probs[i] * lp[i];
        }
        // nucleus: smallest prefix of mass >= top_p, sorted descending, ties by id
        std::vector<std::size_t> order(V);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (probs[a] != probs[b]) return probs[a] > probs[b];
            return a < b;
        });
        double cum = 0.0;
        std::size_t keep = 0;
        while (keep < V) {
            cum += probs[order[keep]];
            ++keep;
            if (cum >= sampler.top_p) break;
        }
        double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0) * cum;
        std::size_t chosen = order[keep - 1];
        double acc = 0.0;
        for (std::size_t i = 0; i < keep; ++i) {
            acc += probs[order[i]];
            if (u < acc) {
                chosen = order[i];
                break;
            }
        }
        res.ids.push_back(chosen);
        res.log_probs.push_back(lp[chosen]);
        res.entropies.push_back(entropy);
        if (chosen == eos_id) break;
        if (session.position() >= session.max_len()) break;
        logits = &session.step(chosen);
    }
    return res;
}

}  // namespace rqat::model
