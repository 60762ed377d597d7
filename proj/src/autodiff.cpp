#include "rqat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <Eigen/Dense>

namespace rqat::ad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

std::shared_ptr<Node> make_node(std::vector<std::size_t> shape,
                                std::vector<double> data,
                                std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
    return n;
}

void check2d(const Tensor& t, const char* who) {
    if (t.shape().size() != 2) throw DomainError(std::string(who) + ": 2-D tensor required");
}

std::int64_t round_even(double x) {
    double fl = std::floor(x);
    double diff = x - fl;
    if (diff > 0.5) return static_cast<std::int64_t>(fl) + 1;
    if (diff < 0.5) return static_cast<std::int64_t>(fl);
    return std::fmod(fl, 2.0) == 0.0 ? static_cast<std::int64_t>(fl)
                                     : static_cast<std::int64_t>(fl) + 1;
}

}  // namespace

Tensor Tensor::leaf(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) throw DomainError("leaf: shape/data mismatch");
    return Tensor(make_node(std::move(shape), std::move(data), {}, nullptr));
}

Tensor Tensor::scalar(double v) { return leaf({1}, {v}); }

double Tensor::item() const {
    if (numel() != 1) throw DomainError("item: tensor is not a scalar");
    return node_->data[0];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check2d(a, "matmul");
    check2d(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) throw DomainError("matmul: inner dimensions disagree");
    std::vector<double> out(m * n);
    CMapM A(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    CMapM B(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MapM(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() = A * B;
    auto an = a.node(), bn = b.node();
    return Tensor(make_node({m, n}, std::move(out), {an, bn}, [m, k, n](Node& self) {
        CMapM G(self.grad.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        CMapM A(pa.data.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
        CMapM B(pb.data.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        MapM(pa.grad.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)).noalias() += G * B.transpose();
        MapM(pb.grad.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n)).noalias() += A.transpose() * G;
    }));
}

Tensor transpose(const Tensor& a) {
    check2d(a, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
    return Tensor(make_node({c, r}, std::move(out), {a.node()}, [r, c](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
    }));
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DomainError("add: shape mismatch");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor(make_node(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
        for (auto& p : self.parents) {
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    }));
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    check2d(x, "add_rowvec");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    if (b.numel() != c) throw DomainError("add_rowvec: vector length mismatch");
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] + b.data()[j];
    return Tensor(make_node(x.shape(), std::move(out), {x.node(), b.node()}, [r, c](Node& self) {
        Node& px = *self.parents[0];
        Node& pb = *self.parents[1];
        px.ensure_grad();
        pb.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                px.grad[i * c + j] += self.grad[i * c + j];
                pb.grad[j] += self.grad[i * c + j];
            }
    }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DomainError("sub: shape mismatch");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor(make_node(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa.grad[i] += self.grad[i];
            pb.grad[i] -= self.grad[i];
        }
    }));
}

Tensor multiply(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DomainError("multiply: shape mismatch");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor(make_node(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa.grad[i] += self.grad[i] * pb.data[i];
            pb.grad[i] += self.grad[i] * pa.data[i];
        }
    }));
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return Tensor(make_node(a.shape(), std::move(out), {a.node()}, [c](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * c;
    }));
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    return Tensor(make_node(a.shape(), std::move(out), {a.node()}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }));
}

Tensor exp_elem(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return Tensor(make_node(a.shape(), std::move(out), {a.node()}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.data[i];
    }));
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DomainError("minimum: shape mismatch");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
    return Tensor(make_node(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (pa.data[i] <= pb.data[i])
                pa.grad[i] += self.grad[i];
            else
                pb.grad[i] += self.grad[i];
        }
    }));
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.data()[i], lo, hi);
    return Tensor(make_node(a.shape(), std::move(out), {a.node()}, [lo, hi](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (p.data[i] > lo && p.data[i] < hi) p.grad[i] += self.grad[i];
    }));
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
    check2d(table, "gather-rows");
    const std::size_t c = table.shape()[1];
    for (std::size_t id : ids)
        if (id >= table.shape()[0]) throw DomainError("gather-rows: row id out of range");
    std::vector<double> out(ids.size() * c);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data().data() + ids[i] * c, c, out.data() + i * c);
    return Tensor(make_node({ids.size(), c}, std::move(out), {table.node()}, [ids, c](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) p.grad[ids[i] * c + j] += self.grad[i * c + j];
    }));
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t n) {
    check2d(a, "slice-cols");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    if (start + n > c) throw DomainError("slice-cols: range out of bounds");
    std::vector<double> out(r * n);
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(a.data().data() + i * c + start, n, out.data() + i * n);
    return Tensor(make_node({r, n}, std::move(out), {a.node()}, [r, c, start, n](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < n; ++j) p.grad[i * c + start + j] += self.grad[i * n + j];
    }));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DomainError("concat-cols: empty input");
    const std::size_t r = parts[0].shape()[0];
    std::size_t c = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        check2d(p, "concat-cols");
        if (p.shape()[0] != r) throw DomainError("concat-cols: row count mismatch");
        widths.push_back(p.shape()[1]);
        c += p.shape()[1];
        parents.push_back(p.node());
    }
    std::vector<double> out(r * c);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(parts[k].data().data() + i * widths[k], widths[k], out.data() + i * c + off);
        off += widths[k];
    }
    return Tensor(make_node({r, c}, std::move(out), std::move(parents), [r, c, widths](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            Node& p = *self.parents[k];
            p.ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < widths[k]; ++j)
                    p.grad[i * widths[k] + j] += self.grad[i * c + off + j];
            off += widths[k];
        }
    }));
}

Tensor softmax(const Tensor& a) {
    check2d(a, "softmax");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = a.data().data() + i * c;
        double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(row[j] - mx);
            z += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    return Tensor(make_node(a.shape(), std::move(out), {a.node()}, [r, c](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.data[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                p.grad[i * c + j] += self.data[i * c + j] * (self.grad[i * c + j] - dot);
        }
    }));
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    check2d(x, "rms-normalize");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    if (gain.numel() != c) throw DomainError("rms-normalize: gain length mismatch");
    std::vector<double> out(x.numel());
    std::vector<double> inv_rms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < c; ++j) ms += x.data()[i * c + j] * x.data()[i * c + j];
        inv_rms[i] = 1.0 / std::sqrt(ms / static_cast<double>(c) + eps);
        for (std::size_t j = 0; j < c; ++j)
            out[i * c + j] = x.data()[i * c + j] * inv_rms[i] * gain.data()[j];
    }
    return Tensor(make_node(x.shape(), std::move(out), {x.node(), gain.node()},
                            [r, c, inv_rms](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        px.ensure_grad();
        pg.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;  // sum_j dy_j * g_j * x_j
            for (std::size_t j = 0; j < c; ++j)
                dot += self.grad[i * c + j] * pg.data[j] * px.data[i * c + j];
            const double ir = inv_rms[i];
            for (std::size_t j = 0; j < c; ++j) {
                double xj = px.data[i * c + j];
                pg.grad[j] += self.grad[i * c + j] * xj * ir;
                px.grad[i * c + j] += ir * (self.grad[i * c + j] * pg.data[j] -
                                            xj * ir * ir * dot / static_cast<double>(c));
            }
        }
    }));
}

Tensor silu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-a.data()[i]));
        out[i] = a.data()[i] * s;
    }
    return Tensor(make_node(a.shape(), std::move(out), {a.node()}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double x = p.data[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            p.grad[i] += self.grad[i] * (s + x * s * (1.0 - s));
        }
    }));
}

Tensor sum_all(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return Tensor(make_node({1}, {total}, {a.node()}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (double& g : p.grad) g += self.grad[0];
    }));
}

Tensor mean_all(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    return Tensor(make_node({1}, {total * inv}, {a.node()}, [inv](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (double& g : p.grad) g += self.grad[0] * inv;
    }));
}

namespace {

// log-softmax rows of logits, written into `out` (size r*c).
void log_softmax_rows(const std::vector<double>& logits, std::size_t r, std::size_t c,
                      std::vector<double>& out) {
    out.resize(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = logits.data() + i * c;
        double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        double lz = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lz;
    }
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                     const std::vector<double>& mask) {
    check2d(logits, "cross_entropy");
    const std::size_t r = logits.shape()[0], c = logits.shape()[1];
    if (targets.size() != r || mask.size() != r)
        throw DomainError("cross_entropy: targets/mask length mismatch");
    double count = 0.0;
    for (double m : mask) count += (m != 0.0) ? 1.0 : 0.0;
    if (count == 0.0) throw DomainError("cross_entropy: all positions masked out");
    std::vector<double> lsm;
    log_softmax_rows(logits.data(), r, c, lsm);
    double loss = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (targets[i] >= c) throw DomainError("cross_entropy: target id out of range");
        if (mask[i] != 0.0) loss -= lsm[i * c + targets[i]];
    }
    loss /= count;
    return Tensor(make_node({1}, {loss}, {logits.node()},
                            [r, c, targets, mask, lsm, count](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        const double up = self.grad[0] / count;
        for (std::size_t i = 0; i < r; ++i) {
            if (mask[i] == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) {
                double soft = std::exp(lsm[i * c + j]);
                p.grad[i * c + j] += up * (soft - (j == targets[i] ? 1.0 : 0.0));
            }
        }
    }));
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits,
                     const std::vector<double>& mask) {
    check2d(p_logits, "kl_divergence");
    if (p_logits.shape() != q_logits.shape())
        throw DomainError("kl_divergence: logit shapes disagree");
    const std::size_t r = p_logits.shape()[0], c = p_logits.shape()[1];
    if (mask.size() != r) throw DomainError("kl_divergence: mask length mismatch");
    double count = 0.0;
    for (double m : mask) count += (m != 0.0) ? 1.0 : 0.0;
    if (count == 0.0) throw DomainError("kl_divergence: all positions masked out");
    std::vector<double> lp, lq;
    log_softmax_rows(p_logits.data(), r, c, lp);
    log_softmax_rows(q_logits.data(), r, c, lq);
    std::vector<double> row_kl(r, 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (mask[i] == 0.0) continue;
        double kl = 0.0;
        for (std::size_t j = 0; j < c; ++j)
            kl += std::exp(lp[i * c + j]) * (lp[i * c + j] - lq[i * c + j]);
        row_kl[i] = kl;
        loss += kl;
    }
    loss /= count;
    return Tensor(make_node({1}, {loss}, {p_logits.node(), q_logits.node()},
                            [r, c, mask, lp, lq, row_kl, count](Node& self) {
        Node& pp = *self.parents[0];
        Node& pq = *self.parents[1];
        pp.ensure_grad();
        pq.ensure_grad();
        const double up = self.grad[0] / count;
        for (std::size_t i = 0; i < r; ++i) {
            if (mask[i] == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) {
                double pj = std::exp(lp[i * c + j]);
                double qj = std::exp(lq[i * c + j]);
                pq.grad[i * c + j] += up * (qj - pj);
                pp.grad[i * c + j] += up * pj * ((lp[i * c + j] - lq[i * c + j]) - row_kl[i]);
            }
        }
    }));
}

Tensor token_log_probs(const Tensor& logits, const std::vector<std::size_t>& targets) {
    check2d(logits, "token_log_probs");
    const std::size_t r = logits.shape()[0], c = logits.shape()[1];
    if (targets.size() != r) throw DomainError("token_log_probs: targets length mismatch");
    std::vector<double> lsm;
    log_softmax_rows(logits.data(), r, c, lsm);
    std::vector<double> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (targets[i] >= c) throw DomainError("token_log_probs: target id out of range");
        out[i] = lsm[i * c + targets[i]];
    }
    return Tensor(make_node({r, 1}, std::move(out), {logits.node()},
                            [r, c, targets, lsm](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            double g = self.grad[i];
            if (g == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) {
                double soft = std::exp(lsm[i * c + j]);
                p.grad[i * c + j] += g * ((j == targets[i] ? 1.0 : 0.0) - soft);
            }
        }
    }));
}

Tensor masked_mean(const Tensor& a, const std::vector<double>& mask) {
    if (mask.size() != a.numel()) throw DomainError("masked_mean: mask length mismatch");
    double count = 0.0, total = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] != 0.0) {
            count += 1.0;
            total += a.data()[i];
        }
    }
    if (count == 0.0) throw DomainError("masked_mean: all positions masked out");
    return Tensor(make_node({1}, {total / count}, {a.node()}, [mask, count](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i] != 0.0) p.grad[i] += self.grad[0] / count;
    }));
}

Tensor fake_quant(const Tensor& w, const FakeQuantConfig& cfg) {
    check2d(w, "fake_quant");
    const std::size_t out_f = w.shape()[0], in_f = w.shape()[1];
    cfg.spec.validate();
    const std::size_t gsz = cfg.spec.group_size == 0 ? in_f : cfg.spec.group_size;
    if (in_f % gsz != 0) throw ConfigError("fake_quant: group_size does not divide in-features");
    const std::size_t groups = in_f / gsz;

    std::vector<quant::QuantParams> params;
    if (cfg.mode == FakeQuantMode::Frozen) {
        if (cfg.frozen_params.size() != out_f * groups)
            throw ConfigError("fake_quant: frozen params count does not match group count");
        params = cfg.frozen_params;
    } else {
        params.reserve(out_f * groups);
        for (std::size_t r = 0; r < out_f; ++r)
            for (std::size_t g = 0; g < groups; ++g)
                params.push_back(quant::compute_params(
                    std::span<const double>(w.data().data() + r * in_f + g * gsz, gsz), cfg.spec));
    }

    std::vector<double> out(w.numel());
    std::vector<double> mask(w.numel());
    for (std::size_t r = 0; r < out_f; ++r) {
        for (std::size_t g = 0; g < groups; ++g) {
            const quant::QuantParams& p = params[r * groups + g];
            for (std::size_t k = 0; k < gsz; ++k) {
                std::size_t i = r * in_f + g * gsz + k;
                std::int64_t pre = round_even(w.data()[i] / p.scale) + p.zero;
                std::int64_t code = std::clamp(pre, p.q_min, p.q_max);
                out[i] = p.scale * static_cast<double>(code - p.zero);
                mask[i] = (pre >= p.q_min && pre <= p.q_max) ? 1.0 : 0.0;
            }
        }
    }
    return Tensor(make_node(w.shape(), std::move(out), {w.node()}, [mask](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * mask[i];
    }));
}

void backward(const Tensor& loss) {
    if (!loss.valid() || loss.numel() != 1) throw DomainError("backward: loss must be a scalar");
    // Reverse topological order over the parent DAG.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* child = n->parents[idx++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() == n->data.size()) n->backward_fn(*n);
    }
}

}  // namespace rqat::ad
