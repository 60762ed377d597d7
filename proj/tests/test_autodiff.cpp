#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <doctest.h>

#include "rqat/autodiff.hpp"

using namespace rqat;

namespace {

struct LeafSpec {
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

using Builder = std::function<ad::Tensor(const std::vector<ad::Tensor>&)>;

// Central finite differences against the analytic gradient for a scalar
// function of several leaf tensors.
void fd_check(const std::vector<LeafSpec>& specs, const Builder& f, double h = 1e-5,
              double tol = 1e-4) {
    std::vector<ad::Tensor> leaves;
    for (const auto& s : specs) leaves.push_back(ad::Tensor::leaf(s.shape, s.data));
    ad::Tensor loss = f(leaves);
    REQUIRE(loss.numel() == 1);
    ad::backward(loss);

    auto eval_at = [&](std::size_t li, std::size_t idx, double delta) {
        std::vector<ad::Tensor> pert;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            std::vector<double> d = specs[i].data;
            if (i == li) d[idx] += delta;
            pert.push_back(ad::Tensor::leaf(specs[i].shape, d));
        }
        return f(pert).item();
    };

    for (std::size_t li = 0; li < specs.size(); ++li) {
        const auto& g = leaves[li].grad();
        REQUIRE(g.size() == specs[li].data.size());
        for (std::size_t idx = 0; idx < g.size(); ++idx) {
            double num = (eval_at(li, idx, h) - eval_at(li, idx, -h)) / (2.0 * h);
            double denom = std::max({std::abs(num), std::abs(g[idx]), 1e-6});
            CAPTURE(li);
            CAPTURE(idx);
            CHECK(std::abs(num - g[idx]) / denom < tol);
        }
    }
}

std::vector<double> rand_vec(std::size_t n, std::mt19937_64& rng, double lo = -1.5,
                             double hi = 1.5) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

}  // namespace

TEST_CASE("finite differences: elementwise and linear primitives") {
    std::mt19937_64 rng(7);
    LeafSpec a{{3, 4}, rand_vec(12, rng)};
    LeafSpec b{{3, 4}, rand_vec(12, rng)};
    LeafSpec m{{4, 2}, rand_vec(8, rng)};
    LeafSpec row{{1, 4}, rand_vec(4, rng)};

    fd_check({a, b}, [](const auto& l) { return ad::sum_all(ad::add(l[0], l[1])); });
    fd_check({a, b}, [](const auto& l) { return ad::sum_all(ad::sub(l[0], l[1])); });
    fd_check({a, b}, [](const auto& l) { return ad::sum_all(ad::multiply(l[0], l[1])); });
    fd_check({a}, [](const auto& l) { return ad::sum_all(ad::scale(l[0], -2.5)); });
    fd_check({a}, [](const auto& l) { return ad::sum_all(ad::add_scalar(l[0], 0.75)); });
    fd_check({a}, [](const auto& l) { return ad::sum_all(ad::exp_elem(l[0])); });
    fd_check({a}, [](const auto& l) { return ad::mean_all(l[0]); });
    fd_check({a, m}, [](const auto& l) { return ad::sum_all(ad::matmul(l[0], l[1])); });
    fd_check({a}, [](const auto& l) { return ad::sum_all(ad::transpose(l[0])); });
    fd_check({a, row}, [](const auto& l) { return ad::sum_all(ad::add_rowvec(l[0], l[1])); });
    fd_check({a}, [](const auto& l) { return ad::sum_all(ad::silu(l[0])); });
    fd_check({a}, [](const auto& l) { return ad::sum_all(ad::slice_cols(l[0], 1, 2)); });
    fd_check({a, b}, [](const auto& l) {
        return ad::sum_all(ad::concat_cols({l[0], l[1]}));
    });
}

TEST_CASE("finite differences: minimum / clamp away from kinks") {
    // values chosen away from ties and clamp edges so the derivative exists
    LeafSpec a{{2, 3}, {0.3, -0.8, 1.4, 0.1, -1.2, 0.6}};
    LeafSpec b{{2, 3}, {0.5, -0.9, 1.1, 0.4, -1.0, 0.2}};
    fd_check({a, b}, [](const auto& l) { return ad::sum_all(ad::minimum(l[0], l[1])); });
    fd_check({a}, [](const auto& l) { return ad::sum_all(ad::clamp(l[0], -1.0, 1.0)); });

    // clamped elements carry zero gradient
    ad::Tensor t = ad::Tensor::leaf({1, 3}, {-2.0, 0.5, 3.0});
    ad::Tensor loss = ad::sum_all(ad::clamp(t, -1.0, 1.0));
    ad::backward(loss);
    CHECK(t.grad()[0] == 0.0);
    CHECK(t.grad()[1] == 1.0);
    CHECK(t.grad()[2] == 0.0);
}

TEST_CASE("finite differences: softmax, rms_norm, gather, reductions") {
    std::mt19937_64 rng(11);
    LeafSpec a{{3, 5}, rand_vec(15, rng)};
    LeafSpec gain{{5}, rand_vec(5, rng, 0.5, 1.5)};
    LeafSpec table{{4, 3}, rand_vec(12, rng)};

    // weight softmax/rms outputs so the gradient is not the trivial zero
    std::mt19937_64 rng2(13);
    std::vector<double> w = rand_vec(15, rng2);
    fd_check({a}, [&](const auto& l) {
        return ad::sum_all(ad::multiply(ad::softmax(l[0]), ad::Tensor::leaf({3, 5}, w)));
    });
    fd_check({a, gain}, [&](const auto& l) {
        return ad::sum_all(ad::multiply(ad::rms_norm(l[0], l[1]), ad::Tensor::leaf({3, 5}, w)));
    });
    fd_check({table}, [](const auto& l) {
        return ad::sum_all(ad::gather_rows(l[0], {2, 0, 2, 1}));
    });
    fd_check({a}, [](const auto& l) { return ad::masked_mean(l[0], {1, 0, 0, 1, 0, 0, 1, 0, 1, 0,
                                                                    0, 0, 1, 0, 1}); });
}

TEST_CASE("finite differences: loss heads") {
    std::mt19937_64 rng(17);
    LeafSpec logits{{4, 6}, rand_vec(24, rng)};
    LeafSpec plog{{4, 6}, rand_vec(24, rng)};
    std::vector<std::size_t> targets = {1, 5, 0, 3};
    std::vector<double> mask = {1, 0, 1, 1};

    fd_check({logits}, [&](const auto& l) { return ad::cross_entropy(l[0], targets, mask); });
    fd_check({plog, logits},
             [&](const auto& l) { return ad::kl_divergence(l[0], l[1], mask); });
    fd_check({logits}, [&](const auto& l) {
        return ad::masked_mean(ad::token_log_probs(l[0], targets), mask);
    });
}

TEST_CASE("KL(p || p) is zero and KL is nonnegative") {
    std::mt19937_64 rng(23);
    std::vector<double> lp = rand_vec(12, rng);
    std::vector<double> lq = rand_vec(12, rng);
    ad::Tensor p = ad::Tensor::leaf({3, 4}, lp);
    ad::Tensor p2 = ad::Tensor::leaf({3, 4}, lp);
    ad::Tensor q = ad::Tensor::leaf({3, 4}, lq);
    std::vector<double> mask = {1, 1, 1};
    CHECK(std::abs(ad::kl_divergence(p, p2, mask).item()) < 1e-12);
    CHECK(ad::kl_divergence(p, q, mask).item() > 0.0);
}

TEST_CASE("fake_quant STE: forward clip and backward mask") {
    // frozen s = 1, z = 0, range [-4, 3]; W = 10 clips to 3 with zero grad
    quant::QuantSpec spec;
    spec.bits = 3;
    spec.group_size = 4;
    spec.scheme = quant::Scheme::Symmetric;
    ad::FakeQuantConfig cfg;
    cfg.spec = spec;
    cfg.mode = ad::FakeQuantMode::Frozen;
    cfg.frozen_params = {{1.0, 0, -4, 3}};

    ad::Tensor w = ad::Tensor::leaf({1, 4}, {10.0, 1.2, -4.4, -6.0});
    ad::Tensor fq = ad::fake_quant(w, cfg);
    CHECK(fq.data()[0] == doctest::Approx(3.0));
    CHECK(fq.data()[1] == doctest::Approx(1.0));
    CHECK(fq.data()[2] == doctest::Approx(-4.0));
    CHECK(fq.data()[3] == doctest::Approx(-4.0));

    // upstream gradient 2x to confirm pass-through is exact, not rescaled
    ad::Tensor loss = ad::sum_all(ad::scale(fq, 2.0));
    ad::backward(loss);
    CHECK(w.grad()[0] == 0.0);   // clipped above
    CHECK(w.grad()[1] == 2.0);   // interior: exactly the upstream gradient
    CHECK(w.grad()[2] == 2.0);   // rounds to -4, pre-clip code in range
    CHECK(w.grad()[3] == 0.0);   // clipped below
}

TEST_CASE("every STE mask element is exactly 0 or the upstream gradient") {
    std::mt19937_64 rng(31);
    quant::QuantSpec spec;
    spec.bits = 2;
    spec.group_size = 8;
    spec.scheme = quant::Scheme::Asymmetric;
    ad::FakeQuantConfig cfg;
    cfg.spec = spec;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> vals = rand_vec(16, rng, -3.0, 3.0);
        ad::Tensor w = ad::Tensor::leaf({2, 8}, vals);
        ad::Tensor loss = ad::sum_all(ad::scale(ad::fake_quant(w, cfg), 1.7));
        ad::backward(loss);
        for (double g : w.grad()) CHECK((g == 0.0 || g == 1.7));
    }
}

TEST_CASE("gradient accumulates across reuse of a node") {
    ad::Tensor x = ad::Tensor::leaf({1, 2}, {2.0, -1.0});
    ad::Tensor loss = ad::sum_all(ad::add(ad::multiply(x, x), x));  // x^2 + x
    ad::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(5.0));   // 2*2 + 1
    CHECK(x.grad()[1] == doctest::Approx(-1.0));  // 2*(-1) + 1
}

TEST_CASE("backward requires a scalar") {
    ad::Tensor x = ad::Tensor::leaf({1, 2}, {1.0, 2.0});
    CHECK_THROWS_AS(ad::backward(x), DomainError);
}
