#include <doctest.h>

#include <cmath>

#include "sarfuse/autograd.hpp"
#include "sarfuse/grad_check.hpp"
#include "sarfuse/rng.hpp"
#include "sarfuse/tensor.hpp"

using namespace sarfuse;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(rng.normal(0.0, scale));
    return t;
}

// naive direct convolution, the independent oracle for the GEMM path
Tensor conv2d_naive(const Tensor& x, const Tensor& w, const float* bias, int stride, int pad) {
    const int b = x.size(0), cin = x.size(1), h = x.size(2), wd = x.size(3);
    const int cout = w.size(0), k = w.size(2);
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    Tensor y({b, cout, ho, wo}, 0.0f);
    for (int n = 0; n < b; ++n)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = bias ? bias[co] : 0.0;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += double(x[((int64_t(n) * cin + ci) * h + iy) * wd + ix]) *
                                       double(w[((int64_t(co) * cin + ci) * k + ky) * k + kx]);
                            }
                    y[((int64_t(n) * cout + co) * ho + oy) * wo + ox] = float(acc);
                }
    return y;
}

// naive transposed convolution (scatter form), weight [cin,cout,k,k]
Tensor conv2d_transpose_naive(const Tensor& x, const Tensor& w, const float* bias, int stride) {
    const int b = x.size(0), cin = x.size(1), h = x.size(2), wd = x.size(3);
    const int cout = w.size(1), k = w.size(2);
    const int ho = (h - 1) * stride + k;
    const int wo = (wd - 1) * stride + k;
    Tensor y({b, cout, ho, wo}, 0.0f);
    for (int n = 0; n < b; ++n)
        for (int ci = 0; ci < cin; ++ci)
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < wd; ++ix) {
                    const float xv = x[((int64_t(n) * cin + ci) * h + iy) * wd + ix];
                    for (int co = 0; co < cout; ++co)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx)
                                y[((int64_t(n) * cout + co) * ho + iy * stride + ky) * wo + ix * stride + kx] +=
                                    xv * w[((int64_t(ci) * cout + co) * k + ky) * k + kx];
                }
    if (bias)
        for (int n = 0; n < b; ++n)
            for (int co = 0; co < cout; ++co)
                for (int64_t i = 0; i < int64_t(ho) * wo; ++i)
                    y[(int64_t(n) * cout + co) * ho * wo + i] += bias[co];
    return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

} // namespace

TEST_CASE("conv2d_output_shape matches the architecture tables") {
    CHECK(conv2d_output_shape({4, 14, 128, 128}, 64, 7, 2, 3) == std::vector<int>{4, 64, 64, 64});
    CHECK(conv2d_output_shape({4, 64, 64, 64}, 128, 3, 2, 1) == std::vector<int>{4, 128, 32, 32});
    CHECK(conv2d_output_shape({2, 8, 17, 17}, 16, 1, 1, 0) == std::vector<int>{2, 16, 17, 17});
    CHECK_THROWS(conv2d_output_shape({1, 3, 2, 2}, 8, 5, 1, 0));
}

TEST_CASE("softmax_axis") {
    SUBCASE("constant input becomes uniform") {
        Tensor x({2, 5}, 3.25f);
        Tensor p = softmax_axis(x, 1);
        for (int64_t i = 0; i < p.numel(); ++i) CHECK(p[i] == doctest::Approx(0.2).epsilon(1e-6));
    }
    SUBCASE("scaled one-hot saturates") {
        Tensor x({1, 4}, 0.0f);
        x[2] = 1000.0f;
        Tensor p = softmax_axis(x, 1);
        CHECK(p[2] > 1.0f - 1e-6f);
    }
    SUBCASE("matches direct exp ratio on a random 3-vector") {
        Tensor x({3}, {0.3f, -1.2f, 2.1f});
        Tensor p = softmax_axis(x, 0);
        double z = 0.0;
        for (int i = 0; i < 3; ++i) z += std::exp(double(x[i]));
        for (int i = 0; i < 3; ++i) CHECK(std::abs(double(p[i]) - std::exp(double(x[i])) / z) < 1e-7);
    }
    SUBCASE("sums to one along the chosen axis") {
        Tensor x = random_tensor({3, 4, 5}, 99);
        for (int axis = 0; axis < 3; ++axis) {
            Tensor p = softmax_axis(x, axis);
            // spot-check a few slices
            double s = 0.0;
            for (int k = 0; k < x.size(axis); ++k) {
                int64_t stride = 1;
                for (int i = axis + 1; i < 3; ++i) stride *= x.size(i);
                s += p[k * stride];
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("grad_check harness spot values") {
    SUBCASE("quadratic") {
        Tensor x = random_tensor({16}, 7);
        auto f = [](const Tensor& t, Tensor* g) {
            double s = 0.0;
            for (int64_t i = 0; i < t.numel(); ++i) s += double(t[i]) * double(t[i]);
            if (g) {
                *g = Tensor(t.shape());
                for (int64_t i = 0; i < t.numel(); ++i) (*g)[i] = 2.0f * t[i];
            }
            return s;
        };
        auto report = grad_check(f, x);
        CHECK(report.pass);
        CHECK(report.max_rel_err < 1e-4);
    }
    SUBCASE("relu at an all-negative input has exactly zero gradient") {
        Tensor x = random_tensor({8}, 3);
        for (int64_t i = 0; i < x.numel(); ++i) x[i] = -std::abs(x[i]) - 0.5f;
        Tape t;
        Var xi = t.input(x);
        Var y = t.mse_loss(t.relu(xi), t.constant(Tensor::zeros(x.shape())));
        t.backward(y);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(t.grad(xi)[i] == 0.0f);
    }
    SUBCASE("mse of conv2d output on a 4x4 input") {
        Tensor x = random_tensor({1, 2, 4, 4}, 11);
        Tensor w = random_tensor({3, 2, 3, 3}, 12, 0.5);
        Tensor target = random_tensor({1, 3, 4, 4}, 13);
        auto f = [&](const Tensor& t0, Tensor* g) {
            Tape t;
            Var xi = t.input(t0);
            Var y = t.conv2d(xi, t.constant(w), {}, 1, 1);
            Var loss = t.mse_loss(y, t.constant(target));
            if (g) {
                t.backward(loss);
                *g = t.grad(xi);
            }
            return t.scalar(loss);
        };
        auto report = grad_check(f, x);
        CHECK(report.pass);
    }
}

TEST_CASE("conv2d forward equals the naive oracle") {
    for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, {2, 3, 7}, {1, 0, 1}, {2, 1, 3}}) {
        Tensor x = random_tensor({2, 3, 9, 9}, 21 + stride + k);
        Tensor w = random_tensor({4, 3, k, k}, 22 + pad, 0.5);
        Tensor b = random_tensor({4}, 23);
        Tape t;
        Var y = t.conv2d(t.constant(x), t.constant(w), t.constant(b), stride, pad);
        Tensor ref = conv2d_naive(x, w, b.data(), stride, pad);
        CHECK(max_abs_diff(t.value(y), ref) < 1e-4);
    }
}

TEST_CASE("conv2d_transpose forward equals the naive oracle") {
    for (int stride : {1, 2}) {
        Tensor x = random_tensor({2, 4, 5, 5}, 31 + stride);
        Tensor w = random_tensor({4, 3, 2, 2}, 32, 0.5);
        Tensor b = random_tensor({3}, 33);
        Tape t;
        Var y = t.conv2d_transpose(t.constant(x), t.constant(w), t.constant(b), stride, 0);
        Tensor ref = conv2d_transpose_naive(x, w, b.data(), stride);
        CHECK(max_abs_diff(t.value(y), ref) < 1e-4);
    }
}

TEST_CASE("bmm matches a naive triple loop in all transpose modes") {
    Rng rng(5);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            const int B = 2, m = 3, k = 4, n = 5;
            Tensor a = ta ? random_tensor({B, k, m}, 41) : random_tensor({B, m, k}, 41);
            Tensor b = tb ? random_tensor({B, n, k}, 42) : random_tensor({B, k, n}, 42);
            Tape t;
            Var y = t.bmm(t.constant(a), t.constant(b), ta, tb);
            const Tensor& yv = t.value(y);
            REQUIRE(yv.shape() == std::vector<int>{B, m, n});
            for (int bb = 0; bb < B; ++bb)
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int kk = 0; kk < k; ++kk) {
                            const float av = ta ? a[(int64_t(bb) * k + kk) * m + i] : a[(int64_t(bb) * m + i) * k + kk];
                            const float bv = tb ? b[(int64_t(bb) * n + j) * k + kk] : b[(int64_t(bb) * k + kk) * n + j];
                            acc += double(av) * double(bv);
                        }
                        CHECK(std::abs(double(yv[(int64_t(bb) * m + i) * n + j]) - acc) < 1e-5);
                    }
        }
}

namespace {

// grad-check d(loss)/d(x) where loss = mse(op(x), target)
GradCheckReport check_input_grad(const Tensor& x,
                                 const std::function<Var(Tape&, Var)>& op,
                                 uint64_t target_seed = 77) {
    Tensor target;
    {
        Tape t;
        Var y = op(t, t.constant(x));
        target = random_tensor(t.value(y).shape(), target_seed);
    }
    auto f = [&](const Tensor& t0, Tensor* g) {
        Tape t;
        Var xi = t.input(t0);
        Var loss = t.mse_loss(op(t, xi), t.constant(target));
        if (g) {
            t.backward(loss);
            *g = t.grad(xi);
        }
        return t.scalar(loss);
    };
    return grad_check(f, x);
}

} // namespace

TEST_CASE("per-op input gradients pass central-difference checks") {
    Tensor x = random_tensor({2, 4, 6, 6}, 51);

    SUBCASE("conv2d, stride 2") {
        Tensor w = random_tensor({8, 4, 3, 3}, 52, 0.4);
        Tensor b = random_tensor({8}, 53);
        auto r = check_input_grad(x, [&](Tape& t, Var v) {
            return t.conv2d(v, t.constant(w), t.constant(b), 2, 1);
        });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
    SUBCASE("conv2d_transpose k2 s2") {
        Tensor w = random_tensor({4, 2, 2, 2}, 54, 0.4);
        Tensor b = random_tensor({2}, 55);
        auto r = check_input_grad(x, [&](Tape& t, Var v) {
            return t.conv2d_transpose(v, t.constant(w), t.constant(b), 2, 0);
        });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
    SUBCASE("batch_norm training mode") {
        Tensor gamma = random_tensor({4}, 56, 0.3);
        Tensor beta = random_tensor({4}, 57, 0.3);
        for (int64_t i = 0; i < gamma.numel(); ++i) gamma[i] += 1.0f;
        auto r = check_input_grad(x, [&](Tape& t, Var v) {
            Tensor rm = Tensor::zeros({4});
            Tensor rv = Tensor::full({4}, 1.0f);
            return t.batch_norm(v, t.constant(gamma), t.constant(beta), rm, rv, true, 1e-5f, 0.1f);
        });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
    SUBCASE("batch_norm eval mode") {
        Tensor gamma = Tensor::full({4}, 1.3f);
        Tensor beta = Tensor::full({4}, -0.2f);
        Tensor rm = random_tensor({4}, 58, 0.2);
        Tensor rv = Tensor::full({4}, 0.8f);
        auto r = check_input_grad(x, [&](Tape& t, Var v) {
            Tensor rm2 = rm, rv2 = rv;
            return t.batch_norm(v, t.constant(gamma), t.constant(beta), rm2, rv2, false, 1e-5f, 0.1f);
        });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
    SUBCASE("relu") {
        auto r = check_input_grad(x, [](Tape& t, Var v) { return t.relu(v); });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
    SUBCASE("softmax over channel axis") {
        auto r = check_input_grad(x, [](Tape& t, Var v) { return t.softmax(v, 1); });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
    SUBCASE("global_avg_pool") {
        auto r = check_input_grad(x, [](Tape& t, Var v) { return t.global_avg_pool(v); });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
    SUBCASE("add and scale_residual") {
        Tensor other = random_tensor(x.shape(), 59);
        Tensor g0 = Tensor::scalar(0.7f);
        auto r = check_input_grad(x, [&](Tape& t, Var v) {
            return t.scale_residual(t.constant(g0), v, t.add(v, t.constant(other)));
        });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
    SUBCASE("bmm both operands") {
        Tensor a3 = random_tensor({2, 3, 8}, 60);
        Tensor r3 = random_tensor({2, 8, 4}, 61);
        auto r = check_input_grad(a3, [&](Tape& t, Var v) {
            return t.bmm(v, t.constant(r3), false, false);
        });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
        auto r2 = check_input_grad(r3, [&](Tape& t, Var v) {
            return t.bmm(t.constant(a3), v, false, false);
        });
        CHECK_MESSAGE(r2.pass, r2.max_rel_err);
    }
    SUBCASE("row_norm") {
        Tensor v2 = random_tensor({4, 16}, 62);
        auto r = check_input_grad(v2, [](Tape& t, Var v) { return t.row_norm(v); });
        CHECK_MESSAGE(r.pass, r.max_rel_err);
    }
}

TEST_CASE("scalar loss gradients pass central-difference checks") {
    SUBCASE("kl_diag_gaussian wrt mu and logvar") {
        Tensor mu = random_tensor({2, 3, 2, 2}, 71, 0.5);
        Tensor lv = random_tensor({2, 3, 2, 2}, 72, 0.3);
        auto fmu = [&](const Tensor& t0, Tensor* g) {
            Tape t;
            Var m = t.input(t0);
            Var loss = t.kl_diag_gaussian(m, t.constant(lv));
            if (g) {
                t.backward(loss);
                *g = t.grad(m);
            }
            return t.scalar(loss);
        };
        CHECK(grad_check(fmu, mu).pass);
        auto flv = [&](const Tensor& t0, Tensor* g) {
            Tape t;
            Var l = t.input(t0);
            Var loss = t.kl_diag_gaussian(t.constant(mu), l);
            if (g) {
                t.backward(loss);
                *g = t.grad(l);
            }
            return t.scalar(loss);
        };
        CHECK(grad_check(flv, lv).pass);
    }
    SUBCASE("reparameterize") {
        Tensor mu = random_tensor({2, 4}, 73);
        Tensor lv = random_tensor({2, 4}, 74, 0.3);
        Tensor noise = random_tensor({2, 4}, 75);
        auto f = [&](const Tensor& t0, Tensor* g) {
            Tape t;
            Var l = t.input(t0);
            Var z = t.reparameterize(t.constant(mu), l, t.constant(noise));
            Var loss = t.mse_loss(z, t.constant(Tensor::zeros(mu.shape())));
            if (g) {
                t.backward(loss);
                *g = t.grad(l);
            }
            return t.scalar(loss);
        };
        CHECK(grad_check(f, lv).pass);
    }
    SUBCASE("cross_entropy_masked") {
        Tensor logits = random_tensor({2, 4, 3, 3}, 76);
        std::vector<uint8_t> labels(2 * 3 * 3);
        Rng rng(77);
        for (auto& l : labels) l = uint8_t(rng.uniform_int(4));  // includes ignore code 0
        labels[0] = 1;                                           // ensure at least one valid
        auto f = [&](const Tensor& t0, Tensor* g) {
            Tape t;
            Var li = t.input(t0);
            Var loss = t.cross_entropy_masked(li, labels, 0);
            if (g) {
                t.backward(loss);
                *g = t.grad(li);
            }
            return t.scalar(loss);
        };
        CHECK(grad_check(f, logits).pass);
    }
    SUBCASE("hinge_mean") {
        Tensor pos = random_tensor({8}, 78);
        Tensor neg = random_tensor({8}, 79);
        auto f = [&](const Tensor& t0, Tensor* g) {
            Tape t;
            Var p = t.input(t0);
            Var loss = t.hinge_mean(t.row_norm(t.reshape(p, {4, 2})), t.row_norm(t.reshape(t.constant(neg), {4, 2})), 1.0);
            if (g) {
                t.backward(loss);
                *g = t.grad(p);
            }
            return t.scalar(loss);
        };
        CHECK(grad_check(f, pos).pass);
    }
}

TEST_CASE("weight gradients accumulate across shared uses") {
    Tensor x1 = random_tensor({1, 2, 5, 5}, 81);
    Tensor x2 = random_tensor({1, 2, 5, 5}, 82);
    Tensor w0 = random_tensor({3, 2, 3, 3}, 83, 0.4);
    Tensor target = random_tensor({1, 3, 5, 5}, 84);
    auto f = [&](const Tensor& wt, Tensor* g) {
        Parameter p("w", wt);
        Tape t;
        Var w = t.param(p);
        Var y = t.add(t.conv2d(t.constant(x1), w, {}, 1, 1), t.conv2d(t.constant(x2), w, {}, 1, 1));
        Var loss = t.mse_loss(y, t.constant(target));
        if (g) {
            t.backward(loss);
            *g = p.grad;
        }
        return t.scalar(loss);
    };
    CHECK(grad_check(f, w0).pass);
}

TEST_CASE("batch norm inference with unit running stats and identity affine is the identity") {
    Tensor x = random_tensor({2, 3, 4, 4}, 91);
    Tensor gamma = Tensor::full({3}, 1.0f);
    Tensor beta = Tensor::zeros({3});
    Tensor rm = Tensor::zeros({3});
    Tensor rv = Tensor::full({3}, 1.0f);
    Tape t;
    Var y = t.batch_norm(t.constant(x), t.constant(gamma), t.constant(beta), rm, rv, false, 1e-5f, 0.1f);
    CHECK(max_abs_diff(t.value(y), x) < 1e-5);
}

TEST_CASE("ops are deterministic") {
    Tensor x = random_tensor({2, 3, 8, 8}, 101);
    Tensor w = random_tensor({4, 3, 3, 3}, 102, 0.4);
    Tensor y1, y2;
    for (Tensor* out : {&y1, &y2}) {
        Tape t;
        *out = t.value(t.conv2d(t.constant(x), t.constant(w), {}, 1, 1));
    }
    CHECK(max_abs_diff(y1, y2) == 0.0);
}
