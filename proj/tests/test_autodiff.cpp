#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssta/autodiff.hpp"
#include "ssta/common.hpp"
#include "ssta/nn.hpp"
#include "test_util.hpp"

using namespace ssta;
using ssta_test::finite_difference_error;
using ssta_test::max_abs_diff;
using ssta_test::random_mat;

namespace {

// FD-checks d(sum of op(x) elements, weighted)/dx for a unary graph builder.
double check_unary(const std::function<Var(Tape&, Var)>& op, Mat x, Mat weight) {
    auto loss_of = [&](const Mat& v) {
        Tape t(false);
        Var in = t.constant(v);
        return t.scalar(t.sum(t.mul(op(t, in), t.constant(weight))));
    };
    auto grad_of = [&](const Mat& v) {
        Tape t;
        Param p("x", v);
        Var in = t.param(p);
        t.backward(t.sum(t.mul(op(t, in), t.constant(weight))));
        return p.grad;
    };
    return finite_difference_error(std::move(x), loss_of, grad_of);
}

}  // namespace

TEST_CASE("gemm matches naive multiplication in all transpose modes") {
    Rng rng(7);
    const Mat a = random_mat(5, 7, rng);
    const Mat b = random_mat(7, 4, rng);
    Mat expect(5, 4);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 7; ++k) acc += a(i, k) * b(k, j);
            expect(i, j) = acc;
        }
    CHECK(max_abs_diff(matmul(a, b), expect) < 1e-12);

    Mat at(7, 5), bt(4, 7);
    for (int i = 0; i < 5; ++i)
        for (int k = 0; k < 7; ++k) at(k, i) = a(i, k);
    for (int k = 0; k < 7; ++k)
        for (int j = 0; j < 4; ++j) bt(j, k) = b(k, j);

    Mat c(5, 4);
    gemm(true, false, 1.0, at, b, 0.0, c);
    CHECK(max_abs_diff(c, expect) < 1e-12);
    gemm(false, true, 1.0, a, bt, 0.0, c);
    CHECK(max_abs_diff(c, expect) < 1e-12);
    gemm(true, true, 1.0, at, bt, 0.0, c);
    CHECK(max_abs_diff(c, expect) < 1e-12);
}

TEST_CASE("matmul gradients match finite differences in all transpose modes") {
    Rng rng(11);
    for (const bool ta : {false, true}) {
        for (const bool tb : {false, true}) {
            const Mat a0 = ta ? random_mat(4, 3, rng) : random_mat(3, 4, rng);
            const Mat b0 = tb ? random_mat(5, 4, rng) : random_mat(4, 5, rng);
            const Mat w = random_mat(3, 5, rng);

            auto loss_of_a = [&](const Mat& v) {
                Tape t(false);
                return t.scalar(t.sum(t.mul(t.matmul(t.constant(v), t.constant(b0), ta, tb), t.constant(w))));
            };
            auto grad_of_a = [&](const Mat& v) {
                Tape t;
                Param p("a", v);
                t.backward(t.sum(t.mul(t.matmul(t.param(p), t.constant(b0), ta, tb), t.constant(w))));
                return p.grad;
            };
            CHECK(finite_difference_error(a0, loss_of_a, grad_of_a) < 1e-7);

            auto loss_of_b = [&](const Mat& v) {
                Tape t(false);
                return t.scalar(t.sum(t.mul(t.matmul(t.constant(a0), t.constant(v), ta, tb), t.constant(w))));
            };
            auto grad_of_b = [&](const Mat& v) {
                Tape t;
                Param p("b", v);
                t.backward(t.sum(t.mul(t.matmul(t.constant(a0), t.param(p), ta, tb), t.constant(w))));
                return p.grad;
            };
            CHECK(finite_difference_error(b0, loss_of_b, grad_of_b) < 1e-7);
        }
    }
}

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(13);
    const Mat w = random_mat(3, 4, rng);
    Mat x = random_mat(3, 4, rng);
    // keep clear of the relu/abs kinks and clamp edges
    for (std::size_t i = 0; i < x.size(); ++i)
        if (std::abs(x.at(i)) < 0.05) x.at(i) += 0.1;

    CHECK(check_unary([](Tape& t, Var v) { return t.relu(v); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.leaky_relu(v, 0.2); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.sigmoid(v); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.square(v); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.abs_(v); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.scale(v, -2.5); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.add_scalar(v, 3.0); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.clamp(v, -0.5, 0.5); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.softmax_rows(v); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.log_softmax_rows(v); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.row_sums(v); }, x, Mat(3, 1, 1.5)) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.gather_rows(v, {2, 0, 0}); }, x, w) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.slice_cols(v, 1, 3); }, x, random_mat(3, 2, rng)) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.concat_cols({v, v}); }, x, random_mat(3, 8, rng)) < 1e-6);
    CHECK(check_unary([](Tape& t, Var v) { return t.mean(v); }, x, Mat(1, 1, 1.0)) < 1e-6);

    Mat positive = x;
    for (std::size_t i = 0; i < positive.size(); ++i) positive.at(i) = std::abs(positive.at(i)) + 0.2;
    CHECK(check_unary([](Tape& t, Var v) { return t.log_(v); }, positive, w) < 1e-6);
}

TEST_CASE("binary op gradients match finite differences") {
    Rng rng(17);
    const Mat other = random_mat(3, 4, rng);
    const Mat w = random_mat(3, 4, rng);
    Mat x = random_mat(3, 4, rng);
    for (std::size_t i = 0; i < x.size(); ++i)
        if (std::abs(x.at(i) - other.at(i)) < 0.05) x.at(i) += 0.1;  // avoid min/max ties

    auto check_binary = [&](auto op, bool vary_second) {
        auto build = [&](Tape& t, Var a, Var b) { return op(t, a, b); };
        auto loss_of = [&](const Mat& v) {
            Tape t(false);
            Var a = t.constant(vary_second ? other : v);
            Var b = t.constant(vary_second ? v : other);
            return t.scalar(t.sum(t.mul(build(t, a, b), t.constant(w))));
        };
        auto grad_of = [&](const Mat& v) {
            Tape t;
            Param p("x", v);
            Var pv = t.param(p);
            Var a = vary_second ? t.constant(other) : pv;
            Var b = vary_second ? pv : t.constant(other);
            t.backward(t.sum(t.mul(build(t, a, b), t.constant(w))));
            return p.grad;
        };
        return finite_difference_error(x, loss_of, grad_of);
    };

    for (const bool second : {false, true}) {
        CHECK(check_binary([](Tape& t, Var a, Var b) { return t.add(a, b); }, second) < 1e-6);
        CHECK(check_binary([](Tape& t, Var a, Var b) { return t.sub(a, b); }, second) < 1e-6);
        CHECK(check_binary([](Tape& t, Var a, Var b) { return t.mul(a, b); }, second) < 1e-6);
        CHECK(check_binary([](Tape& t, Var a, Var b) { return t.min2(a, b); }, second) < 1e-6);
        CHECK(check_binary([](Tape& t, Var a, Var b) { return t.max2(a, b); }, second) < 1e-6);
    }

    // div needs a denominator away from zero
    Mat denom = other;
    for (std::size_t i = 0; i < denom.size(); ++i) denom.at(i) = std::abs(denom.at(i)) + 0.5;
    auto loss_of = [&](const Mat& v) {
        Tape t(false);
        return t.scalar(t.sum(t.mul(t.div(t.constant(v), t.constant(denom)), t.constant(w))));
    };
    auto grad_of = [&](const Mat& v) {
        Tape t;
        Param p("x", v);
        t.backward(t.sum(t.mul(t.div(t.param(p), t.constant(denom)), t.constant(w))));
        return p.grad;
    };
    CHECK(finite_difference_error(x, loss_of, grad_of) < 1e-6);
}

TEST_CASE("broadcast adds route gradients to the broadcast operand") {
    Rng rng(19);
    const Mat m = random_mat(4, 3, rng);
    const Mat w = random_mat(4, 3, rng);
    Mat row = random_mat(1, 3, rng);
    auto loss_of = [&](const Mat& v) {
        Tape t(false);
        return t.scalar(t.sum(t.mul(t.add_rowvec(t.constant(m), t.constant(v)), t.constant(w))));
    };
    auto grad_of = [&](const Mat& v) {
        Tape t;
        Param p("row", v);
        t.backward(t.sum(t.mul(t.add_rowvec(t.constant(m), t.param(p)), t.constant(w))));
        return p.grad;
    };
    CHECK(finite_difference_error(row, loss_of, grad_of) < 1e-6);

    Mat col = random_mat(4, 1, rng);
    auto loss_of_c = [&](const Mat& v) {
        Tape t(false);
        return t.scalar(t.sum(t.mul(t.add_colvec(t.constant(m), t.constant(v)), t.constant(w))));
    };
    auto grad_of_c = [&](const Mat& v) {
        Tape t;
        Param p("col", v);
        t.backward(t.sum(t.mul(t.add_colvec(t.constant(m), t.param(p)), t.constant(w))));
        return p.grad;
    };
    CHECK(finite_difference_error(col, loss_of_c, grad_of_c) < 1e-6);
}

TEST_CASE("layer norm gradients match finite differences") {
    Rng rng(23);
    const Mat w = random_mat(3, 6, rng);
    const Mat gamma = random_mat(1, 6, rng);
    const Mat beta = random_mat(1, 6, rng);
    Mat x = random_mat(3, 6, rng);

    auto loss_of = [&](const Mat& v) {
        Tape t(false);
        return t.scalar(
            t.sum(t.mul(t.layer_norm_rows(t.constant(v), t.constant(gamma), t.constant(beta)), t.constant(w))));
    };
    auto grad_of = [&](const Mat& v) {
        Tape t;
        Param p("x", v);
        t.backward(
            t.sum(t.mul(t.layer_norm_rows(t.param(p), t.constant(gamma), t.constant(beta)), t.constant(w))));
        return p.grad;
    };
    CHECK(finite_difference_error(x, loss_of, grad_of, 1e-6) < 1e-5);

    auto loss_of_g = [&](const Mat& v) {
        Tape t(false);
        return t.scalar(
            t.sum(t.mul(t.layer_norm_rows(t.constant(x), t.constant(v), t.constant(beta)), t.constant(w))));
    };
    auto grad_of_g = [&](const Mat& v) {
        Tape t;
        Param p("gamma", v);
        t.backward(
            t.sum(t.mul(t.layer_norm_rows(t.constant(x), t.param(p), t.constant(beta)), t.constant(w))));
        return p.grad;
    };
    CHECK(finite_difference_error(gamma, loss_of_g, grad_of_g) < 1e-6);
}

TEST_CASE("conv2d matches a direct convolution and its gradients check out") {
    Rng rng(29);
    const ConvSpec spec{2, 5, 6, 3, 3, 2, 1};
    const Mat x = random_mat(2, 30, rng);
    const Mat w = random_mat(3, 18, rng);
    const Mat b = random_mat(1, 3, rng);

    Tape t(false);
    Var out = t.conv2d(t.constant(x), t.constant(w), t.constant(b), spec);
    const Mat& y = t.value(out);
    REQUIRE(y.rows() == 3);
    REQUIRE(y.cols() == spec.out_height() * spec.out_width());

    // direct evaluation
    for (int co = 0; co < 3; ++co) {
        for (int oy = 0; oy < spec.out_height(); ++oy) {
            for (int ox = 0; ox < spec.out_width(); ++ox) {
                double acc = b(0, co);
                for (int ci = 0; ci < 2; ++ci)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = oy * 2 + ky - 1;
                            const int ix = ox * 2 + kx - 1;
                            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                            acc += w(co, (ci * 3 + ky) * 3 + kx) * x(ci, iy * 6 + ix);
                        }
                CHECK(y(co, oy * spec.out_width() + ox) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }

    const Mat gw = random_mat(3, y.cols(), rng);
    for (int which = 0; which < 3; ++which) {
        const Mat* target = which == 0 ? &x : which == 1 ? &w : &b;
        auto loss_of = [&](const Mat& v) {
            Tape tt(false);
            Var xx = tt.constant(which == 0 ? v : x);
            Var ww = tt.constant(which == 1 ? v : w);
            Var bb = tt.constant(which == 2 ? v : b);
            return tt.scalar(tt.sum(tt.mul(tt.conv2d(xx, ww, bb, spec), tt.constant(gw))));
        };
        auto grad_of = [&](const Mat& v) {
            Tape tt;
            Param p("p", v);
            Var pv = tt.param(p);
            Var xx = which == 0 ? pv : tt.constant(x);
            Var ww = which == 1 ? pv : tt.constant(w);
            Var bb = which == 2 ? pv : tt.constant(b);
            tt.backward(tt.sum(tt.mul(tt.conv2d(xx, ww, bb, spec), tt.constant(gw))));
            return p.grad;
        };
        CHECK(finite_difference_error(*target, loss_of, grad_of) < 1e-6);
    }
}

TEST_CASE("deformable_attend gradients match finite differences") {
    Rng rng(31);
    const int grid_h = 4, grid_w = 5, heads = 2, points = 3, nq = 3, d = 6;
    const Mat values = random_mat(grid_h * grid_w, d, rng);
    Mat locs(nq, heads * points * 2);
    for (std::size_t i = 0; i < locs.size(); ++i) locs.at(i) = rng.uniform(0.3, 2.7);  // interior, off-integer
    Mat attn(nq, heads * points);
    for (std::size_t i = 0; i < attn.size(); ++i) attn.at(i) = rng.uniform(0.1, 1.0);
    const Mat gw = random_mat(nq, d, rng);

    for (int which = 0; which < 3; ++which) {
        const Mat* target = which == 0 ? &values : which == 1 ? &locs : &attn;
        auto loss_of = [&](const Mat& v) {
            Tape tt(false);
            Var vv = tt.constant(which == 0 ? v : values);
            Var ll = tt.constant(which == 1 ? v : locs);
            Var aa = tt.constant(which == 2 ? v : attn);
            return tt.scalar(tt.sum(tt.mul(tt.deformable_attend(vv, ll, aa, grid_h, grid_w, heads), tt.constant(gw))));
        };
        auto grad_of = [&](const Mat& v) {
            Tape tt;
            Param p("p", v);
            Var pv = tt.param(p);
            Var vv = which == 0 ? pv : tt.constant(values);
            Var ll = which == 1 ? pv : tt.constant(locs);
            Var aa = which == 2 ? pv : tt.constant(attn);
            tt.backward(tt.sum(tt.mul(tt.deformable_attend(vv, ll, aa, grid_h, grid_w, heads), tt.constant(gw))));
            return p.grad;
        };
        CHECK(finite_difference_error(*target, loss_of, grad_of) < 1e-6);
    }
}

TEST_CASE("deformable_attend clamps out-of-bounds locations with zero location gradient") {
    const int grid_h = 3, grid_w = 3;
    Mat values(9, 2);
    for (int i = 0; i < 9; ++i) {
        values(i, 0) = i;
        values(i, 1) = -i;
    }
    Mat locs(1, 2);
    locs(0, 0) = -4.0;  // clamps to (0, 2)
    locs(0, 1) = 10.0;
    Mat attn(1, 1, 1.0);

    Tape t;
    Param pl("locs", locs);
    Var out = t.deformable_attend(t.constant(values), t.param(pl), t.constant(attn), grid_h, grid_w, 1);
    CHECK(t.value(out)(0, 0) == doctest::Approx(2.0));
    CHECK(t.value(out)(0, 1) == doctest::Approx(-2.0));
    t.backward(t.sum(out));
    CHECK(pl.grad(0, 0) == 0.0);
    CHECK(pl.grad(0, 1) == 0.0);
}

TEST_CASE("gradients accumulate across shared subexpressions") {
    Param p("x", Mat(1, 1, 2.0));
    Tape t;
    Var x = t.param(p);
    Var y = t.add(t.mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 5
    t.backward(t.sum(y));
    CHECK(p.grad(0, 0) == doctest::Approx(5.0));
}

TEST_CASE("grl is identity forward and negates scaled gradients backward") {
    Rng rng(37);
    const Mat x = random_mat(2, 3, rng);
    Param p("x", x);
    Tape t;
    Var v = t.param(p);
    Var g = t.grl(v, 0.5);
    CHECK(max_abs_diff(t.value(g), x) == 0.0);
    t.backward(t.sum(t.square(g)));

    Param p2("x", x);
    Tape t2;
    t2.backward(t2.sum(t2.square(t2.param(p2))));
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(p.grad.at(i) == doctest::Approx(-0.5 * p2.grad.at(i)).epsilon(1e-12));
}

TEST_CASE("adam steps in the negative gradient direction and zeroes grads") {
    Param p("x", Mat(1, 1, 1.0));
    AdamOptimizer opt({&p});
    p.grad(0, 0) = 2.0;
    opt.step(0.1);
    CHECK(p.value(0, 0) < 1.0);
    CHECK(p.grad(0, 0) == 0.0);
}
