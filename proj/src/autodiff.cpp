#include "ssta/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <utility>

namespace ssta {

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

void Tape::clear() { nodes_.clear(); }

Mat& Tape::grad(Var v) {
    Node& n = nodes_[v];
    if (n.grad.empty()) n.grad = Mat(n.value.rows(), n.value.cols());
    return n.grad;
}

Var Tape::push(Mat value, bool requires_grad, std::function<void()> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::constant(Mat value) { return push(std::move(value), false); }

Var Tape::scalar_constant(double value) {
    Mat m(1, 1);
    m(0, 0) = value;
    return push(std::move(m), false);
}

Var Tape::param(Param& p) {
    if (!grad_enabled_) return push(p.value, false);
    Var v = static_cast<Var>(nodes_.size());
    Param* pp = &p;
    return push(p.value, true, [this, v, pp] {
        const Mat& g = nodes_[v].grad;
        double* dst = pp->grad.data();
        const double* src = g.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
    });
}

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
    const Mat& av = nodes_[a].value;
    const Mat& bv = nodes_[b].value;
    const int m = trans_a ? av.cols() : av.rows();
    const int n = trans_b ? bv.rows() : bv.cols();
    Mat out(m, n);
    gemm(trans_a, trans_b, 1.0, av, bv, 0.0, out);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, a, b, trans_a, trans_b] {
        const Mat& g = nodes_[v].grad;
        if (nodes_[a].requires_grad) {
            Mat& da = grad(a);
            if (!trans_a && !trans_b)
                gemm(false, true, 1.0, g, nodes_[b].value, 1.0, da);
            else if (!trans_a && trans_b)
                gemm(false, false, 1.0, g, nodes_[b].value, 1.0, da);
            else if (trans_a && !trans_b)
                gemm(false, true, 1.0, nodes_[b].value, g, 1.0, da);
            else
                gemm(true, true, 1.0, nodes_[b].value, g, 1.0, da);
        }
        if (nodes_[b].requires_grad) {
            Mat& db = grad(b);
            if (!trans_a && !trans_b)
                gemm(true, false, 1.0, nodes_[a].value, g, 1.0, db);
            else if (trans_a && !trans_b)
                gemm(false, false, 1.0, nodes_[a].value, g, 1.0, db);
            else if (!trans_a && trans_b)
                gemm(true, false, 1.0, g, nodes_[a].value, 1.0, db);
            else
                gemm(true, true, 1.0, g, nodes_[a].value, 1.0, db);
        }
    });
}

Var Tape::add(Var a, Var b) {
    const Mat& av = nodes_[a].value;
    const Mat& bv = nodes_[b].value;
    check_same_shape(av, bv, "add");
    Mat out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) += bv.at(i);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, a, b] {
        const Mat& g = nodes_[v].grad;
        for (Var src : {a, b}) {
            if (!nodes_[src].requires_grad) continue;
            Mat& d = grad(src);
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i);
        }
    });
}

Var Tape::sub(Var a, Var b) {
    const Mat& av = nodes_[a].value;
    const Mat& bv = nodes_[b].value;
    check_same_shape(av, bv, "sub");
    Mat out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) -= bv.at(i);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, a, b] {
        const Mat& g = nodes_[v].grad;
        if (nodes_[a].requires_grad) {
            Mat& d = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i);
        }
        if (nodes_[b].requires_grad) {
            Mat& d = grad(b);
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) -= g.at(i);
        }
    });
}

Var Tape::mul(Var a, Var b) {
    const Mat& av = nodes_[a].value;
    const Mat& bv = nodes_[b].value;
    check_same_shape(av, bv, "mul");
    Mat out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= bv.at(i);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, a, b] {
        const Mat& g = nodes_[v].grad;
        if (nodes_[a].requires_grad) {
            Mat& d = grad(a);
            const Mat& bv2 = nodes_[b].value;
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i) * bv2.at(i);
        }
        if (nodes_[b].requires_grad) {
            Mat& d = grad(b);
            const Mat& av2 = nodes_[a].value;
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i) * av2.at(i);
        }
    });
}

Var Tape::div(Var a, Var b) {
    const Mat& av = nodes_[a].value;
    const Mat& bv = nodes_[b].value;
    check_same_shape(av, bv, "div");
    Mat out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) /= bv.at(i);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, a, b] {
        const Mat& g = nodes_[v].grad;
        const Mat& y = nodes_[v].value;
        const Mat& bv2 = nodes_[b].value;
        if (nodes_[a].requires_grad) {
            Mat& d = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i) / bv2.at(i);
        }
        if (nodes_[b].requires_grad) {
            Mat& d = grad(b);
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) -= g.at(i) * y.at(i) / bv2.at(i);
        }
    });
}

Var Tape::min2(Var a, Var b) {
    const Mat& av = nodes_[a].value;
    const Mat& bv = nodes_[b].value;
    check_same_shape(av, bv, "min2");
    Mat out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::min(av.at(i), bv.at(i));
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, a, b] {
        const Mat& g = nodes_[v].grad;
        const Mat& av2 = nodes_[a].value;
        const Mat& bv2 = nodes_[b].value;
        if (nodes_[a].requires_grad) {
            Mat& d = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av2.at(i) <= bv2.at(i)) d.at(i) += g.at(i);
        }
        if (nodes_[b].requires_grad) {
            Mat& d = grad(b);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (bv2.at(i) < av2.at(i)) d.at(i) += g.at(i);
        }
    });
}

Var Tape::max2(Var a, Var b) {
    const Mat& av = nodes_[a].value;
    const Mat& bv = nodes_[b].value;
    check_same_shape(av, bv, "max2");
    Mat out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::max(av.at(i), bv.at(i));
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, a, b] {
        const Mat& g = nodes_[v].grad;
        const Mat& av2 = nodes_[a].value;
        const Mat& bv2 = nodes_[b].value;
        if (nodes_[a].requires_grad) {
            Mat& d = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av2.at(i) >= bv2.at(i)) d.at(i) += g.at(i);
        }
        if (nodes_[b].requires_grad) {
            Mat& d = grad(b);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (bv2.at(i) > av2.at(i)) d.at(i) += g.at(i);
        }
    });
}

Var Tape::scale(Var a, double s) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= s;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a, s] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += s * g.at(i);
    });
}

Var Tape::add_scalar(Var a, double s) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) += s;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i);
    });
}

Var Tape::add_rowvec(Var m, Var row) {
    const Mat& mv = nodes_[m].value;
    const Mat& rv = nodes_[row].value;
    if (rv.rows() != 1 || rv.cols() != mv.cols()) throw std::invalid_argument("add_rowvec: shape mismatch");
    Mat out = mv;
    for (int r = 0; r < out.rows(); ++r) {
        double* orow = out.row(r);
        for (int c = 0; c < out.cols(); ++c) orow[c] += rv(0, c);
    }
    bool rg = nodes_[m].requires_grad || nodes_[row].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, m, row] {
        const Mat& g = nodes_[v].grad;
        if (nodes_[m].requires_grad) {
            Mat& d = grad(m);
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i);
        }
        if (nodes_[row].requires_grad) {
            Mat& d = grad(row);
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < g.cols(); ++c) d(0, c) += g(r, c);
        }
    });
}

Var Tape::add_colvec(Var m, Var col) {
    const Mat& mv = nodes_[m].value;
    const Mat& cv = nodes_[col].value;
    if (cv.cols() != 1 || cv.rows() != mv.rows()) throw std::invalid_argument("add_colvec: shape mismatch");
    Mat out = mv;
    for (int r = 0; r < out.rows(); ++r) {
        double* orow = out.row(r);
        const double b = cv(r, 0);
        for (int c = 0; c < out.cols(); ++c) orow[c] += b;
    }
    bool rg = nodes_[m].requires_grad || nodes_[col].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, m, col] {
        const Mat& g = nodes_[v].grad;
        if (nodes_[m].requires_grad) {
            Mat& d = grad(m);
            for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i);
        }
        if (nodes_[col].requires_grad) {
            Mat& d = grad(col);
            for (int r = 0; r < g.rows(); ++r) {
                double acc = 0.0;
                for (int c = 0; c < g.cols(); ++c) acc += g(r, c);
                d(r, 0) += acc;
            }
        }
    });
}

Var Tape::relu(Var a) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::max(out.at(i), 0.0);
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& x = nodes_[a].value;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x.at(i) > 0.0) d.at(i) += g.at(i);
    });
}

Var Tape::leaky_relu(Var a, double slope) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (out.at(i) < 0.0) out.at(i) *= slope;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a, slope] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& x = nodes_[a].value;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i) * (x.at(i) > 0.0 ? 1.0 : slope);
    });
}

Var Tape::sigmoid(Var a) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = out.at(i);
        out.at(i) = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& y = nodes_[v].value;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i) * y.at(i) * (1.0 - y.at(i));
    });
}

Var Tape::log_(Var a) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::log(out.at(i));
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& x = nodes_[a].value;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += g.at(i) / x.at(i);
    });
}

Var Tape::abs_(Var a) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::abs(out.at(i));
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& x = nodes_[a].value;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x.at(i) > 0.0)
                d.at(i) += g.at(i);
            else if (x.at(i) < 0.0)
                d.at(i) -= g.at(i);
        }
    });
}

Var Tape::square(Var a) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= out.at(i);
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& x = nodes_[a].value;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) d.at(i) += 2.0 * x.at(i) * g.at(i);
    });
}

Var Tape::clamp(Var a, double lo, double hi) {
    Mat out = nodes_[a].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::clamp(out.at(i), lo, hi);
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a, lo, hi] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& x = nodes_[a].value;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x.at(i) > lo && x.at(i) < hi) d.at(i) += g.at(i);
    });
}

Var Tape::softmax_rows(Var a) {
    Mat out = nodes_[a].value;
    for (int r = 0; r < out.rows(); ++r) {
        double* row = out.row(r);
        double mx = row[0];
        for (int c = 1; c < out.cols(); ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < out.cols(); ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (int c = 0; c < out.cols(); ++c) row[c] /= sum;
    }
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& y = nodes_[v].value;
        Mat& d = grad(a);
        for (int r = 0; r < g.rows(); ++r) {
            double dot = 0.0;
            for (int c = 0; c < g.cols(); ++c) dot += g(r, c) * y(r, c);
            for (int c = 0; c < g.cols(); ++c) d(r, c) += y(r, c) * (g(r, c) - dot);
        }
    });
}

Var Tape::log_softmax_rows(Var a) {
    Mat out = nodes_[a].value;
    for (int r = 0; r < out.rows(); ++r) {
        double* row = out.row(r);
        double mx = row[0];
        for (int c = 1; c < out.cols(); ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < out.cols(); ++c) sum += std::exp(row[c] - mx);
        const double lse = mx + std::log(sum);
        for (int c = 0; c < out.cols(); ++c) row[c] -= lse;
    }
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        const Mat& y = nodes_[v].value;  // log-probabilities
        Mat& d = grad(a);
        for (int r = 0; r < g.rows(); ++r) {
            double gsum = 0.0;
            for (int c = 0; c < g.cols(); ++c) gsum += g(r, c);
            for (int c = 0; c < g.cols(); ++c) d(r, c) += g(r, c) - std::exp(y(r, c)) * gsum;
        }
    });
}

Var Tape::layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
    const Mat& xv = nodes_[x].value;
    const Mat& gv = nodes_[gamma].value;
    const Mat& bv = nodes_[beta].value;
    if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 || bv.cols() != xv.cols())
        throw std::invalid_argument("layer_norm_rows: affine shape mismatch");

    const int n = xv.rows();
    const int c = xv.cols();
    Mat xhat(n, c);
    Mat inv_std(n, 1);
    Mat out(n, c);
    for (int r = 0; r < n; ++r) {
        const double* xr = xv.row(r);
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xr[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double t = xr[j] - mean;
            var += t * t;
        }
        var /= c;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std(r, 0) = istd;
        double* hr = xhat.row(r);
        double* orow = out.row(r);
        for (int j = 0; j < c; ++j) {
            hr[j] = (xr[j] - mean) * istd;
            orow[j] = hr[j] * gv(0, j) + bv(0, j);
        }
    }
    bool rg = nodes_[x].requires_grad || nodes_[gamma].requires_grad || nodes_[beta].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    auto xh = std::make_shared<Mat>(std::move(xhat));
    auto is = std::make_shared<Mat>(std::move(inv_std));
    return push(std::move(out), rg, [this, v, x, gamma, beta, xh, is] {
        const Mat& g = nodes_[v].grad;
        const Mat& gv2 = nodes_[gamma].value;
        const int n = g.rows();
        const int c = g.cols();
        if (nodes_[beta].requires_grad) {
            Mat& d = grad(beta);
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < c; ++j) d(0, j) += g(r, j);
        }
        if (nodes_[gamma].requires_grad) {
            Mat& d = grad(gamma);
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < c; ++j) d(0, j) += g(r, j) * (*xh)(r, j);
        }
        if (nodes_[x].requires_grad) {
            Mat& d = grad(x);
            for (int r = 0; r < n; ++r) {
                double mean_dh = 0.0;
                double mean_dh_h = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double dh = g(r, j) * gv2(0, j);
                    mean_dh += dh;
                    mean_dh_h += dh * (*xh)(r, j);
                }
                mean_dh /= c;
                mean_dh_h /= c;
                const double istd = (*is)(r, 0);
                for (int j = 0; j < c; ++j) {
                    const double dh = g(r, j) * gv2(0, j);
                    d(r, j) += istd * (dh - mean_dh - (*xh)(r, j) * mean_dh_h);
                }
            }
        }
    });
}

Var Tape::sum(Var a) {
    const Mat& av = nodes_[a].value;
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av.at(i);
    Mat out(1, 1);
    out(0, 0) = s;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const double g = nodes_[v].grad(0, 0);
        Mat& d = grad(a);
        for (std::size_t i = 0; i < d.size(); ++i) d.at(i) += g;
    });
}

Var Tape::mean(Var a) {
    const Mat& av = nodes_[a].value;
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av.at(i);
    const double inv = 1.0 / static_cast<double>(av.size());
    Mat out(1, 1);
    out(0, 0) = s * inv;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a, inv] {
        if (!nodes_[a].requires_grad) return;
        const double g = nodes_[v].grad(0, 0) * inv;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < d.size(); ++i) d.at(i) += g;
    });
}

Var Tape::row_sums(Var a) {
    const Mat& av = nodes_[a].value;
    Mat out(av.rows(), 1);
    for (int r = 0; r < av.rows(); ++r) {
        double s = 0.0;
        const double* row = av.row(r);
        for (int c = 0; c < av.cols(); ++c) s += row[c];
        out(r, 0) = s;
    }
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        Mat& d = grad(a);
        for (int r = 0; r < d.rows(); ++r) {
            const double gr = g(r, 0);
            double* drow = d.row(r);
            for (int c = 0; c < d.cols(); ++c) drow[c] += gr;
        }
    });
}

Var Tape::gather_rows(Var a, std::vector<int> idx) {
    const Mat& av = nodes_[a].value;
    Mat out(static_cast<int>(idx.size()), av.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(av.row(idx[r]), av.row(idx[r]) + av.cols(), out.row(static_cast<int>(r)));
    Var v = static_cast<Var>(nodes_.size());
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a, ix] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        Mat& d = grad(a);
        for (std::size_t r = 0; r < ix->size(); ++r) {
            double* drow = d.row((*ix)[r]);
            const double* grow = g.row(static_cast<int>(r));
            for (int c = 0; c < g.cols(); ++c) drow[c] += grow[c];
        }
    });
}

Var Tape::slice_cols(Var a, int c0, int c1) {
    const Mat& av = nodes_[a].value;
    if (c0 < 0 || c1 > av.cols() || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Mat out(av.rows(), c1 - c0);
    for (int r = 0; r < av.rows(); ++r)
        std::copy(av.row(r) + c0, av.row(r) + c1, out.row(r));
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a, c0] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        Mat& d = grad(a);
        for (int r = 0; r < g.rows(); ++r) {
            double* drow = d.row(r) + c0;
            const double* grow = g.row(r);
            for (int c = 0; c < g.cols(); ++c) drow[c] += grow[c];
        }
    });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int rows = nodes_[parts[0]].value.rows();
    int cols = 0;
    bool rg = false;
    for (Var p : parts) {
        if (nodes_[p].value.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += nodes_[p].value.cols();
        rg = rg || nodes_[p].requires_grad;
    }
    Mat out(rows, cols);
    int off = 0;
    for (Var p : parts) {
        const Mat& pv = nodes_[p].value;
        for (int r = 0; r < rows; ++r)
            std::copy(pv.row(r), pv.row(r) + pv.cols(), out.row(r) + off);
        off += pv.cols();
    }
    Var v = static_cast<Var>(nodes_.size());
    auto ps = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(out), rg, [this, v, ps] {
        const Mat& g = nodes_[v].grad;
        int off2 = 0;
        for (Var p : *ps) {
            const int pc = nodes_[p].value.cols();
            if (nodes_[p].requires_grad) {
                Mat& d = grad(p);
                for (int r = 0; r < g.rows(); ++r) {
                    const double* grow = g.row(r) + off2;
                    double* drow = d.row(r);
                    for (int c = 0; c < pc; ++c) drow[c] += grow[c];
                }
            }
            off2 += pc;
        }
    });
}

Var Tape::grl(Var a, double scale_factor) {
    Mat out = nodes_[a].value;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), nodes_[a].requires_grad, [this, v, a, scale_factor] {
        if (!nodes_[a].requires_grad) return;
        const Mat& g = nodes_[v].grad;
        Mat& d = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) d.at(i) -= scale_factor * g.at(i);
    });
}

Var Tape::conv2d(Var x, Var w, Var b, const ConvSpec& spec) {
    const Mat& xv = nodes_[x].value;
    const Mat& wv = nodes_[w].value;
    const Mat& bv = nodes_[b].value;
    const int kk = spec.kernel * spec.kernel;
    if (xv.rows() != spec.in_channels || xv.cols() != spec.height * spec.width)
        throw std::invalid_argument("conv2d: input shape mismatch");
    if (wv.rows() != spec.out_channels || wv.cols() != spec.in_channels * kk)
        throw std::invalid_argument("conv2d: weight shape mismatch");
    if (bv.rows() != 1 || bv.cols() != spec.out_channels)
        throw std::invalid_argument("conv2d: bias shape mismatch");

    const int ho = spec.out_height();
    const int wo = spec.out_width();
    Mat cols(spec.in_channels * kk, ho * wo);
    for (int ci = 0; ci < spec.in_channels; ++ci) {
        const double* chan = xv.row(ci);
        for (int ky = 0; ky < spec.kernel; ++ky) {
            for (int kx = 0; kx < spec.kernel; ++kx) {
                double* crow = cols.row((ci * spec.kernel + ky) * spec.kernel + kx);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * spec.stride + ky - spec.pad;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * spec.stride + kx - spec.pad;
                        double val = 0.0;
                        if (iy >= 0 && iy < spec.height && ix >= 0 && ix < spec.width)
                            val = chan[iy * spec.width + ix];
                        crow[oy * wo + ox] = val;
                    }
                }
            }
        }
    }
    Mat out(spec.out_channels, ho * wo);
    gemm(false, false, 1.0, wv, cols, 0.0, out);
    for (int co = 0; co < spec.out_channels; ++co) {
        double* orow = out.row(co);
        const double bias = bv(0, co);
        for (int i = 0; i < ho * wo; ++i) orow[i] += bias;
    }

    bool rg = nodes_[x].requires_grad || nodes_[w].requires_grad || nodes_[b].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    auto saved_cols = std::make_shared<Mat>(std::move(cols));
    return push(std::move(out), rg, [this, v, x, w, b, spec, saved_cols] {
        const Mat& g = nodes_[v].grad;
        const int ho2 = spec.out_height();
        const int wo2 = spec.out_width();
        if (nodes_[b].requires_grad) {
            Mat& db = grad(b);
            for (int co = 0; co < spec.out_channels; ++co) {
                const double* grow = g.row(co);
                double acc = 0.0;
                for (int i = 0; i < ho2 * wo2; ++i) acc += grow[i];
                db(0, co) += acc;
            }
        }
        if (nodes_[w].requires_grad) {
            gemm(false, true, 1.0, g, *saved_cols, 1.0, grad(w));
        }
        if (nodes_[x].requires_grad) {
            Mat dcols(saved_cols->rows(), saved_cols->cols());
            gemm(true, false, 1.0, nodes_[w].value, g, 0.0, dcols);
            Mat& dx = grad(x);
            for (int ci = 0; ci < spec.in_channels; ++ci) {
                double* dchan = dx.row(ci);
                for (int ky = 0; ky < spec.kernel; ++ky) {
                    for (int kx = 0; kx < spec.kernel; ++kx) {
                        const double* crow = dcols.row((ci * spec.kernel + ky) * spec.kernel + kx);
                        for (int oy = 0; oy < ho2; ++oy) {
                            const int iy = oy * spec.stride + ky - spec.pad;
                            if (iy < 0 || iy >= spec.height) continue;
                            for (int ox = 0; ox < wo2; ++ox) {
                                const int ix = ox * spec.stride + kx - spec.pad;
                                if (ix < 0 || ix >= spec.width) continue;
                                dchan[iy * spec.width + ix] += crow[oy * wo2 + ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

namespace {

struct BilinearCell {
    int idx;
    double coeff;
};

// Corner cells and weights for a location already clamped to the grid.
inline int bilinear_cells(double y, double x, int h, int w, BilinearCell out[4], double* fy_out, double* fx_out,
                          int* y0_out, int* x0_out) {
    int y0 = static_cast<int>(std::floor(y));
    int x0 = static_cast<int>(std::floor(x));
    if (y0 > h - 2) y0 = h - 2;
    if (x0 > w - 2) x0 = w - 2;
    if (y0 < 0) y0 = 0;
    if (x0 < 0) x0 = 0;
    const double fy = y - y0;
    const double fx = x - x0;
    *fy_out = fy;
    *fx_out = fx;
    *y0_out = y0;
    *x0_out = x0;
    int n = 0;
    const double c00 = (1.0 - fy) * (1.0 - fx);
    const double c01 = (1.0 - fy) * fx;
    const double c10 = fy * (1.0 - fx);
    const double c11 = fy * fx;
    const int y1 = std::min(y0 + 1, h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    out[n++] = {y0 * w + x0, c00};
    out[n++] = {y0 * w + x1, c01};
    out[n++] = {y1 * w + x0, c10};
    out[n++] = {y1 * w + x1, c11};
    return n;
}

}  // namespace

Var Tape::deformable_attend(Var values, Var locs, Var attn, int grid_h, int grid_w, int heads) {
    const Mat& vv = nodes_[values].value;
    const Mat& lv = nodes_[locs].value;
    const Mat& av = nodes_[attn].value;
    const int nk = vv.rows();
    const int d = vv.cols();
    if (nk != grid_h * grid_w) throw std::invalid_argument("deformable_attend: grid/value mismatch");
    if (d % heads != 0) throw std::invalid_argument("deformable_attend: dim not divisible by heads");
    const int dh = d / heads;
    const int nq = lv.rows();
    if (lv.cols() % (2 * heads) != 0) throw std::invalid_argument("deformable_attend: locs shape");
    const int points = lv.cols() / (2 * heads);
    if (av.rows() != nq || av.cols() != heads * points) throw std::invalid_argument("deformable_attend: attn shape");

    Mat out(nq, d);
    for (int i = 0; i < nq; ++i) {
        const double* lrow = lv.row(i);
        const double* arow = av.row(i);
        double* orow = out.row(i);
        for (int h = 0; h < heads; ++h) {
            double* oslice = orow + h * dh;
            for (int p = 0; p < points; ++p) {
                const int hp = h * points + p;
                const double a = arow[hp];
                double y = std::clamp(lrow[hp * 2 + 0], 0.0, static_cast<double>(grid_h - 1));
                double x = std::clamp(lrow[hp * 2 + 1], 0.0, static_cast<double>(grid_w - 1));
                BilinearCell cells[4];
                double fy, fx;
                int y0, x0;
                bilinear_cells(y, x, grid_h, grid_w, cells, &fy, &fx, &y0, &x0);
                for (const auto& cell : cells) {
                    const double w = a * cell.coeff;
                    if (w == 0.0) continue;
                    const double* vrow = vv.row(cell.idx) + h * dh;
                    for (int c = 0; c < dh; ++c) oslice[c] += w * vrow[c];
                }
            }
        }
    }

    bool rg = nodes_[values].requires_grad || nodes_[locs].requires_grad || nodes_[attn].requires_grad;
    Var v = static_cast<Var>(nodes_.size());
    return push(std::move(out), rg, [this, v, values, locs, attn, grid_h, grid_w, heads] {
        const Mat& g = nodes_[v].grad;
        const Mat& vv2 = nodes_[values].value;
        const Mat& lv2 = nodes_[locs].value;
        const Mat& av2 = nodes_[attn].value;
        const int d = vv2.cols();
        const int dh = d / heads;
        const int nq = lv2.rows();
        const int points = lv2.cols() / (2 * heads);
        const bool need_v = nodes_[values].requires_grad;
        const bool need_l = nodes_[locs].requires_grad;
        const bool need_a = nodes_[attn].requires_grad;
        Mat* dv = need_v ? &grad(values) : nullptr;
        Mat* dl = need_l ? &grad(locs) : nullptr;
        Mat* da = need_a ? &grad(attn) : nullptr;
        for (int i = 0; i < nq; ++i) {
            const double* lrow = lv2.row(i);
            const double* arow = av2.row(i);
            const double* grow = g.row(i);
            for (int h = 0; h < heads; ++h) {
                const double* gslice = grow + h * dh;
                for (int p = 0; p < points; ++p) {
                    const int hp = h * points + p;
                    const double a = arow[hp];
                    const double ly = lrow[hp * 2 + 0];
                    const double lx = lrow[hp * 2 + 1];
                    const bool clamped_y = ly < 0.0 || ly > grid_h - 1;
                    const bool clamped_x = lx < 0.0 || lx > grid_w - 1;
                    const double y = std::clamp(ly, 0.0, static_cast<double>(grid_h - 1));
                    const double x = std::clamp(lx, 0.0, static_cast<double>(grid_w - 1));
                    BilinearCell cells[4];
                    double fy, fx;
                    int y0, x0;
                    bilinear_cells(y, x, grid_h, grid_w, cells, &fy, &fx, &y0, &x0);
                    const double* v00 = vv2.row(cells[0].idx) + h * dh;
                    const double* v01 = vv2.row(cells[1].idx) + h * dh;
                    const double* v10 = vv2.row(cells[2].idx) + h * dh;
                    const double* v11 = vv2.row(cells[3].idx) + h * dh;
                    double dot_sample = 0.0;
                    double dot_dy = 0.0;
                    double dot_dx = 0.0;
                    for (int c = 0; c < dh; ++c) {
                        const double sample = cells[0].coeff * v00[c] + cells[1].coeff * v01[c] +
                                              cells[2].coeff * v10[c] + cells[3].coeff * v11[c];
                        dot_sample += gslice[c] * sample;
                        // d(sample)/dy and /dx of the bilinear form
                        dot_dy += gslice[c] * ((v10[c] - v00[c]) * (1.0 - fx) + (v11[c] - v01[c]) * fx);
                        dot_dx += gslice[c] * ((v01[c] - v00[c]) * (1.0 - fy) + (v11[c] - v10[c]) * fy);
                    }
                    if (need_a) (*da)(i, hp) += dot_sample;
                    if (need_l) {
                        if (!clamped_y) (*dl)(i, hp * 2 + 0) += a * dot_dy;
                        if (!clamped_x) (*dl)(i, hp * 2 + 1) += a * dot_dx;
                    }
                    if (need_v) {
                        for (const auto& cell : cells) {
                            const double w = a * cell.coeff;
                            if (w == 0.0) continue;
                            double* dvrow = dv->row(cell.idx) + h * dh;
                            for (int c = 0; c < dh; ++c) dvrow[c] += w * gslice[c];
                        }
                    }
                }
            }
        }
    });
}

void Tape::backward(Var loss) {
    if (!grad_enabled_) throw std::logic_error("backward on a no-grad tape");
    const Mat& lv = nodes_[loss].value;
    if (lv.rows() != 1 || lv.cols() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad(loss)(0, 0) += 1.0;
    for (Var v = loss; v >= 0; --v) {
        Node& n = nodes_[v];
        if (n.requires_grad && n.backprop && !n.grad.empty()) n.backprop();
    }
}

}  // namespace ssta
