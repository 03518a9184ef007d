#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "ssta/autodiff.hpp"
#include "ssta/common.hpp"

namespace ssta {

// Owns parameters in registration order. Registration order fixes both the
// checkpoint layout and the optimizer update order.
class ParamStore {
  public:
    Param& create(const std::string& name, Mat value) {
        params_.push_back(std::make_unique<Param>(name, std::move(value)));
        return *params_.back();
    }
    std::vector<Param*> all() {
        std::vector<Param*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }
    const std::vector<std::unique_ptr<Param>>& entries() const { return params_; }

  private:
    std::vector<std::unique_ptr<Param>> params_;
};

inline Mat xavier_uniform(int rows, int cols, Rng& rng) {
    Mat m(rows, cols);
    const double limit = std::sqrt(6.0 / (rows + cols));
    for (std::size_t i = 0; i < m.size(); ++i) m.at(i) = rng.uniform(-limit, limit);
    return m;
}

inline Mat normal_init(int rows, int cols, double std_dev, Rng& rng) {
    Mat m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.at(i) = rng.normal() * std_dev;
    return m;
}

// y = x * W + b, with W stored as (in x out).
struct Linear {
    Param* w = nullptr;
    Param* b = nullptr;

    Linear() = default;
    Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
        w = &store.create(name + ".w", xavier_uniform(in, out, rng));
        b = &store.create(name + ".b", Mat(1, out));
    }
    Var operator()(Tape& t, Var x) const { return t.add_rowvec(t.matmul(x, t.param(*w)), t.param(*b)); }
};

struct LayerNorm {
    Param* gamma = nullptr;
    Param* beta = nullptr;

    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& name, int dim) {
        gamma = &store.create(name + ".gamma", Mat(1, dim, 1.0));
        beta = &store.create(name + ".beta", Mat(1, dim));
    }
    Var operator()(Tape& t, Var x) const { return t.layer_norm_rows(x, t.param(*gamma), t.param(*beta)); }
};

class AdamOptimizer {
  public:
    AdamOptimizer(std::vector<Param*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (Param* p : params_) {
            double* val = p->value.data();
            double* g = p->grad.data();
            double* m = p->m.data();
            double* v = p->v.data();
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                val[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            }
        }
        zero_grad();
    }

    void zero_grad() {
        for (Param* p : params_) p->grad.fill(0.0);
    }

  private:
    std::vector<Param*> params_;
    double beta1_;
    double beta2_;
    double eps_;
    long t_ = 0;
};

}  // namespace ssta
