#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ssta/autodiff.hpp"
#include "ssta/common.hpp"

namespace ssta_test {

inline ssta::Mat random_mat(int rows, int cols, ssta::Rng& rng, double scale = 1.0) {
    ssta::Mat m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.at(i) = rng.uniform(-scale, scale);
    return m;
}

inline double max_abs_diff(const ssta::Mat& a, const ssta::Mat& b) {
    double mx = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a.at(i) - b.at(i)));
    return mx;
}

// Central finite differences of `loss_of(values)` against the analytic
// gradient at `values`. Returns the worst relative error over all entries
// with non-negligible gradient magnitude.
inline double finite_difference_error(ssta::Mat values,
                                      const std::function<double(const ssta::Mat&)>& loss_of,
                                      const std::function<ssta::Mat(const ssta::Mat&)>& grad_of,
                                      double h = 1e-5) {
    const ssta::Mat analytic = grad_of(values);
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values.at(i);
        values.at(i) = orig + h;
        const double up = loss_of(values);
        values.at(i) = orig - h;
        const double down = loss_of(values);
        values.at(i) = orig;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(numeric), std::abs(analytic.at(i)), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic.at(i)) / denom);
    }
    return worst;
}

}  // namespace ssta_test
