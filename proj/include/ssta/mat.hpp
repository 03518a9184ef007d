#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace ssta {

// Dense row-major double matrix. All model math runs on these; double keeps
// the finite-difference gradient checks well away from rounding noise.
class Mat {
  public:
    Mat() = default;
    Mat(int rows, int cols) : rows_(rows), cols_(cols), d_(static_cast<std::size_t>(rows) * cols, 0.0) {}
    Mat(int rows, int cols, double fill)
        : rows_(rows), cols_(cols), d_(static_cast<std::size_t>(rows) * cols, fill) {}

    static Mat zeros(int rows, int cols) { return Mat(rows, cols); }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return d_.size(); }
    bool empty() const { return d_.empty(); }

    double& operator()(int r, int c) { return d_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return d_[static_cast<std::size_t>(r) * cols_ + c]; }
    double& at(std::size_t i) { return d_[i]; }
    double at(std::size_t i) const { return d_[i]; }

    double* data() { return d_.data(); }
    const double* data() const { return d_.data(); }
    double* row(int r) { return d_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row(int r) const { return d_.data() + static_cast<std::size_t>(r) * cols_; }

    void fill(double v) { std::fill(d_.begin(), d_.end(), v); }
    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> d_;
};

// c = alpha * op(a) * op(b) + beta * c
void gemm(bool trans_a, bool trans_b, double alpha, const Mat& a, const Mat& b, double beta, Mat& c);

Mat matmul(const Mat& a, const Mat& b);

// Value-level row softmax (max-shifted).
Mat softmax_rows(const Mat& m);

}  // namespace ssta
