#include "ssta/mat.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ssta {

namespace {

// C[m x n] += A[m x k] * B[k x n]; ikj order so the inner loop streams rows
// of B and C and auto-vectorizes.
void gemm_nn(int m, int n, int k, double alpha, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = alpha * arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A^T (A is k x m) * B[k x n]
void gemm_tn(int m, int n, int k, double alpha, const double* a, const double* b, double* c) {
    for (int p = 0; p < k; ++p) {
        const double* arow = a + static_cast<std::size_t>(p) * m;
        const double* brow = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = alpha * arow[i];
            if (av == 0.0) continue;
            double* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B^T (B is n x k); dot products over contiguous rows.
void gemm_nt(int m, int n, int k, double alpha, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += alpha * acc;
        }
    }
}

// C[m x n] += A^T (k x m) * B^T (n x k); rare, small matrices only.
void gemm_tt(int m, int n, int k, double alpha, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(p) * m + i] * brow[p];
            crow[j] += alpha * acc;
        }
    }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, double alpha, const Mat& a, const Mat& b, double beta, Mat& c) {
    const int m = trans_a ? a.cols() : a.rows();
    const int k = trans_a ? a.rows() : a.cols();
    const int kb = trans_b ? b.cols() : b.rows();
    const int n = trans_b ? b.rows() : b.cols();
    if (k != kb || c.rows() != m || c.cols() != n) throw std::invalid_argument("gemm: shape mismatch");

    if (beta == 0.0) {
        c.fill(0.0);
    } else if (beta != 1.0) {
        double* cd = c.data();
        for (std::size_t i = 0; i < c.size(); ++i) cd[i] *= beta;
    }
    if (!trans_a && !trans_b)
        gemm_nn(m, n, k, alpha, a.data(), b.data(), c.data());
    else if (trans_a && !trans_b)
        gemm_tn(m, n, k, alpha, a.data(), b.data(), c.data());
    else if (!trans_a && trans_b)
        gemm_nt(m, n, k, alpha, a.data(), b.data(), c.data());
    else
        gemm_tt(m, n, k, alpha, a.data(), b.data(), c.data());
}

Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.rows(), b.cols());
    gemm(false, false, 1.0, a, b, 0.0, c);
    return c;
}

Mat softmax_rows(const Mat& m) {
    Mat out = m;
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
    return out;
}

}  // namespace ssta
