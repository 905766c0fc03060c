#include "kcap/linalg.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "kcap/error.hpp"

namespace kcap {

namespace {

// One factorization attempt at fixed jitter. Returns false as soon as a pivot
// goes nonpositive (beyond roundoff), leaving the caller to escalate.
bool try_cholesky(const Mat& m, double jitter, Mat& L) {
    const int n = m.rows();
    L = Mat(n, n);
    for (int j = 0; j < n; ++j) {
        double d = m(j, j) + jitter;
        for (int k = 0; k < j; ++k) d -= L(j, k) * L(j, k);
        if (d <= 0.0 || !std::isfinite(d)) return false;
        const double ljj = std::sqrt(d);
        L(j, j) = ljj;
        const double inv = 1.0 / ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = m(i, j);
            for (int k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
            L(i, j) = s * inv;
        }
    }
    return true;
}

double reconstruction_gap(const Mat& m, double jitter, const Mat& L) {
    const int n = m.rows();
    double gap = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int k = 0; k <= j; ++k) s += L(i, k) * L(j, k);
            double target = m(i, j) + (i == j ? jitter : 0.0);
            gap = std::max(gap, std::fabs(s - target));
        }
    return gap;
}

using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

CholResult cholesky_psd(const Mat& m, const PsdRepair& repair) {
    require(m.rows() == m.cols(), ErrorCode::ShapeMismatch, "cholesky_psd: matrix not square");
    require(m.all_finite(), ErrorCode::NotFinite, "cholesky_psd: non-finite entries");
    const double scale = m.max_abs();
    require(m.asymmetry() <= 1e-9 * std::max(scale, 1e-300), ErrorCode::NotSymmetric,
            "cholesky_psd: input asymmetric beyond tolerance");

    const double tol = 1e-8 * (1.0 + scale);
    Mat L;
    int attempts = 0;

    // First try without any jitter; a clean PD matrix should not be shifted.
    ++attempts;
    if (try_cholesky(m, 0.0, L) && reconstruction_gap(m, 0.0, L) <= tol) return {std::move(L), 0.0, attempts};

    for (double jitter = repair.jitter; jitter <= repair.max_jitter * (1.0 + 1e-12); jitter *= 10.0) {
        ++attempts;
        if (try_cholesky(m, jitter, L) && reconstruction_gap(m, jitter, L) <= tol)
            return {std::move(L), jitter, attempts};
    }
    fail(ErrorCode::RepairExceeded, "cholesky_psd: jitter repair exceeded cap of " + std::to_string(repair.max_jitter));
}

Mat solve_lower(const Mat& L, const Mat& b) {
    const int n = L.rows();
    require(L.cols() == n && b.rows() == n, ErrorCode::ShapeMismatch, "solve_lower: shape mismatch");
    Mat x = b;
    for (int c = 0; c < x.cols(); ++c) {
        for (int i = 0; i < n; ++i) {
            double s = x(i, c);
            for (int k = 0; k < i; ++k) s -= L(i, k) * x(k, c);
            x(i, c) = s / L(i, i);
        }
    }
    return x;
}

Mat solve_lower_t(const Mat& L, const Mat& b) {
    const int n = L.rows();
    require(L.cols() == n && b.rows() == n, ErrorCode::ShapeMismatch, "solve_lower_t: shape mismatch");
    Mat x = b;
    for (int c = 0; c < x.cols(); ++c) {
        for (int i = n - 1; i >= 0; --i) {
            double s = x(i, c);
            for (int k = i + 1; k < n; ++k) s -= L(k, i) * x(k, c);
            x(i, c) = s / L(i, i);
        }
    }
    return x;
}

Mat solve_cholesky(const Mat& L, const Mat& b) { return solve_lower_t(L, solve_lower(L, b)); }

SymEig sym_eig(const Mat& m) {
    require(m.rows() == m.cols(), ErrorCode::ShapeMismatch, "sym_eig: matrix not square");
    Mat s = m;
    s.symmetrize();
    Eigen::Map<const EigenRowMat> em(s.data(), s.rows(), s.cols());
    Eigen::SelfAdjointEigenSolver<EigenRowMat> solver(em);
    require(solver.info() == Eigen::Success, ErrorCode::NotFinite, "sym_eig: eigensolver failed");

    SymEig out;
    out.values.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + s.rows());
    out.vectors = Mat(s.rows(), s.cols());
    for (int i = 0; i < s.rows(); ++i)
        for (int j = 0; j < s.cols(); ++j) out.vectors(i, j) = solver.eigenvectors()(i, j);
    return out;
}

FlooredInverse sym_inverse_floored(const Mat& m, double floor_scale) {
    SymEig eig = sym_eig(m);
    const int n = m.rows();
    double trace = 0.0;
    for (int i = 0; i < n; ++i) trace += m(i, i);
    const double floor = floor_scale * std::max(trace, 0.0) / std::max(n, 1);

    FlooredInverse out{Mat(n, n), false};
    for (int k = 0; k < n; ++k) {
        if (eig.values[k] <= floor) {
            out.degenerate = true;
            continue;
        }
        const double w = 1.0 / eig.values[k];
        for (int i = 0; i < n; ++i) {
            const double vik = eig.vectors(i, k) * w;
            for (int j = 0; j < n; ++j) out.inv(i, j) += vik * eig.vectors(j, k);
        }
    }
    return out;
}

double sym_min_eigenvalue(const Mat& m) { return sym_eig(m).values.front(); }

}  // namespace kcap
