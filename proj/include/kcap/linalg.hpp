#pragma once

#include <vector>

#include "kcap/mat.hpp"

namespace kcap {

// Escalation policy for factorizing nearly-PSD matrices: add jitter*I, retry
// with jitter*10 on failure, give up past max_jitter.
struct PsdRepair {
    double jitter = 1e-10;
    double max_jitter = 1e-4;
};

struct CholResult {
    Mat L;          // lower triangular
    double jitter;  // diagonal shift actually applied (0 if none was needed)
    int attempts;   // factorization attempts, 1 = clean
};

// Lower Cholesky of a symmetric PSD matrix with jitter repair.
// Throws NotSymmetric if m deviates from symmetry by more than 1e-9*max|m|,
// RepairExceeded if no jitter up to the cap produces a factor with
// max|LL^T - (m + jitter*I)| <= 1e-8*(1 + max|m|).
CholResult cholesky_psd(const Mat& m, const PsdRepair& repair = {});

// x = L^-1 b and x = L^-T b for lower-triangular L, applied column-wise to a
// matrix of right-hand sides.
Mat solve_lower(const Mat& L, const Mat& b);
Mat solve_lower_t(const Mat& L, const Mat& b);
// Solve (L L^T) x = b.
Mat solve_cholesky(const Mat& L, const Mat& b);

struct SymEig {
    Mat vectors;                 // column j is the eigenvector for values[j]
    std::vector<double> values;  // ascending
};

// Eigendecomposition of a symmetric matrix (input is symmetrized first to
// wash out roundoff-level asymmetry).
SymEig sym_eig(const Mat& m);

struct FlooredInverse {
    Mat inv;
    bool degenerate;  // true if any eigenvalue sat below the floor and was dropped
};

// Pseudo-inverse with an eigenvalue floor of floor_scale * trace(m)/n:
// eigendirections below the floor are dropped rather than inverted. Used where
// a covariance block may be exactly singular (e.g. duplicated tokens).
FlooredInverse sym_inverse_floored(const Mat& m, double floor_scale = 1e-10);

double sym_min_eigenvalue(const Mat& m);

}  // namespace kcap
