#pragma once

#include <vector>

#include "kcap/linalg.hpp"
#include "kcap/mat.hpp"
#include "kcap/rng.hpp"

namespace kcap {

// Samplers for pre-softmax attention score matrices.
//
// In the wide limit the scores of an input are a centered Gaussian matrix with
// E[S_ac(X1) S_be(X2)] = sigma12[a,b] * sigma12[c,e], where sigma12 is the
// token-token covariance of the incoming layer. Draws therefore factor through
// the Cholesky of the covariance blocks: S(X1) = L1 U L1^T with U iid standard
// normal, and S(X2) | S(X1) via the low-rank-corrected construction below.
// Cost per draw is O(T^3) instead of the O(T^6) a dense Kronecker factorization
// would need; the dense path survives as the test oracle (naive_joint_sample).

// Draw one marginal score matrix for covariance block sigma (t x t).
class ScoreSingleSampler {
  public:
    explicit ScoreSingleSampler(const Mat& sigma, const PsdRepair& repair = {});

    int t() const { return l_.rows(); }
    // S = L U L^T for a caller-provided standard normal U (t x t).
    void draw_from(const Mat& u, Mat& s) const;
    void draw(Rng& rng, Mat& s) const;

  private:
    Mat l_;
};

struct ScorePairFlags {
    bool degenerate_sigma11 = false;  // pseudo-inverse floor engaged
    double jitter11 = 0.0;
    double jitter22 = 0.0;
};

// Joint draw of (S(X1), S(X2)) for the block triple (sigma11, sigma12,
// sigma22); sigma12 may be rectangular (t1 x t2). All sigma-dependent factors
// are computed once at construction so repeated draws amortize to the
// per-draw matrix products.
class ScorePairSampler {
  public:
    ScorePairSampler(const Mat& sigma11, const Mat& sigma12, const Mat& sigma22, const PsdRepair& repair = {});

    int t1() const { return l1_.rows(); }
    int t2() const { return l2_.rows(); }
    const ScorePairFlags& flags() const { return flags_; }

    struct Workspace {
        Mat tmp1, tmp2a, tmp2b, s1b, cond_mean;
    };
    Workspace make_workspace() const;

    // Deterministic map from standard normal inputs u1 (t1 x t1), u2 (t2 x t2)
    // to a joint draw; the antithetic path feeds (-u1, -u2).
    void draw_from(const Mat& u1, const Mat& u2, Mat& s1, Mat& s2, Workspace& ws) const;
    void draw(Rng& rng, Mat& s1, Mat& s2, Workspace& ws) const;

  private:
    Mat l1_, l2_;    // Cholesky factors of the diagonal blocks
    Mat b_;          // sigma21 * sigma11^+  (t2 x t1): conditional mean map
    Mat q_, qt_;     // eigenvectors of the whitened cross operator H
    Mat rfac_;       // rfac[i][j] = sqrt(1 - lam_i lam_j), clamped at 0
    ScorePairFlags flags_;
};

// Test oracle: materialize the full (t1^2 + t2^2)-dimensional joint Gaussian
// of (vec S1, vec S2) and draw through its dense Cholesky. Guarded to t <= 8;
// beyond that the dense covariance is the O(T^6) object the fast path exists
// to avoid.
void naive_joint_sample(const Mat& sigma11, const Mat& sigma12, const Mat& sigma22, Rng& rng, Mat& s1, Mat& s2);

Mat sample_score_single(const Mat& sigma, Rng& rng);

}  // namespace kcap
