#include "kcap/score_sampler.hpp"

#include <cmath>

#include "kcap/error.hpp"
#include "kcap/kernels.hpp"

namespace kcap {

ScoreSingleSampler::ScoreSingleSampler(const Mat& sigma, const PsdRepair& repair) {
    l_ = cholesky_psd(sigma, repair).L;
}

void ScoreSingleSampler::draw_from(const Mat& u, Mat& s) const {
    require(u.rows() == t() && u.cols() == t(), ErrorCode::ShapeMismatch, "score draw: U shape mismatch");
    Mat tmp = matmul(l_, u);
    s = matmul_nt(tmp, l_);
}

void ScoreSingleSampler::draw(Rng& rng, Mat& s) const {
    Mat u = Mat::gaussian(t(), t(), rng);
    draw_from(u, s);
}

Mat sample_score_single(const Mat& sigma, Rng& rng) {
    ScoreSingleSampler sampler(sigma);
    Mat s;
    sampler.draw(rng, s);
    return s;
}

ScorePairSampler::ScorePairSampler(const Mat& sigma11, const Mat& sigma12, const Mat& sigma22,
                                   const PsdRepair& repair) {
    const int t1 = sigma11.rows(), t2 = sigma22.rows();
    require(sigma12.rows() == t1 && sigma12.cols() == t2, ErrorCode::ShapeMismatch,
            "score pair: sigma12 must be t1 x t2");

    auto c11 = cholesky_psd(sigma11, repair);
    auto c22 = cholesky_psd(sigma22, repair);
    l1_ = std::move(c11.L);
    l2_ = std::move(c22.L);
    flags_.jitter11 = c11.jitter;
    flags_.jitter22 = c22.jitter;

    // Conditional mean map B = sigma21 sigma11^+. The pseudo-inverse floor
    // covers exactly singular sigma11 (duplicated tokens and the like).
    FlooredInverse inv11 = sym_inverse_floored(sigma11);
    flags_.degenerate_sigma11 = inv11.degenerate;
    Mat sigma21 = sigma12.transposed();
    b_ = matmul(sigma21, inv11.inv);

    // Whitened conditional operator H = L2^-1 (B sigma12) L2^-T. Exactly
    // symmetric in real arithmetic; symmetrized before eigendecomposition to
    // wash out roundoff.
    Mat g = matmul(b_, sigma12);
    g.symmetrize();
    Mat y = solve_lower(l2_, g);                     // L2^-1 G
    Mat h = solve_lower(l2_, y.transposed());        // L2^-1 (L2^-1 G)^T = (L2^-1 G L2^-T)^T
    h.symmetrize();

    SymEig eig = sym_eig(h);
    // Eigenvalues live in [0, 1] for a consistent block triple. Clamp
    // roundoff-level overshoot, reject real violations: those mean the blocks
    // are not a valid joint covariance.
    std::vector<double> lam = eig.values;
    for (double& v : lam) {
        require(std::fabs(v) <= 1.0 + 1e-8, ErrorCode::EigenOvershoot,
                "score pair: whitened cross operator has |eigenvalue| " + std::to_string(std::fabs(v)) +
                    " > 1; inconsistent covariance blocks");
        v = std::min(1.0, std::max(-1.0, v));
    }
    q_ = eig.vectors;
    qt_ = q_.transposed();
    rfac_ = Mat(t2, t2);
    for (int i = 0; i < t2; ++i)
        for (int j = 0; j < t2; ++j) rfac_(i, j) = std::sqrt(std::max(0.0, 1.0 - lam[i] * lam[j]));
}

ScorePairSampler::Workspace ScorePairSampler::make_workspace() const {
    Workspace ws;
    ws.tmp1 = Mat(t1(), t1());
    ws.tmp2a = Mat(t2(), t2());
    ws.tmp2b = Mat(t2(), t2());
    ws.s1b = Mat(t2(), t1());
    ws.cond_mean = Mat(t2(), t2());
    return ws;
}

void ScorePairSampler::draw_from(const Mat& u1, const Mat& u2, Mat& s1, Mat& s2, Workspace& ws) const {
    require(u1.rows() == t1() && u1.cols() == t1() && u2.rows() == t2() && u2.cols() == t2(),
            ErrorCode::ShapeMismatch, "score pair draw: U shape mismatch");

    // S1 = L1 U1 L1^T
    if (s1.rows() != t1() || s1.cols() != t1()) s1 = Mat(t1(), t1());
    matmul_into(ws.tmp1, l1_, u1);
    matmul_nt_into(s1, ws.tmp1, l1_);

    // Conditional mean M = B S1 B^T (no symmetry anywhere: scores are not
    // symmetric matrices).
    if (s2.rows() != t2() || s2.cols() != t2()) s2 = Mat(t2(), t2());
    matmul_into(ws.s1b, b_, s1);
    matmul_nt_into(ws.cond_mean, ws.s1b, b_);

    // Fluctuation: V = Q^T U2 Q, D = rfac .* V, W = Q D Q^T
    matmul_into(ws.tmp2b, qt_, u2);
    matmul_into(ws.tmp2a, ws.tmp2b, q_);
    hadamard_into(ws.tmp2a, rfac_, ws.tmp2a);
    matmul_into(ws.tmp2b, q_, ws.tmp2a);
    matmul_nt_into(s2, ws.tmp2b, q_);

    // S2 = M + L2 W L2^T
    matmul_into(ws.tmp2b, l2_, s2);
    matmul_nt_into(s2, ws.tmp2b, l2_);
    s2 += ws.cond_mean;
}

void ScorePairSampler::draw(Rng& rng, Mat& s1, Mat& s2, Workspace& ws) const {
    Mat u1 = Mat::gaussian(t1(), t1(), rng);
    Mat u2 = Mat::gaussian(t2(), t2(), rng);
    draw_from(u1, u2, s1, s2, ws);
}

void naive_joint_sample(const Mat& sigma11, const Mat& sigma12, const Mat& sigma22, Rng& rng, Mat& s1, Mat& s2) {
    const int t1 = sigma11.rows(), t2 = sigma22.rows();
    require(t1 <= 8 && t2 <= 8, ErrorCode::TooLarge, "naive_joint_sample: guarded to T <= 8");
    require(sigma12.rows() == t1 && sigma12.cols() == t2, ErrorCode::ShapeMismatch,
            "naive_joint_sample: sigma12 must be t1 x t2");

    const int n1 = t1 * t1, n2 = t2 * t2, n = n1 + n2;
    // Joint covariance of (vec S1, vec S2) in row-major vec order:
    //   Cov(S1[a,c], S1[b,e]) = sigma11[a,b] sigma11[c,e]
    //   Cov(S1[a,c], S2[b,e]) = sigma12[a,b] sigma12[c,e]
    //   Cov(S2[a,c], S2[b,e]) = sigma22[a,b] sigma22[c,e]
    Mat cov(n, n);
    auto idx1 = [t1](int a, int c) { return a * t1 + c; };
    auto idx2 = [t2, n1](int b, int e) { return n1 + b * t2 + e; };
    for (int a = 0; a < t1; ++a)
        for (int c = 0; c < t1; ++c)
            for (int b = 0; b < t1; ++b)
                for (int e = 0; e < t1; ++e) cov(idx1(a, c), idx1(b, e)) = sigma11(a, b) * sigma11(c, e);
    for (int a = 0; a < t2; ++a)
        for (int c = 0; c < t2; ++c)
            for (int b = 0; b < t2; ++b)
                for (int e = 0; e < t2; ++e) cov(idx2(a, c), idx2(b, e)) = sigma22(a, b) * sigma22(c, e);
    for (int a = 0; a < t1; ++a)
        for (int c = 0; c < t1; ++c)
            for (int b = 0; b < t2; ++b)
                for (int e = 0; e < t2; ++e) {
                    double v = sigma12(a, b) * sigma12(c, e);
                    cov(idx1(a, c), idx2(b, e)) = v;
                    cov(idx2(b, e), idx1(a, c)) = v;
                }

    // The joint covariance is typically rank-deficient (e.g. X1 == X2), so the
    // jitter repair path is expected to engage here.
    Mat l = cholesky_psd(cov).L;
    std::vector<double> g(static_cast<size_t>(n));
    for (auto& v : g) v = rng.normal();
    std::vector<double> z(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int k = 0; k <= i; ++k) acc += l(i, k) * g[static_cast<size_t>(k)];
        z[static_cast<size_t>(i)] = acc;
    }

    s1 = Mat(t1, t1);
    s2 = Mat(t2, t2);
    for (int a = 0; a < t1; ++a)
        for (int c = 0; c < t1; ++c) s1(a, c) = z[static_cast<size_t>(idx1(a, c))];
    for (int b = 0; b < t2; ++b)
        for (int e = 0; e < t2; ++e) s2(b, e) = z[static_cast<size_t>(idx2(b, e))];
}

}  // namespace kcap
