#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "kcap/finite_width.hpp"
#include "kcap/mat.hpp"
#include "kcap/propagation.hpp"
#include "kcap/rng.hpp"

using namespace kcap;

namespace {

Mat random_input(int t, int d, uint64_t seed) {
    Rng rng(seed);
    return Mat::gaussian(t, d, rng);
}

// Entrywise |a - b| <= k * sqrt(se_a^2 + se_b^2) + abs_slack.
void check_within_se(const Mat& a, const Mat& sa, const Mat& b, const Mat& sb, double k, double abs_slack) {
    REQUIRE(a.same_shape(b));
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) {
            double tol = k * std::sqrt(sa(i, j) * sa(i, j) + sb(i, j) * sb(i, j)) + abs_slack;
            CHECK(std::fabs(a(i, j) - b(i, j)) < tol);
        }
}

}  // namespace

TEST_CASE("init_params shapes, determinism, and entry variance") {
    FiniteDims d;
    d.d_in = 3;
    d.d_model = 16;
    d.H = 2;
    d.L = 2;
    FiniteParams p = init_params(d, 42);
    CHECK(p.w_emb.rows() == 3);
    CHECK(p.w_emb.cols() == 16);
    CHECK(p.blocks.size() == 2);
    CHECK(p.blocks[0].wq.size() == 2);
    CHECK(p.blocks[0].wq[0].rows() == 16);
    CHECK(p.blocks[0].wq[0].cols() == 8);  // d_k defaults to d_model / H
    CHECK(p.blocks[0].wv[1].rows() == 16);
    CHECK(p.blocks[0].wv[1].cols() == 16);
    CHECK(p.blocks[1].w_mlp.rows() == 16);
    CHECK(p.blocks[0].gamma[0] == 1.0);
    CHECK(p.blocks[0].beta[5] == 0.0);

    FiniteParams q = init_params(d, 42);
    CHECK((p.w_emb - q.w_emb).max_abs() == 0.0);
    CHECK((p.blocks[1].wv[0] - q.blocks[1].wv[0]).max_abs() == 0.0);

    // ~1e6 sampled W_Q entries at d_model = 16: variance 1/16 within 1%.
    double sum = 0.0, sq = 0.0;
    long count = 0;
    FiniteDims dv;
    dv.d_in = 1;
    dv.d_model = 16;
    dv.d_k = 16;
    dv.H = 1;
    dv.L = 1;
    for (int s = 0; s < 4000; ++s) {
        FiniteParams pp = init_params(dv, 1000 + static_cast<uint64_t>(s));
        const Mat& w = pp.blocks[0].wq[0];
        for (size_t i = 0; i < w.size(); ++i) {
            sum += w.data()[i];
            sq += w.data()[i] * w.data()[i];
            ++count;
        }
    }
    double mean = sum / count;
    double var = sq / count - mean * mean;
    CHECK(var == doctest::Approx(1.0 / 16.0).epsilon(0.01));
}

TEST_CASE("zero query/key weights give exactly uniform attention") {
    FiniteDims d;
    d.d_in = 2;
    d.d_model = 6;
    d.H = 1;
    d.L = 1;
    FiniteParams p = init_params(d, 7);
    for (auto& w : p.blocks[0].wq) w = Mat(6, 6);
    for (auto& w : p.blocks[0].wk) w = Mat(6, 6);

    Mat x = random_input(3, 2, 11);
    ForwardTrace tr = forward(x, p);
    CHECK(tr.scores[0][0].max_abs() == 0.0);
    // Uniform attention mixes every token identically: all rows of Z equal.
    for (int a = 1; a < 3; ++a)
        for (int j = 0; j < 6; ++j) CHECK(tr.z_attn[0](a, j) == doctest::Approx(tr.z_attn[0](0, j)).epsilon(1e-12));
}

TEST_CASE("zero input propagates to zero block output when sigma_b = 0") {
    FiniteDims d;
    d.d_in = 2;
    d.d_model = 8;
    d.H = 2;
    d.L = 2;
    d.sigma_b = 0.0;
    FiniteParams p = init_params(d, 13);
    Mat x(3, 2);  // all zeros
    ForwardTrace tr = forward(x, p);
    CHECK(tr.z_embed.max_abs() == 0.0);
    CHECK(tr.z_attn[1].max_abs() == 0.0);
    CHECK(tr.z_ln[1].max_abs() == 0.0);
    CHECK(tr.z_out[1].max_abs() == 0.0);
}

TEST_CASE("single block forward matches a straight-line reimplementation") {
    FiniteDims d;
    d.d_in = 3;
    d.d_model = 3;
    d.H = 1;
    d.L = 1;
    d.sigma_w = 1.2;
    d.sigma_b = 0.4;
    d.ln_eps = 1e-5;
    FiniteParams p = init_params(d, 99);
    Mat x = random_input(2, 3, 31);

    ForwardTrace tr = forward(x, p);

    // Independent arithmetic with plain loops.
    const int t = 2, dm = 3;
    auto mm = [](const Mat& a, const Mat& b) {
        Mat o(a.rows(), b.cols());
        for (int i = 0; i < a.rows(); ++i)
            for (int j = 0; j < b.cols(); ++j)
                for (int k = 0; k < a.cols(); ++k) o(i, j) += a(i, k) * b(k, j);
        return o;
    };
    Mat zp = mm(x, p.w_emb);
    Mat q = mm(zp, p.blocks[0].wq[0]);
    Mat k = mm(zp, p.blocks[0].wk[0]);
    Mat v = mm(zp, p.blocks[0].wv[0]);
    Mat s(t, t);
    for (int a = 0; a < t; ++a)
        for (int c = 0; c < t; ++c) {
            for (int i = 0; i < dm; ++i) s(a, c) += q(a, i) * k(c, i);
            s(a, c) /= std::sqrt(3.0);
        }
    CHECK((tr.scores[0][0] - s).max_abs() < 1e-12);

    Mat z(t, dm);
    for (int a = 0; a < t; ++a) {
        double m = std::max(s(a, 0), s(a, 1));
        double e0 = std::exp(s(a, 0) - m), e1 = std::exp(s(a, 1) - m);
        double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        for (int j = 0; j < dm; ++j) z(a, j) = a0 * v(0, j) + a1 * v(1, j);
    }
    CHECK((tr.z_attn[0] - z).max_abs() < 1e-12);

    Mat ln(t, dm);
    for (int a = 0; a < t; ++a) {
        double mean = (z(a, 0) + z(a, 1) + z(a, 2)) / 3.0;
        double n2 = 0.0;
        for (int j = 0; j < dm; ++j) n2 += (z(a, j) - mean) * (z(a, j) - mean);
        double sc = 1.0 / std::sqrt(n2 / 3.0 + 1e-5);
        for (int j = 0; j < dm; ++j) ln(a, j) = (z(a, j) - mean) * sc;
    }
    CHECK((tr.z_ln[0] - ln).max_abs() < 1e-12);

    Mat out(t, dm);
    for (int a = 0; a < t; ++a)
        for (int i = 0; i < dm; ++i) {
            double acc = p.blocks[0].b_mlp[static_cast<size_t>(i)];
            for (int j = 0; j < dm; ++j) acc += p.blocks[0].w_mlp(i, j) * std::max(0.0, ln(a, j));
            out(a, i) = acc;
        }
    CHECK((tr.z_out[0] - out).max_abs() < 1e-12);

    // Purity: identical call, identical bits.
    ForwardTrace tr2 = forward(x, p);
    CHECK((tr.z_out[0] - tr2.z_out[0]).max_abs() == 0.0);
}

TEST_CASE("flop formula: unit plug-in, quadratic dominance, instrumented match") {
    CHECK(flop_count(1, 1, 1, 1, 1) == 15);

    // At large T with everything else fixed, doubling T quadruples the count.
    double r = static_cast<double>(flop_count(2, 4, 64, 16, 4096)) / static_cast<double>(flop_count(2, 4, 64, 16, 2048));
    CHECK(r == doctest::Approx(4.0).epsilon(0.02));

    FiniteDims d;
    d.d_in = 3;
    d.d_model = 8;
    d.d_k = 4;
    d.H = 2;
    d.L = 1;
    FiniteParams p = init_params(d, 5);
    Mat x = random_input(4, 3, 55);
    ForwardTrace tr = forward(x, p);
    uint64_t want = flop_count(1, 2, 8, 4, 4);
    CHECK(tr.flops == want);
    // Documented slack for softmax-convention differences.
    CHECK(static_cast<double>(tr.flops >= want ? tr.flops - want : want - tr.flops) <= 5.0 * 4 * 4);
}

TEST_CASE("conditional covariance sampler matches explicit weights in law") {
    FiniteDims d;
    d.d_in = 3;
    d.d_model = 48;
    d.H = 2;
    d.L = 2;
    d.sigma_w = 1.0;
    d.sigma_b = 0.2;
    Mat x1 = random_input(2, 3, 301);
    Mat x2 = random_input(3, 3, 302);

    const int64_t n = 3000;
    for (Tap tap : {Tap::pre_attn_out, Tap::post_ln, Tap::post_mlp}) {
        EmpiricalCov ex = empirical_covariance(x1, x2, d, n, 11, tap, 1, CovMethod::explicit_weights);
        EmpiricalCov co = empirical_covariance(x1, x2, d, n, 22, tap, 1, CovMethod::conditional);
        CHECK(ex.mean.rows() == 2);
        CHECK(ex.mean.cols() == 3);
        check_within_se(ex.mean, ex.se, co.mean, co.se, 5.0, 1e-4);
    }

    EmpiricalCov exs = empirical_covariance(x1, x2, d, n, 33, Tap::scores, 1, CovMethod::explicit_weights);
    EmpiricalCov cos_ = empirical_covariance(x1, x2, d, n, 44, Tap::scores, 1, CovMethod::conditional);
    CHECK(exs.mean.rows() == 4);
    CHECK(exs.mean.cols() == 9);
    check_within_se(exs.mean, exs.se, cos_.mean, cos_.se, 5.0, 1e-4);
}

TEST_CASE("first-block scores factorize through the embedded covariance") {
    FiniteDims d;
    d.d_in = 4;
    d.d_model = 512;
    d.H = 1;
    d.L = 1;
    Mat x = random_input(3, 4, 401);

    EmpiricalCov sc = empirical_covariance(x, x, d, 4000, 17, Tap::scores, 0, CovMethod::conditional);
    KernelState st = embed_covariance(x, x);
    // E[S_ac S_be] = sigma_ab sigma_ce, up to O(1/d_model) embedding-gram noise.
    for (int a = 0; a < 3; ++a)
        for (int c = 0; c < 3; ++c)
            for (int b = 0; b < 3; ++b)
                for (int e = 0; e < 3; ++e) {
                    double want = st.sigma11(a, b) * st.sigma11(c, e);
                    double got = sc.mean(a * 3 + c, b * 3 + e);
                    double tol = 5.0 * sc.se(a * 3 + c, b * 3 + e) + 0.02;
                    CHECK(std::fabs(got - want) < tol);
                }
}

TEST_CASE("empirical covariance of an input with itself is symmetric and PSD-ish") {
    FiniteDims d;
    d.d_in = 3;
    d.d_model = 64;
    d.H = 2;
    d.L = 1;
    Mat x = random_input(3, 3, 501);
    EmpiricalCov cov = empirical_covariance(x, x, d, 500, 19, Tap::post_mlp, 0, CovMethod::conditional);
    CHECK(cov.mean.asymmetry() < 1e-12);
    // 2x2 minors nonnegative up to noise.
    for (int a = 0; a < 3; ++a) CHECK(cov.mean(a, a) > 0.0);
}

TEST_CASE("empirical covariance is deterministic and worker-independent") {
    FiniteDims d;
    d.d_in = 2;
    d.d_model = 32;
    d.H = 2;
    d.L = 1;
    Mat x1 = random_input(2, 2, 601);
    Mat x2 = random_input(2, 2, 602);
    EmpiricalCov a = empirical_covariance(x1, x2, d, 600, 23, Tap::post_mlp, 0, CovMethod::conditional, 1);
    EmpiricalCov b = empirical_covariance(x1, x2, d, 600, 23, Tap::post_mlp, 0, CovMethod::conditional, 3);
    CHECK((a.mean - b.mean).max_abs() == 0.0);
    CHECK((a.se - b.se).max_abs() == 0.0);

    EmpiricalCov c = empirical_covariance(x1, x2, d, 600, 23, Tap::post_mlp, 0, CovMethod::conditional, 1);
    CHECK((a.mean - c.mean).max_abs() == 0.0);
}

TEST_CASE("attention covariance propagation matches the finite-width oracle") {
    // Moderate dims keep this test quick; the acceptance suite runs the
    // full-scale version.
    FiniteDims d;
    d.d_in = 3;
    d.d_model = 512;
    d.H = 64;
    d.L = 1;
    Mat x1 = random_input(3, 3, 701);
    Mat x2 = random_input(3, 3, 702);

    EmpiricalCov emp = empirical_covariance(x1, x2, d, 1500, 29, Tap::pre_attn_out, 0, CovMethod::conditional);

    KernelState st = embed_covariance(x1, x2);
    McConfig mc;
    mc.n_mc = 20000;
    mc.seed = 31;
    attention_cov_update(st, mc);

    check_within_se(emp.mean, emp.se, st.sigma12, st.se12, 5.0, 5.0 / 512.0);
}

TEST_CASE("fcn empirical kernel: conditional equals explicit in law") {
    Mat x1 = random_input(2, 3, 801);
    Mat x2 = random_input(2, 3, 802);
    BlockParams p;
    p.sigma_w = 1.1;
    p.sigma_b = 0.3;

    FcnEmpirical ex = empirical_fcn_covariance(x1, x2, 2, p, 64, 3000, 41, CovMethod::explicit_weights);
    FcnEmpirical co = empirical_fcn_covariance(x1, x2, 2, p, 64, 3000, 42, CovMethod::conditional);
    CHECK(std::fabs(ex.k12 - co.k12) < 5.0 * std::sqrt(ex.se12 * ex.se12 + co.se12 * co.se12) + 1e-4);
    CHECK(std::fabs(ex.k11 - co.k11) < 5.0 * std::sqrt(ex.se11 * ex.se11 + co.se11 * co.se11) + 1e-4);
    CHECK(std::fabs(ex.k22 - co.k22) < 5.0 * std::sqrt(ex.se22 * ex.se22 + co.se22 * co.se22) + 1e-4);
}

TEST_CASE("fcn empirical kernel converges to the analytic recursion") {
    Mat x1 = random_input(2, 4, 901);
    Mat x2 = random_input(3, 4, 902);  // different lengths: exercises padding
    BlockParams p;
    p.sigma_w = 1.0;
    p.sigma_b = 0.1;

    FcnKernelResult want = fcn_kernel(x1, x2, 3, p);
    FcnEmpirical got = empirical_fcn_covariance(x1, x2, 3, p, 4096, 400, 51, CovMethod::conditional);
    CHECK(std::fabs(got.k12 - want.k12) < 5.0 * got.se12 + 0.01);
    CHECK(std::fabs(got.k11 - want.k11) < 5.0 * got.se11 + 0.01);
    CHECK(std::fabs(got.k22 - want.k22) < 5.0 * got.se22 + 0.01);
}

TEST_CASE("layernorm and mlp duals match the finite-width taps") {
    FiniteDims d;
    d.d_in = 3;
    d.d_model = 1024;
    d.H = 32;
    d.L = 1;
    d.sigma_w = 1.0;
    d.sigma_b = 0.2;
    Mat x1 = random_input(3, 3, 111);
    Mat x2 = random_input(3, 3, 112);

    EmpiricalCov ln_emp = empirical_covariance(x1, x2, d, 1200, 61, Tap::post_ln, 0, CovMethod::conditional);
    EmpiricalCov mlp_emp = empirical_covariance(x1, x2, d, 1200, 62, Tap::post_mlp, 0, CovMethod::conditional);

    KernelState st = embed_covariance(x1, x2);
    McConfig mc;
    mc.n_mc = 40000;
    mc.seed = 63;
    attention_cov_update(st, mc);
    BlockParams bp;
    bp.sigma_w = d.sigma_w;
    bp.sigma_b = d.sigma_b;
    bp.ln_eps = d.ln_eps;
    layernorm_cov(st, bp);
    check_within_se(ln_emp.mean, ln_emp.se, st.sigma12, st.se12, 5.0, 6.0 / 1024.0);

    mlp_cov_update(st, bp);
    check_within_se(mlp_emp.mean, mlp_emp.se, st.sigma12, st.se12, 5.0, 6.0 / 1024.0);
}
