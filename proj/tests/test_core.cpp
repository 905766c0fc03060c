#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "kcap/dual_activation.hpp"
#include "kcap/error.hpp"
#include "kcap/kernels.hpp"
#include "kcap/linalg.hpp"
#include "kcap/rng.hpp"
#include "kcap/threading.hpp"

using namespace kcap;

namespace {

Mat random_mat(int r, int c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
    return m;
}

// Random symmetric PSD matrix A A^T / cols.
Mat random_psd(int n, Rng& rng, int rank = -1) {
    if (rank < 0) rank = n;
    Mat a = random_mat(n, rank, rng);
    Mat s = matmul_nt(a, a);
    s *= 1.0 / rank;
    s.symmetrize();
    return s;
}

double max_rel_gap(const Mat& a, const Mat& b) {
    REQUIRE(a.same_shape(b));
    double gap = 0.0, scale = std::max({a.max_abs(), b.max_abs(), 1e-30});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) gap = std::max(gap, std::fabs(a(i, j) - b(i, j)));
    return gap / scale;
}

}  // namespace

TEST_CASE("rng streams are deterministic and scheduling-free") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

    // derive() depends only on the construction seed, not on draw position
    Rng c(42);
    (void)c.next_u64();
    (void)c.normal();
    Rng d1 = c.derive(7, 3), d2 = Rng(42).derive(7, 3);
    for (int i = 0; i < 100; ++i) CHECK(d1.next_u64() == d2.next_u64());

    // distinct labels give distinct streams
    CHECK(Rng(42).derive(1).next_u64() != Rng(42).derive(2).next_u64());
}

TEST_CASE("rng normal moments") {
    Rng rng(7);
    const int n = 200000;
    double sum = 0.0, sq = 0.0, quad = 0.0;
    for (int i = 0; i < n; ++i) {
        double z = rng.normal();
        sum += z;
        sq += z * z;
        quad += z * z * z * z;
    }
    CHECK(std::fabs(sum / n) < 0.01);
    CHECK(sq / n == doctest::Approx(1.0).epsilon(0.01));
    CHECK(quad / n == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("scalar and simd kernel backends agree") {
    if (!simd_backend_usable()) return;  // nothing to compare on this machine
    Rng rng(11);
    for (int iter = 0; iter < 40; ++iter) {
        int m = 1 + static_cast<int>(rng.below(33));
        int k = 1 + static_cast<int>(rng.below(33));
        int n = 1 + static_cast<int>(rng.below(33));
        Mat a = random_mat(m, k, rng), b = random_mat(k, n, rng), bt = random_mat(n, k, rng);

        Mat c_scalar(m, n), c_simd(m, n);
        kScalarOps.gemm_nn(a.data(), b.data(), c_scalar.data(), m, k, n);
        kSimdOps.gemm_nn(a.data(), b.data(), c_simd.data(), m, k, n);
        CHECK(max_rel_gap(c_scalar, c_simd) < 1e-13);

        kScalarOps.gemm_nt(a.data(), bt.data(), c_scalar.data(), m, k, n);
        kSimdOps.gemm_nt(a.data(), bt.data(), c_simd.data(), m, k, n);
        CHECK(max_rel_gap(c_scalar, c_simd) < 1e-13);

        Mat x = random_mat(1, k, rng), y = random_mat(1, k, rng);
        double d1 = kScalarOps.dot(x.data(), y.data(), static_cast<size_t>(k));
        double d2 = kSimdOps.dot(x.data(), y.data(), static_cast<size_t>(k));
        CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));

        Mat h1(1, k), h2(1, k);
        kScalarOps.hadamard(x.data(), y.data(), h1.data(), static_cast<size_t>(k));
        kSimdOps.hadamard(x.data(), y.data(), h2.data(), static_cast<size_t>(k));
        CHECK(max_rel_gap(h1, h2) == 0.0);

        Mat y1 = y, y2 = y;
        kScalarOps.axpy(0.37, x.data(), y1.data(), static_cast<size_t>(k));
        kSimdOps.axpy(0.37, x.data(), y2.data(), static_cast<size_t>(k));
        CHECK(max_rel_gap(y1, y2) < 1e-15);
    }
}

TEST_CASE("matmul against hand example") {
    Mat a(2, 3), b(3, 2);
    double av[] = {1, 2, 3, 4, 5, 6}, bv[] = {7, 8, 9, 10, 11, 12};
    std::copy(av, av + 6, a.data());
    std::copy(bv, bv + 6, b.data());
    Mat c = matmul(a, b);
    CHECK(c(0, 0) == 58);
    CHECK(c(0, 1) == 64);
    CHECK(c(1, 0) == 139);
    CHECK(c(1, 1) == 154);
}

TEST_CASE("softmax rows") {
    Mat s(2, 3);
    s(0, 0) = 1000.0;  // max-subtraction keeps huge scores finite
    s(0, 1) = 1000.0;
    s(0, 2) = 999.0;
    s(1, 0) = 0.0;
    s(1, 1) = 1.0;
    s(1, 2) = 2.0;
    Mat a = softmax_rows(s);
    for (int r = 0; r < 2; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 3; ++c) {
            CHECK(a(r, c) > 0.0);
            sum += a(r, c);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(a(0, 0) == doctest::Approx(a(0, 1)).epsilon(1e-12));
    CHECK(a(1, 2) / a(1, 1) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
}

// Textbook element-wise Cholesky written here as the independent oracle.
static Mat oracle_cholesky(const Mat& m) {
    const int n = m.rows();
    Mat l(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = m(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j)
                l(i, j) = std::sqrt(s);
            else
                l(i, j) = s / l(j, j);
        }
    }
    return l;
}

TEST_CASE("cholesky_psd matches the textbook oracle on PD input") {
    Rng rng(3);
    for (int iter = 0; iter < 20; ++iter) {
        int n = 2 + static_cast<int>(rng.below(7));
        Mat m = random_psd(n, rng);
        for (int i = 0; i < n; ++i) m(i, i) += 0.5;  // safely PD
        CholResult r = cholesky_psd(m);
        CHECK(r.jitter == 0.0);
        CHECK(r.attempts == 1);
        CHECK(max_rel_gap(r.L, oracle_cholesky(m)) < 1e-12);
    }
}

TEST_CASE("cholesky_psd identity example") {
    Mat eye = Mat::identity(4);
    CholResult r = cholesky_psd(eye);
    CHECK(r.jitter == 0.0);
    CHECK(max_rel_gap(r.L, eye) == 0.0);
}

TEST_CASE("cholesky_psd repairs a rank-deficient matrix with small jitter") {
    Rng rng(5);
    Mat m = random_psd(6, rng, 3);  // rank 3 of 6
    CholResult r = cholesky_psd(m);
    CHECK(r.jitter > 0.0);
    CHECK(r.jitter <= 1e-4);
    // factor reproduces m + jitter*I within the contract tolerance
    Mat rec = matmul_nt(r.L, r.L);
    Mat target = m;
    for (int i = 0; i < 6; ++i) target(i, i) += r.jitter;
    CHECK((rec - target).max_abs() <= 1e-8 * (1.0 + m.max_abs()));
}

TEST_CASE("cholesky_psd rejects asymmetric input") {
    Mat m = Mat::identity(3);
    m(0, 1) = 0.1;  // asymmetric beyond 1e-9 * max
    CHECK_THROWS_AS(cholesky_psd(m), Error);
    try {
        cholesky_psd(m);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NotSymmetric);
    }
}

TEST_CASE("cholesky_psd reports RepairExceeded for an indefinite matrix") {
    Mat m = Mat::identity(3);
    m(2, 2) = -1.0;  // eigenvalue -1 cannot be fixed by jitter <= 1e-4
    try {
        cholesky_psd(m);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::RepairExceeded);
    }
}

TEST_CASE("solve_lower / solve_cholesky round trip") {
    Rng rng(9);
    Mat m = random_psd(5, rng);
    for (int i = 0; i < 5; ++i) m(i, i) += 1.0;
    Mat l = cholesky_psd(m).L;
    Mat b = random_mat(5, 3, rng);
    Mat x = solve_cholesky(l, b);
    Mat back = matmul(m, x);
    CHECK(max_rel_gap(back, b) < 1e-12);
}

TEST_CASE("sym_eig reconstructs and orders eigenvalues") {
    Rng rng(13);
    Mat m = random_psd(6, rng);
    SymEig e = sym_eig(m);
    for (size_t i = 1; i < e.values.size(); ++i) CHECK(e.values[i] >= e.values[i - 1]);
    // reconstruct V diag(w) V^T
    Mat rec(6, 6);
    for (int k = 0; k < 6; ++k)
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) rec(i, j) += e.values[static_cast<size_t>(k)] * e.vectors(i, k) * e.vectors(j, k);
    CHECK(max_rel_gap(rec, m) < 1e-12);
}

TEST_CASE("sym_inverse_floored drops null directions and flags them") {
    Rng rng(17);
    Mat m = random_psd(5, rng, 3);
    FlooredInverse inv = sym_inverse_floored(m);
    CHECK(inv.degenerate);
    // m * pinv * m == m on the range
    Mat t = matmul(matmul(m, inv.inv), m);
    CHECK(max_rel_gap(t, m) < 1e-9);

    Mat pd = random_psd(5, rng);
    for (int i = 0; i < 5; ++i) pd(i, i) += 1.0;
    FlooredInverse inv2 = sym_inverse_floored(pd);
    CHECK_FALSE(inv2.degenerate);
    CHECK(max_rel_gap(matmul(pd, inv2.inv), Mat::identity(5)) < 1e-10);
}

TEST_CASE("gauss-hermite rule integrates known moments") {
    // E[z^2] = 1, E[z^4] = 3, E[z^6] = 15 for standard normal
    const GaussHermite& gh = gauss_hermite(32);
    const double sqrt2 = std::sqrt(2.0), inv_sqrt_pi = 1.0 / std::sqrt(M_PI);
    auto moment = [&](int p) {
        double acc = 0.0;
        for (size_t i = 0; i < gh.nodes.size(); ++i) acc += gh.weights[i] * std::pow(sqrt2 * gh.nodes[i], p);
        return acc * inv_sqrt_pi;
    };
    CHECK(moment(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(moment(2) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(moment(4) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(moment(6) == doctest::Approx(15.0).epsilon(1e-11));
    CHECK_THROWS_AS(gauss_hermite(4), Error);  // order floor
}

TEST_CASE("chunked_reduce is worker-count independent") {
    auto run = [](int workers) {
        std::vector<double> out;
        chunked_reduce<std::vector<double>>(
            1000, 64, workers, []() { return std::vector<double>(); },
            [](std::vector<double>& acc, int64_t b, int64_t e) {
                double s = 0.0;
                for (int64_t i = b; i < e; ++i) s += std::sin(static_cast<double>(i)) * 1e-3;
                acc.push_back(s);
            },
            [&out](std::vector<double>& acc) { out.insert(out.end(), acc.begin(), acc.end()); });
        return out;
    };
    auto r1 = run(1), r4 = run(4), r7 = run(7);
    CHECK(r1 == r4);
    CHECK(r1 == r7);
}
