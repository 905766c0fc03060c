#include <experimental/simd>

#include "kcap/kernels.hpp"

// Vectorized backend. Built on std::experimental::simd so the same source
// compiles to AVX2 on x86-64 (this TU gets -mavx2 -mfma there) and NEON on
// aarch64. Callers must check simd_backend_usable() before dispatching here;
// on x86 this TU contains instructions a pre-AVX2 CPU cannot run.

namespace stdx = std::experimental;

namespace kcap {
namespace {

using vd = stdx::native_simd<double>;
constexpr size_t W = vd::size();

inline vd load(const double* p) { return vd(p, stdx::element_aligned); }
inline void store(double* p, vd v) { v.copy_to(p, stdx::element_aligned); }

// C(m x n) = A(m x k) B(k x n). Row-major, axpy formulation: stream rows of B,
// accumulate into the C row. Unrolled by 4 over k to cut C-row traffic.
void gemm_nn_simd(const double* a, const double* b, double* c, int m, int k, int n) {
    const size_t un = static_cast<size_t>(n);
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * un;
        for (size_t j = 0; j < un; ++j) ci[j] = 0.0;
        const double* ai = a + static_cast<size_t>(i) * k;
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            const vd a0 = ai[p + 0], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
            const double* b0 = b + static_cast<size_t>(p + 0) * un;
            const double* b1 = b + static_cast<size_t>(p + 1) * un;
            const double* b2 = b + static_cast<size_t>(p + 2) * un;
            const double* b3 = b + static_cast<size_t>(p + 3) * un;
            size_t j = 0;
            for (; j + W <= un; j += W) {
                vd acc = load(ci + j);
                acc += a0 * load(b0 + j);
                acc += a1 * load(b1 + j);
                acc += a2 * load(b2 + j);
                acc += a3 * load(b3 + j);
                store(ci + j, acc);
            }
            for (; j < un; ++j)
                ci[j] += ai[p] * b0[j] + ai[p + 1] * b1[j] + ai[p + 2] * b2[j] + ai[p + 3] * b3[j];
        }
        for (; p < k; ++p) {
            const vd ap = ai[p];
            const double* bp = b + static_cast<size_t>(p) * un;
            size_t j = 0;
            for (; j + W <= un; j += W) store(ci + j, load(ci + j) + ap * load(bp + j));
            for (; j < un; ++j) ci[j] += ai[p] * bp[j];
        }
    }
}

inline double hsum(vd v) {
    double s = 0.0;
    for (size_t l = 0; l < W; ++l) s += v[l];
    return s;
}

double dot_simd(const double* x, const double* y, size_t n) {
    vd acc0 = 0.0, acc1 = 0.0;
    size_t i = 0;
    for (; i + 2 * W <= n; i += 2 * W) {
        acc0 += load(x + i) * load(y + i);
        acc1 += load(x + i + W) * load(y + i + W);
    }
    for (; i + W <= n; i += W) acc0 += load(x + i) * load(y + i);
    double s = hsum(acc0 + acc1);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

// C(m x n) = A(m x k) B(n x k)^T: every entry is a dot of two contiguous rows.
void gemm_nt_simd(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) ci[j] = dot_simd(ai, b + static_cast<size_t>(j) * k, static_cast<size_t>(k));
    }
}

void hadamard_simd(const double* a, const double* b, double* c, size_t n) {
    size_t i = 0;
    for (; i + W <= n; i += W) store(c + i, load(a + i) * load(b + i));
    for (; i < n; ++i) c[i] = a[i] * b[i];
}

void axpy_simd(double alpha, const double* x, double* y, size_t n) {
    const vd va = alpha;
    size_t i = 0;
    for (; i + W <= n; i += W) store(y + i, load(y + i) + va * load(x + i));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelOps kSimdOps = {gemm_nn_simd, gemm_nt_simd, hadamard_simd, axpy_simd, dot_simd, "simd"};

}  // namespace kcap
