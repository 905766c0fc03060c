#pragma once

#include <cstddef>

#include "kcap/mat.hpp"

namespace kcap {

// Hot-loop primitives behind a runtime-selected backend.
//
// Two implementations ship: a plain scalar reference (kernels_scalar.cpp) and a
// vectorized one built on std::experimental::simd (kernels_simd.cpp, compiled
// at an AVX2+FMA baseline on x86-64, NEON elsewhere). Selection happens once at
// first use: the simd backend is picked when the CPU supports it, the
// KCAP_KERNELS environment variable ("scalar"/"simd") or set_kernel_backend()
// overrides for testing. Both backends are equivalence-tested against each
// other; results may differ by summation order only.

struct KernelOps {
    // c(m x n) = a(m x k) * b(k x n), all row-major, c overwritten.
    void (*gemm_nn)(const double* a, const double* b, double* c, int m, int k, int n);
    // c(m x n) = a(m x k) * b(n x k)^T.
    void (*gemm_nt)(const double* a, const double* b, double* c, int m, int k, int n);
    // c[i] = a[i] * b[i]
    void (*hadamard)(const double* a, const double* b, double* c, size_t n);
    // y[i] += alpha * x[i]
    void (*axpy)(double alpha, const double* x, double* y, size_t n);
    double (*dot)(const double* x, const double* y, size_t n);
    const char* name;
};

extern const KernelOps kScalarOps;
extern const KernelOps kSimdOps;

bool simd_backend_usable();
const KernelOps& kernels();
// nullptr or "auto" restores automatic selection.
void set_kernel_backend(const char* name);

// ---- Mat-level convenience wrappers ----

void matmul_into(Mat& c, const Mat& a, const Mat& b);
void matmul_nt_into(Mat& c, const Mat& a, const Mat& b);
Mat matmul(const Mat& a, const Mat& b);
Mat matmul_nt(const Mat& a, const Mat& b);
Mat hadamard(const Mat& a, const Mat& b);
void hadamard_into(Mat& c, const Mat& a, const Mat& b);
void add_scaled(Mat& y, double alpha, const Mat& x);

// Row-wise softmax with per-row max subtraction. Shared scalar code on both
// backends: it is O(T^2) next to the O(T^3) products above.
void softmax_rows_inplace(Mat& s);
Mat softmax_rows(const Mat& s);

}  // namespace kcap
