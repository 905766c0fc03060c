#include "kcap/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>

#include "kcap/error.hpp"

namespace kcap {

bool simd_backend_usable() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    // Non-x86 builds compile the simd TU with the platform baseline (NEON on
    // aarch64), so it is always runnable.
    return true;
#endif
}

namespace {

const KernelOps* select_backend(const char* name) {
    if (name != nullptr && std::strcmp(name, "scalar") == 0) return &kScalarOps;
    if (name != nullptr && std::strcmp(name, "simd") == 0) {
        require(simd_backend_usable(), ErrorCode::BadConfig, "simd kernel backend requested but CPU lacks support");
        return &kSimdOps;
    }
    if (name != nullptr && std::strcmp(name, "auto") != 0)
        fail(ErrorCode::BadConfig, std::string("unknown kernel backend '") + name + "'");
    return simd_backend_usable() ? &kSimdOps : &kScalarOps;
}

std::atomic<const KernelOps*> g_ops{nullptr};

}  // namespace

const KernelOps& kernels() {
    const KernelOps* ops = g_ops.load(std::memory_order_acquire);
    if (ops == nullptr) {
        ops = select_backend(std::getenv("KCAP_KERNELS"));
        g_ops.store(ops, std::memory_order_release);
    }
    return *ops;
}

void set_kernel_backend(const char* name) {
    g_ops.store(name == nullptr ? select_backend("auto") : select_backend(name), std::memory_order_release);
}

void matmul_into(Mat& c, const Mat& a, const Mat& b) {
    require(a.cols() == b.rows(), ErrorCode::ShapeMismatch, "matmul: inner dimensions differ");
    require(c.rows() == a.rows() && c.cols() == b.cols(), ErrorCode::ShapeMismatch, "matmul: bad output shape");
    kernels().gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
}

void matmul_nt_into(Mat& c, const Mat& a, const Mat& b) {
    require(a.cols() == b.cols(), ErrorCode::ShapeMismatch, "matmul_nt: inner dimensions differ");
    require(c.rows() == a.rows() && c.cols() == b.rows(), ErrorCode::ShapeMismatch, "matmul_nt: bad output shape");
    kernels().gemm_nt(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.rows());
}

Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.rows(), b.cols());
    matmul_into(c, a, b);
    return c;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    Mat c(a.rows(), b.rows());
    matmul_nt_into(c, a, b);
    return c;
}

void hadamard_into(Mat& c, const Mat& a, const Mat& b) {
    require(a.same_shape(b) && c.same_shape(a), ErrorCode::ShapeMismatch, "hadamard: shape mismatch");
    kernels().hadamard(a.data(), b.data(), c.data(), a.size());
}

Mat hadamard(const Mat& a, const Mat& b) {
    Mat c(a.rows(), a.cols());
    hadamard_into(c, a, b);
    return c;
}

void add_scaled(Mat& y, double alpha, const Mat& x) {
    require(y.same_shape(x), ErrorCode::ShapeMismatch, "add_scaled: shape mismatch");
    kernels().axpy(alpha, x.data(), y.data(), y.size());
}

void softmax_rows_inplace(Mat& s) {
    for (int r = 0; r < s.rows(); ++r) {
        double* row = s.row(r);
        double mx = row[0];
        for (int c = 1; c < s.cols(); ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < s.cols(); ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        double inv = 1.0 / sum;
        for (int c = 0; c < s.cols(); ++c) row[c] *= inv;
    }
}

Mat softmax_rows(const Mat& s) {
    Mat a = s;
    softmax_rows_inplace(a);
    return a;
}

}  // namespace kcap
