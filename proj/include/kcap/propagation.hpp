#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "kcap/dual_activation.hpp"
#include "kcap/mat.hpp"

namespace kcap {

// Layer-by-layer propagation of token-token covariance (and optionally the
// tangent-kernel blocks) through an attention + LayerNorm + MLP stack in the
// infinite-width limit. The attention step is the only stochastic one: its
// expectation over the limiting score law is estimated by Monte Carlo with
// draws shared between the covariance and tangent updates.

enum class PeMode { none, special_token_flags };
enum class KernelMode { nngp, ntk };

struct BlockParams {
    double sigma_w = 1.0;          // MLP weight std (variance sigma_w^2)
    double sigma_b = 0.0;          // MLP bias std
    Activation activation = Activation::relu;
    double ln_eps = 1e-5;
    int gh_order = 32;             // Gauss-Hermite order for the gelu dual
    bool ln_param_grad = true;     // add post-norm covariance to theta at LayerNorm
};

struct McConfig {
    int64_t n_mc = 10000;
    uint64_t seed = 1;
    bool antithetic = false;  // pair each draw with its negation (n_mc must be even)
    int workers = 1;          // never affects results, only wall time
    int64_t chunk = 2048;     // draws per reduction chunk (fixed, worker-independent)
};

// Covariance state for an input pair. sigma12 may be rectangular when the two
// inputs have different lengths; the diagonal blocks are symmetric.
struct KernelState {
    Mat sigma11, sigma12, sigma22;
    Mat se11, se12, se22;  // per-entry stderr accumulated by MC steps

    std::optional<Mat> theta11, theta12, theta22;
    Mat tse11, tse12, tse22;

    int layer_index = 0;
    bool degenerate = false;  // a singular sigma11 forced the pseudo-inverse path

    int t1() const { return sigma11.rows(); }
    int t2() const { return sigma22.rows(); }
    bool has_ntk() const { return theta12.has_value(); }
};

// Token covariance of the embedded inputs: sigmaij[a,b] = x_a . x_b / d.
// special_token_flags appends one indicator coordinate marking first and last
// tokens before normalizing (the only positional signal in this mode). With
// with_ntk the theta blocks start equal to the sigma blocks (the embedding
// layer's own parameter gradient).
KernelState embed_covariance(const Mat& x1, const Mat& x2, PeMode pe = PeMode::none, bool with_ntk = false);

// One attention step: sigma blocks become E[A1 sigma' A2^T] over the limiting
// score law, estimated with mc.n_mc joint draws per block triple.
void attention_cov_update(KernelState& state, const McConfig& mc);
// Same draws, and additionally the tangent recursion
//   theta <- 2*sigma_new + E[A1 theta' A2^T]
//            + (2*sigma' + theta') .* E[trace term(sigma', sigma')]
//            + sigma' .* E[trace term(sigma', theta')]
// with the trace terms evaluated through the Hadamard identity below.
// Updates sigma blocks too (they share the estimator).
void attention_ntk_update(KernelState& state, const McConfig& mc);

// Infinite-width LayerNorm: deterministic rescaling by the pre-norm diagonals,
// sigmaij[a,b] /= sqrt((k_aa + eps)(k_bb + eps)). Theta blocks rescale the
// same way, plus (when params.ln_param_grad) the post-norm sigma as the
// norm-parameter gradient term.
void layernorm_cov(KernelState& state, const BlockParams& params);

// MLP step through the activation's dual: sigma_out = sigma_b^2 + sigma_w^2 *
// dual.value. The ntk variant also applies theta_out = sigma_out + theta *
// sigma_w^2 * dual.derivative_value (and updates sigma, which it needs anyway).
void mlp_cov_update(KernelState& state, const BlockParams& params);
void mlp_ntk_update(KernelState& state, const BlockParams& params);

// Tr( J(a1)^T M J(a2) N^T ) for softmax Jacobians J(a) = diag(a) - a a^T,
// where a1, a2 are probability rows (validated to 1e-8).
double softmax_jacobian_trace(const std::vector<double>& a1_row, const std::vector<double>& a2_row, const Mat& m,
                              const Mat& n);

// All row pairs at once via the Hadamard identity:
//   A1 (M.*N) A2^T - A1 ((M A2^T).*(N A2^T)) - ((A1 M).*(A1 N)) A2^T
//   + (A1 M A2^T).*(A1 N A2^T)
// Entry (a,b) equals softmax_jacobian_trace(A1 row a, A2 row b, M, N).
Mat softmax_jacobian_trace_all(const Mat& a1, const Mat& a2, const Mat& m, const Mat& n);

struct PropagateResult {
    double k_value;   // readout entry (T1-1, T2-1) of the cross block
    double k_stderr;  // first-order propagated stderr of that entry
    Mat k_matrix;     // full cross block (sigma12 or theta12 by mode)
    KernelState state;
};

// Full stack: embedding covariance, then depth x (attention, LayerNorm, MLP).
// The pair is ordered canonically (content hash) before sampling and the
// result transposed back, so propagate(x1, x2) and propagate(x2, x1) agree
// exactly for a fixed seed.
PropagateResult propagate_transformer(const Mat& x1, const Mat& x2, int depth, const BlockParams& params,
                                      const McConfig& mc, KernelMode mode, PeMode pe = PeMode::none);

// Fully-connected baseline on flattened inputs: K^1 = sigma_b^2 + sigma_w^2 *
// (vec(x).vec(x') / (d*T)), then depth-1 dual-activation steps without
// LayerNorm. Inputs of unequal length are zero-padded to the longer one.
struct FcnKernelResult {
    double k12, k11, k22;
};
FcnKernelResult fcn_kernel(const Mat& x1, const Mat& x2, int depth, const BlockParams& params);

// Tangent kernel of the same stack: theta^1 = K^1, then
// theta^{l+1} = K^{l+1} + sigma_w^2 * dual.derivative * theta^l.
struct FcnNtkResult {
    double theta12, theta11, theta22;
    FcnKernelResult nngp;
};
FcnNtkResult fcn_ntk(const Mat& x1, const Mat& x2, int depth, const BlockParams& params);

uint64_t content_hash(const Mat& m);

}  // namespace kcap
