#pragma once

#include <cstdint>
#include <vector>

#include "kcap/dual_activation.hpp"
#include "kcap/mat.hpp"
#include "kcap/propagation.hpp"

namespace kcap {

// Finite-width simulation of the simplified transformer block stack
// (head-averaged attention, per-token LayerNorm, single-matrix MLP, no
// residual connections, no output projection). Serves as the empirical
// oracle for the infinite-width propagation module and as the reference
// for FLOP accounting.

struct FiniteDims {
    int d_in = 1;      // raw input dimension
    int d_model = 64;
    int d_k = 0;       // 0 resolves to d_model / H
    int H = 1;
    int L = 1;
    double sigma_w = 1.0;  // MLP weight std
    double sigma_b = 0.0;  // MLP bias std
    double ln_eps = 1e-5;
    Activation activation = Activation::relu;

    int resolved_dk() const { return d_k > 0 ? d_k : d_model / H; }
};

struct BlockWeights {
    std::vector<Mat> wq, wk;  // per head, d_model x d_k
    std::vector<Mat> wv;      // per head, d_model x d_model
    std::vector<double> gamma, beta;  // LayerNorm parameters, size d_model
    Mat w_mlp;                        // d_model x d_model
    std::vector<double> b_mlp;        // size d_model
};

// All weight draws: embedding entries N(0, 1/d_in) so the embedded token
// covariance converges to the normalized input gram; attention projections
// N(0, 1/d_model); MLP N(0, sigma_w^2/d_model) with bias N(0, sigma_b^2);
// gamma = 1, beta = 0.
struct FiniteParams {
    FiniteDims dims;
    Mat w_emb;  // d_in x d_model
    std::vector<BlockWeights> blocks;
};

FiniteParams init_params(const FiniteDims& dims, uint64_t seed);

// One deterministic forward pass keeping every intermediate. flops counts
// multiply-adds of the projection/attention/MLP matrix products (2mkn per
// product) plus 3 per softmax entry; embedding, LayerNorm arithmetic and the
// 1/sqrt scalings are not counted, matching flop_count exactly.
struct ForwardTrace {
    Mat z_embed;                           // T x d_model
    std::vector<std::vector<Mat>> scores;  // [block][head], T x T pre-softmax (scaled by 1/sqrt(d_k))
    std::vector<Mat> z_attn;               // [block] pre-activation attention output Z
    std::vector<Mat> z_ln;                 // [block] LayerNorm output
    std::vector<Mat> z_out;                // [block] MLP output (block output)
    uint64_t flops = 0;
};

ForwardTrace forward(const Mat& x, const FiniteParams& params);

// L * (H*(4*T*d_model*d_k + 2*T*d_model^2 + 2*T^2*d_k + 3*T^2 + 2*T^2*d_model)
//      + 2*T*d_model^2), softmax counted at 3 FLOPs per entry.
uint64_t flop_count(int L, int H, int d_model, int d_k, int T);

// Where the empirical covariance is read off. pre_attn_out is the
// pre-activation attention output Z; scores records head 0's pre-softmax
// score matrix and produces the 4-index product table.
enum class Tap { pre_attn_out, post_ln, post_mlp, scores };

// explicit_weights materializes every tensor per draw (exact but O(d_model^2)
// memory per head); conditional samples each layer's output from its exact
// conditional Gaussian law given the previous layer (identical in law, cost
// O(T^2 d_model) per draw). Both share weights across the two inputs.
enum class CovMethod { explicit_weights, conditional };

struct EmpiricalCov {
    // Vector taps: mean[a,b] ~ z_a(x1) . z_b(x2) / d_model (T1 x T2).
    // scores tap: mean[(a,c),(b,e)] ~ S_ac(x1) S_be(x2) (T1^2 x T2^2).
    Mat mean, se;
    int64_t n_draws = 0;
};

EmpiricalCov empirical_covariance(const Mat& x1, const Mat& x2, const FiniteDims& dims, int64_t n_draws,
                                  uint64_t seed, Tap tap, int block = 0,
                                  CovMethod method = CovMethod::conditional, int workers = 1);

// Finite-width fully-connected baseline on the zero-padded flattened inputs:
// empirical pre-activation kernel at the final layer, averaged over width and
// weight draws.
struct FcnEmpirical {
    double k12, se12, k11, se11, k22, se22;
};

FcnEmpirical empirical_fcn_covariance(const Mat& x1, const Mat& x2, int depth, const BlockParams& params, int width,
                                      int64_t n_draws, uint64_t seed,
                                      CovMethod method = CovMethod::conditional);

}  // namespace kcap
