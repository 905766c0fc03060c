#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kcap/mat.hpp"
#include "kcap/propagation.hpp"

namespace kcap {

// Kernel ridge regression over Monte-Carlo-estimated kernels, plus the
// two-stage fit used by the adaptation protocol: stage one fits labels, stage
// two fits a fresh predictor to the stage-one residuals and the two are added.

enum class KernelBackendKind { transformer, fcn };

struct KernelConfig {
    KernelBackendKind backend = KernelBackendKind::transformer;
    int depth = 1;
    BlockParams params;
    McConfig mc;  // attention Monte Carlo settings (transformer backend only)
    KernelMode mode = KernelMode::nngp;
    PeMode pe = PeMode::none;
};

struct KernelEval {
    double value = 0.0;
    double se = 0.0;  // zero for the closed-form fcn backend
};

// The Monte-Carlo seed for a pair derives from the two content hashes
// (canonically ordered), so a pair's kernel value never depends on evaluation
// order or on its position inside a Gram assembly; duplicated inputs produce
// bit-identical entries.
KernelEval kernel_eval(const KernelConfig& cfg, const Mat& x1, const Mat& x2);

struct Gram {
    Mat k, se;
};

// Upper triangle via kernel_eval, mirrored. `workers` parallelizes over
// pairs; leave cfg.mc.workers at 1 when using it (they nest otherwise).
Gram assemble_gram(const std::vector<Mat>& xs, const KernelConfig& cfg, int workers = 1);

std::vector<KernelEval> kernel_row(const KernelConfig& cfg, const Mat& x, const std::vector<Mat>& xs,
                                   int workers = 1);

struct RidgeSolution {
    Mat alpha;  // P x C
    double max_abs_alpha = 0.0;
    double residual_inf = 0.0;
};

// Solves (K + kappa I) alpha = y via Cholesky on the symmetrized Gram.
// clip_spectrum projects negative eigenvalues to zero first (off by default;
// mild MC indefiniteness is normally absorbed by kappa). Verifies the
// residual to 1e-8 * |y|_inf and fails with SingularSystem otherwise.
RidgeSolution ridge_solve(const Gram& g, const Mat& y, double kappa, bool clip_spectrum = false);

// 1e-3 of the mean Gram diagonal (the recorded default policy).
double default_kappa(const Gram& g);

enum class FitStage { initial, adapted };

struct FittedPredictor {
    std::vector<Mat> train_xs;
    std::vector<uint64_t> train_hashes;
    Mat alpha;  // P x C
    double kappa = 0.0;
    double max_abs_alpha = 0.0;
    KernelConfig config;
    FitStage stage = FitStage::initial;
};

// y is P x C (C = 1 for scalar regression, one-hot columns for
// classification). kappa <= 0 selects default_kappa of the assembled Gram.
FittedPredictor fit_predictor(const std::vector<Mat>& xs, const Mat& y, const KernelConfig& cfg, double kappa = 0.0,
                              int workers = 1);

struct Prediction {
    std::vector<double> values, ses;  // per output column
    int argmax = 0;
    double margin = 0.0;      // top1 - top2 logit gap (0 for single output)
    bool conclusive = false;  // margin >= 1/2: the one-hot target separation is 1
};

Prediction predict(const FittedPredictor& f, const Mat& x, int workers = 1);

// Stage two: fits new_y minus the stage-one predictions on new_xs, and
// returns the additive combination as a single predictor over the union of
// points. Rejects an already-adapted stage one with StageViolation.
FittedPredictor two_step_adapt(const FittedPredictor& f1, const std::vector<Mat>& new_xs, const Mat& new_y,
                               double kappa = 0.0, int workers = 1);

// Versioned JSON document storing coefficients, ridge, kernel config, stage,
// and training inputs by content hash (not by value). A parsed predictor
// needs attach_train_inputs before it can predict.
std::string predictor_to_json(const FittedPredictor& f);
FittedPredictor predictor_from_json(const std::string& text);
void attach_train_inputs(FittedPredictor& f, const std::vector<Mat>& xs);

// The kernel-config sub-document of the predictor format, as standalone JSON
// text (embedded verbatim by the experiment config schema).
std::string kernel_config_to_json(const KernelConfig& c);
KernelConfig kernel_config_from_json(const std::string& text);

}  // namespace kcap
