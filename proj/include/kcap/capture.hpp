#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kcap/regression.hpp"
#include "kcap/tasks.hpp"

namespace kcap {

// Two-stage capture experiments on kernel predictors. Stage one fits a
// predictor on instances of sizes up to T0, growing the training set until it
// is delta-accurate at T0 (or a cap is hit). Then, for each grid size T, the
// harness adds adaptation samples of sizes uniform on [T_prev, T] -- fitted to
// the stage-one residuals -- until the measured error at T drops below delta,
// and records the cumulative adaptation budget P(T). A logarithmic budget
// P = C log(T / T0) is the capture signature; a power law is the non-capture
// signature.

enum class Verdict { capture, non_capture, inconclusive };
const char* verdict_name(Verdict v);
Verdict verdict_from_name(const std::string& name);

struct TaskParams {
    TaskKind kind = TaskKind::induction;
    int vocab = 1024;           // induction alphabet size
    double alpha = 4.5;         // expected degree for the geometric-graph tasks
    uint64_t grammar_seed = 1;  // cfg: the grammar construction stream
};

struct CaptureConfig {
    TaskParams task;
    double delta = 0.2;       // target error, in (0, 1)
    int T0 = 8;               // base size
    std::vector<int> T_grid;  // strictly increasing, T_grid[0] >= T0
    int p0_max = 256;         // stage-1 sample cap
    int adapt_cap = 256;      // per-grid-point adaptation sample cap
    int batch = 8;            // growth granularity before the crossing refinement
    int n_eval = 512;         // evaluation instances per grid point
    int embed_dim = 8;
    EmbedPe embed_pe = EmbedPe::none;
    KernelConfig kernel;
    uint64_t master_seed = 1;
    int workers = 1;
};

// BadConfig on violated invariants (delta range, grid monotonicity, caps,
// unsupported task kinds: the harness needs a scalar readout, which rules out
// the sequence-output sorting task).
void validate_capture_config(const CaptureConfig& cfg);

// Versioned JSON document (the cmd-line config-file schema).
std::string capture_config_to_json(const CaptureConfig& cfg);
CaptureConfig capture_config_from_json(const std::string& text);

struct CurvePoint {
    int T = 0;
    long long P = 0;  // cumulative adaptation samples through this grid point
    double error = 0.0;
    double se = 0.0;  // Wilson-interval standard error at n_eval
    bool budget_exhausted = false;
};

struct CaptureCurve {
    int T0 = 0;
    long long p0 = 0;  // stage-1 samples consumed
    double stage1_error = 1.0;
    double stage1_se = 0.0;
    bool stage1_exhausted = false;
    std::vector<CurvePoint> points;
    double fit_C = 0.0, fit_r2 = 0.0;       // through-origin fit P = C log(T/T0)
    double pow_kappa = 0.0, pow_amp = 0.0;  // comparison fit P = amp (T/T0)^kappa
    double aic_log = 0.0, aic_pow = 0.0;
    Verdict verdict = Verdict::inconclusive;
};

struct CaptureThresholds {
    double r2_min = 0.9;
    double kappa_min = 0.5;
};

struct EvalResult {
    double error = 1.0;  // fraction of eval instances predicted wrong
    double se = 0.0;     // half-width of the 68% Wilson interval
};

// Wilson-interval standard error for k errors out of n trials (z = 1).
double wilson_se(long long k, long long n);

// Least-squares C for P = C log(T / T0) through the origin, with the centered
// r^2 (1 when the residual sum vanishes). Errors: TooFewPoints (< 3 points).
struct LogFit {
    double C = 0.0, r2 = 0.0, rss = 0.0;
};
LogFit fit_log_curve(const std::vector<CurvePoint>& points, int T0);

// Power-law comparison P = amp (T/T0)^kappa: log-log least squares over the
// points with positive budget and T > T0, residuals evaluated on raw budgets.
// valid = false when fewer than two points qualify.
struct PowFit {
    double kappa = 0.0, amp = 0.0, rss = 0.0;
    bool valid = false;
};
PowFit fit_power_curve(const std::vector<CurvePoint>& points, int T0);

// Fills curve.fit_*, pow_*, aic_*, verdict from curve.points and returns the
// verdict: non_capture when the power fit dominates by AIC with
// kappa >= kappa_min; capture when the log fit reaches r2_min and no budget
// flag is set; inconclusive otherwise.
Verdict classify_capture(CaptureCurve& curve, const CaptureThresholds& th = {});

// Budget-growth primitive. error_at(m) evaluates the configuration holding m
// samples; the budget grows in steps of `batch` until the error drops below
// delta or `cap` is reached, then the smallest crossing m inside the final
// batch is located by bisection (the evaluation set is frozen, so repeated
// probes are deterministic). error_at(0) is always probed first: zero samples
// suffice when the configuration is already delta-accurate.
struct GrowthResult {
    int samples = 0;
    EvalResult eval;
    bool exhausted = false;
};
GrowthResult grow_until(const std::function<EvalResult(int)>& error_at, double delta, int cap, int batch);

// Stage one: grows the base training set (sizes uniform on the feasible range
// up to T0) until delta-accurate at T0 or p0_max. Every instance stream is a
// pure function of (master_seed, purpose, T, index), so reruns and resumed
// runs replay identical samples.
struct Stage1Result {
    FittedPredictor predictor;
    long long p0 = 0;
    EvalResult eval;
    bool exhausted = false;
};
Stage1Result stage1_train(const CaptureConfig& cfg);

// One grid step: draws adaptation samples of sizes uniform on [T_prev, T],
// refits the stage-two residual predictor over the cumulative adaptation set,
// and grows until delta-accurate at T. Appends this step's samples to
// adapt_xs / adapt_ys (the cumulative stage-two set).
struct AdaptResult {
    FittedPredictor predictor;  // stage-two combined predictor
    int samples_used = 0;
    EvalResult eval;
    bool exhausted = false;
};
AdaptResult adapt_step(const FittedPredictor& stage1, const CaptureConfig& cfg, int T_prev, int T,
                       std::vector<Mat>& adapt_xs, std::vector<std::vector<double>>& adapt_ys);

// Full sweep. When out_dir is nonempty, writes curve.csv, fit.json,
// manifest.json, and checkpoint.json there (checkpoint updated after every
// grid point; resume=true replays completed points from it after verifying
// the config hash). curve.csv and fit.json are byte-identical across reruns
// with the same config; the manifest carries the only timestamp.
CaptureCurve run_capture(const CaptureConfig& cfg, const std::string& out_dir = "", bool resume = false,
                         const CaptureThresholds& th = {});

std::string curve_to_csv(const CaptureCurve& curve);
std::string fit_to_json(const CaptureCurve& curve, const CaptureThresholds& th, uint64_t config_hash);

// Monte-Carlo error scaling: the standard deviation of the kernel readout
// across `reps` independent seed streams, per n_mc, regressed log-log.
// slope_se is the standard error of the regression slope. Errors:
// TooFewPoints (< 2 grid sizes), TooFewReps (< 8).
struct McSweepPoint {
    int64_t n_mc = 0;
    double readout_std = 0.0;
};
struct McSweepResult {
    std::vector<McSweepPoint> points;
    double slope = 0.0, intercept = 0.0, slope_se = 0.0;
};
McSweepResult mc_error_sweep(const std::function<double(int64_t n_mc, int rep)>& readout,
                             const std::vector<int64_t>& n_mc_grid, int reps);
// Convenience wrapper evaluating kernel_eval(cfg, x1, x2) with per-rep seeds
// derived from `seed`.
McSweepResult mc_error_sweep(const KernelConfig& cfg, const Mat& x1, const Mat& x2,
                             const std::vector<int64_t>& n_mc_grid, int reps, uint64_t seed);

}  // namespace kcap
