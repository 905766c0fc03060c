#include "kcap/capture.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>

#include "json.hpp"
#include "kcap/error.hpp"
#include "kcap/io.hpp"
#include "kcap/threading.hpp"

namespace kcap {

namespace {

// Purpose labels for the per-sample seed streams. Every instance is a pure
// function of (master_seed, purpose, T, index), which makes the sweep
// replayable from a checkpoint and independent of evaluation order.
constexpr uint64_t kStage1Label = 0x73746167652d31ULL;
constexpr uint64_t kAdaptLabel = 0x61646170742dULL;
constexpr uint64_t kEvalLabel = 0x6576616c2dULL;

int min_size(TaskKind k) {
    switch (k) {
        case TaskKind::induction: return 4;
        case TaskKind::string_match: return 3;
        case TaskKind::cfg: return 1;
        case TaskKind::spp:
        case TaskKind::mincut: return 2;
        case TaskKind::sort: break;
    }
    throw Error(ErrorCode::BadConfig, "capture: the sorting task has no scalar readout");
}

int n_outputs(const TaskParams& t) {
    switch (t.kind) {
        case TaskKind::induction: return t.vocab;
        case TaskKind::string_match:
        case TaskKind::cfg: return 2;
        case TaskKind::spp:
        case TaskKind::mincut: return 1;
        case TaskKind::sort: break;
    }
    throw Error(ErrorCode::BadConfig, "capture: the sorting task has no scalar readout");
}

bool is_value_task(TaskKind k) { return k == TaskKind::spp || k == TaskKind::mincut; }

struct Sample {
    Mat x;
    std::vector<double> y;  // one-hot row for classification, scalar for value tasks
};

// One instance with size uniform on [lo, hi]; the size draw leads the
// generator's own draws on the same stream.
Sample make_sample(const CaptureConfig& cfg, const GrammarSpec* grammar, int lo, int hi, Rng& rng) {
    const int size = lo + static_cast<int>(rng.below(static_cast<uint64_t>(hi - lo + 1)));
    TaskInstance inst;
    switch (cfg.task.kind) {
        case TaskKind::induction:
            inst = gen_induction(size, rng, cfg.task.vocab);
            break;
        case TaskKind::string_match: {
            const std::array<int, 3> pattern = random_pattern(rng);
            const bool positive = rng.below(2) == 1;
            inst = gen_string_match(size, pattern, positive, rng);
            break;
        }
        case TaskKind::cfg: {
            // Length-1 strings have no internal node to corrupt.
            const bool positive = size < 2 || rng.below(2) == 1;
            inst = gen_cfg(*grammar, size, positive, rng);
            break;
        }
        case TaskKind::spp:
            inst = gen_spp(size, cfg.task.alpha, rng);
            break;
        case TaskKind::mincut:
            inst = gen_mincut(size, cfg.task.alpha, rng);
            break;
        case TaskKind::sort:
            throw Error(ErrorCode::BadConfig, "capture: the sorting task has no scalar readout");
    }

    Sample s;
    s.x = embed_instance(inst, cfg.embed_dim, cfg.embed_pe);
    if (is_value_task(cfg.task.kind)) {
        s.y = {inst.label[0]};
    } else {
        s.y.assign(static_cast<size_t>(n_outputs(cfg.task)), 0.0);
        const int cls = static_cast<int>(inst.label[0]);
        require(cls >= 0 && cls < static_cast<int>(s.y.size()), ErrorCode::BadConfig,
                "capture: class label outside the configured output range");
        s.y[static_cast<size_t>(cls)] = 1.0;
    }
    return s;
}

Sample indexed_sample(const CaptureConfig& cfg, const GrammarSpec* grammar, uint64_t purpose, int T, int lo, int hi,
                      long long index) {
    Rng rng(mix_seed(mix_seed(cfg.master_seed, purpose, static_cast<uint64_t>(T)), static_cast<uint64_t>(index)));
    return make_sample(cfg, grammar, lo, hi, rng);
}

Mat stack_labels(const std::vector<std::vector<double>>& ys) {
    require(!ys.empty(), ErrorCode::BadConfig, "capture: no labels to stack");
    Mat y(static_cast<int>(ys.size()), static_cast<int>(ys[0].size()));
    for (size_t i = 0; i < ys.size(); ++i)
        for (size_t j = 0; j < ys[i].size(); ++j) y(static_cast<int>(i), static_cast<int>(j)) = ys[i][j];
    return y;
}

int true_class(const std::vector<double>& y) {
    int best = 0;
    for (size_t j = 1; j < y.size(); ++j)
        if (y[j] > y[static_cast<size_t>(best)]) best = static_cast<int>(j);
    return best;
}

// Error of the zero predictor (no training data): every output channel is 0,
// so the argmax falls on the first class and scalar readouts round to 0. This
// is the baseline the growth loop probes before consuming any budget.
EvalResult baseline_eval(const std::vector<Sample>& eval_set, bool value_task) {
    long long wrong = 0;
    for (const Sample& s : eval_set) {
        const bool miss = value_task ? std::llround(s.y[0]) != 0 : true_class(s.y) != 0;
        if (miss) ++wrong;
    }
    const long long n = static_cast<long long>(eval_set.size());
    EvalResult r;
    r.error = n > 0 ? static_cast<double>(wrong) / static_cast<double>(n) : 1.0;
    r.se = wilson_se(wrong, n);
    return r;
}

EvalResult evaluate(const FittedPredictor& f, const std::vector<Sample>& eval_set, bool value_task, int workers) {
    const long long n = static_cast<long long>(eval_set.size());
    long long wrong = 0;
    chunked_reduce<long long>(
        n, 8, workers, [] { return 0LL; },
        [&](long long& acc, int64_t begin, int64_t end) {
            for (int64_t i = begin; i < end; ++i) {
                const Sample& s = eval_set[static_cast<size_t>(i)];
                const Prediction p = predict(f, s.x, 1);
                bool miss;
                if (value_task) {
                    miss = std::llround(p.values[0]) != std::llround(s.y[0]);
                } else {
                    miss = p.argmax != true_class(s.y);
                }
                if (miss) ++acc;
            }
        },
        [&](long long& part) { wrong += part; });
    EvalResult r;
    r.error = n > 0 ? static_cast<double>(wrong) / static_cast<double>(n) : 1.0;
    r.se = wilson_se(wrong, n);
    return r;
}

std::vector<Sample> build_eval_set(const CaptureConfig& cfg, const GrammarSpec* grammar, int T) {
    std::vector<Sample> set;
    set.reserve(static_cast<size_t>(cfg.n_eval));
    for (int j = 0; j < cfg.n_eval; ++j) set.push_back(indexed_sample(cfg, grammar, kEvalLabel, T, T, T, j));
    return set;
}

std::optional<GrammarSpec> maybe_grammar(const CaptureConfig& cfg) {
    if (cfg.task.kind != TaskKind::cfg) return std::nullopt;
    return build_grammar(cfg.task.grammar_seed);
}

const std::vector<std::pair<EmbedPe, const char*>>& pe_names() {
    static const std::vector<std::pair<EmbedPe, const char*>> t = {
        {EmbedPe::none, "none"}, {EmbedPe::sinusoidal, "sinusoidal"}, {EmbedPe::rotary, "rotary"}};
    return t;
}

}  // namespace

const char* verdict_name(Verdict v) {
    switch (v) {
        case Verdict::capture: return "capture";
        case Verdict::non_capture: return "non_capture";
        case Verdict::inconclusive: return "inconclusive";
    }
    return "unknown";
}

Verdict verdict_from_name(const std::string& name) {
    for (Verdict v : {Verdict::capture, Verdict::non_capture, Verdict::inconclusive})
        if (name == verdict_name(v)) return v;
    throw Error(ErrorCode::IoError, "unknown verdict '" + name + "'");
}

void validate_capture_config(const CaptureConfig& cfg) {
    require(cfg.task.kind != TaskKind::sort, ErrorCode::BadConfig,
            "capture: the sorting task has a sequence target; the harness needs a scalar readout");
    require(cfg.delta > 0.0 && cfg.delta < 1.0, ErrorCode::BadConfig, "capture: delta must lie in (0, 1)");
    require(cfg.T0 >= min_size(cfg.task.kind), ErrorCode::BadConfig,
            "capture: T0 is below the task's minimum size");
    require(!cfg.T_grid.empty(), ErrorCode::BadConfig, "capture: empty T grid");
    require(cfg.T_grid.front() >= cfg.T0, ErrorCode::BadConfig, "capture: T_grid[0] must be >= T0");
    for (size_t i = 1; i < cfg.T_grid.size(); ++i)
        require(cfg.T_grid[i] > cfg.T_grid[i - 1], ErrorCode::BadConfig, "capture: T grid must be strictly increasing");
    require(cfg.p0_max >= 1, ErrorCode::BadConfig, "capture: p0_max must be >= 1");
    require(cfg.adapt_cap >= 0, ErrorCode::BadConfig, "capture: adapt_cap must be >= 0");
    require(cfg.batch >= 1, ErrorCode::BadConfig, "capture: batch must be >= 1");
    require(cfg.n_eval >= 1, ErrorCode::BadConfig, "capture: n_eval must be >= 1");
    require(cfg.embed_dim >= 4, ErrorCode::BadConfig, "capture: embeddings need at least 4 channels");
    require(cfg.embed_pe != EmbedPe::rotary || cfg.embed_dim % 2 == 0, ErrorCode::BadConfig,
            "capture: rotary embeddings need an even width");
    require(cfg.workers >= 1, ErrorCode::BadConfig, "capture: workers must be >= 1");
    require(cfg.kernel.depth >= 1, ErrorCode::BadConfig, "capture: kernel depth must be >= 1");
    if (cfg.task.kind == TaskKind::induction)
        require(cfg.task.vocab >= 2, ErrorCode::BadConfig, "capture: induction vocabulary must be >= 2");
    if (is_value_task(cfg.task.kind))
        require(cfg.task.alpha > 0.0, ErrorCode::BadConfig, "capture: graph tasks need a positive expected degree");
    if (cfg.kernel.backend == KernelBackendKind::transformer)
        require(cfg.kernel.mc.n_mc >= 1, ErrorCode::BadConfig, "capture: transformer backend needs n_mc >= 1");
}

std::string capture_config_to_json(const CaptureConfig& cfg) {
    nlohmann::json j;
    j["format"] = "kcap-capture-config";
    j["version"] = 1;
    j["task"] = {{"kind", task_kind_name(cfg.task.kind)},
                 {"vocab", cfg.task.vocab},
                 {"alpha", cfg.task.alpha},
                 {"grammar_seed", hex64(cfg.task.grammar_seed)}};
    j["delta"] = cfg.delta;
    j["t0"] = cfg.T0;
    j["t_grid"] = cfg.T_grid;
    j["p0_max"] = cfg.p0_max;
    j["adapt_cap"] = cfg.adapt_cap;
    j["batch"] = cfg.batch;
    j["n_eval"] = cfg.n_eval;
    const char* pe = "none";
    for (const auto& [k, name] : pe_names())
        if (k == cfg.embed_pe) pe = name;
    j["embed"] = {{"d", cfg.embed_dim}, {"pe", pe}};
    j["kernel"] = nlohmann::json::parse(kernel_config_to_json(cfg.kernel));
    j["master_seed"] = hex64(cfg.master_seed);
    j["workers"] = cfg.workers;
    return j.dump(2) + "\n";
}

CaptureConfig capture_config_from_json(const std::string& text) {
    try {
        const nlohmann::json j = nlohmann::json::parse(text);
        require(j.at("format").get<std::string>() == "kcap-capture-config", ErrorCode::BadConfig,
                "config: wrong format tag (expected kcap-capture-config)");
        require(j.at("version").get<int>() == 1, ErrorCode::BadConfig, "config: unsupported version");
        CaptureConfig cfg;
        const auto& t = j.at("task");
        cfg.task.kind = task_kind_from_name(t.at("kind").get<std::string>());
        cfg.task.vocab = t.value("vocab", cfg.task.vocab);
        cfg.task.alpha = t.value("alpha", cfg.task.alpha);
        if (t.contains("grammar_seed")) cfg.task.grammar_seed = parse_hex64(t.at("grammar_seed").get<std::string>());
        cfg.delta = j.at("delta").get<double>();
        cfg.T0 = j.at("t0").get<int>();
        cfg.T_grid = j.at("t_grid").get<std::vector<int>>();
        cfg.p0_max = j.value("p0_max", cfg.p0_max);
        cfg.adapt_cap = j.value("adapt_cap", cfg.adapt_cap);
        cfg.batch = j.value("batch", cfg.batch);
        cfg.n_eval = j.value("n_eval", cfg.n_eval);
        if (j.contains("embed")) {
            const auto& e = j.at("embed");
            cfg.embed_dim = e.value("d", cfg.embed_dim);
            if (e.contains("pe")) {
                const std::string name = e.at("pe").get<std::string>();
                bool found = false;
                for (const auto& [k, n] : pe_names())
                    if (name == n) {
                        cfg.embed_pe = k;
                        found = true;
                    }
                require(found, ErrorCode::BadConfig, "config: unknown position-encoding mode '" + name + "'");
            }
        }
        cfg.kernel = kernel_config_from_json(j.at("kernel").dump());
        cfg.master_seed = parse_hex64(j.at("master_seed").get<std::string>());
        cfg.workers = j.value("workers", cfg.workers);
        validate_capture_config(cfg);
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::BadConfig, std::string("config: missing or mistyped field: ") + e.what());
    }
}

double wilson_se(long long k, long long n) {
    if (n <= 0) return 0.0;
    const double p = static_cast<double>(k) / static_cast<double>(n);
    const double nn = static_cast<double>(n);
    const double denom = 1.0 + 1.0 / nn;
    return std::sqrt(p * (1.0 - p) / nn + 1.0 / (4.0 * nn * nn)) / denom;
}

LogFit fit_log_curve(const std::vector<CurvePoint>& points, int T0) {
    require(points.size() >= 3, ErrorCode::TooFewPoints, "fit_log_curve: needs at least 3 points");
    require(T0 >= 1, ErrorCode::BadConfig, "fit_log_curve: T0 must be >= 1");
    double sxx = 0.0, sxy = 0.0, sum_p = 0.0, sum_p2 = 0.0;
    for (const CurvePoint& pt : points) {
        const double x = std::log(static_cast<double>(pt.T) / static_cast<double>(T0));
        const double p = static_cast<double>(pt.P);
        sxx += x * x;
        sxy += x * p;
        sum_p += p;
        sum_p2 += p * p;
    }
    LogFit fit;
    fit.C = sxx > 0.0 ? sxy / sxx : 0.0;
    const double mean = sum_p / static_cast<double>(points.size());
    double sst = 0.0;
    for (const CurvePoint& pt : points) {
        const double x = std::log(static_cast<double>(pt.T) / static_cast<double>(T0));
        const double r = static_cast<double>(pt.P) - fit.C * x;
        fit.rss += r * r;
        const double c = static_cast<double>(pt.P) - mean;
        sst += c * c;
    }
    if (fit.rss <= 1e-12 * std::max(1.0, sum_p2)) fit.r2 = 1.0;
    else if (sst > 0.0) fit.r2 = 1.0 - fit.rss / sst;
    else fit.r2 = 0.0;
    return fit;
}

PowFit fit_power_curve(const std::vector<CurvePoint>& points, int T0) {
    require(T0 >= 1, ErrorCode::BadConfig, "fit_power_curve: T0 must be >= 1");
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    int n = 0;
    for (const CurvePoint& pt : points) {
        if (pt.T <= T0 || pt.P <= 0) continue;
        const double x = std::log(static_cast<double>(pt.T) / static_cast<double>(T0));
        const double y = std::log(static_cast<double>(pt.P));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++n;
    }
    PowFit fit;
    const double det = n * sxx - sx * sx;
    if (n < 2 || det <= 0.0) return fit;  // not enough spread for a two-parameter fit
    fit.kappa = (n * sxy - sx * sy) / det;
    fit.amp = std::exp((sy - fit.kappa * sx) / n);
    fit.valid = true;
    for (const CurvePoint& pt : points) {
        const double model =
            fit.amp * std::pow(static_cast<double>(pt.T) / static_cast<double>(T0), fit.kappa);
        const double r = static_cast<double>(pt.P) - model;
        fit.rss += r * r;
    }
    return fit;
}

Verdict classify_capture(CaptureCurve& curve, const CaptureThresholds& th) {
    const LogFit lf = fit_log_curve(curve.points, curve.T0);
    const PowFit pf = fit_power_curve(curve.points, curve.T0);
    curve.fit_C = lf.C;
    curve.fit_r2 = lf.r2;
    curve.pow_kappa = pf.kappa;
    curve.pow_amp = pf.amp;

    const double n = static_cast<double>(curve.points.size());
    const auto aic = [n](double rss, int k) { return n * std::log(std::max(rss, 1e-300) / n) + 2.0 * k; };
    curve.aic_log = aic(lf.rss, 1);
    curve.aic_pow = pf.valid ? aic(pf.rss, 2) : HUGE_VAL;

    bool flagged = curve.stage1_exhausted;
    for (const CurvePoint& pt : curve.points) flagged = flagged || pt.budget_exhausted;

    if (pf.valid && pf.kappa >= th.kappa_min && curve.aic_pow < curve.aic_log) {
        curve.verdict = Verdict::non_capture;
    } else if (lf.r2 >= th.r2_min && !flagged) {
        curve.verdict = Verdict::capture;
    } else {
        curve.verdict = Verdict::inconclusive;
    }
    return curve.verdict;
}

GrowthResult grow_until(const std::function<EvalResult(int)>& error_at, double delta, int cap, int batch) {
    require(delta > 0.0 && delta < 1.0, ErrorCode::BadConfig, "grow_until: delta must lie in (0, 1)");
    require(cap >= 0 && batch >= 1, ErrorCode::BadConfig, "grow_until: cap must be >= 0 and batch >= 1");

    std::map<int, EvalResult> cache;
    const auto probe = [&](int m) {
        auto it = cache.find(m);
        if (it == cache.end()) it = cache.emplace(m, error_at(m)).first;
        return it->second;
    };

    const EvalResult base = probe(0);
    if (base.error < delta) return {0, base, false};
    if (cap == 0) return {0, base, true};

    int prev = 0, m = 0;
    while (m < cap) {
        m = std::min(m + batch, cap);
        if (probe(m).error < delta) {
            int lo = prev, hi = m;  // error_at(lo) >= delta, error_at(hi) < delta
            while (hi - lo > 1) {
                const int mid = lo + (hi - lo) / 2;
                if (probe(mid).error < delta) hi = mid;
                else lo = mid;
            }
            return {hi, probe(hi), false};
        }
        prev = m;
    }
    return {cap, probe(cap), true};
}

Stage1Result stage1_train(const CaptureConfig& cfg) {
    validate_capture_config(cfg);
    const std::optional<GrammarSpec> grammar = maybe_grammar(cfg);
    const GrammarSpec* gp = grammar.has_value() ? &*grammar : nullptr;
    const std::vector<Sample> eval_set = build_eval_set(cfg, gp, cfg.T0);
    const bool value_task = is_value_task(cfg.task.kind);
    const int lo = min_size(cfg.task.kind);

    std::vector<Sample> pool;
    const auto sample_at = [&](long long i) {
        while (static_cast<long long>(pool.size()) <= i)
            pool.push_back(indexed_sample(cfg, gp, kStage1Label, cfg.T0, lo, cfg.T0,
                                          static_cast<long long>(pool.size())));
        return pool[static_cast<size_t>(i)];
    };

    std::map<int, FittedPredictor> fits;
    const auto error_at = [&](int m) -> EvalResult {
        if (m == 0) return baseline_eval(eval_set, value_task);
        std::vector<Mat> xs;
        std::vector<std::vector<double>> ys;
        xs.reserve(static_cast<size_t>(m));
        for (int i = 0; i < m; ++i) {
            const Sample s = sample_at(i);
            xs.push_back(s.x);
            ys.push_back(s.y);
        }
        FittedPredictor f = fit_predictor(xs, stack_labels(ys), cfg.kernel, 0.0, cfg.workers);
        const EvalResult e = evaluate(f, eval_set, value_task, cfg.workers);
        fits.emplace(m, std::move(f));
        return e;
    };

    const GrowthResult g = grow_until(error_at, cfg.delta, cfg.p0_max, cfg.batch);
    // When the zero-predictor baseline already meets delta, p0 stays 0 but the
    // sweep still needs a stage-one object to adapt: fit one sample for it.
    const int fit_m = std::max(g.samples, 1);
    if (fits.find(fit_m) == fits.end()) error_at(fit_m);
    return {fits.at(fit_m), g.samples, g.eval, g.exhausted};
}

AdaptResult adapt_step(const FittedPredictor& stage1, const CaptureConfig& cfg, int T_prev, int T,
                       std::vector<Mat>& adapt_xs, std::vector<std::vector<double>>& adapt_ys) {
    validate_capture_config(cfg);
    require(stage1.stage == FitStage::initial, ErrorCode::StageViolation,
            "adapt_step: pass the stage-one predictor (adaptation refits the whole second stage)");
    require(T_prev >= 1 && T >= T_prev, ErrorCode::BadConfig, "adapt_step: need T >= T_prev >= 1");
    const std::optional<GrammarSpec> grammar = maybe_grammar(cfg);
    const GrammarSpec* gp = grammar.has_value() ? &*grammar : nullptr;
    const std::vector<Sample> eval_set = build_eval_set(cfg, gp, T);
    const bool value_task = is_value_task(cfg.task.kind);
    const int lo = std::max(min_size(cfg.task.kind), T_prev);

    std::vector<Sample> step_pool;
    const auto step_sample = [&](long long i) {
        while (static_cast<long long>(step_pool.size()) <= i)
            step_pool.push_back(
                indexed_sample(cfg, gp, kAdaptLabel, T, lo, T, static_cast<long long>(step_pool.size())));
        return step_pool[static_cast<size_t>(i)];
    };

    std::map<int, FittedPredictor> fits;
    const auto error_at = [&](int m) -> EvalResult {
        std::vector<Mat> xs = adapt_xs;
        std::vector<std::vector<double>> ys = adapt_ys;
        for (int i = 0; i < m; ++i) {
            const Sample s = step_sample(i);
            xs.push_back(s.x);
            ys.push_back(s.y);
        }
        if (xs.empty()) return evaluate(stage1, eval_set, value_task, cfg.workers);
        FittedPredictor f = two_step_adapt(stage1, xs, stack_labels(ys), 0.0, cfg.workers);
        const EvalResult e = evaluate(f, eval_set, value_task, cfg.workers);
        fits.emplace(m, std::move(f));
        return e;
    };

    const GrowthResult g = grow_until(error_at, cfg.delta, cfg.adapt_cap, cfg.batch);
    for (int i = 0; i < g.samples; ++i) {
        const Sample s = step_sample(i);
        adapt_xs.push_back(s.x);
        adapt_ys.push_back(s.y);
    }

    AdaptResult r;
    r.samples_used = g.samples;
    r.eval = g.eval;
    r.exhausted = g.exhausted;
    auto it = fits.find(g.samples);
    r.predictor = it != fits.end() ? it->second : stage1;
    return r;
}

std::string curve_to_csv(const CaptureCurve& curve) {
    const auto fmt = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::string out = "T,P,error,stderr,flags\n";
    for (const CurvePoint& pt : curve.points) {
        out += std::to_string(pt.T) + "," + std::to_string(pt.P) + "," + fmt(pt.error) + "," + fmt(pt.se) + "," +
               (pt.budget_exhausted ? "exhausted" : "") + "\n";
    }
    return out;
}

std::string fit_to_json(const CaptureCurve& curve, const CaptureThresholds& th, uint64_t config_hash) {
    nlohmann::json j;
    j["format"] = "kcap-fit";
    j["version"] = 1;
    j["config_hash"] = hex64(config_hash);
    j["t0"] = curve.T0;
    j["p0"] = curve.p0;
    j["stage1_error"] = curve.stage1_error;
    j["stage1_stderr"] = curve.stage1_se;
    j["stage1_exhausted"] = curve.stage1_exhausted;
    j["fit_C"] = curve.fit_C;
    j["fit_r2"] = curve.fit_r2;
    j["pow_kappa"] = curve.pow_kappa;
    j["pow_amp"] = curve.pow_amp;
    j["aic_log"] = curve.aic_log;
    j["aic_pow"] = std::isfinite(curve.aic_pow) ? nlohmann::json(curve.aic_pow) : nlohmann::json();
    j["r2_min"] = th.r2_min;
    j["kappa_min"] = th.kappa_min;
    j["verdict"] = verdict_name(curve.verdict);
    return j.dump(2) + "\n";
}

namespace {

struct Checkpoint {
    uint64_t config_hash = 0;
    long long p0 = 0;
    double stage1_error = 1.0, stage1_se = 0.0;
    bool stage1_exhausted = false;
    struct Point {
        int T = 0;
        int step_samples = 0;
        long long P = 0;
        double error = 0.0, se = 0.0;
        bool exhausted = false;
    };
    std::vector<Point> points;
};

std::string checkpoint_to_json(const Checkpoint& c) {
    nlohmann::json j;
    j["format"] = "kcap-capture-checkpoint";
    j["version"] = 1;
    j["config_hash"] = hex64(c.config_hash);
    j["p0"] = c.p0;
    j["stage1_error"] = c.stage1_error;
    j["stage1_stderr"] = c.stage1_se;
    j["stage1_exhausted"] = c.stage1_exhausted;
    j["points"] = nlohmann::json::array();
    for (const auto& p : c.points)
        j["points"].push_back({{"t", p.T},
                               {"step_samples", p.step_samples},
                               {"p", p.P},
                               {"error", p.error},
                               {"stderr", p.se},
                               {"exhausted", p.exhausted}});
    return j.dump(2) + "\n";
}

Checkpoint checkpoint_from_json(const std::string& text) {
    try {
        const nlohmann::json j = nlohmann::json::parse(text);
        require(j.at("format").get<std::string>() == "kcap-capture-checkpoint", ErrorCode::IoError,
                "checkpoint: wrong format tag");
        Checkpoint c;
        c.config_hash = parse_hex64(j.at("config_hash").get<std::string>());
        c.p0 = j.at("p0").get<long long>();
        c.stage1_error = j.at("stage1_error").get<double>();
        c.stage1_se = j.at("stage1_stderr").get<double>();
        c.stage1_exhausted = j.at("stage1_exhausted").get<bool>();
        for (const auto& p : j.at("points")) {
            Checkpoint::Point pt;
            pt.T = p.at("t").get<int>();
            pt.step_samples = p.at("step_samples").get<int>();
            pt.P = p.at("p").get<long long>();
            pt.error = p.at("error").get<double>();
            pt.se = p.at("stderr").get<double>();
            pt.exhausted = p.at("exhausted").get<bool>();
            c.points.push_back(pt);
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("checkpoint json: ") + e.what());
    }
}

}  // namespace

CaptureCurve run_capture(const CaptureConfig& cfg, const std::string& out_dir, bool resume,
                         const CaptureThresholds& th) {
    validate_capture_config(cfg);
    const std::string config_json = capture_config_to_json(cfg);
    const uint64_t config_hash = fnv64(config_json);

    const bool writing = !out_dir.empty();
    std::string checkpoint_path;
    if (writing) {
        std::filesystem::create_directories(out_dir);
        checkpoint_path = out_dir + "/checkpoint.json";
    }

    Checkpoint ck;
    ck.config_hash = config_hash;
    bool have_checkpoint = false;
    if (writing && resume && std::filesystem::exists(checkpoint_path)) {
        ck = checkpoint_from_json(read_text_file(checkpoint_path));
        require(ck.config_hash == config_hash, ErrorCode::BadConfig,
                "resume: checkpoint belongs to a different configuration");
        have_checkpoint = true;
    }

    const std::optional<GrammarSpec> grammar = maybe_grammar(cfg);
    const GrammarSpec* gp = grammar.has_value() ? &*grammar : nullptr;
    const int lo = min_size(cfg.task.kind);

    CaptureCurve curve;
    curve.T0 = cfg.T0;

    // Stage one: replayed from the checkpoint when resuming (the sample
    // streams are pure functions of the config), grown otherwise.
    FittedPredictor f1;
    if (have_checkpoint) {
        std::vector<Mat> xs;
        std::vector<std::vector<double>> ys;
        for (long long i = 0; i < std::max(ck.p0, 1LL); ++i) {  // mirrors stage1_train's fit size
            const Sample s = indexed_sample(cfg, gp, kStage1Label, cfg.T0, lo, cfg.T0, i);
            xs.push_back(s.x);
            ys.push_back(s.y);
        }
        f1 = fit_predictor(xs, stack_labels(ys), cfg.kernel, 0.0, cfg.workers);
        curve.p0 = ck.p0;
        curve.stage1_error = ck.stage1_error;
        curve.stage1_se = ck.stage1_se;
        curve.stage1_exhausted = ck.stage1_exhausted;
    } else {
        Stage1Result s1 = stage1_train(cfg);
        f1 = std::move(s1.predictor);
        curve.p0 = s1.p0;
        curve.stage1_error = s1.eval.error;
        curve.stage1_se = s1.eval.se;
        curve.stage1_exhausted = s1.exhausted;
        ck.p0 = s1.p0;
        ck.stage1_error = s1.eval.error;
        ck.stage1_se = s1.eval.se;
        ck.stage1_exhausted = s1.exhausted;
        if (writing) write_text_file(checkpoint_path, checkpoint_to_json(ck));
    }

    std::vector<Mat> adapt_xs;
    std::vector<std::vector<double>> adapt_ys;
    long long cumulative = 0;
    for (size_t g = 0; g < cfg.T_grid.size(); ++g) {
        const int T = cfg.T_grid[g];
        const int T_prev = g == 0 ? cfg.T0 : cfg.T_grid[g - 1];
        if (g < ck.points.size()) {
            // Replay: regenerate the recorded number of adaptation samples so
            // later grid points see the identical cumulative set.
            const Checkpoint::Point& p = ck.points[g];
            require(p.T == T, ErrorCode::BadConfig, "resume: checkpoint grid diverges from the configuration");
            const int step_lo = std::max(lo, T_prev);
            for (int i = 0; i < p.step_samples; ++i) {
                const Sample s = indexed_sample(cfg, gp, kAdaptLabel, T, step_lo, T, i);
                adapt_xs.push_back(s.x);
                adapt_ys.push_back(s.y);
            }
            cumulative = p.P;
            curve.points.push_back({p.T, p.P, p.error, p.se, p.exhausted});
            continue;
        }
        const AdaptResult r = adapt_step(f1, cfg, T_prev, T, adapt_xs, adapt_ys);
        cumulative += r.samples_used;
        curve.points.push_back({T, cumulative, r.eval.error, r.eval.se, r.exhausted});
        ck.points.push_back({T, r.samples_used, cumulative, r.eval.error, r.eval.se, r.exhausted});
        if (writing) write_text_file(checkpoint_path, checkpoint_to_json(ck));
    }

    if (curve.points.size() >= 3) {
        classify_capture(curve, th);
    } else {
        curve.verdict = Verdict::inconclusive;  // too few points for the competing fits
    }

    if (writing) {
        write_text_file(out_dir + "/curve.csv", curve_to_csv(curve));
        write_text_file(out_dir + "/fit.json", fit_to_json(curve, th, config_hash));
        RunManifest manifest;
        manifest.config_hash = config_hash;
        manifest.master_seed = cfg.master_seed;
        manifest.created_utc = utc_timestamp_now();
        manifest.outputs = {"curve.csv", "fit.json", "checkpoint.json"};
        write_text_file(out_dir + "/manifest.json", manifest_to_json(manifest));
    }
    return curve;
}

McSweepResult mc_error_sweep(const std::function<double(int64_t n_mc, int rep)>& readout,
                             const std::vector<int64_t>& n_mc_grid, int reps) {
    require(n_mc_grid.size() >= 2, ErrorCode::TooFewPoints, "mc_error_sweep: need at least two n_mc values");
    require(reps >= 8, ErrorCode::TooFewReps, "mc_error_sweep: need at least 8 repetitions");

    McSweepResult out;
    for (int64_t n_mc : n_mc_grid) {
        require(n_mc >= 1, ErrorCode::BadConfig, "mc_error_sweep: n_mc must be >= 1");
        double mean = 0.0;
        std::vector<double> vals(static_cast<size_t>(reps));
        for (int r = 0; r < reps; ++r) {
            vals[static_cast<size_t>(r)] = readout(n_mc, r);
            mean += vals[static_cast<size_t>(r)];
        }
        mean /= reps;
        double ss = 0.0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        const double sd = std::sqrt(ss / (reps - 1));
        require(sd > 0.0, ErrorCode::BadConfig, "mc_error_sweep: readout is deterministic (zero spread)");
        out.points.push_back({n_mc, sd});
    }

    const int n = static_cast<int>(out.points.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (const McSweepPoint& p : out.points) {
        const double x = std::log(static_cast<double>(p.n_mc));
        const double y = std::log(p.readout_std);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double det = n * sxx - sx * sx;
    require(det > 0.0, ErrorCode::BadConfig, "mc_error_sweep: n_mc grid has no spread");
    out.slope = (n * sxy - sx * sy) / det;
    out.intercept = (sy - out.slope * sx) / n;
    double rss = 0.0;
    for (const McSweepPoint& p : out.points) {
        const double x = std::log(static_cast<double>(p.n_mc));
        const double r = std::log(p.readout_std) - (out.intercept + out.slope * x);
        rss += r * r;
    }
    if (n > 2) {
        const double sxx_centered = sxx - sx * sx / n;
        out.slope_se = std::sqrt(rss / (n - 2) / sxx_centered);
    }
    return out;
}

McSweepResult mc_error_sweep(const KernelConfig& cfg, const Mat& x1, const Mat& x2,
                             const std::vector<int64_t>& n_mc_grid, int reps, uint64_t seed) {
    return mc_error_sweep(
        [&](int64_t n_mc, int rep) {
            KernelConfig c = cfg;
            c.mc.n_mc = n_mc;
            c.mc.seed = mix_seed(seed, static_cast<uint64_t>(n_mc), static_cast<uint64_t>(rep));
            return kernel_eval(c, x1, x2).value;
        },
        n_mc_grid, reps);
}

}  // namespace kcap
