// kcap: command-line driver binding the task generators, the infinite-width
// kernel engine, and the two-stage capture harness into reproducible runs.
//
// Subcommands:
//   gen       generate (or --verify) a task-instance dataset
//   kernel    evaluate the kernel for a pair of instances
//   capture   run a capture experiment from a JSON config file
//   selftest  fast internal consistency suites
//
// Exit codes: 0 success (budget-exhausted results are flagged in the outputs,
// not fatal), 2 configuration or usage error, 3 generator error, 4 numerical
// failure. Every failure prints one machine-readable JSON object on stderr:
//   {"error":{"code":"...","message":"...","exit":N}}
//
// Environment: KCAP_WORKERS overrides the default worker count, KCAP_OUT_ROOT
// prefixes relative --out paths. Everything else comes from flags or config
// files, and every command is a pure function of them plus its seeds.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "kcap/capture.hpp"
#include "kcap/dual_activation.hpp"
#include "kcap/error.hpp"
#include "kcap/finite_width.hpp"
#include "kcap/io.hpp"
#include "kcap/kernels.hpp"
#include "kcap/mat.hpp"
#include "kcap/propagation.hpp"
#include "kcap/regression.hpp"
#include "kcap/rng.hpp"
#include "kcap/score_sampler.hpp"
#include "kcap/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kcap;

namespace {

// Stream labels keeping the CLI's derived seeds disjoint from the harness's.
constexpr uint64_t kGenStream = 0x6b6361702d67656eULL;
constexpr uint64_t kFiniteStream = 0x66696e697465ULL;

int exit_code_for(ErrorCode c) {
    switch (c) {
        case ErrorCode::BadConfig:
        case ErrorCode::IoError:
        case ErrorCode::TooFewPoints:
        case ErrorCode::TooFewReps:
        case ErrorCode::StageViolation:
            return 2;
        case ErrorCode::TooShort:
        case ErrorCode::DegenerateGrammar:
        case ErrorCode::UnsatisfiableLength:
        case ErrorCode::RadiusOverflow:
        case ErrorCode::CapacityExceeded:
        case ErrorCode::NotPermutation:
            return 3;
        default:
            return 4;
    }
}

int emit_error(const std::string& code, const std::string& message, int exit_code) {
    json err{{"error", {{"code", code}, {"message", message}, {"exit", exit_code}}}};
    std::cerr << err.dump() << "\n";
    return exit_code;
}

int emit_error(const Error& e) {
    std::string msg = e.what();
    std::string prefix = std::string(error_code_name(e.code())) + ": ";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    return emit_error(error_code_name(e.code()), msg, exit_code_for(e.code()));
}

std::string resolve_out_dir(const std::string& out) {
    if (out.empty()) return out;
    const char* root = std::getenv("KCAP_OUT_ROOT");
    if (root == nullptr || *root == '\0' || fs::path(out).is_absolute()) return out;
    return (fs::path(root) / out).string();
}

int env_workers(int fallback) {
    const char* w = std::getenv("KCAP_WORKERS");
    if (w == nullptr || *w == '\0') return fallback;
    char* end = nullptr;
    long v = std::strtol(w, &end, 10);
    require(end != w && *end == '\0' && v >= 1 && v <= 4096, ErrorCode::BadConfig,
            "KCAP_WORKERS must be a positive integer");
    return static_cast<int>(v);
}

EmbedPe embed_pe_from_name(const std::string& s) {
    if (s == "none") return EmbedPe::none;
    if (s == "sinusoidal") return EmbedPe::sinusoidal;
    if (s == "rotary") return EmbedPe::rotary;
    fail(ErrorCode::BadConfig, "unknown position encoding '" + s + "' (none, sinusoidal, rotary)");
}

Activation activation_from_name(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "gelu") return Activation::gelu;
    fail(ErrorCode::BadConfig, "unknown activation '" + s + "' (relu, gelu)");
}

// ------------------------------------------------------------------- gen

struct GenArgs {
    std::string task, out, grammar_path, pe = "none";
    int t = 0, count = 0, vocab = 1024, embed_dim = 0;
    double alpha = 4.5;
    uint64_t seed = 1, grammar_seed = 1;
    bool verify = false;
};

TaskInstance make_instance(TaskKind kind, const GenArgs& a, const GrammarSpec* g, Rng& rng) {
    switch (kind) {
        case TaskKind::induction:
            return gen_induction(a.t, rng, a.vocab);
        case TaskKind::sort:
            return gen_sort(a.t, a.vocab, rng);
        case TaskKind::string_match: {
            std::array<int, 3> pattern = random_pattern(rng);
            bool positive = rng.below(2) == 1;
            return gen_string_match(a.t, pattern, positive, rng);
        }
        case TaskKind::cfg: {
            // Negatives substitute inside a derivation tree, which needs at
            // least one internal node; length-1 strings are always positive.
            bool positive = a.t < 2 || rng.below(2) == 1;
            return gen_cfg(*g, a.t, positive, rng);
        }
        case TaskKind::spp:
            return gen_spp(a.t, a.alpha, rng);
        case TaskKind::mincut:
            return gen_mincut(a.t, a.alpha, rng);
    }
    fail(ErrorCode::BadConfig, "gen: unhandled task kind");
}

int run_gen_verify(const GenArgs& a) {
    require(!a.out.empty(), ErrorCode::BadConfig, "gen --verify: --out names the dataset directory");
    std::string out = resolve_out_dir(a.out);
    std::vector<std::string> lines = read_lines(out + "/instances.jsonl");
    std::optional<GrammarSpec> grammar;
    if (fs::exists(out + "/grammar.json")) {
        grammar = grammar_from_json(read_text_file(out + "/grammar.json"));
        validate_grammar(*grammar);
    }
    for (size_t i = 0; i < lines.size(); ++i) {
        std::string where = "instances.jsonl line " + std::to_string(i + 1);
        bool ok = false;
        try {
            TaskInstance inst = instance_from_json(lines[i]);
            if (inst.kind == TaskKind::cfg) {
                require(grammar.has_value(), ErrorCode::IoError, "cfg instance but no grammar.json in the dataset");
                ok = oracle_recheck(inst, *grammar);
            } else {
                ok = oracle_recheck(inst);
            }
        } catch (const Error& e) {
            return emit_error("VerificationFailed", where + ": " + e.what(), 3);
        }
        if (!ok) return emit_error("VerificationFailed", where + ": stored label contradicts the task oracle", 3);
    }
    json summary{{"command", "gen"}, {"verified", lines.size()}, {"out", out}};
    std::cout << summary.dump() << "\n";
    return 0;
}

int run_gen(const GenArgs& a) {
    if (a.verify) return run_gen_verify(a);
    require(!a.task.empty(), ErrorCode::BadConfig, "gen: --task is required");
    TaskKind kind = task_kind_from_name(a.task);
    require(a.t >= 1, ErrorCode::BadConfig, "gen: --t must be >= 1");
    require(a.count >= 1, ErrorCode::BadConfig, "gen: --count must be >= 1");
    require(!a.out.empty(), ErrorCode::BadConfig, "gen: --out is required");
    EmbedPe pe = embed_pe_from_name(a.pe);

    std::optional<GrammarSpec> grammar;
    if (kind == TaskKind::cfg) {
        if (!a.grammar_path.empty()) {
            grammar = grammar_from_json(read_text_file(a.grammar_path));
            validate_grammar(*grammar);
        } else {
            grammar = build_grammar(a.grammar_seed);
        }
    }

    std::vector<std::string> lines;
    std::vector<NamedMat> mats;
    lines.reserve(static_cast<size_t>(a.count));
    for (int i = 0; i < a.count; ++i) {
        uint64_t stream = mix_seed(a.seed, kGenStream, static_cast<uint64_t>(i));
        Rng rng(stream);
        TaskInstance inst = make_instance(kind, a, grammar ? &*grammar : nullptr, rng);
        inst.seed = stream;
        lines.push_back(instance_to_json(inst));
        if (a.embed_dim > 0) {
            char name[32];
            std::snprintf(name, sizeof name, "instance-%06d", i);
            mats.push_back(NamedMat{name, embed_instance(inst, a.embed_dim, pe), std::nullopt});
        }
    }

    std::string out = resolve_out_dir(a.out);
    fs::create_directories(out);
    write_lines(out + "/instances.jsonl", lines);
    std::vector<std::string> outputs{"instances.jsonl"};
    if (grammar) {
        write_text_file(out + "/grammar.json", grammar_to_json(*grammar));
        outputs.push_back("grammar.json");
    }
    if (!mats.empty()) {
        write_mat_container(out + "/embeddings.bin", mats);
        outputs.push_back("embeddings.bin");
    }

    json cfg_doc{{"format", "kcap-gen-config"}, {"version", 1},    {"task", task_kind_name(kind)},
                 {"t", a.t},                    {"count", a.count}, {"seed", hex64(a.seed)},
                 {"embed_dim", a.embed_dim},    {"pe", a.pe}};
    if (kind == TaskKind::induction || kind == TaskKind::sort) cfg_doc["vocab"] = a.vocab;
    if (kind == TaskKind::spp || kind == TaskKind::mincut) cfg_doc["alpha"] = a.alpha;
    if (grammar) cfg_doc["grammar_hash"] = hex64(grammar_hash(*grammar));
    std::string cfg_text = cfg_doc.dump(2) + "\n";
    write_text_file(out + "/gen_config.json", cfg_text);
    outputs.push_back("gen_config.json");

    RunManifest m;
    m.config_hash = fnv64(cfg_text);
    m.master_seed = a.seed;
    m.created_utc = utc_timestamp_now();
    m.outputs = outputs;
    write_text_file(out + "/manifest.json", manifest_to_json(m));

    json summary{{"command", "gen"},
                 {"task", task_kind_name(kind)},
                 {"count", a.count},
                 {"out", out},
                 {"config_hash", hex64(m.config_hash)}};
    std::cout << summary.dump() << "\n";
    return 0;
}

// ---------------------------------------------------------------- kernel

struct KernelArgs {
    std::string a_path, b_path, out;
    int ai = 0, bi = 0;
    std::string backend = "transformer", mode = "nngp", activation = "relu", pe = "none";
    int depth = 1, workers = 0, embed_dim = 8, d_model = 64, heads = 1, d_k = 0;
    int64_t n_mc = 10000, draws = 2000;
    uint64_t seed = 1;
    double sigma_w = 1.0, sigma_b = 0.0;
    bool antithetic = false, special_token_flags = false, flop_report = false, validate_finite = false;
};

TaskInstance load_instance(const std::string& path, int index) {
    std::vector<std::string> lines = read_lines(path);
    require(index >= 0 && static_cast<size_t>(index) < lines.size(), ErrorCode::BadConfig,
            "kernel: instance index " + std::to_string(index) + " out of range for " + path + " (" +
                std::to_string(lines.size()) + " lines)");
    return instance_from_json(lines[static_cast<size_t>(index)]);
}

int run_kernel(const KernelArgs& a) {
    require(!a.a_path.empty(), ErrorCode::BadConfig, "kernel: --a is required");
    require(a.embed_dim >= 1, ErrorCode::BadConfig, "kernel: --embed-dim must be positive");
    require(a.depth >= 1, ErrorCode::BadConfig, "kernel: --depth must be >= 1");
    require(a.n_mc >= 1, ErrorCode::BadConfig, "kernel: --n-mc must be >= 1");
    require(a.mode == "nngp" || a.mode == "ntk", ErrorCode::BadConfig,
            "kernel: --mode must be nngp or ntk");
    require(a.backend == "transformer" || a.backend == "fcn", ErrorCode::BadConfig,
            "kernel: --backend must be transformer or fcn");

    TaskInstance ia = load_instance(a.a_path, a.ai);
    bool same_ref = a.b_path.empty() && a.bi == a.ai;
    TaskInstance ib = same_ref ? ia : load_instance(a.b_path.empty() ? a.a_path : a.b_path, a.bi);

    EmbedPe epe = embed_pe_from_name(a.pe);
    Mat xa = embed_instance(ia, a.embed_dim, epe);
    Mat xb = embed_instance(ib, a.embed_dim, epe);

    KernelConfig cfg;
    cfg.backend = a.backend == "fcn" ? KernelBackendKind::fcn : KernelBackendKind::transformer;
    cfg.depth = a.depth;
    cfg.params.sigma_w = a.sigma_w;
    cfg.params.sigma_b = a.sigma_b;
    cfg.params.activation = activation_from_name(a.activation);
    cfg.mc.n_mc = a.n_mc;
    cfg.mc.seed = a.seed;
    cfg.mc.antithetic = a.antithetic;
    cfg.mode = a.mode == "ntk" ? KernelMode::ntk : KernelMode::nngp;
    cfg.pe = a.special_token_flags ? PeMode::special_token_flags : PeMode::none;

    int workers = a.workers > 0 ? a.workers : env_workers(1);
    Gram g = assemble_gram({xa, xb}, cfg, workers);

    double scale = std::max({1.0, std::fabs(g.k(0, 0)), std::fabs(g.k(1, 1))});
    double det = g.k(0, 0) * g.k(1, 1) - g.k(0, 1) * g.k(1, 0);
    bool psd = g.k(0, 0) >= -1e-12 * scale && g.k(1, 1) >= -1e-12 * scale && det >= -1e-12 * scale * scale;

    json cfg_doc{{"format", "kcap-kernel-config"},
                 {"version", 1},
                 {"kernel", json::parse(kernel_config_to_json(cfg))},
                 {"embed_dim", a.embed_dim},
                 {"pe", a.pe},
                 {"a", hex64(content_hash(xa))},
                 {"b", hex64(content_hash(xb))}};
    std::string cfg_text = cfg_doc.dump(2) + "\n";
    uint64_t config_hash = fnv64(cfg_text);

    json report{{"format", "kcap-kernel-report"},
                {"version", 1},
                {"backend", a.backend},
                {"mode", a.mode},
                {"depth", a.depth},
                {"t_a", xa.rows()},
                {"t_b", xb.rows()},
                {"readout", g.k(0, 1)},
                {"stderr", g.se(0, 1)},
                {"gram", {{g.k(0, 0), g.k(0, 1)}, {g.k(1, 0), g.k(1, 1)}}},
                {"gram_stderr", {{g.se(0, 0), g.se(0, 1)}, {g.se(1, 0), g.se(1, 1)}}},
                {"symmetric", g.k(0, 1) == g.k(1, 0)},
                {"psd", psd},
                {"inputs_identical", content_hash(xa) == content_hash(xb)},
                {"config_hash", hex64(config_hash)}};

    if (a.flop_report) {
        int dk = a.d_k > 0 ? a.d_k : a.d_model / std::max(1, a.heads);
        require(a.d_model >= 1 && a.heads >= 1 && dk >= 1, ErrorCode::BadConfig,
                "kernel: the flop report needs positive --d-model, --heads, --d-k");
        report["flops"] = json{{"l", a.depth},
                               {"h", a.heads},
                               {"d_model", a.d_model},
                               {"d_k", dk},
                               {"per_forward", json::array({json{{"t", xa.rows()},
                                                                 {"flops", flop_count(a.depth, a.heads, a.d_model, dk, xa.rows())}},
                                                            json{{"t", xb.rows()},
                                                                 {"flops", flop_count(a.depth, a.heads, a.d_model, dk, xb.rows())}}})}};
    }

    if (a.validate_finite) {
        require(cfg.backend == KernelBackendKind::transformer, ErrorCode::BadConfig,
                "kernel: --validate-finite applies to the transformer backend");
        require(cfg.pe == PeMode::none, ErrorCode::BadConfig,
                "kernel: --validate-finite compares the plain embedding covariance; drop --special-token-flags");
        require(a.draws >= 2, ErrorCode::BadConfig, "kernel: --draws must be >= 2");
        FiniteDims fd;
        fd.d_in = xa.cols();
        fd.d_model = a.d_model;
        fd.H = a.heads;
        fd.d_k = a.d_k;
        fd.L = a.depth;
        fd.sigma_w = a.sigma_w;
        fd.sigma_b = a.sigma_b;
        fd.activation = cfg.params.activation;
        fd.ln_eps = cfg.params.ln_eps;
        EmpiricalCov emp = empirical_covariance(xa, xb, fd, a.draws, mix_seed(a.seed, kFiniteStream),
                                                Tap::post_mlp, a.depth - 1, CovMethod::conditional, workers);
        // The covariance tap estimates the NNGP limit, so the comparison always
        // propagates in nngp mode whatever --mode asked for the readout.
        PropagateResult pr = propagate_transformer(xa, xb, a.depth, cfg.params, cfg.mc, KernelMode::nngp,
                                                   PeMode::none);
        double max_gap = 0.0, max_se = 0.0, max_units = 0.0;
        for (int i = 0; i < pr.k_matrix.rows(); ++i)
            for (int j = 0; j < pr.k_matrix.cols(); ++j) {
                double gap = std::fabs(pr.k_matrix(i, j) - emp.mean(i, j));
                double tot = emp.se(i, j) + pr.state.se12(i, j);
                max_gap = std::max(max_gap, gap);
                max_se = std::max(max_se, tot);
                max_units = std::max(max_units, gap / (tot + 1e-300));
            }
        report["finite_check"] = json{{"d_model", a.d_model}, {"heads", a.heads},
                                      {"draws", a.draws},     {"max_abs_gap", max_gap},
                                      {"max_se", max_se},     {"max_gap_se_units", max_units}};
    }

    std::string out = resolve_out_dir(a.out);
    if (!out.empty()) {
        fs::create_directories(out);
        write_mat_container(out + "/gram.bin", {NamedMat{"gram", g.k, g.se}});
        report["matrix_path"] = out + "/gram.bin";
        write_text_file(out + "/kernel_config.json", cfg_text);
        write_text_file(out + "/report.json", report.dump(2) + "\n");
        RunManifest m;
        m.config_hash = config_hash;
        m.master_seed = a.seed;
        m.created_utc = utc_timestamp_now();
        m.outputs = {"gram.bin", "kernel_config.json", "report.json"};
        write_text_file(out + "/manifest.json", manifest_to_json(m));
    }

    std::cout << report.dump(2) << "\n";
    return 0;
}

// --------------------------------------------------------------- capture

struct CaptureArgs {
    std::string config_path, out;
    bool resume = false;
    int workers = 0;
    double r2_min = 0.9, kappa_min = 0.5;
};

int run_capture_cmd(const CaptureArgs& a) {
    require(!a.config_path.empty(), ErrorCode::BadConfig, "capture: --config is required");
    require(!a.out.empty(), ErrorCode::BadConfig, "capture: --out is required");
    CaptureConfig cfg = capture_config_from_json(read_text_file(a.config_path));
    cfg.workers = a.workers > 0 ? a.workers : env_workers(cfg.workers);
    CaptureThresholds th{a.r2_min, a.kappa_min};
    std::string out = resolve_out_dir(a.out);
    CaptureCurve curve = run_capture(cfg, out, a.resume, th);
    bool exhausted = curve.stage1_exhausted;
    for (const CurvePoint& p : curve.points) exhausted = exhausted || p.budget_exhausted;
    json summary{{"command", "capture"},
                 {"verdict", verdict_name(curve.verdict)},
                 {"p0", curve.p0},
                 {"points", curve.points.size()},
                 {"fit_C", curve.fit_C},
                 {"fit_r2", curve.fit_r2},
                 {"pow_kappa", curve.pow_kappa},
                 {"budget_exhausted", exhausted},
                 {"out", out}};
    std::cout << summary.dump(2) << "\n";
    return 0;
}

// -------------------------------------------------------------- selftest

struct SelftestArgs {
    std::vector<std::string> suites;
    int fuzz = 10000;
    double perturb_dual_eps = 0.0;
};

struct SuiteOutcome {
    bool pass = true;
    std::string detail;
};

void suite_check(SuiteOutcome& out, bool ok, const std::string& what) {
    if (!ok && out.pass) {
        out.pass = false;
        out.detail = what;
    }
}

std::vector<double> softmax_vec(const std::vector<double>& z) {
    double mx = *std::max_element(z.begin(), z.end());
    std::vector<double> a(z.size());
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) sum += a[i] = std::exp(z[i] - mx);
    for (double& v : a) v /= sum;
    return a;
}

// Derivative tensors of one softmax component a_c with respect to the logits:
//   grad[p]      = a_c (d_cp - a_p)
//   hess[p][q]   = a_c [(d_cp - a_p)(d_cq - a_q) - a_p (d_pq - a_q)]
//   third[p][q][r] = d hess[p][q] / d z_r, expanded by the product rule.
struct SoftmaxDerivs {
    std::vector<double> a;
    int c = 0;
    double D(int p) const { return (p == c ? 1.0 : 0.0) - a[static_cast<size_t>(p)]; }
    double ap(int p) const { return a[static_cast<size_t>(p)]; }
    double grad(int p) const { return ap(c) * D(p); }
    double hess(int p, int q) const {
        return ap(c) * (D(p) * D(q) - ap(p) * ((p == q ? 1.0 : 0.0) - ap(q)));
    }
    double third(int p, int q, int r) const {
        double dpq = p == q ? 1.0 : 0.0, dpr = p == r ? 1.0 : 0.0, dqr = q == r ? 1.0 : 0.0;
        return ap(c) * D(r) * (D(p) * D(q) - ap(p) * (dpq - ap(q))) +
               ap(c) * (-ap(p) * (dpr - ap(r)) * D(q) - D(p) * ap(q) * (dqr - ap(r)) -
                        ap(p) * (dpr - ap(r)) * (dpq - ap(q)) + ap(p) * ap(q) * (dqr - ap(r)));
    }
};

void suite_softmax_bounds(int fuzz, SuiteOutcome& out) {
    Rng rng(0x5e1f7e5701ULL);
    for (int iter = 0; iter < fuzz && out.pass; ++iter) {
        int n = 2 + static_cast<int>(rng.below(9));
        double scale = std::exp(rng.uniform() * 4.0 - 2.0);
        std::vector<double> z(static_cast<size_t>(n));
        for (double& v : z) v = rng.normal() * scale;
        SoftmaxDerivs sd{softmax_vec(z), static_cast<int>(rng.below(static_cast<uint64_t>(n)))};
        const std::vector<double>& a = sd.a;

        double total = 0.0;
        for (int c = 0; c < n; ++c) {
            double row = 0.0;
            for (int p = 0; p < n; ++p)
                row += std::fabs(a[static_cast<size_t>(c)] * ((c == p ? 1.0 : 0.0) - a[static_cast<size_t>(p)]));
            suite_check(out, row <= 2.0 * a[static_cast<size_t>(c)] + 1e-12,
                        "softmax gradient 1-norm exceeded 2 a_c");
            total += row;
        }
        suite_check(out, total <= 2.0 + 1e-12, "softmax jacobian entrywise 1-norm exceeded 2");

        double h_norm = 0.0, t_norm = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = 0; q < n; ++q) {
                h_norm += std::fabs(sd.hess(p, q));
                for (int r = 0; r < n; ++r) t_norm += std::fabs(sd.third(p, q, r));
            }
        double ac = a[static_cast<size_t>(sd.c)];
        suite_check(out, h_norm <= 6.0 * ac + 1e-12, "softmax hessian 1-norm exceeded 6 a_c");
        suite_check(out, t_norm <= 26.0 * ac + 1e-12, "softmax third-derivative 1-norm exceeded 26 a_c");

        // Spot-check the tensor formulas by central differences so the suite
        // cannot silently drift from the function it bounds.
        if (iter % 500 == 0) {
            const double h = 1e-4;
            int p = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
            int q = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
            int r = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
            auto shift = [&](int idx, double d) {
                std::vector<double> zz = z;
                zz[static_cast<size_t>(idx)] += d;
                return zz;
            };
            std::vector<double> ap = softmax_vec(shift(p, h)), am = softmax_vec(shift(p, -h));
            double g_num = (ap[static_cast<size_t>(sd.c)] - am[static_cast<size_t>(sd.c)]) / (2.0 * h);
            suite_check(out, std::fabs(g_num - sd.grad(p)) <= 1e-6,
                        "softmax gradient formula disagrees with finite differences");
            SoftmaxDerivs sp{softmax_vec(shift(q, h)), sd.c}, sm{softmax_vec(shift(q, -h)), sd.c};
            double h_num = (sp.grad(p) - sm.grad(p)) / (2.0 * h);
            suite_check(out, std::fabs(h_num - sd.hess(p, q)) <= 1e-6,
                        "softmax hessian formula disagrees with finite differences");
            SoftmaxDerivs tp{softmax_vec(shift(r, h)), sd.c}, tm{softmax_vec(shift(r, -h)), sd.c};
            double t_num = (tp.hess(p, q) - tm.hess(p, q)) / (2.0 * h);
            suite_check(out, std::fabs(t_num - sd.third(p, q, r)) <= 1e-6,
                        "softmax third-derivative formula disagrees with finite differences");
        }

        if (iter % 16 == 0) {
            int m = 2 + static_cast<int>(rng.below(7));
            std::vector<double> z2(static_cast<size_t>(m));
            for (double& v : z2) v = rng.normal() * scale;
            std::vector<double> a2 = softmax_vec(z2);
            Mat M = Mat::gaussian(n, m, rng), N = Mat::gaussian(n, m, rng);
            double tr = softmax_jacobian_trace(a, a2, M, N);
            suite_check(out, std::fabs(tr) <= 4.0 * M.max_abs() * N.max_abs() + 1e-12,
                        "jacobian trace exceeded 4 |M|max |N|max");

            auto prob_rows = [&](int rows, int cols) {
                Mat p(rows, cols);
                std::vector<double> zz(static_cast<size_t>(cols));
                for (int rr = 0; rr < rows; ++rr) {
                    for (double& v : zz) v = rng.normal() * scale;
                    std::vector<double> row = softmax_vec(zz);
                    for (int j = 0; j < cols; ++j) p(rr, j) = row[static_cast<size_t>(j)];
                }
                return p;
            };
            Mat A1 = prob_rows(n, n), A2 = prob_rows(m, m);
            Mat all = softmax_jacobian_trace_all(A1, A2, M, N);
            for (int i = 0; i < n && out.pass; ++i)
                for (int j = 0; j < m; ++j) {
                    std::vector<double> r1(static_cast<size_t>(n)), r2(static_cast<size_t>(m));
                    for (int kk = 0; kk < n; ++kk) r1[static_cast<size_t>(kk)] = A1(i, kk);
                    for (int kk = 0; kk < m; ++kk) r2[static_cast<size_t>(kk)] = A2(j, kk);
                    double direct = softmax_jacobian_trace(r1, r2, M, N);
                    double tol = 1e-10 * std::max(1.0, std::fabs(direct));
                    suite_check(out, std::fabs(all(i, j) - direct) <= tol,
                                "hadamard trace identity disagrees with the direct contraction");
                }
        }
    }
}

// A joint-PSD covariance triple from two Gaussian factor matrices.
void random_cov_triple(int t, int m, Rng& rng, Mat& s11, Mat& s12, Mat& s22) {
    Mat g1 = Mat::gaussian(t, m, rng), g2 = Mat::gaussian(t, m, rng);
    s11 = matmul_nt(g1, g1);
    s12 = matmul_nt(g1, g2);
    s22 = matmul_nt(g2, g2);
    s11 *= 1.0 / m;
    s12 *= 1.0 / m;
    s22 *= 1.0 / m;
}

void suite_factorization(int /*fuzz*/, SuiteOutcome& out) {
    const int T = 3, n_draws = 20000;
    Rng rng(0xfac70f12ULL);
    Mat s11, s12, s22;
    random_cov_triple(T, T + 2, rng, s11, s12, s22);
    ScorePairSampler sampler(s11, s12, s22);
    ScorePairSampler::Workspace ws = sampler.make_workspace();
    Mat s1, s2;
    std::vector<double> sum(81, 0.0), sq(81, 0.0);
    for (int d = 0; d < n_draws; ++d) {
        sampler.draw(rng, s1, s2, ws);
        int k = 0;
        for (int aa = 0; aa < T; ++aa)
            for (int cc = 0; cc < T; ++cc)
                for (int bb = 0; bb < T; ++bb)
                    for (int ee = 0; ee < T; ++ee, ++k) {
                        double v = s1(aa, cc) * s2(bb, ee);
                        sum[static_cast<size_t>(k)] += v;
                        sq[static_cast<size_t>(k)] += v * v;
                    }
    }
    int k = 0;
    for (int aa = 0; aa < T; ++aa)
        for (int cc = 0; cc < T; ++cc)
            for (int bb = 0; bb < T; ++bb)
                for (int ee = 0; ee < T; ++ee, ++k) {
                    double mean = sum[static_cast<size_t>(k)] / n_draws;
                    double var = std::max(0.0, (sq[static_cast<size_t>(k)] - n_draws * mean * mean) /
                                                   (n_draws - 1.0));
                    double se = std::sqrt(var / n_draws);
                    double target = s12(aa, bb) * s12(cc, ee);
                    suite_check(out, std::fabs(mean - target) <= 4.5 * se + 1e-9,
                                "score product moment misses sigma12[a,b] sigma12[c,e] by over 4.5 SE");
                }
}

void suite_sampler_equivalence(int /*fuzz*/, SuiteOutcome& out) {
    const int T = 3, n_draws = 20000;
    Rng setup(0x5a3b1e77ULL);
    Mat s11, s12, s22;
    random_cov_triple(T, T + 3, setup, s11, s12, s22);

    struct Acc {
        std::vector<double> sum, sq;
        explicit Acc(size_t n) : sum(n, 0.0), sq(n, 0.0) {}
        void add(size_t i, double v) {
            sum[i] += v;
            sq[i] += v * v;
        }
        double mean(size_t i, int n) const { return sum[i] / n; }
        double se(size_t i, int n) const {
            double m = mean(i, n);
            return std::sqrt(std::max(0.0, (sq[i] - n * m * m) / (n - 1.0)) / n);
        }
    };
    Acc fast_means(18), naive_means(18), fast_cross(81), naive_cross(81);

    auto record = [&](Acc& means, Acc& cross, const Mat& s1, const Mat& s2) {
        size_t i = 0;
        for (int aa = 0; aa < T; ++aa)
            for (int cc = 0; cc < T; ++cc, ++i) means.add(i, s1(aa, cc));
        for (int bb = 0; bb < T; ++bb)
            for (int ee = 0; ee < T; ++ee, ++i) means.add(i, s2(bb, ee));
        size_t k = 0;
        for (int aa = 0; aa < T; ++aa)
            for (int cc = 0; cc < T; ++cc)
                for (int bb = 0; bb < T; ++bb)
                    for (int ee = 0; ee < T; ++ee, ++k) cross.add(k, s1(aa, cc) * s2(bb, ee));
    };

    ScorePairSampler sampler(s11, s12, s22);
    ScorePairSampler::Workspace ws = sampler.make_workspace();
    Mat s1, s2;
    Rng rf(0xfa57d3a0ULL);
    for (int d = 0; d < n_draws; ++d) {
        sampler.draw(rf, s1, s2, ws);
        record(fast_means, fast_cross, s1, s2);
    }
    Rng rn(0x0a1ed4a7ULL);
    for (int d = 0; d < n_draws; ++d) {
        naive_joint_sample(s11, s12, s22, rn, s1, s2);
        record(naive_means, naive_cross, s1, s2);
    }

    for (size_t i = 0; i < 18 && out.pass; ++i) {
        double gap = std::fabs(fast_means.mean(i, n_draws) - naive_means.mean(i, n_draws));
        double se = std::hypot(fast_means.se(i, n_draws), naive_means.se(i, n_draws));
        suite_check(out, gap <= 4.5 * se + 1e-9, "fast and dense sampler means disagree by over 4.5 SE");
    }
    for (size_t i = 0; i < 81 && out.pass; ++i) {
        double gap = std::fabs(fast_cross.mean(i, n_draws) - naive_cross.mean(i, n_draws));
        double se = std::hypot(fast_cross.se(i, n_draws), naive_cross.se(i, n_draws));
        suite_check(out, gap <= 4.5 * se + 1e-9,
                    "fast and dense sampler cross moments disagree by over 4.5 SE");
    }
}

void suite_duality(int /*fuzz*/, SuiteOutcome& out) {
    const double pi = 3.14159265358979323846;
    DualResult full = dual_activation(1.0, 1.0, 1.0, Activation::relu);
    suite_check(out, std::fabs(full.value - 0.5) <= 1e-12, "relu dual at full correlation is not 1/2");
    suite_check(out, std::fabs(full.derivative_value - 0.5) <= 1e-12,
                "relu dual derivative at full correlation is not 1/2");
    DualResult ortho = dual_activation(1.0, 0.0, 1.0, Activation::relu);
    suite_check(out, std::fabs(ortho.value - 1.0 / (2.0 * pi)) <= 1e-12,
                "relu dual at zero correlation is not 1/(2 pi)");
    suite_check(out, std::fabs(ortho.derivative_value - 0.25) <= 1e-12,
                "relu dual derivative at zero correlation is not 1/4");

    DualResult lo = dual_activation(1.0, 0.6, 1.0, Activation::gelu, 24);
    DualResult hi = dual_activation(1.0, 0.6, 1.0, Activation::gelu, 48);
    suite_check(out, std::fabs(lo.value - hi.value) <= 1e-8, "gelu quadrature order instability (value)");
    suite_check(out, std::fabs(lo.derivative_value - hi.derivative_value) <= 1e-8,
                "gelu quadrature order instability (derivative)");

    auto cdf = [&](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
    auto pdf = [&](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * pi); };
    for (double x : {-2.5, -0.3, 0.0, 0.7, 3.1}) {
        suite_check(out, std::fabs(gelu_value(x) - x * cdf(x)) <= 1e-12,
                    "gelu value disagrees with x Phi(x)");
        suite_check(out, std::fabs(gelu_derivative(x) - (cdf(x) + x * pdf(x))) <= 1e-12,
                    "gelu derivative disagrees with Phi(x) + x phi(x)");
    }

    const double cases[4][3] = {{1.0, 0.7, 1.0}, {1.0, -0.5, 1.0}, {2.0, 0.3, 0.5}, {1.5, 1.2, 1.0}};
    Rng rng(0xd0a117ULL);
    const int n = 200000;
    for (const double* kc : cases) {
        double k11 = kc[0], k12 = kc[1], k22 = kc[2];
        for (int which = 0; which < 2 && out.pass; ++which) {
            Activation act = which == 1 ? Activation::gelu : Activation::relu;
            DualResult d = dual_activation(k11, k12, k22, act);
            double sv = 0.0, sv2 = 0.0, sdr = 0.0, sdr2 = 0.0;
            for (int i = 0; i < n; ++i) {
                double z1 = rng.normal(), z2 = rng.normal();
                double u = std::sqrt(k11) * z1;
                double v = (k12 / std::sqrt(k11)) * z1 +
                           std::sqrt(std::max(0.0, k22 - k12 * k12 / k11)) * z2;
                double pv, pd;
                if (which == 1) {
                    pv = (u * cdf(u)) * (v * cdf(v));
                    pd = (cdf(u) + u * pdf(u)) * (cdf(v) + v * pdf(v));
                } else {
                    pv = (u > 0 ? u : 0.0) * (v > 0 ? v : 0.0);
                    pd = (u > 0 ? 1.0 : 0.0) * (v > 0 ? 1.0 : 0.0);
                }
                sv += pv;
                sv2 += pv * pv;
                sdr += pd;
                sdr2 += pd * pd;
            }
            auto band = [&](double s, double s2, double target, const char* what) {
                double mean = s / n;
                double var = std::max(0.0, (s2 - n * mean * mean) / (n - 1.0));
                double se = std::sqrt(var / n);
                suite_check(out, std::fabs(mean - target) <= 5.0 * se + 1e-9, what);
            };
            band(sv, sv2, d.value,
                 which == 1 ? "gelu dual value misses its Monte Carlo check"
                            : "relu dual value misses its Monte Carlo check");
            band(sdr, sdr2, d.derivative_value,
                 which == 1 ? "gelu dual derivative misses its Monte Carlo check"
                            : "relu dual derivative misses its Monte Carlo check");
        }
    }
}

int run_selftest(const SelftestArgs& a) {
    require(a.fuzz >= 1, ErrorCode::BadConfig, "selftest: --fuzz must be positive");
    if (a.perturb_dual_eps != 0.0) set_dual_perturbation(a.perturb_dual_eps);

    using Entry = std::pair<const char*, void (*)(int, SuiteOutcome&)>;
    const std::vector<Entry> all{{"softmax-bounds", suite_softmax_bounds},
                                 {"factorization", suite_factorization},
                                 {"sampler-equivalence", suite_sampler_equivalence},
                                 {"duality", suite_duality}};
    std::vector<Entry> chosen;
    if (a.suites.empty()) {
        chosen = all;
    } else {
        for (const std::string& name : a.suites) {
            auto it = std::find_if(all.begin(), all.end(), [&](const Entry& e) { return name == e.first; });
            require(it != all.end(), ErrorCode::BadConfig, "selftest: unknown suite '" + name + "'");
            chosen.push_back(*it);
        }
    }

    int failed = 0;
    double total_ms = 0.0;
    for (const Entry& entry : chosen) {
        auto t0 = std::chrono::steady_clock::now();
        SuiteOutcome outcome;
        entry.second(a.fuzz, outcome);
        double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        total_ms += ms;
        if (outcome.pass) {
            std::printf("suite %s: PASS (%.0f ms)\n", entry.first, ms);
        } else {
            ++failed;
            std::printf("suite %s: FAIL (%.0f ms) -- %s\n", entry.first, ms, outcome.detail.c_str());
        }
    }
    std::printf("selftest: %d/%d suites passed (%.0f ms total)\n", static_cast<int>(chosen.size()) - failed,
                static_cast<int>(chosen.size()), total_ms);
    if (failed > 0)
        return emit_error("SelftestFailed", std::to_string(failed) + " suite(s) failed", 4);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kcap: infinite-width kernel experiment toolkit"};
    app.require_subcommand(1);

    GenArgs ga;
    KernelArgs ka;
    CaptureArgs ca;
    SelftestArgs sa;

    CLI::App* gen = app.add_subcommand("gen", "Generate or verify a task-instance dataset");
    gen->add_option("--task", ga.task, "Task kind: induction, sort, string_match, cfg, spp, mincut");
    gen->add_option("--t", ga.t, "Instance size");
    gen->add_option("--count", ga.count, "Number of instances");
    gen->add_option("--seed", ga.seed, "Master seed");
    gen->add_option("--out", ga.out, "Output directory (the dataset directory under --verify)");
    gen->add_option("--vocab", ga.vocab, "Alphabet size for induction and sort");
    gen->add_option("--alpha", ga.alpha, "Expected degree for spp and mincut");
    gen->add_option("--grammar-seed", ga.grammar_seed, "cfg: grammar construction seed");
    gen->add_option("--grammar", ga.grammar_path, "cfg: grammar JSON file (overrides --grammar-seed)");
    gen->add_option("--embed-dim", ga.embed_dim, "Also write embeddings.bin at this dimension (0 = skip)");
    gen->add_option("--pe", ga.pe, "Embedding position encoding: none, sinusoidal, rotary");
    gen->add_flag("--verify", ga.verify, "Re-run the oracles over an existing dataset directory");

    CLI::App* kernel = app.add_subcommand("kernel", "Evaluate the kernel for a pair of instances");
    kernel->add_option("--a", ka.a_path, "First instance file (JSON lines)");
    kernel->add_option("--ai", ka.ai, "Line index into --a");
    kernel->add_option("--b", ka.b_path, "Second instance file (defaults to --a)");
    kernel->add_option("--bi", ka.bi, "Line index into --b");
    kernel->add_option("--backend", ka.backend, "Kernel backend: transformer, fcn");
    kernel->add_option("--depth", ka.depth, "Number of blocks (layers for fcn)");
    kernel->add_option("--mode", ka.mode, "Kernel mode: nngp, ntk");
    kernel->add_option("--n-mc", ka.n_mc, "Monte Carlo draws per attention step");
    kernel->add_option("--seed", ka.seed, "Monte Carlo seed");
    kernel->add_flag("--antithetic", ka.antithetic, "Pair each draw with its negation");
    kernel->add_option("--workers", ka.workers, "Worker threads (default: KCAP_WORKERS or 1)");
    kernel->add_option("--embed-dim", ka.embed_dim, "Embedding dimension");
    kernel->add_option("--pe", ka.pe, "Embedding position encoding: none, sinusoidal, rotary");
    kernel->add_flag("--special-token-flags", ka.special_token_flags,
                     "Append first/last-token indicator channels in the covariance");
    kernel->add_option("--sigma-w", ka.sigma_w, "MLP weight standard deviation");
    kernel->add_option("--sigma-b", ka.sigma_b, "MLP bias standard deviation");
    kernel->add_option("--activation", ka.activation, "Activation: relu, gelu");
    kernel->add_option("--out", ka.out, "Output directory for gram.bin / report.json (optional)");
    kernel->add_flag("--flop-report", ka.flop_report, "Add finite-width per-forward FLOP counts");
    kernel->add_flag("--validate-finite", ka.validate_finite,
                     "Compare the propagated covariance against a finite-width simulation");
    kernel->add_option("--d-model", ka.d_model, "Finite width for --flop-report / --validate-finite");
    kernel->add_option("--heads", ka.heads, "Attention heads for --flop-report / --validate-finite");
    kernel->add_option("--d-k", ka.d_k, "Per-head key dimension (0 = d_model / heads)");
    kernel->add_option("--draws", ka.draws, "Weight draws for --validate-finite");

    CLI::App* capture = app.add_subcommand("capture", "Run a capture experiment from a config file");
    capture->add_option("--config", ca.config_path, "Capture config JSON file");
    capture->add_option("--out", ca.out, "Output directory (curve.csv, fit.json, checkpoint.json, manifest.json)");
    capture->add_flag("--resume", ca.resume, "Replay completed grid points from checkpoint.json");
    capture->add_option("--workers", ca.workers, "Worker threads (overrides config and KCAP_WORKERS)");
    capture->add_option("--r2-min", ca.r2_min, "Log-fit r^2 threshold for a capture verdict");
    capture->add_option("--kappa-min", ca.kappa_min, "Power-fit exponent threshold for a non-capture verdict");

    CLI::App* selftest = app.add_subcommand("selftest", "Run fast internal consistency suites");
    selftest->add_option("--suite", sa.suites,
                         "Suites to run (repeatable): softmax-bounds, factorization, "
                         "sampler-equivalence, duality (default: all)");
    selftest->add_option("--fuzz", sa.fuzz, "Fuzzing iterations for the bound suite");
    selftest->add_option("--perturb-dual-eps", sa.perturb_dual_eps,
                         "Shift the relu dual value by eps (the duality suite must then fail)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return emit_error("BadConfig", std::string("argument parsing: ") + e.what(), 2);
    }

    try {
        if (gen->parsed()) return run_gen(ga);
        if (kernel->parsed()) return run_kernel(ka);
        if (capture->parsed()) return run_capture_cmd(ca);
        if (selftest->parsed()) return run_selftest(sa);
    } catch (const Error& e) {
        return emit_error(e);
    } catch (const std::exception& e) {
        return emit_error("Internal", e.what(), 4);
    }
    return 0;
}
