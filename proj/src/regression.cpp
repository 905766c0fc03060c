#include "kcap/regression.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kcap/error.hpp"
#include "kcap/linalg.hpp"
#include "kcap/rng.hpp"
#include "kcap/kernels.hpp"
#include "kcap/threading.hpp"

namespace kcap {

namespace {

KernelConfig with_pair_seed(const KernelConfig& cfg, const Mat& x1, const Mat& x2) {
    KernelConfig c = cfg;
    const uint64_t h1 = content_hash(x1), h2 = content_hash(x2);
    c.mc.seed = mix_seed(cfg.mc.seed, std::min(h1, h2), std::max(h1, h2));
    return c;
}

}  // namespace

KernelEval kernel_eval(const KernelConfig& cfg, const Mat& x1, const Mat& x2) {
    require(cfg.depth >= 1, ErrorCode::BadConfig, "kernel_eval: depth must be >= 1");
    if (cfg.backend == KernelBackendKind::fcn) {
        if (cfg.mode == KernelMode::ntk) return {fcn_ntk(x1, x2, cfg.depth, cfg.params).theta12, 0.0};
        return {fcn_kernel(x1, x2, cfg.depth, cfg.params).k12, 0.0};
    }
    const KernelConfig c = with_pair_seed(cfg, x1, x2);
    const PropagateResult r = propagate_transformer(x1, x2, c.depth, c.params, c.mc, c.mode, c.pe);
    return {r.k_value, r.k_stderr};
}

Gram assemble_gram(const std::vector<Mat>& xs, const KernelConfig& cfg, int workers) {
    const int p = static_cast<int>(xs.size());
    require(p >= 1, ErrorCode::BadConfig, "assemble_gram: need at least one input");

    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<size_t>(p) * static_cast<size_t>(p + 1) / 2);
    for (int i = 0; i < p; ++i)
        for (int j = i; j < p; ++j) pairs.emplace_back(i, j);

    // Each pair's value is fully determined by its content-derived seed, so
    // the slots can be filled in any scheduling order.
    std::vector<KernelEval> vals(pairs.size());
    chunked_reduce<int>(
        static_cast<int64_t>(pairs.size()), 1, workers, [] { return 0; },
        [&](int&, int64_t begin, int64_t end) {
            for (int64_t k = begin; k < end; ++k)
                vals[static_cast<size_t>(k)] =
                    kernel_eval(cfg, xs[static_cast<size_t>(pairs[static_cast<size_t>(k)].first)],
                                xs[static_cast<size_t>(pairs[static_cast<size_t>(k)].second)]);
        },
        [](int&) {});

    Gram g{Mat(p, p), Mat(p, p)};
    for (size_t k = 0; k < pairs.size(); ++k) {
        const auto [i, j] = pairs[k];
        g.k(i, j) = g.k(j, i) = vals[k].value;
        g.se(i, j) = g.se(j, i) = vals[k].se;
    }
    return g;
}

std::vector<KernelEval> kernel_row(const KernelConfig& cfg, const Mat& x, const std::vector<Mat>& xs, int workers) {
    std::vector<KernelEval> row(xs.size());
    chunked_reduce<int>(
        static_cast<int64_t>(xs.size()), 1, workers, [] { return 0; },
        [&](int&, int64_t begin, int64_t end) {
            for (int64_t k = begin; k < end; ++k)
                row[static_cast<size_t>(k)] = kernel_eval(cfg, x, xs[static_cast<size_t>(k)]);
        },
        [](int&) {});
    return row;
}

RidgeSolution ridge_solve(const Gram& g, const Mat& y, double kappa, bool clip_spectrum) {
    const int p = g.k.rows();
    require(g.k.cols() == p, ErrorCode::ShapeMismatch, "ridge_solve: Gram must be square");
    require(y.rows() == p, ErrorCode::ShapeMismatch, "ridge_solve: label rows != Gram size");
    require(y.cols() >= 1, ErrorCode::ShapeMismatch, "ridge_solve: labels need at least one column");
    require(kappa > 0.0, ErrorCode::BadConfig, "ridge_solve: kappa must be positive");
    require(g.k.all_finite() && y.all_finite(), ErrorCode::NotFinite, "ridge_solve: non-finite input");

    Mat a = g.k;
    a.symmetrize();
    if (clip_spectrum) {
        const SymEig eig = sym_eig(a);
        Mat rebuilt(p, p, 0.0);
        for (int j = 0; j < p; ++j) {
            const double lam = eig.values[static_cast<size_t>(j)];
            if (lam <= 0.0) continue;
            for (int r = 0; r < p; ++r)
                for (int c = 0; c < p; ++c) rebuilt(r, c) += lam * eig.vectors(r, j) * eig.vectors(c, j);
        }
        a = rebuilt;
        a.symmetrize();
    }
    for (int i = 0; i < p; ++i) a(i, i) += kappa;

    RidgeSolution sol;
    try {
        const CholResult ch = cholesky_psd(a);
        sol.alpha = solve_cholesky(ch.L, y);
    } catch (const Error& e) {
        throw Error(ErrorCode::SingularSystem, std::string("ridge_solve: factorization failed (") + e.what() + ")");
    }
    require(sol.alpha.all_finite(), ErrorCode::SingularSystem, "ridge_solve: non-finite coefficients");

    // Residual against the system we claim to have solved, before any repair
    // jitter the factorization may have added internally.
    const Mat resid = matmul(a, sol.alpha) - y;
    sol.residual_inf = resid.max_abs();
    sol.max_abs_alpha = sol.alpha.max_abs();
    const double tol = 1e-8 * y.max_abs();
    require(sol.residual_inf <= tol, ErrorCode::SingularSystem,
            "ridge_solve: residual " + std::to_string(sol.residual_inf) + " exceeds " + std::to_string(tol));
    return sol;
}

double default_kappa(const Gram& g) {
    double tr = 0.0;
    for (int i = 0; i < g.k.rows(); ++i) tr += g.k(i, i);
    return std::max(1e-3 * tr / static_cast<double>(g.k.rows()), 1e-12);
}

FittedPredictor fit_predictor(const std::vector<Mat>& xs, const Mat& y, const KernelConfig& cfg, double kappa,
                              int workers) {
    require(!xs.empty(), ErrorCode::BadConfig, "fit_predictor: no training inputs");
    require(y.rows() == static_cast<int>(xs.size()), ErrorCode::ShapeMismatch,
            "fit_predictor: label rows != training count");
    const Gram g = assemble_gram(xs, cfg, workers);
    const double kap = kappa > 0.0 ? kappa : default_kappa(g);
    RidgeSolution sol = ridge_solve(g, y, kap);

    FittedPredictor f;
    f.train_xs = xs;
    f.train_hashes.reserve(xs.size());
    for (const Mat& x : xs) f.train_hashes.push_back(content_hash(x));
    f.alpha = std::move(sol.alpha);
    f.kappa = kap;
    f.max_abs_alpha = sol.max_abs_alpha;
    f.config = cfg;
    f.stage = FitStage::initial;
    return f;
}

Prediction predict(const FittedPredictor& f, const Mat& x, int workers) {
    require(!f.train_xs.empty(), ErrorCode::BadConfig, "predict: no training inputs attached");
    require(f.alpha.rows() == static_cast<int>(f.train_xs.size()), ErrorCode::ShapeMismatch,
            "predict: coefficient rows != training count");
    const std::vector<KernelEval> row = kernel_row(f.config, x, f.train_xs, workers);

    const int c = f.alpha.cols();
    Prediction out;
    out.values.assign(static_cast<size_t>(c), 0.0);
    out.ses.assign(static_cast<size_t>(c), 0.0);
    for (int j = 0; j < c; ++j) {
        double v = 0.0, var = 0.0;
        for (size_t nu = 0; nu < row.size(); ++nu) {
            const double a = f.alpha(static_cast<int>(nu), j);
            v += a * row[nu].value;
            var += a * a * row[nu].se * row[nu].se;
        }
        out.values[static_cast<size_t>(j)] = v;
        out.ses[static_cast<size_t>(j)] = std::sqrt(var);
    }

    out.argmax = static_cast<int>(std::max_element(out.values.begin(), out.values.end()) - out.values.begin());
    if (c >= 2) {
        double top1 = out.values[static_cast<size_t>(out.argmax)], top2 = -HUGE_VAL;
        for (int j = 0; j < c; ++j)
            if (j != out.argmax) top2 = std::max(top2, out.values[static_cast<size_t>(j)]);
        out.margin = top1 - top2;
        out.conclusive = out.margin >= 0.5;
    }
    return out;
}

FittedPredictor two_step_adapt(const FittedPredictor& f1, const std::vector<Mat>& new_xs, const Mat& new_y,
                               double kappa, int workers) {
    require(f1.stage == FitStage::initial, ErrorCode::StageViolation,
            "two_step_adapt: stage-one predictor is already adapted");
    require(!new_xs.empty(), ErrorCode::BadConfig, "two_step_adapt: no adaptation inputs");
    require(new_y.rows() == static_cast<int>(new_xs.size()), ErrorCode::ShapeMismatch,
            "two_step_adapt: label rows != adaptation count");
    require(new_y.cols() == f1.alpha.cols(), ErrorCode::ShapeMismatch,
            "two_step_adapt: label columns != stage-one outputs");

    Mat resid = new_y;
    for (size_t i = 0; i < new_xs.size(); ++i) {
        const Prediction p1 = predict(f1, new_xs[i], workers);
        for (int j = 0; j < resid.cols(); ++j) resid(static_cast<int>(i), j) -= p1.values[static_cast<size_t>(j)];
    }

    const Gram g2 = assemble_gram(new_xs, f1.config, workers);
    const double kap = kappa > 0.0 ? kappa : default_kappa(g2);
    const RidgeSolution sol2 = ridge_solve(g2, resid, kap);

    const int p1n = static_cast<int>(f1.train_xs.size()), p2n = static_cast<int>(new_xs.size());
    FittedPredictor f;
    f.train_xs = f1.train_xs;
    f.train_xs.insert(f.train_xs.end(), new_xs.begin(), new_xs.end());
    f.train_hashes = f1.train_hashes;
    for (const Mat& x : new_xs) f.train_hashes.push_back(content_hash(x));
    f.alpha = Mat(p1n + p2n, f1.alpha.cols());
    for (int i = 0; i < p1n; ++i)
        for (int j = 0; j < f1.alpha.cols(); ++j) f.alpha(i, j) = f1.alpha(i, j);
    for (int i = 0; i < p2n; ++i)
        for (int j = 0; j < f1.alpha.cols(); ++j) f.alpha(p1n + i, j) = sol2.alpha(i, j);
    f.kappa = kap;
    f.max_abs_alpha = std::max(f1.alpha.max_abs(), sol2.max_abs_alpha);
    f.config = f1.config;
    f.stage = FitStage::adapted;
    return f;
}

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    return buf;
}

uint64_t parse_hex64(const std::string& s) {
    require(!s.empty() && s.size() <= 16, ErrorCode::IoError, "predictor json: bad hex field '" + s + "'");
    uint64_t v = 0;
    for (char ch : s) {
        int d;
        if (ch >= '0' && ch <= '9') d = ch - '0';
        else if (ch >= 'a' && ch <= 'f') d = ch - 'a' + 10;
        else if (ch >= 'A' && ch <= 'F') d = ch - 'A' + 10;
        else throw Error(ErrorCode::IoError, "predictor json: bad hex field '" + s + "'");
        v = (v << 4) | static_cast<uint64_t>(d);
    }
    return v;
}

template <class Enum>
std::string enum_to_name(Enum v, const std::vector<std::pair<Enum, const char*>>& table, const char* what) {
    for (const auto& [e, n] : table)
        if (e == v) return n;
    throw Error(ErrorCode::BadConfig, std::string("predictor json: unknown ") + what);
}

template <class Enum>
Enum name_to_enum(const std::string& s, const std::vector<std::pair<Enum, const char*>>& table, const char* what) {
    for (const auto& [e, n] : table)
        if (s == n) return e;
    throw Error(ErrorCode::IoError, std::string("predictor json: unknown ") + what + " '" + s + "'");
}

const std::vector<std::pair<KernelBackendKind, const char*>>& backend_table() {
    static const std::vector<std::pair<KernelBackendKind, const char*>> t = {
        {KernelBackendKind::transformer, "transformer"}, {KernelBackendKind::fcn, "fcn"}};
    return t;
}
const std::vector<std::pair<KernelMode, const char*>>& mode_table() {
    static const std::vector<std::pair<KernelMode, const char*>> t = {{KernelMode::nngp, "nngp"},
                                                                      {KernelMode::ntk, "ntk"}};
    return t;
}
const std::vector<std::pair<PeMode, const char*>>& pe_table() {
    static const std::vector<std::pair<PeMode, const char*>> t = {
        {PeMode::none, "none"}, {PeMode::special_token_flags, "special_token_flags"}};
    return t;
}
const std::vector<std::pair<Activation, const char*>>& activation_table() {
    static const std::vector<std::pair<Activation, const char*>> t = {{Activation::relu, "relu"},
                                                                      {Activation::gelu, "gelu"}};
    return t;
}
const std::vector<std::pair<FitStage, const char*>>& stage_table() {
    static const std::vector<std::pair<FitStage, const char*>> t = {{FitStage::initial, "initial"},
                                                                    {FitStage::adapted, "adapted"}};
    return t;
}

nlohmann::json config_to_json(const KernelConfig& c) {
    return nlohmann::json{
        {"backend", enum_to_name(c.backend, backend_table(), "backend")},
        {"depth", c.depth},
        {"mode", enum_to_name(c.mode, mode_table(), "mode")},
        {"pe", enum_to_name(c.pe, pe_table(), "pe mode")},
        {"params",
         {{"sigma_w", c.params.sigma_w},
          {"sigma_b", c.params.sigma_b},
          {"activation", enum_to_name(c.params.activation, activation_table(), "activation")},
          {"ln_eps", c.params.ln_eps},
          {"gh_order", c.params.gh_order},
          {"ln_param_grad", c.params.ln_param_grad}}},
        {"mc",
         {{"n_mc", c.mc.n_mc},
          {"seed", hex64(c.mc.seed)},
          {"antithetic", c.mc.antithetic},
          {"workers", c.mc.workers},
          {"chunk", c.mc.chunk}}}};
}

KernelConfig config_from_json(const nlohmann::json& j) {
    KernelConfig c;
    c.backend = name_to_enum(j.at("backend").get<std::string>(), backend_table(), "backend");
    c.depth = j.at("depth").get<int>();
    c.mode = name_to_enum(j.at("mode").get<std::string>(), mode_table(), "mode");
    c.pe = name_to_enum(j.at("pe").get<std::string>(), pe_table(), "pe mode");
    const auto& p = j.at("params");
    c.params.sigma_w = p.at("sigma_w").get<double>();
    c.params.sigma_b = p.at("sigma_b").get<double>();
    c.params.activation = name_to_enum(p.at("activation").get<std::string>(), activation_table(), "activation");
    c.params.ln_eps = p.at("ln_eps").get<double>();
    c.params.gh_order = p.at("gh_order").get<int>();
    c.params.ln_param_grad = p.at("ln_param_grad").get<bool>();
    const auto& m = j.at("mc");
    c.mc.n_mc = m.at("n_mc").get<int64_t>();
    c.mc.seed = parse_hex64(m.at("seed").get<std::string>());
    c.mc.antithetic = m.at("antithetic").get<bool>();
    c.mc.workers = m.at("workers").get<int>();
    c.mc.chunk = m.at("chunk").get<int64_t>();
    return c;
}

}  // namespace

std::string kernel_config_to_json(const KernelConfig& c) { return config_to_json(c).dump(); }

KernelConfig kernel_config_from_json(const std::string& text) {
    try {
        return config_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("kernel config json: ") + e.what());
    }
}

std::string predictor_to_json(const FittedPredictor& f) {
    nlohmann::json j;
    j["format"] = "kcap-predictor";
    j["version"] = 1;
    j["stage"] = enum_to_name(f.stage, stage_table(), "stage");
    j["kappa"] = f.kappa;
    j["max_abs_alpha"] = f.max_abs_alpha;
    j["kernel"] = config_to_json(f.config);

    nlohmann::json hashes = nlohmann::json::array();
    for (uint64_t h : f.train_hashes) hashes.push_back(hex64(h));
    j["train_hashes"] = std::move(hashes);

    nlohmann::json alpha = nlohmann::json::array();
    for (int i = 0; i < f.alpha.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < f.alpha.cols(); ++c) row.push_back(f.alpha(i, c));
        alpha.push_back(std::move(row));
    }
    j["alpha"] = std::move(alpha);
    return j.dump(2);
}

FittedPredictor predictor_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("predictor json: parse failed: ") + e.what());
    }
    try {
        require(j.at("format").get<std::string>() == "kcap-predictor", ErrorCode::IoError,
                "predictor json: wrong format tag");
        require(j.at("version").get<int>() == 1, ErrorCode::IoError, "predictor json: unsupported version");

        FittedPredictor f;
        f.stage = name_to_enum(j.at("stage").get<std::string>(), stage_table(), "stage");
        f.kappa = j.at("kappa").get<double>();
        f.max_abs_alpha = j.at("max_abs_alpha").get<double>();
        f.config = config_from_json(j.at("kernel"));

        for (const auto& h : j.at("train_hashes")) f.train_hashes.push_back(parse_hex64(h.get<std::string>()));

        const auto& alpha = j.at("alpha");
        require(alpha.is_array() && !alpha.empty(), ErrorCode::IoError, "predictor json: alpha must be non-empty");
        const int rows = static_cast<int>(alpha.size());
        const int cols = static_cast<int>(alpha.at(0).size());
        require(rows == static_cast<int>(f.train_hashes.size()), ErrorCode::IoError,
                "predictor json: alpha rows != train_hashes length");
        f.alpha = Mat(rows, cols);
        for (int i = 0; i < rows; ++i) {
            const auto& row = alpha.at(static_cast<size_t>(i));
            require(static_cast<int>(row.size()) == cols, ErrorCode::IoError, "predictor json: ragged alpha");
            for (int c = 0; c < cols; ++c) f.alpha(i, c) = row.at(static_cast<size_t>(c)).get<double>();
        }
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("predictor json: missing or mistyped field: ") + e.what());
    }
}

void attach_train_inputs(FittedPredictor& f, const std::vector<Mat>& xs) {
    require(xs.size() == f.train_hashes.size(), ErrorCode::BadConfig,
            "attach_train_inputs: input count != stored hash count");
    for (size_t i = 0; i < xs.size(); ++i)
        require(content_hash(xs[i]) == f.train_hashes[i], ErrorCode::BadConfig,
                "attach_train_inputs: content hash mismatch at index " + std::to_string(i));
    f.train_xs = xs;
}

}  // namespace kcap
