#include "kcap/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kcap/error.hpp"

namespace kcap {

namespace {

constexpr uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(uint64_t& h, uint64_t v) {
    for (int byte = 0; byte < 8; ++byte) {
        h ^= (v >> (8 * byte)) & 0xffULL;
        h *= kFnvPrime;
    }
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    return buf;
}

uint64_t parse_hex64(const std::string& s) {
    require(!s.empty() && s.size() <= 16, ErrorCode::IoError, "bad hex field '" + s + "'");
    uint64_t v = 0;
    for (char ch : s) {
        int d;
        if (ch >= '0' && ch <= '9') d = ch - '0';
        else if (ch >= 'a' && ch <= 'f') d = ch - 'a' + 10;
        else if (ch >= 'A' && ch <= 'F') d = ch - 'A' + 10;
        else throw Error(ErrorCode::IoError, "bad hex field '" + s + "'");
        v = (v << 4) | static_cast<uint64_t>(d);
    }
    return v;
}

}  // namespace

const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::induction: return "induction";
        case TaskKind::sort: return "sort";
        case TaskKind::string_match: return "string_match";
        case TaskKind::cfg: return "cfg";
        case TaskKind::spp: return "spp";
        case TaskKind::mincut: return "mincut";
    }
    return "unknown";
}

TaskKind task_kind_from_name(const std::string& name) {
    for (TaskKind k : {TaskKind::induction, TaskKind::sort, TaskKind::string_match, TaskKind::cfg, TaskKind::spp,
                       TaskKind::mincut})
        if (name == task_kind_name(k)) return k;
    throw Error(ErrorCode::BadConfig, "unknown task kind '" + name + "'");
}

// ---------------------------------------------------------------- induction

TaskInstance gen_induction(int T, Rng& rng, int vocab, int forced_ik) {
    require(T >= 4, ErrorCode::TooShort, "gen_induction: T must be >= 4");
    require(vocab >= 2, ErrorCode::BadConfig, "gen_induction: vocab must be >= 2");

    const int trigger = static_cast<int>(rng.below(static_cast<uint64_t>(vocab)));
    const int half = (T + 1) / 2;  // ceil(T / 2)
    const int ik = forced_ik >= 0 ? forced_ik : static_cast<int>(rng.below(static_cast<uint64_t>(half)));
    require(ik < half, ErrorCode::BadConfig, "gen_induction: forced index out of range");

    TaskInstance inst;
    inst.kind = TaskKind::induction;
    inst.T = T;
    inst.vocab = vocab;
    inst.value_form = false;
    inst.tokens.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) inst.tokens[static_cast<size_t>(t)] = static_cast<int>(rng.below(vocab));

    // No stray triggers: every accidental occurrence becomes the next id.
    for (int t = 0; t < T; ++t)
        if (inst.tokens[static_cast<size_t>(t)] == trigger) inst.tokens[static_cast<size_t>(t)] = (trigger + 1) % vocab;
    inst.tokens[static_cast<size_t>(ik)] = trigger;
    inst.tokens[static_cast<size_t>(T - 1)] = trigger;

    inst.label = {static_cast<double>(inst.tokens[static_cast<size_t>(ik + 1)])};
    return inst;
}

// --------------------------------------------------------------------- sort

TaskInstance gen_sort(int T, int V, Rng& rng) {
    require(T >= 1, ErrorCode::TooShort, "gen_sort: T must be >= 1");
    require(V >= 2, ErrorCode::BadConfig, "gen_sort: vocabulary must have >= 2 values");

    std::vector<int> u(static_cast<size_t>(T));
    for (int& v : u) v = static_cast<int>(rng.below(static_cast<uint64_t>(V)));
    std::vector<int> s = u;
    std::sort(s.begin(), s.end());

    TaskInstance inst;
    inst.kind = TaskKind::sort;
    inst.T = T;
    inst.vocab = V + 1;  // values 0..V-1 plus SEP = V
    inst.value_form = false;
    inst.tokens = u;
    inst.tokens.push_back(V);
    inst.tokens.insert(inst.tokens.end(), s.begin(), s.end());
    inst.loss_mask.assign(static_cast<size_t>(2 * T + 1), 0);
    for (int i = T; i < 2 * T + 1; ++i) inst.loss_mask[static_cast<size_t>(i)] = 1;
    inst.label.assign(s.begin(), s.end());
    return inst;
}

double sort_score(const std::vector<int>& u, const std::vector<int>& rho) {
    std::vector<int> a = u, b = rho;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    require(a == b, ErrorCode::NotPermutation, "sort_score: rho is not a rearrangement of u");
    double psi = 0.0;
    for (size_t i = 0; i + 1 < rho.size(); ++i)
        psi += std::max(0.0, static_cast<double>(rho[i]) - static_cast<double>(rho[i + 1]));
    return psi;
}

// ------------------------------------------------------------- string match

namespace {

constexpr int kMatchAlphabet = 26;
constexpr int kMatchSep = 26;

bool has_full_match(const std::vector<int>& x, const std::array<int, 3>& m) {
    for (size_t p = 0; p + 3 <= x.size(); ++p)
        if (x[p] == m[0] && x[p + 1] == m[1] && x[p + 2] == m[2]) return true;
    return false;
}

bool has_near_miss(const std::vector<int>& x, const std::array<int, 3>& m) {
    for (size_t p = 0; p + 3 <= x.size(); ++p) {
        const int hits = (x[p] == m[0]) + (x[p + 1] == m[1]) + (x[p + 2] == m[2]);
        if (hits == 2) return true;
    }
    return false;
}

}  // namespace

std::array<int, 3> random_pattern(Rng& rng) {
    return {static_cast<int>(rng.below(kMatchAlphabet)), static_cast<int>(rng.below(kMatchAlphabet)),
            static_cast<int>(rng.below(kMatchAlphabet))};
}

TaskInstance gen_string_match(int T, const std::array<int, 3>& pattern, bool positive, Rng& rng) {
    require(T >= 3, ErrorCode::TooShort, "gen_string_match: T must be >= 3");
    for (int c : pattern)
        require(c >= 0 && c < kMatchAlphabet, ErrorCode::BadConfig, "gen_string_match: pattern symbol out of range");

    std::vector<int> x(static_cast<size_t>(T));
    if (positive) {
        for (int& v : x) v = static_cast<int>(rng.below(kMatchAlphabet));
        const int p = static_cast<int>(rng.below(static_cast<uint64_t>(T - 2)));
        for (int i = 0; i < 3; ++i) x[static_cast<size_t>(p + i)] = pattern[static_cast<size_t>(i)];
    } else {
        bool done = false;
        for (int attempt = 0; attempt < 200 && !done; ++attempt) {
            for (int& v : x) v = static_cast<int>(rng.below(kMatchAlphabet));
            // Plant a 2-of-3 near miss: copy the pattern, corrupt one slot.
            const int p = static_cast<int>(rng.below(static_cast<uint64_t>(T - 2)));
            const int c = static_cast<int>(rng.below(3));
            for (int i = 0; i < 3; ++i) x[static_cast<size_t>(p + i)] = pattern[static_cast<size_t>(i)];
            int other = static_cast<int>(rng.below(kMatchAlphabet - 1));
            if (other >= pattern[static_cast<size_t>(c)]) ++other;
            x[static_cast<size_t>(p + c)] = other;
            done = !has_full_match(x, pattern);
        }
        require(done, ErrorCode::BadConfig, "gen_string_match: could not build a match-free negative");
    }

    TaskInstance inst;
    inst.kind = TaskKind::string_match;
    inst.T = T;
    inst.vocab = kMatchAlphabet + 1;  // symbols plus SEP
    inst.value_form = false;
    inst.tokens = x;
    inst.tokens.push_back(kMatchSep);
    inst.tokens.insert(inst.tokens.end(), pattern.begin(), pattern.end());
    inst.label = {positive ? 1.0 : 0.0};
    return inst;
}

// ------------------------------------------------------------------ grammar

namespace {

constexpr uint64_t kGrammarLabel = 0x72616d6d61726bULL;

// Power iteration on the branching matrix; robust to imprimitive cycling by
// averaging log growth over a trailing window.
double branching_radius(const GrammarSpec& spec) {
    const int n = spec.n_vars;
    std::vector<double> m(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);
    for (const auto& r : spec.binary) {
        m[static_cast<size_t>(r.lhs) * n + r.left] += r.weight;
        m[static_cast<size_t>(r.lhs) * n + r.right] += r.weight;
    }
    std::vector<double> v(static_cast<size_t>(n), 1.0 / std::sqrt(static_cast<double>(n)));
    std::vector<double> w(static_cast<size_t>(n));
    double log_acc = 0.0;
    int window = 0;
    for (int it = 0; it < 1000; ++it) {
        double nrm = 0.0;
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += m[static_cast<size_t>(i) * n + j] * v[static_cast<size_t>(j)];
            w[static_cast<size_t>(i)] = s;
            nrm += s * s;
        }
        nrm = std::sqrt(nrm);
        if (nrm == 0.0) return 0.0;
        for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = w[static_cast<size_t>(i)] / nrm;
        if (it >= 1000 - 64) {
            log_acc += std::log(nrm);
            ++window;
        }
    }
    return std::exp(log_acc / window);
}

}  // namespace

GrammarSpec build_grammar(uint64_t seed) {
    GrammarSpec spec;
    Rng rng(mix_seed(seed, kGrammarLabel));
    const int rhs_choices = spec.n_vars - 1;  // the adversarial variable never appears on a RHS
    for (int a = 0; a < spec.n_vars; ++a) {
        const int nb = 2 + static_cast<int>(rng.below(2));
        for (int i = 0; i < nb; ++i)
            spec.binary.push_back({a, static_cast<int>(rng.below(rhs_choices)), static_cast<int>(rng.below(rhs_choices)),
                                   0.5 + rng.uniform()});
        const int nt = 1 + static_cast<int>(rng.below(2));
        for (int i = 0; i < nt; ++i)
            spec.terminal.push_back({a, static_cast<int>(rng.below(spec.n_terms)), 0.5 + rng.uniform()});
    }

    // Criticality: rescale binary weights until the branching matrix has unit
    // spectral radius.
    for (int round = 0; round < 16; ++round) {
        const double rho = branching_radius(spec);
        require(rho > 0.0, ErrorCode::DegenerateGrammar, "build_grammar: zero branching radius");
        spec.spectral_radius = rho;
        if (std::fabs(rho - 1.0) <= 1e-7) break;
        for (auto& r : spec.binary) r.weight /= rho;
    }
    validate_grammar(spec);
    return spec;
}

void validate_grammar(const GrammarSpec& spec) {
    require(spec.n_vars >= 2 && spec.n_vars <= 32, ErrorCode::DegenerateGrammar,
            "grammar: variable count must be in [2, 32]");
    require(spec.n_terms >= 1, ErrorCode::DegenerateGrammar, "grammar: needs at least one terminal symbol");
    require(spec.start >= 0 && spec.start < spec.n_vars, ErrorCode::DegenerateGrammar, "grammar: start out of range");
    require(spec.adversarial >= 0 && spec.adversarial < spec.n_vars, ErrorCode::DegenerateGrammar,
            "grammar: adversarial variable out of range");
    require(spec.start != spec.adversarial, ErrorCode::DegenerateGrammar,
            "grammar: start must differ from the adversarial variable");

    std::vector<bool> has_binary(static_cast<size_t>(spec.n_vars), false);
    std::vector<bool> has_terminal(static_cast<size_t>(spec.n_vars), false);
    for (const auto& r : spec.binary) {
        require(r.lhs >= 0 && r.lhs < spec.n_vars && r.left >= 0 && r.left < spec.n_vars && r.right >= 0 &&
                    r.right < spec.n_vars,
                ErrorCode::DegenerateGrammar, "grammar: binary rule index out of range");
        require(r.left != spec.adversarial && r.right != spec.adversarial, ErrorCode::DegenerateGrammar,
                "grammar: adversarial variable appears on a right-hand side");
        require(r.weight > 0.0 && std::isfinite(r.weight), ErrorCode::DegenerateGrammar,
                "grammar: binary rule weight must be positive");
        has_binary[static_cast<size_t>(r.lhs)] = true;
    }
    for (const auto& r : spec.terminal) {
        require(r.lhs >= 0 && r.lhs < spec.n_vars && r.terminal >= 0 && r.terminal < spec.n_terms,
                ErrorCode::DegenerateGrammar, "grammar: terminal rule index out of range");
        require(r.weight > 0.0 && std::isfinite(r.weight), ErrorCode::DegenerateGrammar,
                "grammar: terminal rule weight must be positive");
        has_terminal[static_cast<size_t>(r.lhs)] = true;
    }
    bool any_terminal = false;
    for (int a = 0; a < spec.n_vars; ++a) {
        require(has_binary[static_cast<size_t>(a)] || has_terminal[static_cast<size_t>(a)],
                ErrorCode::DegenerateGrammar,
                "grammar: variable " + std::to_string(a) + " has no production");
        any_terminal = any_terminal || has_terminal[static_cast<size_t>(a)];
    }
    require(any_terminal, ErrorCode::DegenerateGrammar, "grammar: no terminal production anywhere");
}

uint64_t grammar_hash(const GrammarSpec& spec) {
    uint64_t h = kFnvOffset;
    fnv_mix(h, static_cast<uint64_t>(spec.n_vars));
    fnv_mix(h, static_cast<uint64_t>(spec.n_terms));
    fnv_mix(h, static_cast<uint64_t>(spec.start));
    fnv_mix(h, static_cast<uint64_t>(spec.adversarial));
    for (const auto& r : spec.binary) {
        fnv_mix(h, static_cast<uint64_t>(r.lhs));
        fnv_mix(h, static_cast<uint64_t>(r.left));
        fnv_mix(h, static_cast<uint64_t>(r.right));
        fnv_mix(h, std::bit_cast<uint64_t>(r.weight));
    }
    for (const auto& r : spec.terminal) {
        fnv_mix(h, static_cast<uint64_t>(r.lhs));
        fnv_mix(h, static_cast<uint64_t>(r.terminal));
        fnv_mix(h, std::bit_cast<uint64_t>(r.weight));
    }
    return h;
}

bool cyk_oracle(const GrammarSpec& spec, const std::vector<int>& s) {
    const int n = static_cast<int>(s.size());
    if (n == 0) return false;  // strict CNF has no epsilon productions
    for (int c : s)
        if (c < 0 || c >= spec.n_terms) return false;

    // tab[(len-1) * n + i]: variable bitmask deriving s[i .. i+len).
    std::vector<uint32_t> tab(static_cast<size_t>(n) * static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i)
        for (const auto& r : spec.terminal)
            if (r.terminal == s[static_cast<size_t>(i)]) tab[static_cast<size_t>(i)] |= 1u << r.lhs;

    for (int len = 2; len <= n; ++len)
        for (int i = 0; i + len <= n; ++i) {
            uint32_t mask = 0;
            for (int k = 1; k < len; ++k) {
                const uint32_t lm = tab[static_cast<size_t>(k - 1) * n + i];
                const uint32_t rm = tab[static_cast<size_t>(len - k - 1) * n + i + k];
                if (!lm || !rm) continue;
                for (const auto& r : spec.binary)
                    if ((lm >> r.left & 1u) && (rm >> r.right & 1u)) mask |= 1u << r.lhs;
            }
            tab[static_cast<size_t>(len - 1) * n + i] = mask;
        }
    return (tab[static_cast<size_t>(n - 1) * n] >> spec.start & 1u) != 0;
}

namespace {

// Length partition table: zs[l][v] is the total weight of derivations of
// length l from variable v, times a common geometric scale s^l kept adapted
// so magnitudes stay representable. Ratios within a fixed total length --
// the only thing the split sampler needs -- are exact.
struct LengthTable {
    int n_vars = 0;
    int max_len = 0;
    std::vector<double> zs;  // (max_len + 1) * n_vars
    std::vector<std::vector<int>> binary_by_lhs, terminal_by_lhs;

    double z(int len, int var) const { return zs[static_cast<size_t>(len) * n_vars + var]; }
};

std::shared_ptr<const LengthTable> build_length_table(const GrammarSpec& spec, int max_len) {
    auto t = std::make_shared<LengthTable>();
    const int nv = spec.n_vars;
    t->n_vars = nv;
    t->max_len = max_len;
    t->zs.assign(static_cast<size_t>(max_len + 1) * nv, 0.0);
    t->binary_by_lhs.resize(static_cast<size_t>(nv));
    t->terminal_by_lhs.resize(static_cast<size_t>(nv));
    for (size_t i = 0; i < spec.binary.size(); ++i)
        t->binary_by_lhs[static_cast<size_t>(spec.binary[i].lhs)].push_back(static_cast<int>(i));
    for (size_t i = 0; i < spec.terminal.size(); ++i)
        t->terminal_by_lhs[static_cast<size_t>(spec.terminal[i].lhs)].push_back(static_cast<int>(i));

    auto zs_at = [&](int len, int var) -> double& { return t->zs[static_cast<size_t>(len) * nv + var]; };
    for (const auto& r : spec.terminal) zs_at(1, r.lhs) += r.weight;

    for (int l = 2; l <= max_len; ++l) {
        for (const auto& r : spec.binary) {
            double acc = 0.0;
            const double* zb = &t->zs[static_cast<size_t>(0) * nv + r.left];
            const double* zc = &t->zs[static_cast<size_t>(0) * nv + r.right];
            for (int k = 1; k < l; ++k)
                acc += zb[static_cast<size_t>(k) * nv] * zc[static_cast<size_t>(l - k) * nv];
            zs_at(l, r.lhs) += r.weight * acc;
        }
        double mx = 0.0;
        for (int v = 0; v < nv; ++v) mx = std::max(mx, zs_at(l, v));
        if (mx > 0.0 && (mx > 1e50 || mx < 1e-50)) {
            // Fold the drift into the per-unit scale so future convolutions
            // stay consistent.
            const double lam = std::pow(mx, -1.0 / l);
            for (int ll = 1; ll <= l; ++ll) {
                const double f = std::pow(lam, ll);
                for (int v = 0; v < nv; ++v) zs_at(ll, v) *= f;
            }
        }
    }
    return t;
}

std::shared_ptr<const LengthTable> cached_lengths(const GrammarSpec& spec, int need_len) {
    int rounded = 16;
    while (rounded < need_len) rounded *= 2;

    static std::mutex mu;
    static std::unordered_map<uint64_t, std::shared_ptr<const LengthTable>> cache;
    const uint64_t key = mix_seed(grammar_hash(spec), static_cast<uint64_t>(rounded));
    {
        std::lock_guard<std::mutex> lock(mu);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
    }
    auto t = build_length_table(spec, rounded);
    std::lock_guard<std::mutex> lock(mu);
    auto [it, inserted] = cache.emplace(key, std::move(t));
    (void)inserted;
    return it->second;
}

struct DerivationSampler {
    const GrammarSpec& spec;
    const LengthTable& tab;
    Rng& rng;
    Derivation out;

    int go(int var, int len, int start) {
        out.nodes.push_back({var, start, len});
        if (len == 1) {
            const auto& rules = tab.terminal_by_lhs[static_cast<size_t>(var)];
            double x = rng.uniform() * tab.z(1, var);
            int chosen = rules.empty() ? -1 : rules.back();
            for (int idx : rules) {
                x -= spec.terminal[static_cast<size_t>(idx)].weight;
                if (x < 0.0) {
                    chosen = idx;
                    break;
                }
            }
            require(chosen >= 0, ErrorCode::UnsatisfiableLength, "derivation: variable has no terminal rule");
            out.string[static_cast<size_t>(start)] = spec.terminal[static_cast<size_t>(chosen)].terminal;
            return 0;
        }

        double x = rng.uniform() * tab.z(len, var);
        int rule = -1, split = -1;
        int last_rule = -1, last_split = -1;
        for (int idx : tab.binary_by_lhs[static_cast<size_t>(var)]) {
            const auto& r = spec.binary[static_cast<size_t>(idx)];
            for (int k = 1; k < len; ++k) {
                const double mass = r.weight * tab.z(k, r.left) * tab.z(len - k, r.right);
                if (mass <= 0.0) continue;
                last_rule = idx;
                last_split = k;
                x -= mass;
                if (x < 0.0) {
                    rule = idx;
                    split = k;
                    break;
                }
            }
            if (rule >= 0) break;
        }
        if (rule < 0) {  // numeric remainder: fall back to the last feasible split
            rule = last_rule;
            split = last_split;
        }
        require(rule >= 0, ErrorCode::UnsatisfiableLength, "derivation: no feasible split");
        const auto& r = spec.binary[static_cast<size_t>(rule)];
        const int dl = go(r.left, split, start);
        const int dr = go(r.right, len - split, start + split);
        return 1 + std::max(dl, dr);
    }
};

Derivation sample_with_table(const GrammarSpec& spec, const LengthTable& tab, int var, int len, Rng& rng) {
    require(len >= 1 && len <= tab.max_len, ErrorCode::TooLarge, "derivation: length outside table range");
    require(tab.z(len, var) > 0.0, ErrorCode::UnsatisfiableLength,
            "derivation: no derivation of length " + std::to_string(len) + " from variable " + std::to_string(var));
    DerivationSampler s{spec, tab, rng, {}};
    s.out.string.assign(static_cast<size_t>(len), -1);
    s.out.depth = s.go(var, len, 0);
    return std::move(s.out);
}

}  // namespace

Derivation sample_derivation(const GrammarSpec& spec, int var, int len, Rng& rng) {
    require(var >= 0 && var < spec.n_vars, ErrorCode::BadConfig, "sample_derivation: variable out of range");
    require(len >= 1, ErrorCode::UnsatisfiableLength, "sample_derivation: length must be >= 1");
    const auto tab = cached_lengths(spec, len);
    return sample_with_table(spec, *tab, var, len, rng);
}

TaskInstance gen_cfg(const GrammarSpec& spec, int T, bool positive, Rng& rng) {
    require(T >= 1, ErrorCode::TooShort, "gen_cfg: T must be >= 1");
    const auto tab = cached_lengths(spec, T);
    Derivation d = sample_with_table(spec, *tab, spec.start, T, rng);

    TaskInstance inst;
    inst.kind = TaskKind::cfg;
    inst.T = T;
    inst.vocab = spec.n_terms;
    inst.value_form = false;

    if (positive) {
        inst.tokens = std::move(d.string);
        inst.label = {1.0};
        return inst;
    }

    require(T >= 2, ErrorCode::UnsatisfiableLength, "gen_cfg: negatives need an internal node to substitute");
    std::vector<size_t> internal;
    for (size_t i = 0; i < d.nodes.size(); ++i)
        if (d.nodes[i].len >= 2 && tab->z(d.nodes[i].len, spec.adversarial) > 0.0) internal.push_back(i);
    require(!internal.empty(), ErrorCode::DegenerateGrammar,
            "gen_cfg: adversarial variable cannot derive any internal span length");

    for (int attempt = 0; attempt < 200; ++attempt) {
        // Log-uniform length scale, then the internal node closest to it in
        // log distance (ties broken uniformly).
        const double scale = std::exp(rng.uniform() * std::log(static_cast<double>(T)));
        double best = HUGE_VAL;
        std::vector<size_t> ties;
        for (size_t i : internal) {
            const double dist = std::fabs(std::log(static_cast<double>(d.nodes[i].len)) - std::log(scale));
            if (dist < best - 1e-12) {
                best = dist;
                ties.assign(1, i);
            } else if (dist <= best + 1e-12) {
                ties.push_back(i);
            }
        }
        const DerivationNode node = d.nodes[ties[ties.size() == 1 ? 0 : rng.below(ties.size())]];

        Derivation repl = sample_with_table(spec, *tab, spec.adversarial, node.len, rng);
        std::vector<int> s2 = d.string;
        std::copy(repl.string.begin(), repl.string.end(), s2.begin() + node.start);
        if (s2 != d.string && !cyk_oracle(spec, s2)) {
            inst.tokens = std::move(s2);
            inst.label = {0.0};
            return inst;
        }
    }
    throw Error(ErrorCode::DegenerateGrammar, "gen_cfg: adversarial substitutions kept parsing after 200 attempts");
}

// ------------------------------------------------------------------- graphs

GeoGraph gen_rgg(int T, double alpha, int dim, bool directed_for_mincut, Rng& rng) {
    require(T >= 2, ErrorCode::TooShort, "gen_rgg: T must be >= 2");
    require(alpha > 0.0 && std::isfinite(alpha), ErrorCode::BadConfig, "gen_rgg: alpha must be positive");
    require(dim >= 1 && dim <= 3, ErrorCode::BadConfig, "gen_rgg: dim must be 1, 2, or 3");

    // Expected degree alpha = (T-1) * vol(B_r) / 2^dim, boundary ignored.
    static const double ball_coeff[3] = {2.0, M_PI, 4.0 * M_PI / 3.0};
    const double pow2dim = std::pow(2.0, dim);
    const double r = std::pow(alpha * pow2dim / (static_cast<double>(T - 1) * ball_coeff[dim - 1]), 1.0 / dim);
    require(r <= 2.0 * std::sqrt(static_cast<double>(dim)), ErrorCode::RadiusOverflow,
            "gen_rgg: required radius exceeds the box diameter");

    GeoGraph g;
    g.points = Mat(T, dim);
    for (int a = 0; a < T; ++a)
        for (int c = 0; c < dim; ++c) g.points(a, c) = 2.0 * rng.uniform() - 1.0;
    g.radius = r;
    g.directed = directed_for_mincut;
    g.source = 0;
    g.target = T - 1;

    const double r2 = r * r;
    for (int a = 0; a < T; ++a)
        for (int b = a + 1; b < T; ++b) {
            double d2 = 0.0;
            for (int c = 0; c < dim; ++c) {
                const double diff = g.points(a, c) - g.points(b, c);
                d2 += diff * diff;
            }
            if (d2 > r2) continue;
            if (!directed_for_mincut) {
                g.edges.emplace_back(a, b);
            } else if (a == g.source) {
                g.edges.emplace_back(a, b);  // out of the source (covers source-target too)
            } else if (b == g.target) {
                g.edges.emplace_back(a, b);  // into the target
            } else {
                g.edges.emplace_back(a, b);
                g.edges.emplace_back(b, a);
            }
        }
    return g;
}

double spp_oracle(const GeoGraph& g) {
    require(!g.directed, ErrorCode::BadConfig, "spp_oracle: needs the undirected graph");
    const int n = g.points.rows();
    std::vector<std::vector<int>> adj(static_cast<size_t>(n));
    for (const auto& [a, b] : g.edges) {
        adj[static_cast<size_t>(a)].push_back(b);
        adj[static_cast<size_t>(b)].push_back(a);
    }
    std::vector<int> dist(static_cast<size_t>(n), -1);
    std::deque<int> queue{g.source};
    dist[static_cast<size_t>(g.source)] = 0;
    while (!queue.empty()) {
        const int u = queue.front();
        queue.pop_front();
        if (u == g.target) break;
        for (int v : adj[static_cast<size_t>(u)])
            if (dist[static_cast<size_t>(v)] < 0) {
                dist[static_cast<size_t>(v)] = dist[static_cast<size_t>(u)] + 1;
                queue.push_back(v);
            }
    }
    const int d = dist[static_cast<size_t>(g.target)];
    return d < 0 ? HUGE_VAL : static_cast<double>(d);
}

namespace {

// Dinic max flow on unit-capacity arcs.
struct FlowNet {
    struct Arc {
        int to, cap, rev;
    };
    std::vector<std::vector<Arc>> g;
    std::vector<int> level, iter;

    explicit FlowNet(int n) : g(static_cast<size_t>(n)), level(static_cast<size_t>(n)), iter(static_cast<size_t>(n)) {}

    void add(int u, int v, int cap) {
        g[static_cast<size_t>(u)].push_back({v, cap, static_cast<int>(g[static_cast<size_t>(v)].size())});
        g[static_cast<size_t>(v)].push_back({u, 0, static_cast<int>(g[static_cast<size_t>(u)].size()) - 1});
    }

    bool bfs(int s, int t) {
        std::fill(level.begin(), level.end(), -1);
        std::deque<int> q{s};
        level[static_cast<size_t>(s)] = 0;
        while (!q.empty()) {
            const int u = q.front();
            q.pop_front();
            for (const Arc& a : g[static_cast<size_t>(u)])
                if (a.cap > 0 && level[static_cast<size_t>(a.to)] < 0) {
                    level[static_cast<size_t>(a.to)] = level[static_cast<size_t>(u)] + 1;
                    q.push_back(a.to);
                }
        }
        return level[static_cast<size_t>(t)] >= 0;
    }

    int dfs(int u, int t, int f) {
        if (u == t) return f;
        for (int& i = iter[static_cast<size_t>(u)]; i < static_cast<int>(g[static_cast<size_t>(u)].size()); ++i) {
            Arc& a = g[static_cast<size_t>(u)][static_cast<size_t>(i)];
            if (a.cap <= 0 || level[static_cast<size_t>(a.to)] != level[static_cast<size_t>(u)] + 1) continue;
            const int d = dfs(a.to, t, std::min(f, a.cap));
            if (d > 0) {
                a.cap -= d;
                g[static_cast<size_t>(a.to)][static_cast<size_t>(a.rev)].cap += d;
                return d;
            }
        }
        return 0;
    }

    int max_flow(int s, int t) {
        int flow = 0;
        while (bfs(s, t)) {
            std::fill(iter.begin(), iter.end(), 0);
            while (int f = dfs(s, t, 1 << 30)) flow += f;
        }
        return flow;
    }
};

}  // namespace

double mincut_oracle(const GeoGraph& g) {
    require(g.directed, ErrorCode::BadConfig, "mincut_oracle: needs the directed graph");
    FlowNet net(g.points.rows());
    for (const auto& [u, v] : g.edges) net.add(u, v, 1);
    return static_cast<double>(net.max_flow(g.source, g.target));
}

TaskInstance gen_spp(int T, double alpha, Rng& rng) {
    TaskInstance inst;
    inst.kind = TaskKind::spp;
    inst.T = T;
    inst.value_form = true;
    inst.graph = gen_rgg(T, alpha, 2, false, rng);
    const double d = spp_oracle(*inst.graph);
    inst.label = {std::isfinite(d) ? d : 2.0 * T};  // disconnection sentinel
    return inst;
}

TaskInstance gen_mincut(int T, double alpha, Rng& rng) {
    TaskInstance inst;
    inst.kind = TaskKind::mincut;
    inst.T = T;
    inst.value_form = true;
    inst.graph = gen_rgg(T, alpha, 2, true, rng);
    inst.label = {mincut_oracle(*inst.graph)};
    return inst;
}

// --------------------------------------------------------------- embeddings

namespace {

std::vector<double> codebook_row(int token, int d, uint64_t codebook_seed) {
    std::vector<double> row(static_cast<size_t>(d));
    for (uint64_t salt = 0;; ++salt) {
        Rng rng(mix_seed(codebook_seed, static_cast<uint64_t>(token), salt));
        double nrm2 = 0.0;
        for (double& v : row) {
            v = rng.normal();
            nrm2 += v * v;
        }
        if (nrm2 > 1e-24) {
            const double inv = 1.0 / std::sqrt(nrm2);
            for (double& v : row) v *= inv;
            return row;
        }
    }
}

bool is_sequence_kind(TaskKind k) {
    return k == TaskKind::induction || k == TaskKind::sort || k == TaskKind::string_match || k == TaskKind::cfg;
}

}  // namespace

Mat embed_instance(const TaskInstance& inst, int d, EmbedPe pe, uint64_t codebook_seed) {
    if (is_sequence_kind(inst.kind)) {
        require(d >= 4, ErrorCode::CapacityExceeded, "embed_instance: sequence tasks need d >= 4");
        require(pe != EmbedPe::rotary || d % 2 == 0, ErrorCode::BadConfig, "embed_instance: rotary needs even d");
        const int n = static_cast<int>(inst.tokens.size());
        require(n >= 1, ErrorCode::TooShort, "embed_instance: empty token sequence");

        Mat e(n, d);
        const int pairs = d / 2;
        for (int pos = 0; pos < n; ++pos) {
            const std::vector<double> tok = codebook_row(inst.tokens[static_cast<size_t>(pos)], d, codebook_seed);
            double* out = e.row(pos);
            switch (pe) {
                case EmbedPe::none:
                    std::copy(tok.begin(), tok.end(), out);
                    break;
                case EmbedPe::sinusoidal: {
                    // Unit-normalized sin/cos position vector averaged with the
                    // token vector; keeps rows at O(1) norm.
                    std::vector<double> p(static_cast<size_t>(d), 0.0);
                    for (int i = 0; i < pairs; ++i) {
                        const double omega = std::pow(10000.0, -2.0 * i / d);
                        p[static_cast<size_t>(2 * i)] = std::sin(pos * omega);
                        p[static_cast<size_t>(2 * i + 1)] = std::cos(pos * omega);
                    }
                    if (d % 2 == 1) p[static_cast<size_t>(d - 1)] = std::sin(pos * std::pow(10000.0, -1.0));
                    double nrm2 = 0.0;
                    for (double v : p) nrm2 += v * v;
                    const double inv = nrm2 > 0.0 ? 1.0 / std::sqrt(nrm2) : 0.0;
                    const double root_half = std::sqrt(0.5);
                    for (int i = 0; i < d; ++i)
                        out[i] = root_half * (tok[static_cast<size_t>(i)] + inv * p[static_cast<size_t>(i)]);
                    break;
                }
                case EmbedPe::rotary:
                    for (int i = 0; i < pairs; ++i) {
                        const double omega = std::pow(10000.0, -2.0 * i / d);
                        const double c = std::cos(pos * omega), s = std::sin(pos * omega);
                        const double a = tok[static_cast<size_t>(2 * i)], b = tok[static_cast<size_t>(2 * i + 1)];
                        out[2 * i] = c * a - s * b;
                        out[2 * i + 1] = s * a + c * b;
                    }
                    break;
            }
        }
        return e;
    }

    require(inst.graph.has_value(), ErrorCode::BadConfig, "embed_instance: graph task without a graph payload");
    const GeoGraph& g = *inst.graph;
    const int n = g.points.rows(), dim = g.points.cols();
    require(d >= dim + 2, ErrorCode::CapacityExceeded, "embed_instance: graph tasks need d >= dim + 2");
    Mat e(n, d);
    for (int a = 0; a < n; ++a) {
        for (int c = 0; c < dim; ++c) e(a, c) = g.points(a, c);
        e(a, dim) = a == g.source ? 1.0 : 0.0;
        e(a, dim + 1) = a == g.target ? 1.0 : 0.0;
    }
    return e;
}

// ------------------------------------------------------------ oracle checks

namespace {

std::vector<std::pair<int, int>> rgg_edges(const Mat& points, double radius, bool directed, int source, int target) {
    GeoGraph tmp;
    tmp.points = points;
    const int n = points.rows(), dim = points.cols();
    const double r2 = radius * radius;
    std::vector<std::pair<int, int>> edges;
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) {
            double d2 = 0.0;
            for (int c = 0; c < dim; ++c) {
                const double diff = points(a, c) - points(b, c);
                d2 += diff * diff;
            }
            if (d2 > r2) continue;
            if (!directed) {
                edges.emplace_back(a, b);
            } else if (a == source) {
                edges.emplace_back(a, b);
            } else if (b == target) {
                edges.emplace_back(a, b);
            } else {
                edges.emplace_back(a, b);
                edges.emplace_back(b, a);
            }
        }
    return edges;
}

bool recheck_graph_common(const TaskInstance& inst) {
    if (!inst.graph.has_value() || inst.label.size() != 1) return false;
    const GeoGraph& g = *inst.graph;
    if (g.points.rows() != inst.T || g.source != 0 || g.target != inst.T - 1) return false;
    return rgg_edges(g.points, g.radius, g.directed, g.source, g.target) == g.edges;
}

}  // namespace

bool oracle_recheck(const TaskInstance& inst) {
    switch (inst.kind) {
        case TaskKind::induction: {
            const int T = inst.T;
            if (static_cast<int>(inst.tokens.size()) != T || T < 4 || inst.label.size() != 1) return false;
            const int trigger = inst.tokens[static_cast<size_t>(T - 1)];
            std::vector<int> where;
            for (int t = 0; t < T; ++t)
                if (inst.tokens[static_cast<size_t>(t)] == trigger) where.push_back(t);
            if (where.size() != 2 || where[1] != T - 1) return false;
            const int ik = where[0];
            if (ik > (T + 1) / 2 - 1) return false;
            return inst.label[0] == static_cast<double>(inst.tokens[static_cast<size_t>(ik + 1)]);
        }
        case TaskKind::sort: {
            const int T = inst.T;
            if (static_cast<int>(inst.tokens.size()) != 2 * T + 1 || inst.vocab < 3) return false;
            const int sep = inst.vocab - 1;
            if (inst.tokens[static_cast<size_t>(T)] != sep) return false;
            std::vector<int> u(inst.tokens.begin(), inst.tokens.begin() + T);
            const std::vector<int> s(inst.tokens.begin() + T + 1, inst.tokens.end());
            std::sort(u.begin(), u.end());
            if (u != s) return false;
            if (inst.label.size() != static_cast<size_t>(T)) return false;
            for (int i = 0; i < T; ++i)
                if (inst.label[static_cast<size_t>(i)] != static_cast<double>(s[static_cast<size_t>(i)])) return false;
            if (inst.loss_mask.size() != static_cast<size_t>(2 * T + 1)) return false;
            for (int i = 0; i < 2 * T + 1; ++i)
                if (inst.loss_mask[static_cast<size_t>(i)] != (i >= T ? 1 : 0)) return false;
            return true;
        }
        case TaskKind::string_match: {
            const int T = inst.T;
            if (static_cast<int>(inst.tokens.size()) != T + 4 || inst.label.size() != 1) return false;
            if (inst.tokens[static_cast<size_t>(T)] != kMatchSep) return false;
            const std::vector<int> x(inst.tokens.begin(), inst.tokens.begin() + T);
            const std::array<int, 3> m = {inst.tokens[static_cast<size_t>(T + 1)],
                                          inst.tokens[static_cast<size_t>(T + 2)],
                                          inst.tokens[static_cast<size_t>(T + 3)]};
            const bool match = has_full_match(x, m);
            if (inst.label[0] != (match ? 1.0 : 0.0)) return false;
            return match || has_near_miss(x, m);
        }
        case TaskKind::cfg:
            throw Error(ErrorCode::BadConfig, "oracle_recheck: cfg instances need the grammar overload");
        case TaskKind::spp: {
            if (!recheck_graph_common(inst) || inst.graph->directed) return false;
            const double d = spp_oracle(*inst.graph);
            return inst.label[0] == (std::isfinite(d) ? d : 2.0 * inst.T);
        }
        case TaskKind::mincut: {
            if (!recheck_graph_common(inst) || !inst.graph->directed) return false;
            return inst.label[0] == mincut_oracle(*inst.graph);
        }
    }
    return false;
}

bool oracle_recheck(const TaskInstance& inst, const GrammarSpec& grammar) {
    if (inst.kind != TaskKind::cfg) return oracle_recheck(inst);
    if (static_cast<int>(inst.tokens.size()) != inst.T || inst.label.size() != 1) return false;
    return inst.label[0] == (cyk_oracle(grammar, inst.tokens) ? 1.0 : 0.0);
}

// -------------------------------------------------------------------- JSON

std::string instance_to_json(const TaskInstance& inst) {
    nlohmann::json j;
    j["v"] = 1;
    j["kind"] = task_kind_name(inst.kind);
    j["T"] = inst.T;
    j["seed"] = hex64(inst.seed);
    j["value_form"] = inst.value_form;
    j["label"] = inst.label;
    if (!inst.tokens.empty() || is_sequence_kind(inst.kind)) {
        j["tokens"] = inst.tokens;
        j["vocab"] = inst.vocab;
    }
    if (!inst.loss_mask.empty()) j["mask"] = inst.loss_mask;
    if (inst.graph.has_value()) {
        const GeoGraph& g = *inst.graph;
        nlohmann::json points = nlohmann::json::array();
        for (int a = 0; a < g.points.rows(); ++a)
            for (int c = 0; c < g.points.cols(); ++c) points.push_back(g.points(a, c));
        j["graph"] = {{"n", g.points.rows()},   {"dim", g.points.cols()}, {"radius", g.radius},
                      {"directed", g.directed}, {"source", g.source},     {"target", g.target},
                      {"points", std::move(points)}};
    }
    return j.dump();
}

TaskInstance instance_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("instance json: parse failed: ") + e.what());
    }
    try {
        require(j.at("v").get<int>() == 1, ErrorCode::IoError, "instance json: unsupported version");
        TaskInstance inst;
        inst.kind = task_kind_from_name(j.at("kind").get<std::string>());
        inst.T = j.at("T").get<int>();
        inst.seed = parse_hex64(j.at("seed").get<std::string>());
        inst.value_form = j.at("value_form").get<bool>();
        inst.label = j.at("label").get<std::vector<double>>();
        if (j.contains("tokens")) {
            inst.tokens = j.at("tokens").get<std::vector<int>>();
            inst.vocab = j.at("vocab").get<int>();
        }
        if (j.contains("mask")) inst.loss_mask = j.at("mask").get<std::vector<uint8_t>>();
        if (j.contains("graph")) {
            const auto& gj = j.at("graph");
            GeoGraph g;
            const int n = gj.at("n").get<int>(), dim = gj.at("dim").get<int>();
            require(n >= 1 && dim >= 1, ErrorCode::IoError, "instance json: bad graph shape");
            const auto pts = gj.at("points").get<std::vector<double>>();
            require(static_cast<int>(pts.size()) == n * dim, ErrorCode::IoError, "instance json: bad point count");
            g.points = Mat(n, dim);
            std::copy(pts.begin(), pts.end(), g.points.data());
            g.radius = gj.at("radius").get<double>();
            g.directed = gj.at("directed").get<bool>();
            g.source = gj.at("source").get<int>();
            g.target = gj.at("target").get<int>();
            // Edges are a pure function of the coordinates; rebuild them.
            g.edges = rgg_edges(g.points, g.radius, g.directed, g.source, g.target);
            inst.graph = std::move(g);
        }
        return inst;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("instance json: missing or mistyped field: ") + e.what());
    }
}

std::string grammar_to_json(const GrammarSpec& spec) {
    nlohmann::json j;
    j["v"] = 1;
    j["n_vars"] = spec.n_vars;
    j["n_terms"] = spec.n_terms;
    j["start"] = spec.start;
    j["adversarial"] = spec.adversarial;
    j["spectral_radius"] = spec.spectral_radius;
    nlohmann::json binary = nlohmann::json::array();
    for (const auto& r : spec.binary) binary.push_back({r.lhs, r.left, r.right, r.weight});
    nlohmann::json terminal = nlohmann::json::array();
    for (const auto& r : spec.terminal) terminal.push_back({r.lhs, r.terminal, r.weight});
    j["binary"] = std::move(binary);
    j["terminal"] = std::move(terminal);
    return j.dump();
}

GrammarSpec grammar_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("grammar json: parse failed: ") + e.what());
    }
    try {
        require(j.at("v").get<int>() == 1, ErrorCode::IoError, "grammar json: unsupported version");
        GrammarSpec spec;
        spec.n_vars = j.at("n_vars").get<int>();
        spec.n_terms = j.at("n_terms").get<int>();
        spec.start = j.at("start").get<int>();
        spec.adversarial = j.at("adversarial").get<int>();
        spec.spectral_radius = j.at("spectral_radius").get<double>();
        for (const auto& r : j.at("binary"))
            spec.binary.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>(), r.at(3).get<double>()});
        for (const auto& r : j.at("terminal"))
            spec.terminal.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<double>()});
        validate_grammar(spec);
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("grammar json: missing or mistyped field: ") + e.what());
    }
}

}  // namespace kcap
