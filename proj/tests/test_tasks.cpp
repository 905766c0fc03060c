#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kcap/error.hpp"
#include "kcap/tasks.hpp"

using namespace kcap;

namespace {

// ---------------------------------------------------------------------------
// Test-local oracles, written straight-line and independent of src/tasks.cpp.

// Mirror of the documented induction draw order: trigger, i_K, T tokens,
// replacement of accidental triggers, planting.
struct InductionMirror {
    int trigger = 0, ik = 0;
    std::vector<int> tokens;
    int label = 0;
    bool replaced_any = false;  // some accidental trigger got bumped
};

InductionMirror induction_mirror(int T, uint64_t seed, int vocab) {
    Rng rng(seed);
    InductionMirror m;
    m.trigger = static_cast<int>(rng.below(static_cast<uint64_t>(vocab)));
    m.ik = static_cast<int>(rng.below(static_cast<uint64_t>((T + 1) / 2)));
    m.tokens.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) m.tokens[static_cast<size_t>(t)] = static_cast<int>(rng.below(vocab));
    for (int t = 0; t < T; ++t)
        if (m.tokens[static_cast<size_t>(t)] == m.trigger) {
            m.tokens[static_cast<size_t>(t)] = (m.trigger + 1) % vocab;
            m.replaced_any = true;
        }
    m.tokens[static_cast<size_t>(m.ik)] = m.trigger;
    m.tokens[static_cast<size_t>(T - 1)] = m.trigger;
    m.label = m.tokens[static_cast<size_t>(m.ik + 1)];
    return m;
}

std::vector<int> selection_sorted(std::vector<int> v) {
    for (size_t i = 0; i < v.size(); ++i) {
        size_t best = i;
        for (size_t j = i + 1; j < v.size(); ++j)
            if (v[j] < v[best]) best = j;
        std::swap(v[i], v[best]);
    }
    return v;
}

bool nondecreasing(const std::vector<int>& v) {
    for (size_t i = 0; i + 1 < v.size(); ++i)
        if (v[i] > v[i + 1]) return false;
    return true;
}

int count_window_hits(const std::vector<int>& x, size_t p, const std::array<int, 3>& m) {
    return (x[p] == m[0]) + (x[p + 1] == m[1]) + (x[p + 2] == m[2]);
}

bool scan_full_match(const std::vector<int>& x, const std::array<int, 3>& m) {
    for (size_t p = 0; p + 3 <= x.size(); ++p)
        if (count_window_hits(x, p, m) == 3) return true;
    return false;
}

bool scan_near_miss(const std::vector<int>& x, const std::array<int, 3>& m) {
    for (size_t p = 0; p + 3 <= x.size(); ++p)
        if (count_window_hits(x, p, m) == 2) return true;
    return false;
}

// Largest eigenvalue magnitude of the branching matrix via Eigen's general
// (non-symmetric) eigensolver.
double eigen_branching_radius(const GrammarSpec& spec) {
    const int n = spec.n_vars;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    for (const auto& r : spec.binary) {
        m(r.lhs, r.left) += r.weight;
        m(r.lhs, r.right) += r.weight;
    }
    Eigen::EigenSolver<Eigen::MatrixXd> es(m, /*computeEigenvectors=*/false);
    double rho = 0.0;
    for (int i = 0; i < n; ++i) rho = std::max(rho, std::abs(es.eigenvalues()[i]));
    return rho;
}

// Exhaustive language enumeration for tiny grammars: the set of strings each
// variable derives at each exact length.
std::set<std::vector<int>> enumerate_language(const GrammarSpec& spec, int var, int len,
                                              std::map<std::pair<int, int>, std::set<std::vector<int>>>& memo) {
    const auto key = std::make_pair(var, len);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    std::set<std::vector<int>> out;
    if (len == 1) {
        for (const auto& r : spec.terminal)
            if (r.lhs == var) out.insert({r.terminal});
    } else {
        for (const auto& r : spec.binary) {
            if (r.lhs != var) continue;
            for (int k = 1; k < len; ++k)
                for (const auto& ls : enumerate_language(spec, r.left, k, memo))
                    for (const auto& rs : enumerate_language(spec, r.right, len - k, memo)) {
                        std::vector<int> s = ls;
                        s.insert(s.end(), rs.begin(), rs.end());
                        out.insert(std::move(s));
                    }
        }
    }
    memo[key] = out;
    return out;
}

// Floyd–Warshall hop distance on the undirected edge list.
double floyd_warshall_dist(int n, const std::vector<std::pair<int, int>>& edges, int s, int t) {
    std::vector<double> d(static_cast<size_t>(n) * static_cast<size_t>(n), HUGE_VAL);
    for (int i = 0; i < n; ++i) d[static_cast<size_t>(i) * n + i] = 0.0;
    for (const auto& [a, b] : edges) {
        d[static_cast<size_t>(a) * n + b] = 1.0;
        d[static_cast<size_t>(b) * n + a] = 1.0;
    }
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                d[static_cast<size_t>(i) * n + j] =
                    std::min(d[static_cast<size_t>(i) * n + j],
                             d[static_cast<size_t>(i) * n + k] + d[static_cast<size_t>(k) * n + j]);
    return d[static_cast<size_t>(s) * n + t];
}

// Exhaustive minimum cut over all source/target-separating vertex bipartitions
// of the directed arc list.
int exhaustive_min_cut(int n, const std::vector<std::pair<int, int>>& arcs, int s, int t) {
    std::vector<int> relays;
    for (int v = 0; v < n; ++v)
        if (v != s && v != t) relays.push_back(v);
    const int m = static_cast<int>(relays.size());
    int best = 1 << 30;
    for (uint64_t mask = 0; mask < (1ull << m); ++mask) {
        std::vector<bool> in_s(static_cast<size_t>(n), false);
        in_s[static_cast<size_t>(s)] = true;
        for (int i = 0; i < m; ++i)
            if (mask >> i & 1ull) in_s[static_cast<size_t>(relays[static_cast<size_t>(i)])] = true;
        int cut = 0;
        for (const auto& [u, v] : arcs)
            if (in_s[static_cast<size_t>(u)] && !in_s[static_cast<size_t>(v)]) ++cut;
        best = std::min(best, cut);
    }
    return best;
}

std::vector<std::pair<int, int>> ball_edges(const Mat& pts, double r, bool directed, int s, int t) {
    std::vector<std::pair<int, int>> edges;
    const int n = pts.rows(), dim = pts.cols();
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) {
            double d2 = 0.0;
            for (int c = 0; c < dim; ++c) d2 += (pts(a, c) - pts(b, c)) * (pts(a, c) - pts(b, c));
            if (d2 > r * r) continue;
            if (!directed) {
                edges.emplace_back(a, b);
            } else if (a == s) {
                edges.emplace_back(a, b);
            } else if (b == t) {
                edges.emplace_back(a, b);
            } else {
                edges.emplace_back(a, b);
                edges.emplace_back(b, a);
            }
        }
    return edges;
}

// Handcrafted grammar: S=0 -> AB (0.7) | BA (0.3); A=1 -> AA (0.4) | 'a';
// B=2 -> 'b'; R=3 adversarial with only R -> 'b'. Language of S: a^n b | b a^n.
GrammarSpec toy_grammar() {
    GrammarSpec g;
    g.n_vars = 4;
    g.n_terms = 2;
    g.start = 0;
    g.adversarial = 3;
    g.binary = {{0, 1, 2, 0.7}, {0, 2, 1, 0.3}, {1, 1, 1, 0.4}};
    g.terminal = {{0, 0, 1.0}, {1, 0, 1.0}, {2, 1, 1.0}, {3, 1, 1.0}};
    g.spectral_radius = 1.0;  // informational only; not used by sampling
    return g;
}

// Parity grammar: S=0 -> AA only; A=1 -> 'a' only; R=2 adversarial -> 'a'.
// L(S) = {aa}: every length other than 2 is unsatisfiable from S.
GrammarSpec parity_grammar() {
    GrammarSpec g;
    g.n_vars = 3;
    g.n_terms = 1;
    g.start = 0;
    g.adversarial = 2;
    g.binary = {{0, 1, 1, 1.0}};
    g.terminal = {{1, 0, 1.0}, {2, 0, 1.0}};
    return g;
}

double norm2_row(const Mat& m, int r) {
    double s = 0.0;
    for (int c = 0; c < m.cols(); ++c) s += m(r, c) * m(r, c);
    return std::sqrt(s);
}

}  // namespace

// ===========================================================================
// Induction

TEST_CASE("induction layout with a forced trigger index") {
    Rng rng(11);
    const TaskInstance inst = gen_induction(4, rng, 16, /*forced_ik=*/0);
    REQUIRE(inst.tokens.size() == 4);
    CHECK(inst.tokens[0] == inst.tokens[3]);
    CHECK(inst.label.size() == 1);
    CHECK(inst.label[0] == static_cast<double>(inst.tokens[1]));
    CHECK(inst.vocab == 16);
    CHECK_FALSE(inst.value_form);
    CHECK(oracle_recheck(inst));
}

TEST_CASE("induction matches a straight-line mirror of its documented draws") {
    int wrap_seen = 0;
    for (uint64_t seed = 0; seed < 300; ++seed) {
        Rng rng(seed);
        const TaskInstance inst = gen_induction(16, rng, 4, -1);
        const InductionMirror m = induction_mirror(16, seed, 4);
        REQUIRE(inst.tokens == m.tokens);
        CHECK(inst.label[0] == static_cast<double>(m.label));
        if (m.trigger == 3 && m.replaced_any) ++wrap_seen;  // replacement wrapped 3 -> 0
    }
    CHECK(wrap_seen > 0);
}

TEST_CASE("induction wraps the replacement token at the top of a 1024 vocabulary") {
    bool found = false;
    for (uint64_t seed = 0; seed < 200000 && !found; ++seed) {
        const InductionMirror m = induction_mirror(64, seed, 1024);
        if (m.trigger != 1023 || !m.replaced_any) continue;
        found = true;
        Rng rng(seed);
        const TaskInstance inst = gen_induction(64, rng, 1024, -1);
        CHECK(inst.tokens == m.tokens);
        // The bumped occurrences became (1023 + 1) % 1024 = 0.
        CHECK(std::count(inst.tokens.begin(), inst.tokens.end(), 0) > 0);
    }
    REQUIRE(found);
}

TEST_CASE("induction plants exactly two trigger occurrences, never more") {
    Rng rng(99);
    for (int rep = 0; rep < 2000; ++rep) {
        const TaskInstance inst = gen_induction(32, rng, 64, -1);
        const int trigger = inst.tokens.back();
        const long occ = std::count(inst.tokens.begin(), inst.tokens.end(), trigger);
        REQUIRE(occ == 2);
        REQUIRE(oracle_recheck(inst));
    }
}

TEST_CASE("induction rejects sequences that cannot hold two separated triggers") {
    Rng rng(1);
    CHECK_THROWS_AS(gen_induction(3, rng, 16, -1), Error);
    try {
        gen_induction(3, rng, 16, -1);
        FAIL("expected a throw");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::TooShort);
    }
}

// ===========================================================================
// Sort

TEST_CASE("sort instances carry list, separator, and sorted suffix") {
    Rng rng(5);
    for (int rep = 0; rep < 1000; ++rep) {
        const int T = 1 + static_cast<int>(rng.below(12));
        const TaskInstance inst = gen_sort(T, 100, rng);
        REQUIRE(static_cast<int>(inst.tokens.size()) == 2 * T + 1);
        CHECK(inst.tokens[static_cast<size_t>(T)] == 100);
        const std::vector<int> u(inst.tokens.begin(), inst.tokens.begin() + T);
        const std::vector<int> s(inst.tokens.begin() + T + 1, inst.tokens.end());
        CHECK(s == selection_sorted(u));
        CHECK(sort_score(u, s) == 0.0);
        for (int i = 0; i < 2 * T + 1; ++i) CHECK(inst.loss_mask[static_cast<size_t>(i)] == (i >= T ? 1 : 0));
        REQUIRE(inst.label.size() == static_cast<size_t>(T));
        for (int i = 0; i < T; ++i) CHECK(inst.label[static_cast<size_t>(i)] == static_cast<double>(s[static_cast<size_t>(i)]));
        CHECK(oracle_recheck(inst));
    }
}

TEST_CASE("sort score hand values") {
    CHECK(sort_score({1, 2, 3}, {1, 2, 3}) == 0.0);
    CHECK(sort_score({3, 1, 2}, {3, 1, 2}) == 2.0);  // (3-1)_+ + (1-2)_+ = 2
    CHECK(sort_score({3, 1, 2}, {1, 2, 3}) == 0.0);
    CHECK(sort_score({2, 2, 1}, {2, 1, 2}) == 1.0);
    CHECK_THROWS_AS(sort_score({1, 2, 2}, {1, 2, 3}), Error);
}

TEST_CASE("sort score vanishes exactly on the nondecreasing rearrangement") {
    // Exhaustive at T = 6 over all rearrangements of a repeated-value list.
    const std::vector<int> u = {4, 1, 3, 1, 2, 4};
    std::vector<int> perm = selection_sorted(u);
    int zero_count = 0, total = 0;
    do {
        const double psi = sort_score(u, perm);
        CHECK(psi >= 0.0);
        CHECK((psi == 0.0) == nondecreasing(perm));
        zero_count += psi == 0.0 ? 1 : 0;
        ++total;
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(zero_count == 1);  // next_permutation visits distinct rearrangements once
    CHECK(total > 1);

    // Fuzzed characterization at mixed lengths.
    Rng rng(17);
    for (int rep = 0; rep < 3000; ++rep) {
        const int T = 2 + static_cast<int>(rng.below(8));
        std::vector<int> base(static_cast<size_t>(T));
        for (int& v : base) v = static_cast<int>(rng.below(5));
        std::vector<int> rho = base;
        for (int i = T - 1; i > 0; --i) std::swap(rho[static_cast<size_t>(i)], rho[rng.below(static_cast<uint64_t>(i + 1))]);
        const double psi = sort_score(base, rho);
        CHECK((psi == 0.0) == nondecreasing(rho));
    }
}

// ===========================================================================
// String match

TEST_CASE("string match at the minimum haystack is the pattern itself") {
    Rng rng(3);
    const std::array<int, 3> pat = {4, 7, 9};
    const TaskInstance inst = gen_string_match(3, pat, true, rng);
    REQUIRE(inst.tokens.size() == 7);
    CHECK(inst.tokens[0] == 4);
    CHECK(inst.tokens[1] == 7);
    CHECK(inst.tokens[2] == 9);
    CHECK(inst.tokens[3] == 26);  // separator
    CHECK(inst.tokens[4] == 4);
    CHECK(inst.label[0] == 1.0);
    CHECK(oracle_recheck(inst));
    CHECK_THROWS_AS(gen_string_match(2, pat, true, rng), Error);
}

TEST_CASE("string match positives contain the pattern and negatives only near misses") {
    Rng rng(29);
    for (int rep = 0; rep < 1500; ++rep) {
        const std::array<int, 3> pat = random_pattern(rng);
        const TaskInstance pos = gen_string_match(12, pat, true, rng);
        const std::vector<int> xp(pos.tokens.begin(), pos.tokens.begin() + 12);
        CHECK(scan_full_match(xp, pat));
        CHECK(pos.label[0] == 1.0);
        CHECK(pos.tokens[12] == 26);
        CHECK(oracle_recheck(pos));

        const TaskInstance neg = gen_string_match(12, pat, false, rng);
        const std::vector<int> xn(neg.tokens.begin(), neg.tokens.begin() + 12);
        CHECK_FALSE(scan_full_match(xn, pat));
        CHECK(scan_near_miss(xn, pat));
        CHECK(neg.label[0] == 0.0);
        CHECK(oracle_recheck(neg));
    }
}

// ===========================================================================
// Grammar construction

TEST_CASE("built grammars are critical: unit spectral radius against a dense eigensolver") {
    for (uint64_t seed : {1ull, 2ull, 3ull, 16ull, 99ull}) {
        const GrammarSpec spec = build_grammar(seed);
        CHECK(spec.n_vars == 20);
        CHECK(spec.n_terms == 16);
        validate_grammar(spec);  // must not throw
        const double rho = eigen_branching_radius(spec);
        CHECK(std::fabs(rho - 1.0) <= 1e-6);
        CHECK(std::fabs(spec.spectral_radius - 1.0) <= 1e-6);

        // Construction gives every variable both production classes, and the
        // adversarial variable never sits on a right-hand side.
        std::vector<int> nb(20, 0), nt(20, 0);
        for (const auto& r : spec.binary) {
            ++nb[static_cast<size_t>(r.lhs)];
            CHECK(r.left != spec.adversarial);
            CHECK(r.right != spec.adversarial);
        }
        for (const auto& r : spec.terminal) ++nt[static_cast<size_t>(r.lhs)];
        for (int v = 0; v < 20; ++v) {
            CHECK(nb[static_cast<size_t>(v)] >= 1);
            CHECK(nt[static_cast<size_t>(v)] >= 1);
        }
    }
}

TEST_CASE("grammar validation rejects structural defects") {
    GrammarSpec g = toy_grammar();
    validate_grammar(g);  // the baseline is fine

    GrammarSpec bad = g;
    bad.binary[0].right = bad.adversarial;
    CHECK_THROWS_AS(validate_grammar(bad), Error);

    bad = g;
    bad.terminal.clear();
    CHECK_THROWS_AS(validate_grammar(bad), Error);  // no terminal production anywhere

    bad = g;
    bad.binary = {{0, 1, 2, 0.7}};  // strip everything variable 1 and 3 own... keep 1's terminal
    bad.terminal = {{0, 0, 1.0}, {1, 0, 1.0}, {2, 1, 1.0}};
    CHECK_THROWS_AS(validate_grammar(bad), Error);  // variable 3 has no production left

    bad = g;
    bad.binary[0].weight = 0.0;
    CHECK_THROWS_AS(validate_grammar(bad), Error);

    bad = g;
    bad.start = bad.adversarial;
    CHECK_THROWS_AS(validate_grammar(bad), Error);

    bad = g;
    bad.n_vars = 33;  // the bitmask membership table holds at most 32 variables
    CHECK_THROWS_AS(validate_grammar(bad), Error);
}

TEST_CASE("grammar json round trip preserves the rule set exactly") {
    const GrammarSpec spec = build_grammar(7);
    const GrammarSpec back = grammar_from_json(grammar_to_json(spec));
    CHECK(grammar_hash(back) == grammar_hash(spec));
    CHECK(back.spectral_radius == spec.spectral_radius);
    CHECK_THROWS_AS(grammar_from_json("not json"), Error);
}

// ===========================================================================
// CYK

TEST_CASE("cyk agrees with exhaustive language enumeration on a tiny grammar") {
    const GrammarSpec g = toy_grammar();
    CHECK_FALSE(cyk_oracle(g, {}));  // no epsilon in strict CNF
    CHECK_FALSE(cyk_oracle(g, {5}));  // out-of-alphabet symbol

    std::map<std::pair<int, int>, std::set<std::vector<int>>> memo;
    for (int len = 1; len <= 8; ++len) {
        const auto lang = enumerate_language(g, g.start, len, memo);
        // Every enumerated string parses.
        for (const auto& s : lang) CHECK(cyk_oracle(g, s));
        // Every string over the alphabet of that length agrees with membership.
        std::vector<int> s(static_cast<size_t>(len), 0);
        const long total = 1L << len;  // 2 terminals
        for (long code = 0; code < total; ++code) {
            for (int i = 0; i < len; ++i) s[static_cast<size_t>(i)] = (code >> i) & 1;
            CHECK(cyk_oracle(g, s) == (lang.count(s) > 0));
        }
    }
}

// ===========================================================================
// Derivation sampling

TEST_CASE("derivation sampler draws trees proportionally to their weight products") {
    const GrammarSpec g = toy_grammar();
    Rng rng(123);

    // Length 2 from S: "ab" has weight 0.7, "ba" has weight 0.3.
    int n_ab = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const Derivation d = sample_derivation(g, g.start, 2, rng);
        REQUIRE(d.string.size() == 2);
        if (d.string == std::vector<int>{0, 1}) ++n_ab;
        else REQUIRE(d.string == std::vector<int>{1, 0});
        CHECK(d.depth == 1);
    }
    const double se = std::sqrt(0.7 * 0.3 / n);
    CHECK(std::fabs(static_cast<double>(n_ab) / n - 0.7) <= 4.0 * se);

    // Length 3: "aab" (0.7 * 0.4) vs "baa" (0.3 * 0.4) -> probabilities 0.7 / 0.3.
    int n_aab = 0;
    for (int i = 0; i < n; ++i) {
        const Derivation d = sample_derivation(g, g.start, 3, rng);
        REQUIRE(d.string.size() == 3);
        if (d.string == std::vector<int>{0, 0, 1}) ++n_aab;
        else REQUIRE(d.string == std::vector<int>{1, 0, 0});
        CHECK(d.depth == 2);
    }
    CHECK(std::fabs(static_cast<double>(n_aab) / n - 0.7) <= 4.0 * se);
}

TEST_CASE("derivation nodes cover the string and depths are tree heights") {
    const GrammarSpec spec = build_grammar(4);
    Rng rng(9);
    for (int rep = 0; rep < 50; ++rep) {
        const Derivation d = sample_derivation(spec, spec.start, 24, rng);
        REQUIRE(d.string.size() == 24);
        for (int tok : d.string) CHECK((tok >= 0 && tok < spec.n_terms));
        CHECK(cyk_oracle(spec, d.string));
        // Preorder root first; leaves are the unit spans, one per position.
        REQUIRE_FALSE(d.nodes.empty());
        CHECK(d.nodes.front().var == spec.start);
        CHECK(d.nodes.front().len == 24);
        int leaves = 0, max_len = 0;
        for (const auto& nd : d.nodes) {
            CHECK(nd.start >= 0);
            CHECK(nd.start + nd.len <= 24);
            leaves += nd.len == 1 ? 1 : 0;
            max_len = std::max(max_len, nd.len);
        }
        CHECK(leaves == 24);
        CHECK(max_len == 24);
        CHECK(d.depth >= 5);  // ceil(log2(24)) at the very least
        CHECK(d.depth <= 23);
    }
}

TEST_CASE("derivation depth grows like the square root of the length") {
    const GrammarSpec spec = build_grammar(31);
    Rng rng(77);
    const int reps = 300;
    double mean64 = 0.0, mean256 = 0.0;
    for (int i = 0; i < reps; ++i) mean64 += sample_derivation(spec, spec.start, 64, rng).depth;
    for (int i = 0; i < reps; ++i) mean256 += sample_derivation(spec, spec.start, 256, rng).depth;
    mean64 /= reps;
    mean256 /= reps;
    const double slope = std::log(mean256 / mean64) / std::log(4.0);
    CHECK(slope >= 0.35);
    CHECK(slope <= 0.65);
}

TEST_CASE("unsatisfiable lengths are detected exactly") {
    const GrammarSpec g = parity_grammar();
    validate_grammar(g);
    Rng rng(2);
    CHECK(sample_derivation(g, g.start, 2, rng).string == std::vector<int>{0, 0});
    for (int len : {1, 3, 5}) {
        try {
            sample_derivation(g, g.start, len, rng);
            FAIL("expected a throw for length ", len);
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::UnsatisfiableLength);
        }
    }
}

// ===========================================================================
// CFG instances

TEST_CASE("cfg positives have the exact length and parse; negatives are rejected") {
    const GrammarSpec spec = build_grammar(11);
    Rng rng(13);
    for (int rep = 0; rep < 60; ++rep) {
        const int T = 1 + static_cast<int>(rng.below(24));
        const TaskInstance pos = gen_cfg(spec, T, true, rng);
        REQUIRE(static_cast<int>(pos.tokens.size()) == T);
        CHECK(pos.label[0] == 1.0);
        CHECK(cyk_oracle(spec, pos.tokens));
        CHECK(oracle_recheck(pos, spec));
    }
    for (int rep = 0; rep < 60; ++rep) {
        const int T = 6 + static_cast<int>(rng.below(27));
        const TaskInstance neg = gen_cfg(spec, T, false, rng);
        REQUIRE(static_cast<int>(neg.tokens.size()) == T);
        CHECK(neg.label[0] == 0.0);
        CHECK_FALSE(cyk_oracle(spec, neg.tokens));
        CHECK(oracle_recheck(neg, spec));
    }
}

TEST_CASE("cfg surfaces unsatisfiable lengths instead of looping") {
    Rng rng(3);
    const GrammarSpec parity = parity_grammar();
    try {
        gen_cfg(parity, 3, true, rng);
        FAIL("expected a throw");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnsatisfiableLength);
    }

    // A start symbol without terminal rules cannot emit length-1 strings.
    GrammarSpec no_unit = parity_grammar();
    no_unit.binary = {{0, 1, 1, 1.0}, {1, 1, 1, 0.25}};
    validate_grammar(no_unit);
    try {
        gen_cfg(no_unit, 1, true, rng);
        FAIL("expected a throw");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnsatisfiableLength);
    }
    CHECK(gen_cfg(no_unit, 2, true, rng).tokens == std::vector<int>{0, 0});

    // Negatives need an internal span the adversarial variable can fill.
    try {
        gen_cfg(parity, 2, false, rng);
        FAIL("expected a throw");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DegenerateGrammar);
    }
}

// ===========================================================================
// Geometric graphs

TEST_CASE("rgg radius comes from the expected-degree formula") {
    Rng rng(8);
    // dim 2, T = 2: alpha = pi r^2 / 4 -> alpha = pi / 4 gives r = 1.
    const GeoGraph g = gen_rgg(2, M_PI / 4.0, 2, false, rng);
    CHECK(g.radius == doctest::Approx(1.0).epsilon(1e-12));
    // dim 1, T = 5: alpha = (T-1) * 2r / 2 -> r = alpha / 4.
    const GeoGraph g1 = gen_rgg(5, 1.0, 1, false, rng);
    CHECK(g1.radius == doctest::Approx(0.25).epsilon(1e-12));

    CHECK_THROWS_AS(gen_rgg(3, 1000.0, 2, false, rng), Error);  // radius overflow
    CHECK_THROWS_AS(gen_rgg(1, 1.0, 2, false, rng), Error);
    CHECK_THROWS_AS(gen_rgg(8, -1.0, 2, false, rng), Error);
    CHECK_THROWS_AS(gen_rgg(8, 1.0, 4, false, rng), Error);
}

TEST_CASE("rgg mean degree approaches the requested expectation") {
    Rng rng(21);
    double degree_sum = 0.0;
    long node_count = 0;
    for (int rep = 0; rep < 150; ++rep) {
        const GeoGraph g = gen_rgg(256, 4.0, 2, false, rng);
        degree_sum += 2.0 * static_cast<double>(g.edges.size());
        node_count += 256;
    }
    const double mean_degree = degree_sum / static_cast<double>(node_count);
    CHECK(std::fabs(mean_degree - 4.0) <= 0.4);  // boundary bias stays inside 10%
}

TEST_CASE("rgg edges follow the ball predicate and the flow orientation rules") {
    Rng rng(31);
    for (int rep = 0; rep < 200; ++rep) {
        const GeoGraph g = gen_rgg(12, 3.0, 2, true, rng);
        CHECK(g.edges == ball_edges(g.points, g.radius, true, g.source, g.target));
        std::set<std::pair<int, int>> arcs(g.edges.begin(), g.edges.end());
        CHECK(arcs.size() == g.edges.size());  // no duplicate arcs
        for (const auto& [u, v] : arcs) {
            CHECK(u != v);
            CHECK(v != g.source);                  // nothing enters the source
            CHECK(u != g.target);                  // nothing leaves the target
            const bool relay_pair = u != g.source && v != g.target;
            if (relay_pair) CHECK(arcs.count({v, u}) == 1);  // relay edges are bidirectional
        }
        const GeoGraph ug = gen_rgg(12, 3.0, 2, false, rng);
        CHECK(ug.edges == ball_edges(ug.points, ug.radius, false, ug.source, ug.target));
        for (const auto& [a, b] : ug.edges) CHECK(a < b);
    }
}

TEST_CASE("shortest path oracle matches Floyd-Warshall") {
    Rng rng(41);
    int finite_seen = 0, infinite_seen = 0;
    for (int rep = 0; rep < 400; ++rep) {
        const int T = 2 + static_cast<int>(rng.below(9));  // up to 10
        const double alpha = 0.5 + 3.5 * rng.uniform();
        GeoGraph g;
        try {
            g = gen_rgg(T, alpha, 2, false, rng);
        } catch (const Error&) {
            continue;  // small T with large alpha can overflow the radius
        }
        const double bfs = spp_oracle(g);
        const double fw = floyd_warshall_dist(T, g.edges, g.source, g.target);
        if (std::isfinite(fw)) {
            CHECK(bfs == fw);
            ++finite_seen;
        } else {
            CHECK_FALSE(std::isfinite(bfs));
            ++infinite_seen;
        }
    }
    CHECK(finite_seen > 50);
    CHECK(infinite_seen > 5);  // the sweep must exercise the disconnected branch
}

TEST_CASE("shortest path instances use the disconnection sentinel") {
    Rng rng(51);
    bool saw_sentinel = false, saw_finite = false;
    for (int rep = 0; rep < 400 && !(saw_sentinel && saw_finite); ++rep) {
        const TaskInstance inst = gen_spp(8, 1.0, rng);
        REQUIRE(inst.graph.has_value());
        CHECK(inst.value_form);
        CHECK(oracle_recheck(inst));
        const double d = spp_oracle(*inst.graph);
        if (std::isfinite(d)) {
            CHECK(inst.label[0] == d);
            saw_finite = true;
        } else {
            CHECK(inst.label[0] == 16.0);  // 2T
            saw_sentinel = true;
        }
    }
    CHECK(saw_sentinel);
    CHECK(saw_finite);
}

TEST_CASE("max flow on hand graphs") {
    GeoGraph g;
    g.points = Mat(2, 2);
    g.points(0, 0) = 0.0;
    g.points(1, 0) = 0.5;
    g.radius = 1.0;
    g.directed = true;
    g.source = 0;
    g.target = 1;
    g.edges = {{0, 1}};
    CHECK(mincut_oracle(g) == 1.0);
    g.edges.clear();  // isolated source
    CHECK(mincut_oracle(g) == 0.0);
    g.directed = false;
    CHECK_THROWS_AS(mincut_oracle(g), Error);
}

TEST_CASE("max flow equals the exhaustive minimum cut") {
    Rng rng(61);
    int nonzero_seen = 0;
    for (int rep = 0; rep < 120; ++rep) {
        const int T = 4 + static_cast<int>(rng.below(9));  // up to 12
        const double alpha = 1.0 + 3.0 * rng.uniform();
        GeoGraph g;
        try {
            g = gen_rgg(T, alpha, 2, true, rng);
        } catch (const Error&) {
            continue;
        }
        const double flow = mincut_oracle(g);
        const int cut = exhaustive_min_cut(T, g.edges, g.source, g.target);
        CHECK(flow == static_cast<double>(cut));
        nonzero_seen += flow > 0.0 ? 1 : 0;
    }
    CHECK(nonzero_seen > 20);
}

TEST_CASE("mincut instances recheck against their oracle") {
    Rng rng(71);
    for (int rep = 0; rep < 50; ++rep) {
        const TaskInstance inst = gen_mincut(10, 3.0, rng);
        REQUIRE(inst.graph.has_value());
        CHECK(inst.graph->directed);
        CHECK(oracle_recheck(inst));
        CHECK(inst.label[0] == mincut_oracle(*inst.graph));
    }
}

// ===========================================================================
// Embeddings

TEST_CASE("token codebook rows are unit norm, distinct, and deterministic") {
    Rng rng(81);
    TaskInstance inst = gen_induction(8, rng, 200, -1);
    inst.tokens = {0, 1, 2, 3, 50, 100, 150, 199};
    const Mat e1 = embed_instance(inst, 16, EmbedPe::none);
    const Mat e2 = embed_instance(inst, 16, EmbedPe::none);
    REQUIRE(e1.rows() == 8);
    REQUIRE(e1.cols() == 16);
    CHECK(std::memcmp(e1.data(), e2.data(), sizeof(double) * 8 * 16) == 0);
    for (int r = 0; r < 8; ++r) CHECK(norm2_row(e1, r) == doctest::Approx(1.0).epsilon(1e-12));
    for (int a = 0; a < 8; ++a)
        for (int b = a + 1; b < 8; ++b) {
            double d2 = 0.0;
            for (int c = 0; c < 16; ++c) d2 += (e1(a, c) - e1(b, c)) * (e1(a, c) - e1(b, c));
            CHECK(d2 > 1e-6);  // injectivity on this sample
        }
    // Equal tokens embed equally under no/rotary-at-same-position encodings.
    inst.tokens = {7, 7, 7, 7, 7, 7, 7, 7};
    const Mat same = embed_instance(inst, 16, EmbedPe::none);
    for (int r = 1; r < 8; ++r)
        for (int c = 0; c < 16; ++c) CHECK(same(r, c) == same(0, c));
}

TEST_CASE("rotary positions preserve norms and require even width") {
    Rng rng(91);
    const TaskInstance inst = gen_induction(12, rng, 64, -1);
    const Mat e = embed_instance(inst, 10, EmbedPe::rotary);
    for (int r = 0; r < e.rows(); ++r) CHECK(norm2_row(e, r) == doctest::Approx(1.0).epsilon(1e-12));
    // Position 0 leaves the token vector untouched.
    const Mat plain = embed_instance(inst, 10, EmbedPe::none);
    for (int c = 0; c < 10; ++c) CHECK(e(0, c) == doctest::Approx(plain(0, c)).epsilon(1e-15));
    CHECK_THROWS_AS(embed_instance(inst, 5, EmbedPe::rotary), Error);
}

TEST_CASE("sinusoidal positions keep rows bounded and distinguish positions") {
    Rng rng(101);
    TaskInstance inst = gen_induction(6, rng, 64, -1);
    inst.tokens = {9, 9, 9, 9, 9, 9};
    const Mat e = embed_instance(inst, 8, EmbedPe::sinusoidal);
    for (int r = 0; r < 6; ++r) {
        CHECK(norm2_row(e, r) <= std::sqrt(2.0) + 1e-12);
        if (r > 0) {
            double d2 = 0.0;
            for (int c = 0; c < 8; ++c) d2 += (e(r, c) - e(0, c)) * (e(r, c) - e(0, c));
            CHECK(d2 > 1e-8);  // equal tokens, different positions
        }
    }
}

TEST_CASE("embedding capacity errors") {
    Rng rng(111);
    const TaskInstance seq = gen_induction(8, rng, 64, -1);
    CHECK_THROWS_AS(embed_instance(seq, 3, EmbedPe::none), Error);
    const TaskInstance graph = gen_spp(8, 3.0, rng);
    try {
        embed_instance(graph, 3, EmbedPe::none);  // dim 2 needs at least 4
        FAIL("expected a throw");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::CapacityExceeded);
    }
}

TEST_CASE("graph embeddings expose coordinates and endpoint indicators") {
    Rng rng(121);
    const TaskInstance inst = gen_spp(6, 3.0, rng);
    const GeoGraph& g = *inst.graph;
    const Mat e = embed_instance(inst, 6, EmbedPe::none);
    REQUIRE(e.rows() == 6);
    for (int a = 0; a < 6; ++a) {
        CHECK(e(a, 0) == g.points(a, 0));
        CHECK(e(a, 1) == g.points(a, 1));
        CHECK(e(a, 2) == (a == g.source ? 1.0 : 0.0));
        CHECK(e(a, 3) == (a == g.target ? 1.0 : 0.0));
        CHECK(e(a, 4) == 0.0);
        CHECK(e(a, 5) == 0.0);
    }
}

TEST_CASE("relay relabeling leaves graph oracles unchanged") {
    Rng rng(131);
    for (int rep = 0; rep < 60; ++rep) {
        const GeoGraph g = gen_rgg(9, 3.0, 2, false, rng);
        GeoGraph h = g;
        // Swap two relay rows and rebuild edges from scratch.
        for (int c = 0; c < 2; ++c) std::swap(h.points(3, c), h.points(5, c));
        h.edges = ball_edges(h.points, h.radius, false, h.source, h.target);
        CHECK(spp_oracle(h) == spp_oracle(g));
    }
}

// ===========================================================================
// Serialization and determinism

TEST_CASE("instances serialize to one-line json and back") {
    Rng rng(141);
    const GrammarSpec spec = build_grammar(5);

    std::vector<TaskInstance> insts;
    insts.push_back(gen_induction(12, rng, 64, -1));
    insts.push_back(gen_sort(5, 100, rng));
    insts.push_back(gen_string_match(9, random_pattern(rng), false, rng));
    insts.push_back(gen_cfg(spec, 14, true, rng));
    insts.push_back(gen_spp(8, 3.0, rng));
    insts.push_back(gen_mincut(8, 3.0, rng));

    for (const TaskInstance& inst : insts) {
        const std::string line = instance_to_json(inst);
        CHECK(line.find('\n') == std::string::npos);
        const TaskInstance back = instance_from_json(line);
        CHECK(back.kind == inst.kind);
        CHECK(back.T == inst.T);
        CHECK(back.tokens == inst.tokens);
        CHECK(back.label == inst.label);
        CHECK(back.value_form == inst.value_form);
        CHECK(back.loss_mask == inst.loss_mask);
        CHECK(back.vocab == inst.vocab);
        if (inst.graph.has_value()) {
            REQUIRE(back.graph.has_value());
            CHECK(back.graph->radius == inst.graph->radius);
            CHECK(back.graph->directed == inst.graph->directed);
            CHECK(back.graph->edges == inst.graph->edges);  // rebuilt from coordinates
            REQUIRE(back.graph->points.rows() == inst.graph->points.rows());
            CHECK(std::memcmp(back.graph->points.data(), inst.graph->points.data(),
                              sizeof(double) * static_cast<size_t>(inst.graph->points.rows()) *
                                  static_cast<size_t>(inst.graph->points.cols())) == 0);
        }
        if (inst.kind == TaskKind::cfg) {
            CHECK(oracle_recheck(back, spec));
            CHECK_THROWS_AS(oracle_recheck(back), Error);  // needs the grammar overload
        } else {
            CHECK(oracle_recheck(back));
        }
    }
    CHECK_THROWS_AS(instance_from_json("{"), Error);
}

TEST_CASE("generators are pure functions of the seed") {
    for (int which = 0; which < 2; ++which) {
        Rng a(999), b(999);
        const TaskInstance ia = gen_induction(16, a, 128, -1), ib = gen_induction(16, b, 128, -1);
        CHECK(ia.tokens == ib.tokens);
        const TaskInstance sa = gen_sort(7, 200, a), sb = gen_sort(7, 200, b);
        CHECK(sa.tokens == sb.tokens);
        const TaskInstance ga = gen_spp(10, 3.0, a), gb = gen_spp(10, 3.0, b);
        CHECK(std::memcmp(ga.graph->points.data(), gb.graph->points.data(), sizeof(double) * 10 * 2) == 0);
        CHECK(ga.label == gb.label);
    }
    const std::string j1 = grammar_to_json(build_grammar(42));
    const std::string j2 = grammar_to_json(build_grammar(42));
    CHECK(j1 == j2);
}

TEST_CASE("task kind names round trip") {
    for (TaskKind k : {TaskKind::induction, TaskKind::sort, TaskKind::string_match, TaskKind::cfg, TaskKind::spp,
                       TaskKind::mincut})
        CHECK(task_kind_from_name(task_kind_name(k)) == k);
    CHECK_THROWS_AS(task_kind_from_name("nope"), Error);
}
