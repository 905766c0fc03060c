#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kcap/mat.hpp"
#include "kcap/rng.hpp"

namespace kcap {

// Six combinatorial task generators with exact oracles. Generators are pure
// functions of (parameters, rng state): the draw order inside each generator
// is part of its contract and documented per operation, so tests can mirror
// the construction from the same seed.

enum class TaskKind { induction, sort, string_match, cfg, spp, mincut };

// Geometric graph on [-1,1]^dim with the Euclidean r-ball edge rule.
// Undirected graphs store each edge once as (a, b), a < b. Directed graphs
// store arcs (u, v) under the flow orientation rules: every edge incident to
// the source leaves it, every edge incident to the target enters it, and
// relay-relay edges appear in both directions with unit capacity each.
struct GeoGraph {
    Mat points;  // T x dim
    double radius = 0.0;
    bool directed = false;
    std::vector<std::pair<int, int>> edges;
    int source = 0;
    int target = 0;
};

struct TaskInstance {
    TaskKind kind = TaskKind::induction;
    int T = 0;  // task size (stratification variable; not always the token count)
    std::vector<int> tokens;
    std::optional<GeoGraph> graph;
    std::vector<double> label;     // scalar value, class id, or target sequence
    bool value_form = false;       // scalar regression target vs discrete class
    std::vector<uint8_t> loss_mask;  // sort only: 1 where the loss applies
    int vocab = 0;                 // sequence alphabet size including specials
    uint64_t seed = 0;             // informational: the stream that generated it
};

// Trigger-copy sequences over a vocab-size alphabet. Draw order: trigger
// token, index i_K in [0, ceil(T/2) - 1] (skipped when forced_ik >= 0), then
// T sequence tokens. Any accidental trigger occurrence is replaced by the
// next token id modulo vocab before the trigger is planted at i_K and T-1.
// Label: the token at i_K + 1. Errors: TooShort (T < 4).
TaskInstance gen_induction(int T, Rng& rng, int vocab = 1024, int forced_ik = -1);

// Unsorted list u of length T over {0..V-1}, SEP (id V), nondecreasing
// rearrangement s. tokens = u ++ SEP ++ s; loss_mask is 1 on SEP and the
// suffix; label = s. Draw order: the T list elements.
TaskInstance gen_sort(int T, int V, Rng& rng);

// psi_u(rho) = sum_a (rho_a - rho_{a+1})_+; zero exactly on nondecreasing
// rho. Errors: NotPermutation when rho is not a rearrangement of u.
double sort_score(const std::vector<int>& u, const std::vector<int>& rho);

// Haystack X of length T over a 26-symbol alphabet, SEP (id 26), then the
// 3-token pattern. Positives plant the pattern; negatives contain no full
// match but at least one planted 2-of-3 near-miss. label = 1 for a present
// pattern, 0 otherwise (the classification target). Errors: TooShort (T < 3).
TaskInstance gen_string_match(int T, const std::array<int, 3>& pattern, bool positive, Rng& rng);
std::array<int, 3> random_pattern(Rng& rng);

// Strict CNF grammar: binary productions A -> BC and terminal productions
// A -> a, both weighted. One reserved adversarial variable never appears on
// any right-hand side. Binary weights are rescaled so the branching
// transition matrix M[A,B] = sum of weights of rules with B on the right-hand
// side has spectral radius 1 (the criticality normalization).
struct GrammarSpec {
    struct BinaryRule {
        int lhs, left, right;
        double weight;
    };
    struct TerminalRule {
        int lhs, terminal;
        double weight;
    };
    int n_vars = 20;
    int n_terms = 16;
    int start = 0;
    int adversarial = 19;
    std::vector<BinaryRule> binary;
    std::vector<TerminalRule> terminal;
    double spectral_radius = 0.0;  // post-normalization power-iteration estimate
};

// Random grammar over 20 variables / 16 terminals; every variable gets at
// least one binary and one terminal production. Errors: none (construction
// guarantees validity).
GrammarSpec build_grammar(uint64_t seed);

// Structural checks: every variable owns at least one production (hand-written
// grammars may omit a class for a variable, which just restricts the lengths it
// derives), at least one terminal rule exists overall, indices in range,
// positive weights, adversarial variable absent from right-hand sides.
// Errors: DegenerateGrammar.
void validate_grammar(const GrammarSpec& spec);

uint64_t grammar_hash(const GrammarSpec& spec);

// Exact membership via CYK in O(T^3 * |R|). Empty strings are never in a
// strict CNF language.
bool cyk_oracle(const GrammarSpec& spec, const std::vector<int>& s);

// One sampled derivation of exact length len rooted at var, distributed
// proportionally to the product of rule weights among all such derivations
// (the critical branching process conditioned on total leaf count). depth is
// the tree height in edges. Errors: UnsatisfiableLength.
struct DerivationNode {
    int var, start, len;
};
struct Derivation {
    std::vector<int> string;
    std::vector<DerivationNode> nodes;  // preorder, includes leaves
    int depth = 0;
};
Derivation sample_derivation(const GrammarSpec& spec, int var, int len, Rng& rng);

// Positive: a sampled length-T string of L(G). Negative: an adversarial
// substitution — pick an internal node at a log-uniformly drawn length scale,
// regenerate its span from the adversarial variable, keep the result only if
// CYK rejects it. Errors: UnsatisfiableLength, DegenerateGrammar (no
// rejecting substitution found after many attempts).
TaskInstance gen_cfg(const GrammarSpec& spec, int T, bool positive, Rng& rng);

// T points uniform on [-1,1]^dim (drawn row-major), radius from the expected
// degree: alpha = (T-1) * vol(B_r) / 2^dim, boundary effects ignored.
// Errors: TooShort (T < 2), BadConfig (alpha <= 0 or unsupported dim),
// RadiusOverflow (r exceeds the box diameter).
GeoGraph gen_rgg(int T, double alpha, int dim, bool directed_for_mincut, Rng& rng);

// BFS source-target distance on the undirected graph; +infinity when
// disconnected.
double spp_oracle(const GeoGraph& g);

// Max-flow value source -> target on the directed unit-capacity graph
// (Dinic); equals the minimum cut by duality.
double mincut_oracle(const GeoGraph& g);

// Instance wrappers: value-form labels. A disconnected SPP instance stores
// the sentinel 2T in place of the infinite distance.
TaskInstance gen_spp(int T, double alpha, Rng& rng);
TaskInstance gen_mincut(int T, double alpha, Rng& rng);

// Embedded representation. Sequence tasks: a fixed seeded unit-norm codebook
// row per token id, optionally combined with sinusoidal positions or rotated
// in-place by rotary positions. Graph tasks: node coordinates plus
// source/target indicator channels, zero-padded to d (position encodings do
// not apply; node order is meaningful only through those channels).
// Errors: CapacityExceeded (d below the task minimum: 4 for sequences,
// dim + 2 for graphs), BadConfig (rotary with odd d).
enum class EmbedPe { none, sinusoidal, rotary };
inline constexpr uint64_t kDefaultCodebookSeed = 0x636f6465626f6f6bULL;
Mat embed_instance(const TaskInstance& inst, int d, EmbedPe pe = EmbedPe::none,
                   uint64_t codebook_seed = kDefaultCodebookSeed);

// Label recomputation through the task's own oracle; cfg instances need the
// grammar they were generated from.
bool oracle_recheck(const TaskInstance& inst);
bool oracle_recheck(const TaskInstance& inst, const GrammarSpec& grammar);

// One-line JSON records (edges of geometric graphs are recomputed from the
// coordinates on load; coordinates round-trip exactly).
std::string instance_to_json(const TaskInstance& inst);
TaskInstance instance_from_json(const std::string& text);
std::string grammar_to_json(const GrammarSpec& spec);
GrammarSpec grammar_from_json(const std::string& text);

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

}  // namespace kcap
